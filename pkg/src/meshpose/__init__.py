"""Render-and-compare 3D pose estimation with feature-carrying meshes."""

from .errors import NumericError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    canonical_pose,
    geodesic_error,
    pose_error,
    pose_from_rotation,
    project_vertices,
    rotation_from_pose,
)
from .mesh import TriangleMesh, generate_cuboid_mesh, load_mesh_json, save_mesh_json
from .rasterizer import FragmentBuffer, rasterize, visible_vertices
from .model import (
    BackgroundModel,
    FeatureMap,
    NeuralMesh,
    RenderResult,
    background_score_map,
    foreground_score_map,
    load_model,
    log_likelihood,
    render_feature_map,
    save_model,
)
from .training import (
    LinearPatchExtractor,
    TrainConfig,
    TrainSample,
    contrastive_background_loss,
    contrastive_feature_loss,
    extract_features,
    mle_loss,
    total_loss,
    total_loss_and_weight_grad,
    train,
    update_vertex_features,
)
from .inference import (
    OcclusionMap,
    PoseEstimate,
    RobustConfig,
    estimate_pose,
    infer_occlusion_map,
    optimize_pose,
    robust_log_likelihood,
    sample_initial_poses,
    select_best_init,
)
from .harness import (
    EvalReport,
    GeneratorWorld,
    HarnessConfig,
    SyntheticScene,
    evaluate,
    generate_scene,
    generate_scene_set,
    loss_landscape_sweep,
    make_world,
    run_ablation,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
