"""Synthetic-scene generation, evaluation and persistence."""
import math

import numpy as np
import pytest

from meshpose.geometry import CameraPose
from meshpose.harness import (
    OCCLUSION_BANDS,
    EvalRecord,
    EvalReport,
    HarnessConfig,
    SyntheticScene,
    derive_seed,
    estimate_scene,
    evaluate,
    generate_scene,
    generate_scene_set,
    load_scene_set,
    load_world,
    loss_landscape_sweep,
    make_world,
    run_ablation,
    run_estimation,
    save_scene_set,
    save_world,
)
from meshpose.inference import PoseEstimate, RobustConfig
from meshpose.model import render_feature_map

WORLD = make_world(21, feature_dim=16, vertex_target=300, lattice=32,
                   patch_size=4)


def dummy_scene(scene_id, level, gt_pose):
    blank = np.zeros((4, 4), dtype=bool)
    return SyntheticScene(scene_id=scene_id, level=level, subtype="s0",
                          seed=0, gt_pose=gt_pose, noise_sigma=0.0,
                          occluder_mask=blank, fg_mask=blank,
                          features=None, image=np.zeros((4, 4, 3)))


# ---------------------------------------------------------------------------
# seeds and worlds


def test_derive_seed_is_stable_and_path_dependent():
    a = derive_seed(11, 7, 0)
    assert a == derive_seed(11, 7, 0)
    assert 0 <= a < 2 ** 32
    # Distinct at every tree position (siblings, cousins, other masters).
    others = {derive_seed(11, 7, 1), derive_seed(11, 8, 0),
              derive_seed(12, 7, 0), derive_seed(11, 0, 7)}
    assert a not in others and len(others) == 4


def test_make_world_structure():
    world = make_world(5, n_subtypes=2, feature_dim=12, vertex_target=150,
                       lattice=16, patch_size=4, focal=100.0, distance=5.0)
    assert world.labels == ["s0", "s1"]
    assert world.lattice == (16, 16)
    assert world.distance == 5.0
    assert world.intr.width == world.intr.height == 64
    assert world.intr.cx == world.intr.cy == 32.0
    assert world.intr.focal == 100.0
    for label in world.labels:
        model = world.models[label]
        assert model.feature_dim == 12
        assert np.allclose(np.linalg.norm(model.features, axis=1), 1.0,
                           atol=1e-9)
    assert math.isclose(float(np.linalg.norm(world.bg.beta)), 1.0,
                        abs_tol=1e-9)
    assert not np.allclose(world.models["s0"].mesh.vertices,
                           world.models["s1"].mesh.vertices)
    with pytest.raises(ValueError, match="mode"):
        make_world(5, mode="voxels")


def test_make_world_is_seed_deterministic():
    kwargs = dict(feature_dim=8, vertex_target=120, lattice=16, patch_size=4)
    a = make_world(9, **kwargs)
    b = make_world(9, **kwargs)
    c = make_world(10, **kwargs)
    assert np.array_equal(a.models["s0"].features, b.models["s0"].features)
    assert np.array_equal(a.bg.beta, b.bg.beta)
    assert not np.array_equal(a.models["s0"].features,
                              c.models["s0"].features)


def test_make_world_image_mode():
    world = make_world(5, vertex_target=150, lattice=16, patch_size=4,
                       mode="image")
    model = world.models["s0"]
    assert model.feature_dim == 3
    assert not model.normalized
    assert model.features.min() >= 0.0 and model.features.max() <= 1.0
    assert not world.bg.normalized
    assert (world.bg.beta >= 0.25).all() and (world.bg.beta <= 0.75).all()


def test_object_features_point_away_from_clutter():
    # The generator separates object features from the clutter mean; the
    # mean cosine against beta should be clearly negative.
    model = WORLD.models["s0"]
    cosines = model.features @ WORLD.bg.beta
    assert cosines.mean() < -0.3


# ---------------------------------------------------------------------------
# scenes


def test_generate_scene_is_seed_deterministic():
    a = generate_scene(WORLD, "L2", 0.1, seed=123)
    b = generate_scene(WORLD, "L2", 0.1, seed=123)
    assert a.gt_pose == b.gt_pose
    assert np.array_equal(a.features.values, b.features.values)
    assert np.array_equal(a.occluder_mask, b.occluder_mask)
    assert np.array_equal(a.fg_mask, b.fg_mask)
    c = generate_scene(WORLD, "L2", 0.1, seed=124)
    assert not np.array_equal(a.features.values, c.features.values)


def test_occluded_fractions_land_in_their_bands():
    for level, (lo, hi) in OCCLUSION_BANDS.items():
        for seed in (301, 302, 303):
            scene = generate_scene(WORLD, level, 0.1, seed=seed)
            frac = scene.occluded_fraction
            assert lo <= frac <= hi, f"{level} seed {seed}: {frac}"
            if level == "L0":
                assert not scene.occluder_mask.any()


def test_zero_noise_l0_scene_equals_exact_render():
    scene = generate_scene(WORLD, "L0", 0.0, seed=55)
    model = WORLD.models[scene.subtype]
    render = render_feature_map(model, scene.gt_pose, WORLD.intr, 32, 32)
    assert np.array_equal(scene.fg_mask, render.fg_mask)
    expect = np.empty_like(scene.features.values)
    expect[:] = WORLD.bg.beta
    expect[render.fg_mask] = render.rendered.values[render.fg_mask]
    assert np.array_equal(scene.features.values, expect)


def test_generate_scene_validation():
    with pytest.raises(ValueError, match="level"):
        generate_scene(WORLD, "L4", 0.1, seed=1)
    with pytest.raises(ValueError, match="sigma"):
        generate_scene(WORLD, "L0", -0.1, seed=1)
    with pytest.raises(ValueError, match="subtype"):
        generate_scene(WORLD, "L0", 0.1, seed=1, subtype="s9")


def test_scene_set_ids_levels_and_seeds():
    scenes = generate_scene_set(WORLD, ("L0", "L1"), 3, 0.1, master_seed=77)
    assert len(scenes) == 6
    assert [s.level for s in scenes] == ["L0"] * 3 + ["L1"] * 3
    assert [s.scene_id for s in scenes] == [
        f"scene_{i:05d}_{lvl}" for i, lvl in
        enumerate(["L0"] * 3 + ["L1"] * 3)]
    assert [s.seed for s in scenes] == [derive_seed(77, 1, i)
                                        for i in range(6)]


def test_poses_stay_inside_world_bands():
    scenes = generate_scene_set(WORLD, ("L0",), 20, 0.0, master_seed=5)
    for s in scenes:
        assert 0.0 <= s.gt_pose.azimuth < 2.0 * math.pi
        lo, hi = WORLD.elevation_band
        assert lo <= s.gt_pose.elevation <= hi
        lo, hi = WORLD.theta_band
        assert lo <= s.gt_pose.theta <= hi
        assert s.gt_pose.distance == WORLD.distance


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_computes_geodesic_errors():
    gt = CameraPose(1.0, 0.0, 0.0, 6.0)
    offsets_deg = [5.0, 20.0, 40.0]
    scenes = [dummy_scene(f"s{i}", "L0", gt) for i in range(3)]
    estimates = [PoseEstimate(pose=CameraPose(1.0 + math.radians(d), 0.0,
                                              0.0, 6.0),
                              loss=0.0, iterations=0)
                 for d in offsets_deg]
    report = evaluate(scenes, estimates)
    got = [r.error_deg for r in report.records]
    assert np.allclose(got, offsets_deg, atol=1e-9)
    assert report.accuracy(EvalReport.THRESH_PI6) == pytest.approx(2 / 3)
    assert report.accuracy(EvalReport.THRESH_PI18) == pytest.approx(1 / 3)
    assert report.median_deg() == pytest.approx(20.0)
    with pytest.raises(ValueError):
        evaluate(scenes, estimates[:2])


def test_accuracy_threshold_is_strict():
    assert not EvalRecord("x", "L0", "s0", 30.0).accurate(math.pi / 6.0)
    assert EvalRecord("x", "L0", "s0", 29.999).accurate(math.pi / 6.0)


def test_report_levels_and_summary():
    records = [EvalRecord("a", "L0", "s0", 1.0),
               EvalRecord("b", "L2", "s0", 35.0),
               EvalRecord("c", "L0", "s0", 15.0)]
    report = EvalReport(records)
    assert report.levels() == ["L0", "L2"]
    summary = report.summary()
    assert set(summary) == {"overall", "L0", "L2"}
    assert summary["L0"]["count"] == 2
    assert summary["L0"]["median_deg"] == pytest.approx(8.0)
    assert summary["L2"]["acc_pi6"] == 0.0
    assert summary["overall"]["count"] == 3
    assert math.isnan(report.accuracy(1.0, level="L9"))


def test_report_csv(tmp_path):
    records = [EvalRecord("a", "L0", "s0", 5.0),
               EvalRecord("b", "L1", "s0", 45.0)]
    path = tmp_path / "report.csv"
    EvalReport(records).to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "scene_id,level,subtype,error_deg,acc_pi6,acc_pi18"
    assert lines[1] == "a,L0,s0,5.0,1,1"
    assert lines[2] == "b,L1,s0,45.0,0,0"


# ---------------------------------------------------------------------------
# estimation helpers


def test_run_estimation_matches_per_scene_calls():
    scenes = generate_scene_set(WORLD, ("L0",), 2, 0.1, master_seed=31)
    cfg = RobustConfig(init_grid=(6, 1, 1), max_iterations=15)
    batch = run_estimation(scenes, WORLD.models, WORLD.bg, cfg, WORLD.intr)
    for scene, est in zip(scenes, batch):
        single = estimate_scene(scene, WORLD.models, WORLD.bg, cfg, WORLD.intr)
        assert single.pose == est.pose
        assert single.loss == est.loss
        assert single.init_index == est.init_index


def test_estimate_scene_image_mode_needs_extractor():
    scene = dummy_scene("img", "L0", CameraPose(0.0, 0.0, 0.0, 6.0))
    with pytest.raises(ValueError, match="extractor"):
        estimate_scene(scene, WORLD.models, WORLD.bg, RobustConfig(),
                       WORLD.intr)


def test_loss_landscape_sweep_dips_at_ground_truth():
    scene = generate_scene(WORLD, "L0", 0.0, seed=42)
    model = WORLD.models[scene.subtype]
    values, nll = loss_landscape_sweep(scene.features, model, WORLD.bg,
                                       scene.gt_pose, "azimuth", 11, 0.3,
                                       RobustConfig(), WORLD.intr)
    assert values.shape == nll.shape == (11,)
    assert values[5] == pytest.approx(scene.gt_pose.azimuth)
    assert np.argmin(nll) == 5
    with pytest.raises(ValueError, match="parameter"):
        loss_landscape_sweep(scene.features, model, WORLD.bg, scene.gt_pose,
                             "distance", 11, 0.3, RobustConfig(), WORLD.intr)
    with pytest.raises(ValueError, match="steps"):
        loss_landscape_sweep(scene.features, model, WORLD.bg, scene.gt_pose,
                             "azimuth", 1, 0.3, RobustConfig(), WORLD.intr)


def test_run_ablation_rejects_unknown_suite():
    with pytest.raises(ValueError, match="unknown ablation suite"):
        run_ablation("no_physics", HarnessConfig())


# ---------------------------------------------------------------------------
# persistence


def test_world_save_load_round_trip(tmp_path):
    world = make_world(13, n_subtypes=2, feature_dim=8, vertex_target=120,
                       lattice=16, patch_size=4)
    save_world(tmp_path / "w", world)
    loaded = load_world(tmp_path / "w")
    assert loaded.labels == world.labels
    assert loaded.lattice == world.lattice
    assert loaded.distance == world.distance
    assert loaded.mode == world.mode
    assert loaded.patch_size == world.patch_size
    assert loaded.intr == world.intr
    assert loaded.azimuth_intervals == world.azimuth_intervals
    assert loaded.elevation_band == tuple(world.elevation_band)
    for label in world.labels:
        assert np.allclose(loaded.models[label].features,
                           world.models[label].features, atol=1e-6)
        assert np.array_equal(loaded.models[label].mesh.faces,
                              world.models[label].mesh.faces)
    assert np.allclose(loaded.bg.beta, world.bg.beta, atol=1e-6)


def test_scene_set_save_load_round_trip(tmp_path):
    scenes = [generate_scene(WORLD, "L0", 0.1, seed=61),
              generate_scene(WORLD, "L2", 0.1, seed=62)]
    manifest_path = save_scene_set(tmp_path / "scenes", scenes, WORLD, 61)
    assert manifest_path.name == "manifest.json"
    loaded, manifest = load_scene_set(tmp_path / "scenes")
    assert manifest["count"] == 2
    assert manifest["seed"] == 61
    assert manifest["mode"] == "features"
    for orig, back in zip(scenes, loaded):
        assert back.scene_id == orig.scene_id
        assert back.level == orig.level
        assert back.subtype == orig.subtype
        assert back.seed == orig.seed
        assert back.gt_pose == orig.gt_pose          # JSON floats round-trip
        assert back.noise_sigma == orig.noise_sigma
        assert np.array_equal(back.occluder_mask, orig.occluder_mask)
        assert np.array_equal(back.fg_mask, orig.fg_mask)
        assert np.allclose(back.features.values, orig.features.values,
                           atol=1e-6)               # float32 storage


def test_image_scene_round_trip(tmp_path):
    world = make_world(17, vertex_target=150, lattice=8, patch_size=4,
                       mode="image")
    scene = generate_scene(world, "L1", 0.05, seed=71)
    assert scene.image.shape == (32, 32, 3)
    save_scene_set(tmp_path / "img", [scene], world, 71)
    loaded, manifest = load_scene_set(tmp_path / "img")
    assert manifest["mode"] == "image"
    assert loaded[0].features is None
    assert np.allclose(loaded[0].image, scene.image, atol=1e-6)
    assert np.array_equal(loaded[0].occluder_mask, scene.occluder_mask)
