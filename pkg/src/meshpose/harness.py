"""Synthetic scenes with known poses for validating pose inference.

A generator world holds ground-truth feature meshes (or colored meshes in
image mode), a clutter model and the camera. A scene renders one subtype
under a pose drawn from the world's viewpoint bands, adds Gaussian noise,
and pastes rectangular occluders with their own feature statistics until a
target fraction of the object's projection is hidden:

    L0: no occlusion      L1: 20-40%      L2: 40-60%      L3: 60-80%

Everything is driven by integer seeds (one per scene) so that scene sets,
estimates and reports are bit-reproducible.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, pose_error
from .mesh import generate_cuboid_mesh, make_box_mesh
from .model import (
    BackgroundModel,
    FeatureMap,
    NeuralMesh,
    l2_normalize_rows,
    load_model,
    render_feature_map,
    save_model,
)
from .inference import (
    ELEVATION_BAND,
    THETA_BAND,
    PoseEstimate,
    RobustConfig,
    estimate_pose,
    initial_grid_for_count,
)
from .training import (
    LinearPatchExtractor,
    TrainConfig,
    TrainSample,
    extract_features,
    train,
)
from .rasterizer import rasterize
from . import tensorio

OCCLUSION_BANDS = {
    "L0": (0.0, 0.0),
    "L1": (0.2, 0.4),
    "L2": (0.4, 0.6),
    "L3": (0.6, 0.8),
}

ABLATION_SUITES = ("no_outlier", "no_contrastive", "init_counts", "unseen_pose")


def derive_seed(master: int, *path: int) -> int:
    """Independent 32-bit seed for a named position in the run's seed tree."""
    return int(np.random.SeedSequence((master,) + path).generate_state(1)[0])


@dataclass
class GeneratorWorld:
    """Ground-truth generative model behind the synthetic scenes."""

    models: dict[str, NeuralMesh]
    bg: BackgroundModel
    intr: CameraIntrinsics
    lattice: tuple[int, int]
    distance: float
    mode: str = "features"          # "features" | "image"
    patch_size: int = 8
    azimuth_intervals: tuple[tuple[float, float], ...] = ((0.0, 2.0 * math.pi),)
    elevation_band: tuple[float, float] = ELEVATION_BAND
    theta_band: tuple[float, float] = THETA_BAND
    # Occluders are clutter-like: their feature mean sits this far (along a
    # random unit direction) from the background mean before renormalizing,
    # mirroring feature spaces where anything-but-the-object scores well
    # under the clutter model.
    occluder_spread: float = 0.4

    @property
    def labels(self) -> list[str]:
        return sorted(self.models)


@dataclass
class SyntheticScene:
    scene_id: str
    level: str
    subtype: str
    seed: int
    gt_pose: CameraPose
    noise_sigma: float
    occluder_mask: np.ndarray            # (H, W) bool on the lattice
    fg_mask: np.ndarray                  # (H, W) bool, ground-truth coverage
    features: FeatureMap | None = None
    image: np.ndarray | None = None

    @property
    def occluded_fraction(self) -> float:
        fg = int(self.fg_mask.sum())
        if fg == 0:
            return 0.0
        return float((self.occluder_mask & self.fg_mask).sum() / fg)


def make_world(seed: int, *, n_subtypes: int = 1, feature_dim: int = 64,
               vertex_target: int = 1200, lattice: int = 64,
               patch_size: int = 8, focal: float = 480.0,
               distance: float = 6.0, feature_jitter: float = 0.15,
               clutter_repulsion: float = 0.6, extent_jitter: float = 0.15,
               mode: str = "features") -> GeneratorWorld:
    """Random ground-truth world: one near-cubic lattice mesh per subtype
    with spatially smooth vertex features (or vertex colors in image mode).

    ``feature_jitter`` mixes per-vertex noise into the position-derived
    features; 0 gives a maximally smooth feature field over the surface.
    ``clutter_repulsion`` tilts object features away from the clutter mean
    (cosine ≈ −repulsion/√(1+repulsion²)), imitating a feature space where
    object and background have been trained apart; without that separation
    the clutter model explains object pixels about as well as the mesh does
    and occlusion reasoning has nothing to work with.
    """
    if mode not in ("features", "image"):
        raise ValueError(f"unknown world mode {mode!r}")
    rng = np.random.default_rng(derive_seed(seed, 0))
    image_size = lattice * patch_size
    intr = CameraIntrinsics(focal=focal, cx=image_size / 2.0,
                            cy=image_size / 2.0, width=image_size,
                            height=image_size)
    dim = 3 if mode == "image" else feature_dim
    if mode == "image":
        beta = rng.uniform(0.25, 0.75, size=3)
        bg = BackgroundModel(beta, normalized=False)
    else:
        beta = rng.normal(size=dim)
        beta /= np.linalg.norm(beta)
        bg = BackgroundModel(beta)
    models: dict[str, NeuralMesh] = {}
    for s in range(n_subtypes):
        extents = rng.uniform(1.0 - extent_jitter, 1.0 + extent_jitter, size=3)
        source = make_box_mesh(-extents / 2.0, extents / 2.0)
        cub = generate_cuboid_mesh(source, vertex_target)
        lo, hi = cub.bounds()
        span = np.maximum(hi - lo, 1e-9)
        unit = (cub.vertices - (lo + hi) / 2.0) / (span / 2.0)   # in [-1, 1]
        if mode == "image":
            basis = rng.normal(size=(3, 3))
            colors = 0.5 + 0.3 * np.tanh(unit @ basis.T)
            jitter = feature_jitter * 0.1 * rng.normal(size=colors.shape)
            theta = np.clip(colors + jitter, 0.0, 1.0)
            models[f"s{s}"] = NeuralMesh(cub, theta, label=f"s{s}",
                                         normalized=False)
        else:
            basis = rng.normal(size=(dim, 3))
            smooth = unit @ basis.T
            noise = feature_jitter * math.sqrt(3.0) * rng.normal(size=smooth.shape)
            raw = smooth + noise
            norms = np.linalg.norm(raw, axis=1, keepdims=True)
            theta = l2_normalize_rows(raw - clutter_repulsion * norms * bg.beta)
            models[f"s{s}"] = NeuralMesh(cub, theta, label=f"s{s}")
    return GeneratorWorld(models=models, bg=bg, intr=intr,
                          lattice=(lattice, lattice), distance=distance,
                          mode=mode, patch_size=patch_size)


def _sample_pose(rng: np.random.Generator, world: GeneratorWorld) -> CameraPose:
    spans = [hi - lo for lo, hi in world.azimuth_intervals]
    pick = rng.uniform(0.0, sum(spans))
    az = None
    for (lo, hi), span in zip(world.azimuth_intervals, spans):
        if pick <= span or (lo, hi) == world.azimuth_intervals[-1]:
            az = lo + pick
            break
        pick -= span
    el = rng.uniform(*world.elevation_band)
    th = rng.uniform(*world.theta_band)
    return CameraPose(az, el, th, world.distance)


def _place_occluders(rng: np.random.Generator, fg: np.ndarray,
                     band: tuple[float, float], seed: int
                     ) -> tuple[np.ndarray, list[tuple[int, int, int, int]]]:
    """Rectangles covering a band-bounded fraction of the foreground.

    Rectangles anchor near the silhouette centroid rather than uniformly
    over the foreground: an occluder hanging off the rim could be dodged
    by tilting the pose, which would make occlusion hardness depend on
    where the rectangle happened to land.
    """
    h, w = fg.shape
    mask = np.zeros((h, w), dtype=bool)
    lo, hi = band
    if hi <= 0.0:
        return mask, []
    fg_rows, fg_cols = np.nonzero(fg)
    fg_area = fg_rows.size
    if fg_area == 0:
        raise RuntimeError(f"scene seed {seed}: no foreground to occlude")
    centroid = (fg_rows.mean(), fg_cols.mean())
    spread = (max(int(np.ptp(fg_rows)), 1), max(int(np.ptp(fg_cols)), 1))
    # Aim at the upper half of the band (with headroom for rectangle
    # quantization overshoot) so consecutive levels do not overlap in
    # practical difficulty: an L2 drawn at 41% would be easier than an L1
    # drawn at 39%.
    width = hi - lo
    target = rng.uniform(lo + 0.50 * width, hi - 0.15 * width)
    rects: list[tuple[int, int, int, int]] = []
    for _ in range(200):
        cur = (mask & fg).sum() / fg_area
        if cur >= target:
            break
        need = target - cur
        side = math.sqrt(need * fg_area)
        aspect = math.exp(rng.uniform(-0.5, 0.5))
        rh = int(np.clip(round(side * aspect * rng.uniform(1.0, 1.5)), 1, h))
        rw = int(np.clip(round(side / aspect * rng.uniform(1.0, 1.5)), 1, w))
        ar = centroid[0] + 0.2 * spread[0] * rng.normal()
        ac = centroid[1] + 0.2 * spread[1] * rng.normal()
        r0 = int(np.clip(round(ar) - rh // 2, 0, h - 1))
        c0 = int(np.clip(round(ac) - rw // 2, 0, w - 1))
        r1 = min(r0 + rh, h)
        c1 = min(c0 + rw, w)
        cand = mask.copy()
        cand[r0:r1, c0:c1] = True
        if (cand & fg).sum() / fg_area <= hi:
            mask = cand
            rects.append((r0, r1, c0, c1))
    frac = (mask & fg).sum() / fg_area
    if not lo <= frac <= hi:
        raise RuntimeError(
            f"scene seed {seed}: occlusion fraction {frac:.3f} missed band "
            f"[{lo}, {hi}] after 200 placements")
    return mask, rects


def generate_scene(world: GeneratorWorld, level: str, noise_sigma: float,
                   seed: int, subtype: str | None = None,
                   scene_id: str | None = None) -> SyntheticScene:
    """Render one synthetic observation.

    Draw order (fixed for reproducibility): subtype, pose, pixel noise,
    occluder placement, occluder fill.  With zero noise and level L0 the
    target equals the exact rendering.
    """
    if level not in OCCLUSION_BANDS:
        raise ValueError(f"unknown occlusion level {level!r}")
    if noise_sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    rng = np.random.default_rng(seed)
    labels = world.labels
    if subtype is None:
        subtype = labels[int(rng.integers(len(labels)))]
    elif subtype not in world.models:
        raise ValueError(f"unknown subtype {subtype!r}")
    pose = _sample_pose(rng, world)
    model = world.models[subtype]
    h, w = world.lattice
    if scene_id is None:
        scene_id = f"scene_{seed:010d}_{level}"

    if world.mode == "features":
        render = render_feature_map(model, pose, world.intr, h, w)
        fg = render.fg_mask
        target = np.empty((h, w, model.feature_dim))
        target[:] = world.bg.beta
        target[fg] = render.rendered.values[fg]
        if noise_sigma > 0.0:
            target = target + rng.normal(0.0, noise_sigma, size=target.shape)
            if model.normalized:
                target = l2_normalize_rows(target)
        mask, rects = _place_occluders(rng, fg, OCCLUSION_BANDS[level], seed)
        for r0, r1, c0, c1 in rects:
            direction = rng.normal(size=model.feature_dim)
            direction /= np.linalg.norm(direction)
            mean = world.bg.beta + world.occluder_spread * direction
            mean /= np.linalg.norm(mean)
            block = mean + rng.normal(0.0, noise_sigma,
                                      size=(r1 - r0, c1 - c0, model.feature_dim))
            if model.normalized:
                block = l2_normalize_rows(block)
            target[r0:r1, c0:c1] = block
        return SyntheticScene(scene_id=scene_id, level=level, subtype=subtype,
                              seed=seed, gt_pose=pose, noise_sigma=noise_sigma,
                              occluder_mask=mask, fg_mask=fg,
                              features=FeatureMap(target))

    # image mode: render vertex colors at full resolution, occlude on the
    # lattice grid so masks stay aligned with extractor patches
    p = world.patch_size
    img_h, img_w = h * p, w * p
    render = render_feature_map(model, pose, world.intr, img_h, img_w)
    image = np.empty((img_h, img_w, 3))
    image[:] = world.bg.beta
    image[render.fg_mask] = render.rendered.values[render.fg_mask]
    fg_lattice = rasterize(model.mesh, pose, world.intr, h, w).face >= 0
    if noise_sigma > 0.0:
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    mask, rects = _place_occluders(rng, fg_lattice, OCCLUSION_BANDS[level], seed)
    for r0, r1, c0, c1 in rects:
        color = rng.uniform(0.1, 0.9, size=3)
        block = color + rng.normal(0.0, noise_sigma,
                                   size=((r1 - r0) * p, (c1 - c0) * p, 3))
        image[r0 * p:r1 * p, c0 * p:c1 * p] = block
    image = np.clip(image, -0.5, 1.5)
    return SyntheticScene(scene_id=scene_id, level=level, subtype=subtype,
                          seed=seed, gt_pose=pose, noise_sigma=noise_sigma,
                          occluder_mask=mask, fg_mask=fg_lattice, image=image)


def generate_scene_set(world: GeneratorWorld, levels: Sequence[str], count: int,
                       noise_sigma: float, master_seed: int
                       ) -> list[SyntheticScene]:
    """``count`` scenes per level, seeded from one master seed."""
    scenes = []
    index = 0
    for level in levels:
        for _ in range(count):
            seed = derive_seed(master_seed, 1, index)
            scenes.append(generate_scene(
                world, level, noise_sigma, seed,
                scene_id=f"scene_{index:05d}_{level}"))
            index += 1
    return scenes


def estimate_scene(scene: SyntheticScene, models: dict[str, NeuralMesh],
                   bg: BackgroundModel, cfg: RobustConfig,
                   intr: CameraIntrinsics,
                   extractor: LinearPatchExtractor | None = None
                   ) -> PoseEstimate:
    """Run full pose inference on one scene (features or image + extractor)."""
    if scene.features is not None:
        f = scene.features
    else:
        if extractor is None:
            raise ValueError("image scenes need an extractor")
        f = extract_features(extractor, scene.image)
    return estimate_pose(f, models, bg, cfg, intr, scene.gt_pose.distance)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRecord:
    scene_id: str
    level: str
    subtype: str
    error_deg: float

    def accurate(self, threshold_rad: float) -> bool:
        return math.radians(self.error_deg) < threshold_rad


@dataclass
class EvalReport:
    """Per-scene pose errors plus the two accuracy thresholds."""

    records: list[EvalRecord] = field(default_factory=list)

    THRESH_PI6 = math.pi / 6.0
    THRESH_PI18 = math.pi / 18.0

    def _subset(self, level: str | None) -> list[EvalRecord]:
        if level is None:
            return self.records
        return [r for r in self.records if r.level == level]

    def accuracy(self, threshold_rad: float, level: str | None = None) -> float:
        subset = self._subset(level)
        if not subset:
            return float("nan")
        return sum(r.accurate(threshold_rad) for r in subset) / len(subset)

    def median_deg(self, level: str | None = None) -> float:
        subset = self._subset(level)
        if not subset:
            return float("nan")
        return float(np.median([r.error_deg for r in subset]))

    def levels(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.level not in seen:
                seen.append(r.level)
        return seen

    def summary(self) -> dict:
        out = {"overall": self._stats(None)}
        for level in self.levels():
            out[level] = self._stats(level)
        return out

    def _stats(self, level: str | None) -> dict:
        subset = self._subset(level)
        return {
            "count": len(subset),
            "median_deg": self.median_deg(level),
            "acc_pi6": self.accuracy(self.THRESH_PI6, level),
            "acc_pi18": self.accuracy(self.THRESH_PI18, level),
        }

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write("scene_id,level,subtype,error_deg,acc_pi6,acc_pi18\n")
            for r in self.records:
                fh.write(f"{r.scene_id},{r.level},{r.subtype},{r.error_deg!r},"
                         f"{int(r.accurate(self.THRESH_PI6))},"
                         f"{int(r.accurate(self.THRESH_PI18))}\n")


def evaluate(scenes: Sequence[SyntheticScene],
             estimates: Sequence[PoseEstimate]) -> EvalReport:
    """Pair scenes with their estimates and compute geodesic pose errors."""
    if len(scenes) != len(estimates):
        raise ValueError(f"{len(scenes)} scenes but {len(estimates)} estimates")
    records = []
    for scene, est in zip(scenes, estimates):
        err = math.degrees(pose_error(est.pose, scene.gt_pose))
        records.append(EvalRecord(scene.scene_id, scene.level, scene.subtype,
                                  err))
    return EvalReport(records)


def loss_landscape_sweep(f: FeatureMap, model: NeuralMesh, bg: BackgroundModel,
                         gt_pose: CameraPose, parameter: str, steps: int,
                         span: float, cfg: RobustConfig,
                         intr: CameraIntrinsics
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Negative robust log-likelihood along one pose parameter.

    Sweeps ``parameter`` over gt +/- span in ``steps`` uniform values with
    the other parameters pinned at ground truth.  Returns (values, nll).
    """
    from .inference import _PoseObjective  # same objective as the optimizer

    names = ("azimuth", "elevation", "theta")
    if parameter not in names:
        raise ValueError(f"parameter must be one of {names}")
    if steps < 2:
        raise ValueError("need at least two sweep steps")
    axis = names.index(parameter)
    center = gt_pose.angles()
    values = np.linspace(center[axis] - span, center[axis] + span, steps)
    obj = _PoseObjective(f, model, bg, cfg, intr, gt_pose.distance)
    nll = np.empty(steps)
    for i, v in enumerate(values):
        params = center.copy()
        params[axis] = v
        nll[i] = obj.value(params)
    return values, nll


# ---------------------------------------------------------------------------
# scripted experiment suites


@dataclass
class HarnessConfig:
    """Settings shared by the scripted experiments and the CLI."""

    seed: int = 0
    count: int = 50
    levels: tuple[str, ...] = ("L0", "L1", "L2", "L3")
    noise_sigma: float = 0.1
    subtypes: int = 1
    feature_dim: int = 64
    vertex_target: int = 1200
    lattice: int = 64
    patch_size: int = 8
    focal: float = 480.0
    distance: float = 6.0
    feature_jitter: float = 0.15
    mode: str = "features"
    init_counts: tuple[int, ...] = (144, 36, 1)
    train_count: int = 40
    train_epochs: int = 80
    train_lr: float = 0.05
    # Contrastive terms are pair-averaged (O(1)) while the reconstruction
    # term sums over pixels, so unit weights would let the latter collapse
    # every patch onto the clutter mean; this scale restores the balance.
    train_weights: tuple[float, float, float] = (1.0, 200.0, 200.0)
    robust: RobustConfig = field(default_factory=RobustConfig)


def _world_from_config(cfg: HarnessConfig, mode: str | None = None,
                       seed_path: int = 0) -> GeneratorWorld:
    return make_world(derive_seed(cfg.seed, 7, seed_path),
                      n_subtypes=cfg.subtypes, feature_dim=cfg.feature_dim,
                      vertex_target=cfg.vertex_target, lattice=cfg.lattice,
                      patch_size=cfg.patch_size, focal=cfg.focal,
                      distance=cfg.distance, feature_jitter=cfg.feature_jitter,
                      mode=mode or cfg.mode)


def run_estimation(scenes: Sequence[SyntheticScene],
                   models: dict[str, NeuralMesh], bg: BackgroundModel,
                   cfg: RobustConfig, intr: CameraIntrinsics,
                   extractor: LinearPatchExtractor | None = None
                   ) -> list[PoseEstimate]:
    return [estimate_scene(s, models, bg, cfg, intr, extractor)
            for s in scenes]


def run_ablation(suite: str, cfg: HarnessConfig) -> dict[str, EvalReport]:
    """Paired experiment arms over identical scenes.

    no_outlier      robust likelihood on versus off
    no_contrastive  extractor trained with versus without contrastive losses
    init_counts     full versus reduced initial-pose budgets
    unseen_pose     vertex features fitted from a half-sphere of views,
                    tested on seen versus unseen azimuths
    """
    if suite == "no_outlier":
        world = _world_from_config(cfg)
        scenes = generate_scene_set(world, cfg.levels, cfg.count,
                                    cfg.noise_sigma, cfg.seed)
        arms = {}
        for name, robust in (("robust", True), ("no_outlier", False)):
            rcfg = replace(cfg.robust, robust=robust)
            ests = run_estimation(scenes, world.models, world.bg, rcfg,
                                  world.intr)
            arms[name] = evaluate(scenes, ests)
        return arms

    if suite == "init_counts":
        world = _world_from_config(cfg)
        scenes = generate_scene_set(world, cfg.levels, cfg.count,
                                    cfg.noise_sigma, cfg.seed)
        arms = {}
        for n in cfg.init_counts:
            rcfg = replace(cfg.robust, init_grid=initial_grid_for_count(n))
            ests = run_estimation(scenes, world.models, world.bg, rcfg,
                                  world.intr)
            arms[f"init_{n}"] = evaluate(scenes, ests)
        return arms

    if suite == "no_contrastive":
        world = _world_from_config(cfg, mode="image")
        train_scenes = generate_scene_set(world, ("L0",), cfg.train_count,
                                          cfg.noise_sigma,
                                          derive_seed(cfg.seed, 3))
        test_scenes = generate_scene_set(world, cfg.levels, cfg.count,
                                         cfg.noise_sigma, cfg.seed)
        samples = [TrainSample(pose=s.gt_pose, subtype=s.subtype, image=s.image)
                   for s in train_scenes]
        meshes = {k: m.mesh for k, m in world.models.items()}
        arms = {}
        full = cfg.train_weights
        for name, weights in (("full", full), ("ml_only", (full[0], 0.0, 0.0))):
            tcfg = TrainConfig(epochs=cfg.train_epochs, lr=cfg.train_lr,
                               feature_dim=cfg.feature_dim,
                               patch_size=cfg.patch_size, weights=weights,
                               seed=derive_seed(cfg.seed, 4))
            result = train(samples, meshes, tcfg, world.intr)
            ests = run_estimation(test_scenes, result.models, result.bg,
                                  cfg.robust, world.intr, result.extractor)
            arms[name] = evaluate(test_scenes, ests)
        return arms

    if suite == "unseen_pose":
        world = _world_from_config(cfg)
        seen = ((7.0 * math.pi / 4.0, 9.0 * math.pi / 4.0),
                (3.0 * math.pi / 4.0, 5.0 * math.pi / 4.0))
        unseen = ((math.pi / 4.0, 3.0 * math.pi / 4.0),
                  (5.0 * math.pi / 4.0, 7.0 * math.pi / 4.0))
        train_world = replace(world, azimuth_intervals=seen)
        train_scenes = generate_scene_set(train_world, ("L0",),
                                          cfg.train_count, cfg.noise_sigma,
                                          derive_seed(cfg.seed, 3))
        samples = [TrainSample(pose=s.gt_pose, subtype=s.subtype,
                               features=s.features) for s in train_scenes]
        meshes = {k: m.mesh for k, m in world.models.items()}
        tcfg = TrainConfig(epochs=max(10, cfg.train_epochs // 4),
                           feature_dim=cfg.feature_dim,
                           patch_size=cfg.patch_size,
                           seed=derive_seed(cfg.seed, 4))
        result = train(samples, meshes, tcfg, world.intr)
        arms = {}
        for name, intervals in (("seen", seen), ("unseen", unseen)):
            test_world = replace(world, azimuth_intervals=intervals)
            scenes = generate_scene_set(test_world, cfg.levels, cfg.count,
                                        cfg.noise_sigma, cfg.seed)
            ests = run_estimation(scenes, result.models, result.bg,
                                  cfg.robust, world.intr)
            arms[name] = evaluate(scenes, ests)
        return arms

    raise ValueError(f"unknown ablation suite {suite!r}; "
                     f"choose from {ABLATION_SUITES}")


# ---------------------------------------------------------------------------
# disk layout for worlds and scene sets


def save_world(directory: str | os.PathLike, world: GeneratorWorld) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for label in world.labels:
        save_model(directory / label, world.models[label], world.bg)
    doc = {
        "mode": world.mode,
        "distance": world.distance,
        "lattice": list(world.lattice),
        "patch_size": world.patch_size,
        "intrinsics": {
            "focal": world.intr.focal, "cx": world.intr.cx,
            "cy": world.intr.cy, "width": world.intr.width,
            "height": world.intr.height,
        },
        "subtypes": world.labels,
        "azimuth_intervals": [list(iv) for iv in world.azimuth_intervals],
        "elevation_band": list(world.elevation_band),
        "theta_band": list(world.theta_band),
    }
    path = directory / "world.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def load_world(directory: str | os.PathLike) -> GeneratorWorld:
    directory = Path(directory)
    with open(directory / "world.json") as fh:
        doc = json.load(fh)
    models = {}
    bg = None
    for label in doc["subtypes"]:
        model, bg = load_model(directory / label)
        models[label] = model
    intr = CameraIntrinsics(**doc["intrinsics"])
    return GeneratorWorld(
        models=models, bg=bg, intr=intr,
        lattice=tuple(doc["lattice"]), distance=doc["distance"],
        mode=doc["mode"], patch_size=doc["patch_size"],
        azimuth_intervals=tuple(tuple(iv) for iv in doc["azimuth_intervals"]),
        elevation_band=tuple(doc["elevation_band"]),
        theta_band=tuple(doc["theta_band"]),
    )


def _pose_doc(pose: CameraPose) -> dict:
    return {"azimuth": pose.azimuth, "elevation": pose.elevation,
            "theta": pose.theta, "distance": pose.distance}


def _pose_from_doc(doc: dict) -> CameraPose:
    return CameraPose(doc["azimuth"], doc["elevation"], doc["theta"],
                      doc["distance"])


def save_scene(directory: str | os.PathLike, scene: SyntheticScene) -> dict:
    """Write one scene's tensor, mask and metadata; returns the manifest row."""
    directory = Path(directory)
    tensor_file = f"{scene.scene_id}.nmt"
    mask_file = f"{scene.scene_id}_mask.pgm"
    meta_file = f"{scene.scene_id}.json"
    if scene.features is not None:
        tensorio.write_tensor(directory / tensor_file, scene.features.values)
        mode = "features"
    else:
        tensorio.write_tensor(directory / tensor_file, scene.image)
        mode = "image"
    tensorio.write_pgm(directory / mask_file,
                       scene.occluder_mask.astype(np.uint8) * 255)
    meta = {
        "scene_id": scene.scene_id,
        "level": scene.level,
        "subtype": scene.subtype,
        "seed": scene.seed,
        "mode": mode,
        "noise_sigma": scene.noise_sigma,
        "gt_pose": _pose_doc(scene.gt_pose),
        "occluded_fraction": scene.occluded_fraction,
        "fg_file": f"{scene.scene_id}_fg.pgm",
        "tensor_file": tensor_file,
        "mask_file": mask_file,
    }
    tensorio.write_pgm(directory / meta["fg_file"],
                       scene.fg_mask.astype(np.uint8) * 255)
    with open(directory / meta_file, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"scene_id": scene.scene_id, "level": scene.level,
            "meta_file": meta_file}


def save_scene_set(directory: str | os.PathLike,
                   scenes: Sequence[SyntheticScene], world: GeneratorWorld,
                   master_seed: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = [save_scene(directory, s) for s in scenes]
    manifest = {
        "count": len(scenes),
        "seed": master_seed,
        "mode": world.mode,
        "lattice": list(world.lattice),
        "patch_size": world.patch_size,
        "scenes": rows,
    }
    path = directory / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def load_scene(directory: str | os.PathLike, meta_file: str) -> SyntheticScene:
    directory = Path(directory)
    with open(directory / meta_file) as fh:
        meta = json.load(fh)
    tensor = tensorio.read_tensor(directory / meta["tensor_file"])
    mask = tensorio.read_pgm(directory / meta["mask_file"]) > 0
    fg = tensorio.read_pgm(directory / meta["fg_file"]) > 0
    features = image = None
    if meta["mode"] == "features":
        features = FeatureMap(tensor.astype(np.float64))
    else:
        image = tensor.astype(np.float64)
    return SyntheticScene(
        scene_id=meta["scene_id"], level=meta["level"],
        subtype=meta["subtype"], seed=meta["seed"],
        gt_pose=_pose_from_doc(meta["gt_pose"]),
        noise_sigma=meta["noise_sigma"], occluder_mask=mask, fg_mask=fg,
        features=features, image=image)


def load_scene_set(directory: str | os.PathLike
                   ) -> tuple[list[SyntheticScene], dict]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    scenes = [load_scene(directory, row["meta_file"])
              for row in manifest["scenes"]]
    return scenes, manifest
