"""Pose inference by render-and-compare under an occluder-robust likelihood.

The robust image likelihood treats each covered pixel as a two-way choice:
it is explained either by the rendered foreground Gaussian (weighted by the
visibility prior pi1) or by the clutter Gaussian (weighted by 1 - pi1),
whichever scores higher.  The winning branch per pixel is the binary
visibility map z; uncovered pixels are always clutter.  With the robust
flag off every covered pixel is forced to the foreground branch, which
reproduces the plain pixel-mode log-likelihood.

Pose estimation minimizes the negative robust log-likelihood over
(azimuth, elevation, theta) at fixed distance: a coarse grid of initial
viewpoints is scored, the best is refined by normalized-gradient descent
with step halving (gradients by central finite differences, or by a frozen-
correspondence analytic approximation), and for multi-subtype models the
subtype with the lowest final loss wins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    canonical_pose,
    rot_x,
    rot_y,
    rot_z,
    rotation_from_angles,
)
from .model import (
    BackgroundModel,
    FeatureMap,
    NeuralMesh,
    RenderResult,
    background_score_map,
    foreground_score_map,
    gaussian_log_density,
    l2_normalize_rows,
)
from .rasterizer import rasterize_rotation, visible_vertices_rotation

ELEVATION_BAND = (-math.pi / 9.0, 2.0 * math.pi / 9.0)
THETA_BAND = (-math.pi / 6.0, math.pi / 6.0)

# Supported initial-pose budgets: count -> (azimuth, elevation, theta) grid.
INIT_GRIDS = {
    144: (12, 4, 3),
    72: (12, 3, 2),
    36: (12, 3, 1),
    12: (12, 1, 1),
    6: (6, 1, 1),
    1: (1, 1, 1),
}

LABEL_BACKGROUND = 0
LABEL_VISIBLE = 1
LABEL_OCCLUDED = 2

_GRAY_LEVELS = {LABEL_BACKGROUND: 0, LABEL_OCCLUDED: 128, LABEL_VISIBLE: 255}


@dataclass
class OcclusionMap:
    """Ternary per-pixel explanation: background, visible object, occluded."""

    labels: np.ndarray  # (H, W) uint8 of LABEL_* values

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ValueError("occlusion labels must be 2-d")
        if not np.isin(self.labels, (0, 1, 2)).all():
            raise ValueError("occlusion labels must be 0, 1 or 2")

    @property
    def visible(self) -> np.ndarray:
        return self.labels == LABEL_VISIBLE

    @property
    def occluded(self) -> np.ndarray:
        return self.labels == LABEL_OCCLUDED

    @property
    def foreground(self) -> np.ndarray:
        return self.labels != LABEL_BACKGROUND

    def to_graymap(self) -> np.ndarray:
        """uint8 image: background 0, occluded 128, visible 255."""
        out = np.zeros_like(self.labels)
        out[self.labels == LABEL_OCCLUDED] = 128
        out[self.labels == LABEL_VISIBLE] = 255
        return out

    @staticmethod
    def from_graymap(gray: np.ndarray) -> "OcclusionMap":
        labels = np.zeros_like(gray, dtype=np.uint8)
        labels[gray == 128] = LABEL_OCCLUDED
        labels[gray == 255] = LABEL_VISIBLE
        if not np.isin(gray, (0, 128, 255)).all():
            raise ValueError("graymap levels must be 0, 128 or 255")
        return OcclusionMap(labels)


@dataclass
class RobustConfig:
    """Robust-likelihood and optimizer settings for pose inference."""

    occlusion_prior: float = 0.5
    robust: bool = True
    grad_mode: str = "fd"          # "fd" | "frozen"
    fd_step: float = 1e-3
    step_size: float = 0.05
    max_iterations: int = 300
    tol: float = 1e-6
    max_halvings: int = 8
    init_grid: tuple[int, int, int] = (12, 4, 3)
    elevation_band: tuple[float, float] = ELEVATION_BAND
    theta_band: tuple[float, float] = THETA_BAND

    def __post_init__(self):
        if not 0.0 < self.occlusion_prior < 1.0:
            raise ValueError("occlusion prior must lie strictly inside (0, 1)")
        if self.grad_mode not in ("fd", "frozen"):
            raise ValueError(f"unknown gradient mode {self.grad_mode!r}")
        if self.step_size <= 0 or self.fd_step <= 0 or self.tol <= 0:
            raise ValueError("step sizes and tolerance must be positive")
        if self.max_iterations < 1 or self.max_halvings < 0:
            raise ValueError("iteration limits out of range")


@dataclass
class PoseEstimate:
    """Result of one render-and-compare optimization."""

    pose: CameraPose
    loss: float
    iterations: int
    init_index: int = 0
    subtype: str = "object"
    occlusion: OcclusionMap | None = None


def _robust_terms(fg_scores: np.ndarray, bg_scores: np.ndarray,
                  cfg: RobustConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per covered pixel: the winning branch's log-score and its z bit.

    The argmax compares prior-weighted branches, log pi1 + fg versus
    log(1 - pi1) + bg; ties go to the foreground branch.
    """
    lp1 = math.log(cfg.occlusion_prior)
    lp0 = math.log(1.0 - cfg.occlusion_prior)
    fg_w = fg_scores + lp1
    bg_w = bg_scores + lp0
    z = fg_w >= bg_w
    return np.where(z, fg_w, bg_w), z


class _PoseObjective:
    """Negative robust log-likelihood of one feature map as a function of
    raw (azimuth, elevation, theta); the clutter score map is pose-free and
    cached once."""

    def __init__(self, f: FeatureMap, model: NeuralMesh, bg: BackgroundModel,
                 cfg: RobustConfig, intr: CameraIntrinsics, distance: float):
        self.f = f
        self.model = model
        self.bg = bg
        self.cfg = cfg
        self.intr = intr
        self.distance = distance
        self.flat = f.values.reshape(-1, f.d)
        self.bg_flat = background_score_map(f, bg).reshape(-1)
        self.bg_total = float(self.bg_flat.sum())
        self.evaluations = 0

    def _scores(self, params: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(flat covered indices, fg scores, bg scores) at a raw pose."""
        self.evaluations += 1
        rotation = rotation_from_angles(params[0], params[1], params[2])
        frag = rasterize_rotation(self.model.mesh, rotation, self.distance,
                                  self.intr, self.f.h, self.f.w)
        rows, cols = np.nonzero(frag.face >= 0)
        if rows.size == 0:
            empty = np.zeros(0)
            return np.zeros(0, dtype=np.int64), empty, empty
        fidx = frag.face[rows, cols]
        weights = frag.bary[rows, cols]
        rendered = np.einsum("mk,mkd->md", weights,
                             self.model.features[self.model.mesh.faces[fidx]])
        if self.model.normalized:
            rendered = l2_normalize_rows(rendered)
        flat_idx = rows * self.f.w + cols
        resid = self.flat[flat_idx] - rendered
        sq = np.einsum("md,md->m", resid, resid)
        fg_scores = gaussian_log_density(sq, self.f.d, 1.0)
        return flat_idx, fg_scores, self.bg_flat[flat_idx]

    def value(self, params: np.ndarray) -> float:
        flat_idx, fg_scores, bg_scores = self._scores(params)
        if flat_idx.size == 0:
            total = self.bg_total
        elif self.cfg.robust:
            terms, _ = _robust_terms(fg_scores, bg_scores, self.cfg)
            total = float(terms.sum()) + self.bg_total - float(bg_scores.sum())
        else:
            total = float(fg_scores.sum()) + self.bg_total - float(bg_scores.sum())
        nll = -total
        if not math.isfinite(nll):
            raise NumericError("non-finite pose objective")
        return nll

    def value_with_occlusion(self, params: np.ndarray
                             ) -> tuple[float, OcclusionMap]:
        flat_idx, fg_scores, bg_scores = self._scores(params)
        labels = np.zeros(self.flat.shape[0], dtype=np.uint8)
        if flat_idx.size == 0:
            om = OcclusionMap(labels.reshape(self.f.h, self.f.w))
            return -self.bg_total, om
        if self.cfg.robust:
            terms, z = _robust_terms(fg_scores, bg_scores, self.cfg)
            total = float(terms.sum()) + self.bg_total - float(bg_scores.sum())
        else:
            z = np.ones(flat_idx.shape[0], dtype=bool)
            total = float(fg_scores.sum()) + self.bg_total - float(bg_scores.sum())
        labels[flat_idx[z]] = LABEL_VISIBLE
        labels[flat_idx[~z]] = LABEL_OCCLUDED
        nll = -total
        if not math.isfinite(nll):
            raise NumericError("non-finite pose objective")
        return nll, OcclusionMap(labels.reshape(self.f.h, self.f.w))


def robust_log_likelihood(f: FeatureMap, model: NeuralMesh, pose: CameraPose,
                          bg: BackgroundModel, cfg: RobustConfig,
                          intr: CameraIntrinsics
                          ) -> tuple[float, OcclusionMap]:
    """Robust log-likelihood and the per-pixel visibility decision."""
    obj = _PoseObjective(f, model, bg, cfg, intr, pose.distance)
    nll, occ = obj.value_with_occlusion(pose.angles())
    return -nll, occ


def infer_occlusion_map(f: FeatureMap, render: RenderResult,
                        model: NeuralMesh, bg: BackgroundModel,
                        cfg: RobustConfig) -> OcclusionMap:
    """Visibility decisions against an already-rendered view."""
    fg = foreground_score_map(f, render, model)
    bgm = background_score_map(f, bg)
    labels = np.zeros((f.h, f.w), dtype=np.uint8)
    covered = render.fg_mask
    if cfg.robust:
        _, z = _robust_terms(fg[covered], bgm[covered], cfg)
    else:
        z = np.ones(int(covered.sum()), dtype=bool)
    vis = np.zeros_like(covered)
    vis[covered] = z
    labels[covered & vis] = LABEL_VISIBLE
    labels[covered & ~vis] = LABEL_OCCLUDED
    return OcclusionMap(labels)


def sample_initial_poses(n_azimuth: int, n_elevation: int, n_theta: int,
                         distance: float,
                         elevation_band: tuple[float, float] = ELEVATION_BAND,
                         theta_band: tuple[float, float] = THETA_BAND
                         ) -> list[CameraPose]:
    """Deterministic grid of starting viewpoints.

    Azimuths cover [0, 2*pi) exclusive of the endpoint; elevation and theta
    cover their bands inclusively (a single sample sits at the band middle).
    Ordering is azimuth-major, then elevation, then theta.
    """
    if min(n_azimuth, n_elevation, n_theta) < 1:
        raise ValueError("grid sizes must be at least 1")

    def band_values(n: int, band: tuple[float, float]) -> np.ndarray:
        if n == 1:
            return np.array([(band[0] + band[1]) / 2.0])
        return np.linspace(band[0], band[1], n)

    azimuths = np.arange(n_azimuth) * (2.0 * math.pi / n_azimuth)
    poses = []
    for az in azimuths:
        for el in band_values(n_elevation, elevation_band):
            for th in band_values(n_theta, theta_band):
                poses.append(CameraPose(float(az), float(el), float(th), distance))
    return poses


def initial_grid_for_count(count: int) -> tuple[int, int, int]:
    try:
        return INIT_GRIDS[count]
    except KeyError:
        raise ValueError(
            f"unsupported init count {count}; choose from {sorted(INIT_GRIDS)}")


def _score_inits(obj: _PoseObjective, inits: list[CameraPose]) -> np.ndarray:
    return np.array([obj.value(p.angles()) for p in inits])


def select_best_init(f: FeatureMap, model: NeuralMesh, bg: BackgroundModel,
                     inits: list[CameraPose], cfg: RobustConfig,
                     intr: CameraIntrinsics) -> CameraPose:
    """The starting pose with the lowest loss (ties: lowest index)."""
    if not inits:
        raise ValueError("no initial poses")
    obj = _PoseObjective(f, model, bg, cfg, intr, inits[0].distance)
    return inits[int(np.argmin(_score_inits(obj, inits)))]


def _fd_gradient(obj: _PoseObjective, params: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros(3)
    for k in range(3):
        plus = params.copy()
        plus[k] += h
        minus = params.copy()
        minus[k] -= h
        g[k] = (obj.value(plus) - obj.value(minus)) / (2.0 * h)
    return g


def _bilinear_with_grad(values: np.ndarray, x: np.ndarray, y: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear sample of a (H, W, D) field at continuous lattice positions
    (x toward columns, y toward rows; integer coordinates are pixel centers).
    Returns the sample and its two spatial derivatives."""
    h, w, _ = values.shape
    x = np.clip(x, 0.0, w - 1.0 - 1e-9)
    y = np.clip(y, 0.0, h - 1.0 - 1e-9)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.minimum(x0, w - 2) if w > 1 else np.zeros_like(x0)
    y0 = np.minimum(y0, h - 2) if h > 1 else np.zeros_like(y0)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    v00 = values[y0, x0]
    v01 = values[y0, x0 + 1]
    v10 = values[y0 + 1, x0]
    v11 = values[y0 + 1, x0 + 1]
    top = v00 * (1 - fx) + v01 * fx
    bottom = v10 * (1 - fx) + v11 * fx
    sample = top * (1 - fy) + bottom * fy
    dx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
    dy = bottom - top
    return sample, dx, dy


def _rotation_partials(params: np.ndarray) -> list[np.ndarray]:
    az, el, th = params

    def d_rot_y(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])

    def d_rot_x(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])

    def d_rot_z(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])

    return [
        rot_z(th) @ rot_x(el) @ d_rot_y(az),
        rot_z(th) @ d_rot_x(el) @ rot_y(az),
        d_rot_z(th) @ rot_x(el) @ rot_y(az),
    ]


def _frozen_gradient(obj: _PoseObjective, params: np.ndarray,
                     occlusion: OcclusionMap) -> np.ndarray:
    """Approximate objective gradient with correspondences and visibility
    frozen at the current pose: each visible vertex compares its stored
    feature against the bilinearly sampled target at its projection, and
    only the projection moves with the pose."""
    model = obj.model
    intr = obj.intr
    rotation = rotation_from_angles(params[0], params[1], params[2])
    ids, pixels, _ = visible_vertices_rotation(
        model.mesh, rotation, obj.distance, intr, obj.f.h, obj.f.w)
    if ids.size == 0:
        return np.zeros(3)
    keep = occlusion.labels[pixels[:, 0], pixels[:, 1]] == LABEL_VISIBLE
    ids = ids[keep]
    if ids.size == 0:
        return np.zeros(3)

    pts = model.mesh.vertices[ids]
    cam = pts @ rotation.T
    cam[:, 2] += obj.distance
    sx = obj.f.w / intr.width
    sy = obj.f.h / intr.height
    u = (intr.cx + intr.focal * cam[:, 0] / cam[:, 2]) * sx
    v = (intr.cy + intr.focal * cam[:, 1] / cam[:, 2]) * sy
    sample, dgx, dgy = _bilinear_with_grad(obj.f.values, u - 0.5, v - 0.5)
    err = sample - model.features[ids]

    g = np.zeros(3)
    partials = _rotation_partials(params)
    z = cam[:, 2]
    for k, dr in enumerate(partials):
        dcam = pts @ dr.T
        du = sx * intr.focal * (dcam[:, 0] * z - cam[:, 0] * dcam[:, 2]) / (z * z)
        dv = sy * intr.focal * (dcam[:, 1] * z - cam[:, 1] * dcam[:, 2]) / (z * z)
        g[k] = float(np.einsum("md,md->", err, dgx * du[:, None] + dgy * dv[:, None]))
    return g


def optimize_pose(f: FeatureMap, model: NeuralMesh, bg: BackgroundModel,
                  init: CameraPose, cfg: RobustConfig,
                  intr: CameraIntrinsics) -> PoseEstimate:
    """Refine a starting viewpoint by minimizing the negative robust
    log-likelihood.

    Normalized-gradient descent with step halving: a step is only taken if
    it does not increase the loss, so the loss trace is monotone; the loop
    stops when no halved step helps, when the improvement falls below the
    tolerance, or at the iteration cap.
    """
    obj = _PoseObjective(f, model, bg, cfg, intr, init.distance)
    params = init.angles()
    loss = obj.value(params)
    iterations = 0
    for _ in range(cfg.max_iterations):
        if cfg.grad_mode == "frozen":
            _, occ = obj.value_with_occlusion(params)
            g = _frozen_gradient(obj, params, occ)
        else:
            g = _fd_gradient(obj, params, cfg.fd_step)
        norm = float(np.linalg.norm(g))
        if norm == 0.0 or not math.isfinite(norm):
            break
        direction = -g / norm
        step = cfg.step_size
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            cand = params + step * direction
            cand_loss = obj.value(cand)
            if cand_loss <= loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = loss - cand_loss
        params, loss = cand, cand_loss
        iterations += 1
        if improvement < cfg.tol:
            break
    final_loss, occlusion = obj.value_with_occlusion(params)
    pose = canonical_pose(params[0], params[1], params[2], init.distance)
    return PoseEstimate(pose=pose, loss=final_loss, iterations=iterations,
                        subtype=model.label, occlusion=occlusion)


def estimate_pose(f: FeatureMap, models: dict[str, NeuralMesh] | NeuralMesh,
                  bg: BackgroundModel, cfg: RobustConfig,
                  intr: CameraIntrinsics, distance: float,
                  inits: list[CameraPose] | None = None) -> PoseEstimate:
    """Full pipeline: grid search, refinement, and subtype selection.

    Each subtype starts from its own best grid pose and is refined
    independently; the subtype with the lowest final loss wins.
    """
    if isinstance(models, NeuralMesh):
        models = {models.label: models}
    if not models:
        raise ValueError("no models to estimate against")
    if inits is None:
        inits = sample_initial_poses(*cfg.init_grid, distance,
                                     cfg.elevation_band, cfg.theta_band)
    best: PoseEstimate | None = None
    for label in sorted(models):
        model = models[label]
        obj = _PoseObjective(f, model, bg, cfg, intr, distance)
        scores = _score_inits(obj, inits)
        idx = int(np.argmin(scores))
        estimate = optimize_pose(f, model, bg, inits[idx], cfg, intr)
        estimate.init_index = idx
        if best is None or estimate.loss < best.loss:
            best = estimate
    return best
