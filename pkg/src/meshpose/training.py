"""Feature extractor, training losses and model fitting.

The extractor is a single linear map from non-overlapping image patches to
feature vectors (one lattice cell per patch), optionally followed by L2
normalization.  Its weights are trained by gradient descent on a composite
loss; vertex features and the clutter mean are trained by exponential
moving averages of the features observed at their corresponded pixels.

Losses (all defined on one sample):

* ``mle_loss``: fg_scale * sum_FG ||f_i - theta_r||^2 + sum_BG ||f_i - beta||^2,
  the negative log-likelihood with unit variances up to an additive
  constant and a factor 2 (foreground pixels paired as in vertex mode).
* ``contrastive_feature_loss``: -1/(T(T-1)) * sum_{i != i'} ||f_i - f_i'||^2
  over the foreground features, pushing distinct surface regions apart.
* ``contrastive_background_loss``: -1/(T M) * sum_{FG x BG} ||f_i - f_j||^2,
  pushing foreground features away from clutter.
* ``total_loss``: w_ml, w_feat, w_back weighted sum of the three.

With unit-normalized features both contrastive terms are bounded in
[-4, 0].  The analytic weight gradient runs through the extractor's
normalization; correspondences depend only on geometry, never on the
weights, so the loss is smooth in W.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericError
from .geometry import CameraIntrinsics, CameraPose, rotation_from_pose
from .mesh import TriangleMesh
from .model import (
    BackgroundModel,
    FeatureMap,
    ForegroundPairing,
    NeuralMesh,
    l2_normalize_rows,
    render_feature_map_rotation,
)
from . import tensorio

import json
import os


@dataclass
class LinearPatchExtractor:
    """Linear map from p x p x C patches to D-dimensional features.

    Patches are non-overlapping and flattened row-major (pixel-major,
    channels last), so ``weight`` has shape (D, p*p*C).
    """

    weight: np.ndarray
    patch_size: int
    channels: int
    normalized: bool = True

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError("extractor weight must be 2-d")
        expected = self.patch_size * self.patch_size * self.channels
        if self.weight.shape[1] != expected:
            raise ValueError(
                f"weight has {self.weight.shape[1]} inputs, patches have {expected}")

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]


def _patch_matrix(image: np.ndarray, p: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    hp, wp, c = image.shape
    if hp % p or wp % p:
        raise ValueError(f"image size {hp}x{wp} not divisible by patch size {p}")
    h, w = hp // p, wp // p
    x = image.reshape(h, p, w, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(h * w, p * p * c))


def _extract_cached(extractor: LinearPatchExtractor, image: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[int, int]]:
    """Features plus the intermediates the weight gradient needs.

    Returns (features (N, D), patches (N, In), pre-normalization row norms
    (N,), lattice shape).
    """
    x = _patch_matrix(image, extractor.patch_size)
    u = x @ extractor.weight.T
    hp, wp = np.asarray(image).shape[:2]
    shape = (hp // extractor.patch_size, wp // extractor.patch_size)
    if not extractor.normalized:
        return u, x, np.ones(u.shape[0]), shape
    r = np.linalg.norm(u, axis=1)
    r = np.maximum(r, 1e-12)
    return u / r[:, None], x, r, shape


def extract_features(extractor: LinearPatchExtractor, image: np.ndarray) -> FeatureMap:
    """Run the extractor over an image; one feature per patch."""
    f, _, _, (h, w) = _extract_cached(extractor, image)
    return FeatureMap(f.reshape(h, w, extractor.feature_dim))


# ---------------------------------------------------------------------------
# losses


def contrastive_feature_loss(fg: np.ndarray) -> float:
    """-1/(T(T-1)) * sum over ordered pairs i != i' of ||f_i - f_i'||^2."""
    fg = np.asarray(fg, dtype=float)
    t = fg.shape[0]
    if t < 2:
        return 0.0
    total = 2.0 * t * float(np.einsum("ij,ij->", fg, fg)) \
        - 2.0 * float(fg.sum(axis=0) @ fg.sum(axis=0))
    return -total / (t * (t - 1))


def contrastive_background_loss(fg: np.ndarray, bgf: np.ndarray) -> float:
    """-1/(T M) * sum over foreground x background pairs of ||f_i - f_j||^2."""
    fg = np.asarray(fg, dtype=float)
    bgf = np.asarray(bgf, dtype=float)
    t, m = fg.shape[0], bgf.shape[0]
    if t == 0 or m == 0:
        return 0.0
    total = m * float(np.einsum("ij,ij->", fg, fg)) \
        + t * float(np.einsum("ij,ij->", bgf, bgf)) \
        - 2.0 * float(fg.sum(axis=0) @ bgf.sum(axis=0))
    return -total / (t * m)


def _partition(f: FeatureMap, render_pairing: ForegroundPairing
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat indices of (assigned FG pixels, their vertices kept aside) and
    the complementary background pixels."""
    n = f.h * f.w
    rows = render_pairing.assigned_pixels[:, 0]
    cols = render_pairing.assigned_pixels[:, 1]
    fg_flat = rows * f.w + cols
    mask = np.zeros(n, dtype=bool)
    mask[fg_flat] = True
    bg_flat = np.nonzero(~mask)[0]
    return fg_flat, render_pairing.assigned_vertices, bg_flat


def mle_loss(f: FeatureMap, model: NeuralMesh, pose: CameraPose,
             bg: BackgroundModel, intr: CameraIntrinsics,
             fg_scale: float = 1.0) -> float:
    """Reduced negative log-likelihood (vertex correspondence, unit sigmas)."""
    render = render_feature_map_rotation(
        model, rotation_from_pose(pose), pose.distance, intr, f.h, f.w)
    flat = f.values.reshape(-1, f.d)
    fg_flat, vids, bg_flat = _partition(f, render.pairing)
    fg_res = flat[fg_flat] - model.features[vids]
    bg_res = flat[bg_flat] - bg.beta
    return float(fg_scale * np.einsum("md,md->", fg_res, fg_res)
                 + np.einsum("md,md->", bg_res, bg_res))


@dataclass
class LossBreakdown:
    l_ml: float
    l_feat: float
    l_back: float
    total: float


def _loss_parts(flat: np.ndarray, pairing: ForegroundPairing,
                uncovered_flat: np.ndarray, model: NeuralMesh,
                bg: BackgroundModel, w: int, weights: tuple[float, float, float],
                fg_scale: float) -> LossBreakdown:
    rows = pairing.assigned_pixels[:, 0]
    cols = pairing.assigned_pixels[:, 1]
    fg_flat = rows * w + cols
    mask = np.zeros(flat.shape[0], dtype=bool)
    mask[fg_flat] = True
    rest = np.nonzero(~mask)[0]
    fg_res = flat[fg_flat] - model.features[pairing.assigned_vertices]
    bg_res = flat[rest] - bg.beta
    l_ml = float(fg_scale * np.einsum("md,md->", fg_res, fg_res)
                 + np.einsum("md,md->", bg_res, bg_res))
    l_feat = contrastive_feature_loss(flat[fg_flat])
    l_back = contrastive_background_loss(flat[fg_flat], flat[uncovered_flat])
    total = weights[0] * l_ml + weights[1] * l_feat + weights[2] * l_back
    return LossBreakdown(l_ml, l_feat, l_back, total)


def total_loss(f: FeatureMap, model: NeuralMesh, pose: CameraPose,
               bg: BackgroundModel, intr: CameraIntrinsics,
               weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
               fg_scale: float = 1.0) -> float:
    """Weighted sum of likelihood and the two contrastive losses.

    Foreground features for the contrastive terms are the vertex-assigned
    pixels; background features are the uncovered pixels.
    """
    render = render_feature_map_rotation(
        model, rotation_from_pose(pose), pose.distance, intr, f.h, f.w)
    uncovered = np.nonzero(~render.fg_mask.reshape(-1))[0]
    parts = _loss_parts(f.values.reshape(-1, f.d), render.pairing, uncovered,
                        model, bg, f.w, weights, fg_scale)
    return parts.total


def total_loss_and_weight_grad(extractor: LinearPatchExtractor,
                               image: np.ndarray, model: NeuralMesh,
                               pose: CameraPose, bg: BackgroundModel,
                               intr: CameraIntrinsics,
                               weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
                               fg_scale: float = 1.0
                               ) -> tuple[float, np.ndarray]:
    """Total loss on one image and its analytic gradient w.r.t. the
    extractor weights (chain rule through the row normalization)."""
    flat, x, r, (h, w) = _extract_cached(extractor, image)
    render = render_feature_map_rotation(
        model, rotation_from_pose(pose), pose.distance, intr, h, w)
    uncovered = np.nonzero(~render.fg_mask.reshape(-1))[0]
    parts = _loss_parts(flat, render.pairing, uncovered, model, bg, w,
                        weights, fg_scale)
    g_f = _feature_gradient(flat, render.pairing, uncovered, model, bg, w,
                            weights, fg_scale)
    if extractor.normalized:
        # f = u / ||u||: dL/du = (g - (g . f) f) / ||u||
        proj = np.einsum("nd,nd->n", g_f, flat)
        g_u = (g_f - proj[:, None] * flat) / r[:, None]
    else:
        g_u = g_f
    return parts.total, g_u.T @ x


def _feature_gradient(flat: np.ndarray, pairing: ForegroundPairing,
                      uncovered_flat: np.ndarray, model: NeuralMesh,
                      bg: BackgroundModel, w: int,
                      weights: tuple[float, float, float],
                      fg_scale: float) -> np.ndarray:
    w_ml, w_feat, w_back = weights
    rows = pairing.assigned_pixels[:, 0]
    cols = pairing.assigned_pixels[:, 1]
    fg_flat = rows * w + cols
    mask = np.zeros(flat.shape[0], dtype=bool)
    mask[fg_flat] = True
    rest = np.nonzero(~mask)[0]

    g = np.zeros_like(flat)
    g[rest] = w_ml * 2.0 * (flat[rest] - bg.beta)
    g[fg_flat] = w_ml * 2.0 * fg_scale * \
        (flat[fg_flat] - model.features[pairing.assigned_vertices])

    t = fg_flat.shape[0]
    if w_feat != 0.0 and t >= 2:
        s = flat[fg_flat].sum(axis=0)
        g[fg_flat] += w_feat * (-4.0 / (t * (t - 1))) * (t * flat[fg_flat] - s)
    m = uncovered_flat.shape[0]
    if w_back != 0.0 and t >= 1 and m >= 1:
        s_fg = flat[fg_flat].sum(axis=0)
        s_bg = flat[uncovered_flat].sum(axis=0)
        g[fg_flat] += w_back * (-2.0 / (t * m)) * (m * flat[fg_flat] - s_bg)
        g[uncovered_flat] += w_back * (2.0 / (t * m)) * (s_fg - t * flat[uncovered_flat])
    return g


# ---------------------------------------------------------------------------
# moving-average updates for the generative parameters


def update_vertex_features(model: NeuralMesh, bg: BackgroundModel,
                           f: FeatureMap, pose: CameraPose,
                           intr: CameraIntrinsics, momentum: float = 0.9
                           ) -> tuple[NeuralMesh, BackgroundModel]:
    """EMA update of vertex features and clutter mean from one sample.

    Every visible vertex blends toward the observed feature at its own
    projected pixel (no deduplication -- each vertex has exactly one
    projection); the clutter mean blends toward the mean feature of the
    uncovered pixels.  Normalized models re-normalize after blending.
    """
    render = render_feature_map_rotation(
        model, rotation_from_pose(pose), pose.distance, intr, f.h, f.w)
    uncovered = ~render.fg_mask
    return _ema_update(model, bg, f, render.pairing, uncovered, momentum)


def _ema_update(model: NeuralMesh, bg: BackgroundModel, f: FeatureMap,
                pairing: ForegroundPairing, uncovered: np.ndarray,
                momentum: float) -> tuple[NeuralMesh, BackgroundModel]:
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    theta = model.features.copy()
    if pairing.pair_count:
        obs = f.values[pairing.pixels[:, 0], pairing.pixels[:, 1]]
        vids = pairing.vertex_ids
        theta[vids] = momentum * theta[vids] + (1.0 - momentum) * obs
        if model.normalized:
            theta[vids] = l2_normalize_rows(theta[vids])
    beta = bg.beta.copy()
    if uncovered.any():
        mean_bg = f.values[uncovered].mean(axis=0)
        beta = momentum * beta + (1.0 - momentum) * mean_bg
        if bg.normalized:
            beta = beta / max(float(np.linalg.norm(beta)), 1e-12)
    new_model = NeuralMesh(model.mesh, theta, model.label, model.normalized,
                           model.sigma.copy())
    return new_model, BackgroundModel(beta, bg.sigma, bg.normalized)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSample:
    """One supervised view: an image (or a precomputed feature map), the
    ground-truth viewpoint it was taken from, and its object subtype."""

    pose: CameraPose
    subtype: str = "object"
    image: np.ndarray | None = None
    features: FeatureMap | None = None

    def __post_init__(self):
        if (self.image is None) == (self.features is None):
            raise ValueError("sample needs exactly one of image or features")


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    feature_dim: int = 64
    patch_size: int = 8
    normalized: bool = True
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    fg_scale: float = 1.0
    shuffle: bool = True


@dataclass
class TrainResult:
    extractor: LinearPatchExtractor | None
    models: dict[str, NeuralMesh]
    bg: BackgroundModel
    trace: list[dict] = field(default_factory=list)


def _cosine_lr(base: float, epoch: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / max(total, 1)))


def train(samples: Sequence[TrainSample], meshes: dict[str, TriangleMesh],
          cfg: TrainConfig, intr: CameraIntrinsics) -> TrainResult:
    """Fit extractor weights, per-subtype vertex features and the clutter
    model from posed samples.

    Image samples train everything; feature-map samples skip the extractor
    and only fit the generative parameters.  Aborts with NumericError if
    the loss goes non-finite.
    """
    if not samples:
        raise ValueError("no training samples")
    image_mode = samples[0].image is not None
    for s in samples:
        if (s.image is not None) != image_mode:
            raise ValueError("cannot mix image and feature-map samples")
        if s.subtype not in meshes:
            raise ValueError(f"sample subtype {s.subtype!r} has no mesh")

    rng = np.random.default_rng(cfg.seed)
    if image_mode:
        img = np.asarray(samples[0].image)
        channels = 1 if img.ndim == 2 else img.shape[2]
        in_dim = cfg.patch_size * cfg.patch_size * channels
        weight = rng.normal(0.0, 1.0 / math.sqrt(in_dim),
                            size=(cfg.feature_dim, in_dim))
        extractor = LinearPatchExtractor(weight, cfg.patch_size, channels,
                                         cfg.normalized)
        lat_h = img.shape[0] // cfg.patch_size
        lat_w = img.shape[1] // cfg.patch_size
        dim = cfg.feature_dim
    else:
        extractor = None
        fm = samples[0].features
        lat_h, lat_w, dim = fm.h, fm.w, fm.d

    models: dict[str, NeuralMesh] = {}
    for label, m in sorted(meshes.items()):
        theta = rng.normal(size=(m.vertex_count, dim))
        if cfg.normalized:
            theta = l2_normalize_rows(theta)
        models[label] = NeuralMesh(m, theta, label, cfg.normalized)
    beta = rng.normal(size=dim)
    if cfg.normalized:
        beta = beta / np.linalg.norm(beta)
    bg = BackgroundModel(beta, 1.0, cfg.normalized)

    # Correspondences depend only on geometry, so build them once per sample.
    pair_cache = []
    for s in samples:
        render = render_feature_map_rotation(
            models[s.subtype], rotation_from_pose(s.pose), s.pose.distance,
            intr, lat_h, lat_w)
        uncovered_mask = ~render.fg_mask
        uncovered_flat = np.nonzero(uncovered_mask.reshape(-1))[0]
        pair_cache.append((render.pairing, uncovered_mask, uncovered_flat))

    trace: list[dict] = []
    order = np.arange(len(samples))
    for epoch in range(cfg.epochs):
        if cfg.shuffle:
            order = rng.permutation(len(samples))
        lr = _cosine_lr(cfg.lr, epoch, cfg.epochs)
        sums = np.zeros(4)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grad = None
            for i in batch:
                s = samples[i]
                pairing, uncovered_mask, uncovered_flat = pair_cache[i]
                model = models[s.subtype]
                if extractor is not None:
                    flat, x, r, _ = _extract_cached(extractor, s.image)
                    parts = _loss_parts(flat, pairing, uncovered_flat, model,
                                        bg, lat_w, cfg.weights, cfg.fg_scale)
                    g_f = _feature_gradient(flat, pairing, uncovered_flat,
                                            model, bg, lat_w, cfg.weights,
                                            cfg.fg_scale)
                    if extractor.normalized:
                        proj = np.einsum("nd,nd->n", g_f, flat)
                        g_u = (g_f - proj[:, None] * flat) / r[:, None]
                    else:
                        g_u = g_f
                    g_w = g_u.T @ x
                    grad = g_w if grad is None else grad + g_w
                    fmap = FeatureMap(flat.reshape(lat_h, lat_w, dim))
                else:
                    fmap = s.features
                    parts = _loss_parts(fmap.values.reshape(-1, dim), pairing,
                                        uncovered_flat, model, bg, lat_w,
                                        cfg.weights, cfg.fg_scale)
                if not math.isfinite(parts.total):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, sample {i}: "
                        f"ml={parts.l_ml} feat={parts.l_feat} back={parts.l_back}")
                sums += (parts.l_ml, parts.l_feat, parts.l_back, parts.total)
                models[s.subtype], bg = _ema_update(
                    model, bg, fmap, pairing, uncovered_mask, cfg.momentum)
            if extractor is not None and grad is not None:
                norm = float(np.linalg.norm(grad))
                if norm > 0.0:
                    # Step length is the learning rate; gradients from
                    # sum-form losses scale with pixel count, so descend
                    # along the normalized direction.
                    extractor.weight = extractor.weight - lr * grad / norm
        means = sums / len(samples)
        trace.append({"epoch": epoch, "l_ml": float(means[0]),
                      "l_feat": float(means[1]), "l_back": float(means[2]),
                      "total": float(means[3])})
    return TrainResult(extractor, models, bg, trace)


def write_loss_trace(path: str | os.PathLike, trace: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,l_ml,l_feat,l_back,total\n")
        for row in trace:
            cells = [repr(float(row[k]))
                     for k in ("l_ml", "l_feat", "l_back", "total")]
            fh.write(",".join([str(row["epoch"])] + cells) + "\n")


def save_extractor(directory: str | os.PathLike,
                   extractor: LinearPatchExtractor) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(directory / "weight.nmt", extractor.weight)
    meta = {
        "patch_size": extractor.patch_size,
        "channels": extractor.channels,
        "feature_dim": extractor.feature_dim,
        "normalized": extractor.normalized,
        "weight_file": "weight.nmt",
    }
    path = directory / "extractor.json"
    with open(path, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def load_extractor(path: str | os.PathLike) -> LinearPatchExtractor:
    path = Path(path)
    if path.is_dir():
        path = path / "extractor.json"
    with open(path) as fh:
        meta = json.load(fh)
    weight = tensorio.read_tensor(path.parent / meta["weight_file"])
    weight = weight.reshape(weight.shape[0], weight.shape[1]).astype(np.float64)
    return LinearPatchExtractor(weight, int(meta["patch_size"]),
                                int(meta["channels"]), bool(meta["normalized"]))
