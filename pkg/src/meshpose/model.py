"""Feature-carrying meshes and the generative image likelihood.

A neural mesh couples triangle geometry with one feature vector per vertex.
Rendering it under a viewpoint produces a feature map: per-pixel barycentric
interpolation of the vertex features of the front-most face (re-normalized
to unit length when the model operates on normalized features).

The likelihood of an observed feature map factors over pixels: foreground
pixels follow an isotropic Gaussian around the rendered feature, everything
else follows a single Gaussian clutter model with mean beta.  Two foreground
correspondence modes exist:

* ``vertex``: each visible vertex pairs with the pixel it projects to
  (training-style correspondence); a pixel claimed by several vertices keeps
  the nearest one (ties: lowest vertex index), and unpaired pixels count as
  background so that each pixel contributes exactly one Gaussian term.
* ``pixel``: each covered pixel pairs with its interpolated rendered
  feature (inference-style correspondence); uncovered pixels are background.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CameraPose
from .mesh import TriangleMesh, load_mesh_json, save_mesh_json
from .rasterizer import (
    FragmentBuffer,
    rasterize_rotation,
    visible_vertices_rotation,
)
from . import geometry, tensorio

LOG_2PI = math.log(2.0 * math.pi)


def l2_normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Rows scaled to unit length; rows with tiny norm are left near zero."""
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, eps)


@dataclass
class FeatureMap:
    """Dense H x W x D feature lattice."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"feature map must be (H, W, D), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]


class NeuralMesh:
    """Triangle mesh plus per-vertex feature vectors.

    When ``normalized`` is set (the default) every feature row must be unit
    length; rendering then re-normalizes interpolated features as well.
    """

    def __init__(self, mesh: TriangleMesh, features: np.ndarray,
                 label: str = "object", normalized: bool = True,
                 sigma: np.ndarray | None = None):
        features = np.ascontiguousarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != mesh.vertex_count:
            raise ValueError(
                f"features must be ({mesh.vertex_count}, D), got {features.shape}")
        if not np.isfinite(features).all():
            raise ValueError("vertex features contain non-finite values")
        if normalized:
            norms = np.linalg.norm(features, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ValueError("normalized model requires unit-length features")
        if sigma is None:
            sigma = np.ones(mesh.vertex_count)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (mesh.vertex_count,) or (sigma <= 0).any():
            raise ValueError("sigma must be positive, one entry per vertex")
        self.mesh = mesh
        self.features = features
        self.label = label
        self.normalized = bool(normalized)
        self.sigma = sigma

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def copy(self) -> "NeuralMesh":
        return NeuralMesh(self.mesh, self.features.copy(), self.label,
                          self.normalized, self.sigma.copy())


@dataclass
class BackgroundModel:
    """Single Gaussian clutter model for off-object pixels."""

    beta: np.ndarray
    sigma: float = 1.0
    normalized: bool = True

    def __post_init__(self):
        self.beta = np.ascontiguousarray(self.beta, dtype=np.float64).reshape(-1)
        if self.sigma <= 0:
            raise ValueError("background sigma must be positive")
        if self.normalized and not math.isclose(
                float(np.linalg.norm(self.beta)), 1.0, abs_tol=1e-6):
            raise ValueError("normalized background model requires unit beta")

    def copy(self) -> "BackgroundModel":
        return BackgroundModel(self.beta.copy(), self.sigma, self.normalized)


@dataclass
class ForegroundPairing:
    """Vertex/pixel correspondences for one rendered view.

    ``vertex_ids``/``pixels``/``depths`` list every visible vertex with the
    lattice pixel it projects into (several vertices may share a pixel).
    ``assigned_pixels``/``assigned_vertices`` dedupe that list to one vertex
    per pixel -- the nearest by depth, ties broken by lowest vertex index.
    """

    vertex_ids: np.ndarray
    pixels: np.ndarray
    depths: np.ndarray
    assigned_pixels: np.ndarray    # (M, 2) rows, cols
    assigned_vertices: np.ndarray  # (M,)

    @property
    def pair_count(self) -> int:
        return int(self.vertex_ids.shape[0])

    @property
    def assigned_count(self) -> int:
        return int(self.assigned_vertices.shape[0])


def build_pairing(vertex_ids: np.ndarray, pixels: np.ndarray,
                  depths: np.ndarray) -> ForegroundPairing:
    if vertex_ids.shape[0] == 0:
        empty2 = np.zeros((0, 2), dtype=np.int64)
        return ForegroundPairing(vertex_ids, pixels, depths, empty2,
                                 np.zeros(0, dtype=np.int64))
    # Sort by (pixel, depth, vertex id) and keep the first entry per pixel.
    flat = pixels[:, 0] * (pixels[:, 1].max() + 1) + pixels[:, 1]
    order = np.lexsort((vertex_ids, depths, flat))
    flat_sorted = flat[order]
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    keep = order[first]
    return ForegroundPairing(
        vertex_ids=vertex_ids,
        pixels=pixels,
        depths=depths,
        assigned_pixels=pixels[keep],
        assigned_vertices=vertex_ids[keep],
    )


@dataclass
class RenderResult:
    """Feature map rendered from a neural mesh plus its correspondences."""

    rendered: FeatureMap
    fg_mask: np.ndarray
    fragments: FragmentBuffer
    pairing: ForegroundPairing


def interpolate_covered(fragments: FragmentBuffer, faces: np.ndarray,
                        attrs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Barycentric interpolation of per-vertex attributes at covered pixels.

    Returns (values (M, D), rows (M,), cols (M,)) in row-major pixel order.
    """
    rows, cols = np.nonzero(fragments.face >= 0)
    fidx = fragments.face[rows, cols]
    tri = faces[fidx]                       # (M, 3)
    weights = fragments.bary[rows, cols]    # (M, 3)
    vals = np.einsum("mk,mkd->md", weights, attrs[tri])
    return vals, rows, cols


def render_feature_map_rotation(model: NeuralMesh, rotation: np.ndarray,
                                distance: float, intr: CameraIntrinsics,
                                out_h: int, out_w: int) -> RenderResult:
    fragments = rasterize_rotation(model.mesh, rotation, distance, intr,
                                   out_h, out_w)
    values = np.zeros((out_h, out_w, model.feature_dim))
    vals, rows, cols = interpolate_covered(fragments, model.mesh.faces,
                                           model.features)
    if model.normalized and vals.size:
        vals = l2_normalize_rows(vals)
    values[rows, cols] = vals
    ids, pixels, depths = visible_vertices_rotation(
        model.mesh, rotation, distance, intr, out_h, out_w, fragments)
    return RenderResult(
        rendered=FeatureMap(values),
        fg_mask=fragments.face >= 0,
        fragments=fragments,
        pairing=build_pairing(ids, pixels, depths),
    )


def render_feature_map(model: NeuralMesh, pose: CameraPose,
                       intr: CameraIntrinsics, out_h: int, out_w: int
                       ) -> RenderResult:
    """Render the model's features under a viewpoint onto a lattice."""
    return render_feature_map_rotation(
        model, geometry.rotation_from_pose(pose), pose.distance, intr,
        out_h, out_w)


def gaussian_log_density(residual_sq: np.ndarray, dim: int,
                         sigma: float | np.ndarray = 1.0) -> np.ndarray:
    """log N(x; mu, sigma^2 I_dim) given ||x - mu||^2."""
    var = np.square(sigma)
    return -0.5 * dim * (LOG_2PI + np.log(var)) - residual_sq / (2.0 * var)


def background_score_map(f: FeatureMap, bg: BackgroundModel) -> np.ndarray:
    """Per-pixel log-density under the clutter Gaussian (H, W)."""
    resid = f.values - bg.beta.reshape(1, 1, -1)
    sq = np.einsum("hwd,hwd->hw", resid, resid)
    return gaussian_log_density(sq, f.d, bg.sigma)


def foreground_score_map(f: FeatureMap, render: RenderResult,
                         model: NeuralMesh) -> np.ndarray:
    """Per-pixel log-density under the rendered-feature Gaussian.

    Uncovered pixels score -inf (they have no rendered feature).
    """
    score = np.full((f.h, f.w), -np.inf)
    rows, cols = np.nonzero(render.fg_mask)
    if rows.size == 0:
        return score
    resid = f.values[rows, cols] - render.rendered.values[rows, cols]
    sq = np.einsum("md,md->m", resid, resid)
    if np.all(model.sigma == 1.0):
        sigma = 1.0
    else:
        fidx = render.fragments.face[rows, cols]
        weights = render.fragments.bary[rows, cols]
        sigma = np.einsum("mk,mk->m", weights, model.sigma[model.mesh.faces[fidx]])
    score[rows, cols] = gaussian_log_density(sq, f.d, sigma)
    return score


def log_likelihood(f: FeatureMap, model: NeuralMesh, pose: CameraPose,
                   bg: BackgroundModel, intr: CameraIntrinsics,
                   mode: str = "vertex") -> float:
    """Log-likelihood of a feature map under the generative model.

    Every lattice pixel contributes exactly one Gaussian term; ``mode``
    selects the foreground correspondence (see module docstring).
    """
    if mode not in ("vertex", "pixel"):
        raise ValueError(f"unknown correspondence mode {mode!r}")
    render = render_feature_map(model, pose, intr, f.h, f.w)
    bg_scores = background_score_map(f, bg)
    if mode == "pixel":
        fg_scores = foreground_score_map(f, render, model)
        covered = render.fg_mask
        return float(fg_scores[covered].sum() + bg_scores[~covered].sum())

    pairing = render.pairing
    rows = pairing.assigned_pixels[:, 0]
    cols = pairing.assigned_pixels[:, 1]
    vids = pairing.assigned_vertices
    fg_mask = np.zeros((f.h, f.w), dtype=bool)
    fg_mask[rows, cols] = True
    resid = f.values[rows, cols] - model.features[vids]
    sq = np.einsum("md,md->m", resid, resid)
    fg_total = gaussian_log_density(sq, f.d, model.sigma[vids]).sum()
    return float(fg_total + bg_scores[~fg_mask].sum())


def save_model(directory: str | os.PathLike, model: NeuralMesh,
               bg: BackgroundModel) -> Path:
    """Write mesh, features and clutter model plus a JSON manifest.

    Returns the manifest path.  Layout: model.json, mesh.json, theta.nmt
    (R x D), beta.nmt (D).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mesh_json(model.mesh, directory / "mesh.json")
    tensorio.write_tensor(directory / "theta.nmt", model.features)
    tensorio.write_tensor(directory / "beta.nmt", bg.beta)
    manifest = {
        "feature_dim": model.feature_dim,
        "class_label": model.label,
        "normalized": model.normalized,
        "mesh_file": "mesh.json",
        "theta_file": "theta.nmt",
        "beta_file": "beta.nmt",
    }
    path = directory / "model.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def load_model(path: str | os.PathLike) -> tuple[NeuralMesh, BackgroundModel]:
    """Load a (NeuralMesh, BackgroundModel) pair from a manifest.

    ``path`` may be the manifest file or its directory.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "model.json"
    with open(path) as fh:
        manifest = json.load(fh)
    base = path.parent
    mesh = load_mesh_json(base / manifest["mesh_file"])
    theta = tensorio.read_tensor(base / manifest["theta_file"])
    theta = theta.reshape(theta.shape[0], theta.shape[1]).astype(np.float64)
    beta = tensorio.read_tensor(base / manifest["beta_file"]).reshape(-1)
    d = int(manifest["feature_dim"])
    if theta.shape[1] != d or beta.shape[0] != d:
        raise ValueError(f"{path}: stored tensors disagree with feature_dim {d}")
    normalized = bool(manifest["normalized"])
    if normalized:
        # float32 storage wobbles unit norms past validation tolerance
        theta = l2_normalize_rows(theta)
        beta = beta / max(np.linalg.norm(beta), 1e-12)
    model = NeuralMesh(mesh, theta, label=str(manifest["class_label"]),
                       normalized=normalized)
    return model, BackgroundModel(beta.astype(np.float64), normalized=normalized)
