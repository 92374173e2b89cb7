"""Software z-buffer rasterizer for triangle meshes on a feature lattice.

Triangles are projected with the pinhole model, scaled to lattice pixel
units, and scan-converted over their bounding boxes with edge functions.
Barycentric weights are perspective-correct (screen-space weights divided
by vertex depth and renormalized) and the stored fragment depth is the
harmonically interpolated camera-space z.  The depth test is a strict
less-than, so for exactly tied depths the lowest face index wins.

The per-face fill loop is compiled with numba (cached); the arithmetic is
written so that a plain per-pixel re-evaluation of the same expressions
reproduces the buffer bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import CameraIntrinsics, CameraPose, project_points, rotation_from_pose
from .mesh import TriangleMesh

VISIBILITY_TOL_FACTOR = 1e-3


@dataclass
class FragmentBuffer:
    """Per-pixel face index (-1 when empty), perspective-correct barycentric
    weights, and interpolated camera depth (+inf when empty)."""

    face: np.ndarray   # (H, W) int32
    bary: np.ndarray   # (H, W, 3) float64
    depth: np.ndarray  # (H, W) float64

    @property
    def covered(self) -> np.ndarray:
        return self.face >= 0

    @property
    def coverage_count(self) -> int:
        return int((self.face >= 0).sum())


@njit(cache=True)
def _fill_fragments(uv, z, h, w, face_out, bary_out, depth_out):
    for fi in range(uv.shape[0]):
        ax = uv[fi, 0, 0]
        ay = uv[fi, 0, 1]
        bx = uv[fi, 1, 0]
        by = uv[fi, 1, 1]
        cx = uv[fi, 2, 0]
        cy = uv[fi, 2, 1]
        za = z[fi, 0]
        zb = z[fi, 1]
        zc = z[fi, 2]

        minx = min(ax, min(bx, cx))
        maxx = max(ax, max(bx, cx))
        miny = min(ay, min(by, cy))
        maxy = max(ay, max(by, cy))
        col0 = max(int(np.ceil(minx - 0.5)), 0)
        col1 = min(int(np.floor(maxx - 0.5)), w - 1)
        row0 = max(int(np.ceil(miny - 0.5)), 0)
        row1 = min(int(np.floor(maxy - 0.5)), h - 1)
        if col0 > col1 or row0 > row1:
            continue

        for row in range(row0, row1 + 1):
            py = row + 0.5
            for col in range(col0, col1 + 1):
                px = col + 0.5
                ea = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                eb = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                ec = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                inside = (ea >= 0.0 and eb >= 0.0 and ec >= 0.0) or \
                         (ea <= 0.0 and eb <= 0.0 and ec <= 0.0)
                if not inside:
                    continue
                denom = ea + eb + ec
                if denom == 0.0:
                    continue
                la = ea / denom
                lb = eb / denom
                lc = ec / denom
                inv = la / za + lb / zb + lc / zc
                if inv <= 0.0:
                    continue
                zp = 1.0 / inv
                if zp < depth_out[row, col]:
                    depth_out[row, col] = zp
                    face_out[row, col] = fi
                    bary_out[row, col, 0] = (la / za) * zp
                    bary_out[row, col, 1] = (lb / zb) * zp
                    bary_out[row, col, 2] = (lc / zc) * zp


def _lattice_projection(mesh: TriangleMesh, rotation: np.ndarray, distance: float,
                        intr: CameraIntrinsics, out_h: int, out_w: int
                        ) -> tuple[np.ndarray, np.ndarray]:
    pix, depth = project_points(mesh.vertices, rotation, distance, intr)
    scaled = np.empty_like(pix)
    scaled[:, 0] = pix[:, 0] * (out_w / intr.width)
    scaled[:, 1] = pix[:, 1] * (out_h / intr.height)
    return scaled, depth


def rasterize_rotation(mesh: TriangleMesh, rotation: np.ndarray, distance: float,
                       intr: CameraIntrinsics, out_h: int, out_w: int
                       ) -> FragmentBuffer:
    """Rasterize with an explicit world-to-camera rotation matrix."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("lattice size must be positive")
    scaled, depth = _lattice_projection(mesh, rotation, distance, intr, out_h, out_w)
    uv = np.ascontiguousarray(scaled[mesh.faces])        # (F, 3, 2)
    z = np.ascontiguousarray(depth[mesh.faces])          # (F, 3)
    face = np.full((out_h, out_w), -1, dtype=np.int32)
    bary = np.zeros((out_h, out_w, 3), dtype=np.float64)
    zbuf = np.full((out_h, out_w), np.inf, dtype=np.float64)
    if len(uv):
        _fill_fragments(uv, z, out_h, out_w, face, bary, zbuf)
    return FragmentBuffer(face=face, bary=bary, depth=zbuf)


def rasterize(mesh: TriangleMesh, pose: CameraPose, intr: CameraIntrinsics,
              out_h: int, out_w: int) -> FragmentBuffer:
    """Rasterize a mesh under a viewpoint onto an out_h x out_w lattice."""
    return rasterize_rotation(mesh, rotation_from_pose(pose), pose.distance,
                              intr, out_h, out_w)


def visible_vertices_rotation(mesh: TriangleMesh, rotation: np.ndarray,
                              distance: float, intr: CameraIntrinsics,
                              out_h: int, out_w: int,
                              fragments: FragmentBuffer | None = None
                              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vertex visibility against the z-buffer; matrix-level variant.

    Returns (vertex_ids, pixels (K, 2) as (row, col), vertex_depths), in
    increasing vertex order.  A vertex is visible when its projection lands
    on a covered lattice pixel and its depth is within a one-sided
    tolerance (1e-3 of the mesh diameter) of the fragment depth, so surface
    vertices are not discarded for losing the z-test to their own face.
    """
    if fragments is None:
        fragments = rasterize_rotation(mesh, rotation, distance, intr, out_h, out_w)
    scaled, depth = _lattice_projection(mesh, rotation, distance, intr, out_h, out_w)
    col = np.floor(scaled[:, 0]).astype(np.int64)
    row = np.floor(scaled[:, 1]).astype(np.int64)
    ok = (col >= 0) & (col < out_w) & (row >= 0) & (row < out_h)
    idx = np.nonzero(ok)[0]
    frag_depth = fragments.depth[row[idx], col[idx]]
    tol = VISIBILITY_TOL_FACTOR * mesh.diameter()
    keep = (fragments.face[row[idx], col[idx]] >= 0) & \
           (depth[idx] <= frag_depth + tol)
    idx = idx[keep]
    pixels = np.stack([row[idx], col[idx]], axis=1)
    return idx, pixels, depth[idx]


def visible_vertices(mesh: TriangleMesh, pose: CameraPose, intr: CameraIntrinsics,
                     out_h: int, out_w: int,
                     fragments: FragmentBuffer | None = None
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vertex visibility under a viewpoint; see visible_vertices_rotation."""
    return visible_vertices_rotation(mesh, rotation_from_pose(pose), pose.distance,
                                     intr, out_h, out_w, fragments)
