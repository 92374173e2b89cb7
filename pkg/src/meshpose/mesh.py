"""Triangle meshes and cuboid approximations of object geometry.

A cuboid approximation replaces detailed source geometry with the boundary
lattice of its tight axis-aligned box, subdivided into near-cubic cells so
that the number of surface vertices lands close to a requested budget.
"""
from __future__ import annotations

import json
import math
import os
from typing import Iterable, Sequence

import numpy as np


class TriangleMesh:
    """Vertices (R, 3) float64 and faces (F, 3) int32 indexing them."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int32)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (R, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {faces.shape}")
        if vertices.shape[0] == 0:
            raise ValueError("mesh must have at least one vertex")
        if faces.size:
            if faces.min() < 0 or faces.max() >= vertices.shape[0]:
                raise ValueError("face indices out of vertex range")
            same = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) \
                | (faces[:, 0] == faces[:, 2])
            if same.any():
                raise ValueError("faces must reference three distinct vertices")
        self.vertices = vertices
        self.faces = faces

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    @property
    def face_count(self) -> int:
        return self.faces.shape[0]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diameter(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))


def make_box_mesh(lo: Sequence[float], hi: Sequence[float]) -> TriangleMesh:
    """Axis-aligned box as 8 corners and 12 outward-wound triangles."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if not (hi >= lo).all():
        raise ValueError("box upper corner must dominate lower corner")
    xs = [lo[0], hi[0]]
    ys = [lo[1], hi[1]]
    zs = [lo[2], hi[2]]
    corners = np.array([(x, y, z) for x in xs for y in ys for z in zs])
    # Corner index = 4*ix + 2*iy + iz.
    quads = [
        (0, 1, 3, 2),  # x = lo
        (4, 6, 7, 5),  # x = hi
        (0, 4, 5, 1),  # y = lo
        (2, 3, 7, 6),  # y = hi
        (0, 2, 6, 4),  # z = lo
        (1, 5, 7, 3),  # z = hi
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return TriangleMesh(corners, np.asarray(faces, dtype=np.int32))


def _gather_vertices(source) -> np.ndarray:
    if isinstance(source, TriangleMesh):
        return source.vertices
    try:
        arr = np.asarray(source, dtype=float)
    except ValueError:
        arr = None  # ragged sequence of parts; handled below
    if arr is not None and arr.ndim == 2 and arr.shape[1] == 3:
        return arr
    if not isinstance(source, np.ndarray) and isinstance(source, Iterable):
        parts = [_gather_vertices(p) for p in source]
        if parts:
            return np.vstack(parts)
    raise ValueError("source must be a mesh, an (N, 3) point array, "
                     "or a sequence of those")


def _segment_count(extent: float, h: float) -> int:
    """Segments along one axis: floor or ceil of extent/h, whichever keeps
    the realized spacing closest to h in log space (never below 1)."""
    lo = max(1, math.floor(extent / h))
    hi = max(1, math.ceil(extent / h))
    if lo == hi:
        return lo
    if abs(math.log(extent / (lo * h))) <= abs(math.log(extent / (hi * h))):
        return lo
    return hi


def _boundary_count(n: np.ndarray) -> int:
    total = int((n[0] + 1) * (n[1] + 1) * (n[2] + 1))
    interior = int(max(n[0] - 1, 0) * max(n[1] - 1, 0) * max(n[2] - 1, 0))
    return total - interior


def generate_cuboid_mesh(source, target_vertex_count: int = 1200) -> TriangleMesh:
    """Boundary-lattice box mesh over the source's tight bounding box.

    The box is divided into nx*ny*nz near-cubic cells; the mesh consists of
    all lattice points on the box surface, triangulated side by side with
    outward winding.  The common cell size is scanned so that the surface
    vertex count lands within +/-15% of ``target_vertex_count``; a count
    outside that window raises ValueError.
    """
    if target_vertex_count < 8:
        raise ValueError("target vertex count must be at least 8 (the corners)")
    pts = _gather_vertices(source)
    if pts.shape[0] == 0:
        raise ValueError("source has no vertices")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extents = hi - lo
    max_extent = float(extents.max())
    if max_extent <= 0.0:
        raise ValueError("source points are coincident; box has no extent")
    # A zero-extent dimension becomes a thin slab: 1% of the largest extent.
    for axis in range(3):
        if extents[axis] <= 0.0:
            pad = 0.005 * max_extent
            lo[axis] -= pad
            hi[axis] += pad
            extents[axis] = hi[axis] - lo[axis]

    area = 2.0 * (extents[0] * extents[1] + extents[1] * extents[2]
                  + extents[2] * extents[0])
    h0 = math.sqrt(area / target_vertex_count)
    best_n = None
    best_gap = None
    seen: set[tuple[int, int, int]] = set()
    for scale in np.geomspace(1.0 / 3.0, 3.0, 241):
        h = h0 * scale
        n = np.array([_segment_count(float(e), h) for e in extents], dtype=int)
        key = (int(n[0]), int(n[1]), int(n[2]))
        if key in seen:
            continue
        seen.add(key)
        gap = abs(_boundary_count(n) - target_vertex_count)
        if best_gap is None or gap < best_gap:
            best_gap, best_n = gap, n
    n = best_n
    window = 0.15 * target_vertex_count
    if abs(_boundary_count(n) - target_vertex_count) > window:
        raise ValueError(
            f"no lattice within 15% of {target_vertex_count} vertices for "
            f"extents {extents.tolist()} (best {_boundary_count(n)})")

    # Nudge segment counts toward equal spacings when the +/-15% window
    # leaves room; keeps cells near-cubic for skewed boxes.
    for _ in range(6):
        spacing = extents / n
        if spacing.max() / spacing.min() < 1.5:
            break
        i = int(np.argmin(spacing))
        j = int(np.argmax(spacing))
        trial = n.copy()
        trial[i] = max(1, trial[i] - 1)
        if trial[i] != n[i] and abs(_boundary_count(trial) - target_vertex_count) <= window:
            n = trial
            continue
        trial = n.copy()
        trial[j] += 1
        if abs(_boundary_count(trial) - target_vertex_count) <= window:
            n = trial
            continue
        break

    return _lattice_box_mesh(lo, hi, n)


def _lattice_box_mesh(lo: np.ndarray, hi: np.ndarray, n: np.ndarray) -> TriangleMesh:
    axes = [np.linspace(lo[k], hi[k], n[k] + 1) for k in range(3)]
    index: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[float, float, float]] = []
    for i in range(n[0] + 1):
        on_x = i == 0 or i == n[0]
        for j in range(n[1] + 1):
            on_y = j == 0 or j == n[1]
            for k in range(n[2] + 1):
                if on_x or on_y or (k == 0 or k == n[2]):
                    index[(i, j, k)] = len(verts)
                    verts.append((axes[0][i], axes[1][j], axes[2][k]))

    vertices = np.asarray(verts)
    faces: list[tuple[int, int, int]] = []
    for axis in range(3):
        b, c = [k for k in range(3) if k != axis]
        for side, fixed in ((0, 0), (1, n[axis])):
            outward = np.zeros(3)
            outward[axis] = -1.0 if side == 0 else 1.0
            side_faces: list[tuple[int, int, int]] = []
            for u in range(n[b]):
                for v in range(n[c]):
                    ijk = [0, 0, 0]

                    def at(du: int, dv: int) -> int:
                        ijk[axis] = fixed
                        ijk[b] = u + du
                        ijk[c] = v + dv
                        return index[tuple(ijk)]

                    p00, p10, p01, p11 = at(0, 0), at(1, 0), at(0, 1), at(1, 1)
                    side_faces.append((p00, p10, p11))
                    side_faces.append((p00, p11, p01))
            # Flip the whole side if its winding points inward.
            a0, a1, a2 = side_faces[0]
            normal = np.cross(vertices[a1] - vertices[a0],
                              vertices[a2] - vertices[a0])
            if np.dot(normal, outward) < 0:
                side_faces = [(f0, f2, f1) for f0, f1, f2 in side_faces]
            faces.extend(side_faces)

    return TriangleMesh(vertices, np.asarray(faces, dtype=np.int32))


def save_mesh_json(mesh: TriangleMesh, path: str | os.PathLike) -> None:
    payload = {
        "vertices": [[float(x) for x in row] for row in mesh.vertices],
        "faces": [[int(i) for i in row] for row in mesh.faces],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_mesh_json(path: str | os.PathLike) -> TriangleMesh:
    with open(path) as fh:
        payload = json.load(fh)
    try:
        vertices = np.asarray(payload["vertices"], dtype=float)
        faces = np.asarray(payload["faces"], dtype=np.int32)
    except KeyError as exc:
        raise ValueError(f"{path}: missing mesh field {exc}") from exc
    return TriangleMesh(vertices, faces)
