"""Viewpoint parameterization, SO(3) helpers and pinhole projection.

Conventions used throughout the package:

* The camera frame is x-right, y-down, z-forward; the camera looks along +z,
  so a point at camera coordinates (x, y, z) lands on pixel
  (u, v) = (cx + f*x/z, cy + f*y/z) and must have depth z > 0.
* A viewpoint is (azimuth, elevation, theta, distance).  The world-to-camera
  rotation is

      R = Rz(theta) @ Rx(elevation) @ Ry(azimuth)

  (azimuth spins around the world's vertical y axis, elevation tilts toward
  the poles, theta rolls around the optical axis) and the camera sits on a
  sphere of radius ``distance`` looking at the world origin:

      X_cam = R @ X_world + (0, 0, distance)

* Canonical angle ranges: azimuth in [0, 2*pi), elevation in
  [-pi/2, pi/2], theta in [-pi, pi).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_azimuth(a: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    a = float(a) % TWO_PI
    # The modulo of a tiny negative number can round up to exactly 2*pi.
    return 0.0 if a >= TWO_PI else a


def wrap_signed(a: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    a = (float(a) + math.pi) % TWO_PI - math.pi
    return -math.pi if a >= math.pi else a


@dataclass(frozen=True)
class CameraPose:
    """Viewpoint on the sphere around the object.

    Angles are stored wrapped into their canonical ranges; elevation must
    already lie in [-pi/2, pi/2] (use :func:`canonical_pose` to normalize
    arbitrary optimizer output, which may step past a pole).
    """

    azimuth: float
    elevation: float
    theta: float
    distance: float

    def __post_init__(self):
        if not math.isfinite(self.azimuth) or not math.isfinite(self.elevation) \
                or not math.isfinite(self.theta) or not math.isfinite(self.distance):
            raise ValueError("pose parameters must be finite")
        if self.distance <= 0.0:
            raise ValueError(f"distance must be positive, got {self.distance}")
        el = float(self.elevation)
        half_pi = math.pi / 2.0
        if abs(el) > half_pi + 1e-12:
            raise ValueError(
                f"elevation {el} outside [-pi/2, pi/2]; use canonical_pose()")
        object.__setattr__(self, "azimuth", wrap_azimuth(self.azimuth))
        object.__setattr__(self, "elevation", min(max(el, -half_pi), half_pi))
        object.__setattr__(self, "theta", wrap_signed(self.theta))
        object.__setattr__(self, "distance", float(self.distance))

    def angles(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.theta])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for a width x height pixel image."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0.0:
            raise ValueError(f"focal length must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0.0 <= self.cx <= self.width and 0.0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image bounds")


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about an arbitrary (non-zero) axis."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be non-zero")
    x, y, z = axis / n
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotation_from_angles(azimuth: float, elevation: float, theta: float) -> np.ndarray:
    """World-to-camera rotation for unconstrained angles (no wrapping)."""
    return rot_z(theta) @ rot_x(elevation) @ rot_y(azimuth)


def rotation_from_pose(pose: CameraPose) -> np.ndarray:
    return rotation_from_angles(pose.azimuth, pose.elevation, pose.theta)


def is_rotation_matrix(r: np.ndarray, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        return False
    return (np.linalg.norm(r.T @ r - np.eye(3)) < tol
            and abs(np.linalg.det(r) - 1.0) < tol)


def _require_rotation(r: np.ndarray, name: str = "matrix") -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if not is_rotation_matrix(r):
        raise ValueError(f"{name} is not a rotation matrix")
    return r


def pose_from_rotation(r: np.ndarray, distance: float) -> CameraPose:
    """Invert :func:`rotation_from_pose`.

    The decomposition follows from the matrix product: with ce = cos(el),

        R[2, :] = (-ce*sin(az), sin(el), ce*cos(az))
        R[:, 1] = (-sin(th)*ce, cos(th)*ce, sin(el))

    At a pole (|elevation| = pi/2) azimuth and theta are coupled; theta is
    reported as 0 and azimuth absorbs the in-plane rotation.
    """
    r = _require_rotation(r, "pose matrix")
    se = min(max(r[2, 1], -1.0), 1.0)
    elevation = math.asin(se)
    ce = math.cos(elevation)
    if ce > 1e-9:
        azimuth = math.atan2(-r[2, 0], r[2, 2])
        theta = math.atan2(-r[0, 1], r[1, 1])
    else:
        theta = 0.0
        azimuth = math.atan2(r[0, 2], r[0, 0])
    return CameraPose(azimuth, elevation, theta, distance)


def canonical_pose(azimuth: float, elevation: float, theta: float,
                   distance: float) -> CameraPose:
    """Build a pose from unconstrained angles.

    Elevations past a pole are folded back by rebuilding the rotation and
    decomposing it, so the returned pose always describes the same view.
    """
    if abs(elevation) <= math.pi / 2.0:
        return CameraPose(azimuth, elevation, theta, distance)
    return pose_from_rotation(
        rotation_from_angles(azimuth, elevation, theta), distance)


def geodesic_error(r_pred: np.ndarray, r_gt: np.ndarray) -> float:
    """Geodesic distance on SO(3), in radians (in [0, pi]).

    Equals the Frobenius norm of the log-map of r_pred^T r_gt divided by
    sqrt(2).  The angle comes from atan2 of its sine (antisymmetric part of
    the relative rotation) and cosine (trace); a plain acos of the trace
    loses half the significant digits at both ends of the range, turning
    Delta(R, R) into ~1e-8 instead of 0.
    """
    r_pred = _require_rotation(r_pred, "r_pred")
    r_gt = _require_rotation(r_gt, "r_gt")
    m = r_pred.T @ r_gt
    c = (np.trace(m) - 1.0) / 2.0
    s = 0.5 * math.sqrt((m[2, 1] - m[1, 2]) ** 2
                        + (m[0, 2] - m[2, 0]) ** 2
                        + (m[1, 0] - m[0, 1]) ** 2)
    return math.atan2(s, c)


def pose_error(p_pred: CameraPose, p_gt: CameraPose) -> float:
    """Geodesic rotation error between two viewpoints, in radians."""
    return geodesic_error(rotation_from_pose(p_pred), rotation_from_pose(p_gt))


def project_points(points: np.ndarray, r: np.ndarray, distance: float,
                   intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project world points through (R, t=(0,0,distance)).

    Returns (pixels (N,2) as (u, v), depths (N,)).  Raises ValueError when
    any point has non-positive camera depth, listing the offending indices.
    Pixel positions may lie outside the image bounds; callers clip.
    """
    points = np.asarray(points, dtype=float)
    cam = points @ np.asarray(r, dtype=float).T
    cam[:, 2] += distance
    z = cam[:, 2]
    bad = np.nonzero(z <= 0.0)[0]
    if bad.size:
        raise ValueError(
            f"{bad.size} point(s) at non-positive depth (indices {bad[:8].tolist()}...)"
            if bad.size > 8 else
            f"point(s) at non-positive depth: indices {bad.tolist()}")
    pix = np.empty((points.shape[0], 2))
    pix[:, 0] = intr.cx + intr.focal * cam[:, 0] / z
    pix[:, 1] = intr.cy + intr.focal * cam[:, 1] / z
    return pix, z.copy()


def project_vertices(vertices: np.ndarray, pose: CameraPose,
                     intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project mesh vertices under a viewpoint; see :func:`project_points`."""
    return project_points(vertices, rotation_from_pose(pose), pose.distance, intr)
