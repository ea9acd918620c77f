"""Pinhole camera model: pixel+depth unprojection to world frame and its inverse.

Pose convention is fixed as world-to-camera: x_cam = R @ x_world + t. Depth is
z-depth in the camera frame (not ray length), so with an identity rig the
unprojection of pixel (u, v) at depth d is exactly (u*d, v*d, d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera map: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray  # 3x3 orthonormal, det +1
    translation: np.ndarray  # 3-vector, meters

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise GeometryError("pose must be a 3x3 rotation and a 3-vector")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    def world_to_cam(self, p: np.ndarray) -> np.ndarray:
        return self.rotation @ p + self.translation

    def cam_to_world(self, p: np.ndarray) -> np.ndarray:
        return self.rotation.T @ (p - self.translation)

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class DepthMap:
    """Per-pixel z-depth in meters; 0 marks invalid (nothing hit)."""

    values: np.ndarray  # (height, width)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise GeometryError("depth map must be 2-D")
        if not np.isfinite(v).all():
            raise GeometryError("depth map contains non-finite values")
        if (v < 0).any():
            raise GeometryError("negative depth")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WorldPoint:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_array(a: np.ndarray) -> "WorldPoint":
        return WorldPoint(float(a[0]), float(a[1]), float(a[2]))


def unproject_pixel(p2d: tuple[float, float], depth: float, k: CameraIntrinsics,
                    pose: CameraPose) -> WorldPoint:
    """Lift pixel (u, v) at z-depth `depth` through K^-1 and the inverse pose."""
    if depth <= 0:
        raise GeometryError("invalid depth")
    u, v = p2d
    cam = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
    return WorldPoint.from_array(pose.cam_to_world(cam))


def project_point(p: WorldPoint, k: CameraIntrinsics,
                  pose: CameraPose) -> tuple[tuple[float, float], float]:
    """Exact inverse of unproject_pixel: world point to ((u, v), depth)."""
    cam = pose.world_to_cam(p.as_array())
    if cam[2] <= 0:
        raise GeometryError("behind camera")
    u = cam[0] / cam[2] * k.fx + k.cx
    v = cam[1] / cam[2] * k.fy + k.cy
    return (float(u), float(v)), float(cam[2])


def patch_center_pixels(width: int, height: int, patch_grid: tuple[int, int]) -> list[tuple[float, float]]:
    """Row-major (u, v) centers of an evenly dividing patch grid."""
    rows, cols = patch_grid
    if height % rows or width % cols:
        raise GeometryError(f"patch grid {patch_grid} does not divide {width}x{height}")
    ph, pw = height // rows, width // cols
    centers = []
    for r in range(rows):
        for c in range(cols):
            centers.append((c * pw + (pw - 1) / 2.0, r * ph + (ph - 1) / 2.0))
    return centers


def unproject_patch_centers(depth: DepthMap, k: CameraIntrinsics, pose: CameraPose,
                            patch_grid: tuple[int, int]) -> list[WorldPoint]:
    """One world point per patch: patch-center pixel lifted at the mean valid depth.

    Ordering is row-major over the grid, matching visual-token ordering. A patch
    whose pixels are all invalid (depth 0) is an error.
    """
    rows, cols = patch_grid
    if depth.height % rows or depth.width % cols:
        raise GeometryError(f"patch grid {patch_grid} does not divide {depth.width}x{depth.height}")
    ph, pw = depth.height // rows, depth.width // cols
    centers = patch_center_pixels(depth.width, depth.height, patch_grid)
    points = []
    for i, (u, v) in enumerate(centers):
        r, c = divmod(i, cols)
        block = depth.values[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw]
        valid = block[block > 0]
        if valid.size == 0:
            raise GeometryError(f"empty patch ({r}, {c})")
        points.append(unproject_pixel((u, v), float(valid.mean()), k, pose))
    return points


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_from_axis_angle(v: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector (angle = norm, radians) to a rotation matrix."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    axis = v / angle
    kx, ky, kz = axis
    kmat = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    return np.eye(3) + np.sin(angle) * kmat + (1 - np.cos(angle)) * (kmat @ kmat)


def axis_angle_from_rotation(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to an axis-angle 3-vector (inverse of the above)."""
    cos_a = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos_a))
    if angle < 1e-12:
        return np.zeros(3)
    if angle > np.pi - 1e-9:
        # near-pi: extract axis from the symmetric part
        m = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(m), 0.0))
        # fix signs from off-diagonals
        if m[0, 1] < 0:
            axis[1] = -axis[1]
        if m[0, 2] < 0:
            axis[2] = -axis[2]
        return axis / np.linalg.norm(axis) * angle
    vec = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return vec / (2.0 * np.sin(angle)) * angle


def look_at_pose(camera_pos: np.ndarray, target: np.ndarray,
                 up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> CameraPose:
    """World-to-camera pose for a camera at camera_pos looking at target.

    Camera axes: z forward (view direction), x right, y down (image rows).
    """
    camera_pos = np.asarray(camera_pos, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - camera_pos
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])  # rows are camera axes in world coords
    return CameraPose(r, -r @ camera_pos)
