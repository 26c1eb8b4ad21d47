"""Pinhole cameras, rigid poses and voxel-grid indexing.

Conventions used throughout the package:

* pixel coordinates are continuous; integer pixel ``(i, j)`` has its
  center at ``(i + 0.5, j + 0.5)``;
* poses are camera-to-world;
* voxel ``c`` covers the half-open cell ``[origin + c*s, origin + (c+1)*s)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9

# 21 bits per signed coordinate, packed x|y|z into one int64.
KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
_KEY_MASK = (1 << KEY_BITS) - 1


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics of the same camera resampled by ``factor`` (0.5 halves the image).

        Because pixel centers sit at half-integers, a pure scaling of
        focal length and principal point is exact.
        """
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor, w, h)


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform ``x_world = R @ x_cam + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHO_TOL, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation has determinant != +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` looking at ``target``; camera +z forward, +y down."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("view direction is parallel to the up vector")
        right /= norm
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        # re-orthonormalise against rounding before validation
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, eye)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation


@dataclass(frozen=True)
class Keyframe:
    intrinsics: Intrinsics
    pose: Pose
    image: np.ndarray | None = field(default=None, repr=False)
    index: int = 0

    def __post_init__(self):
        if self.image is not None:
            img = np.asarray(self.image)
            if img.shape[:2] != (self.intrinsics.height, self.intrinsics.width):
                raise ValueError(
                    f"image shape {img.shape[:2]} does not match intrinsics "
                    f"{self.intrinsics.height}x{self.intrinsics.width}"
                )


def project_points(points_world, kf: Keyframe):
    """Vectorised projection.

    Returns ``(uv, depth, visible)`` with ``uv`` of shape (..., 2). ``visible``
    is true where depth > 0 and ``0 <= u < width``, ``0 <= v < height``.
    """
    pc = kf.pose.to_camera(points_world)
    z = pc[..., 2]
    K = kf.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[..., 0] / z + K.cx
        v = K.fy * pc[..., 1] / z + K.cy
    visible = (z > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return np.stack([u, v], axis=-1), z, visible


def project(point_world, kf: Keyframe):
    """Project one world point; returns ``(uv, depth)`` or ``None`` when out of view."""
    uv, z, vis = project_points(np.asarray(point_world, dtype=np.float64), kf)
    if not bool(vis):
        return None
    return uv, float(z)


def pixel_rays(uv, kf: Keyframe):
    """Unit ray directions (world frame) through continuous pixel coordinates ``uv``.

    Also returns the camera-frame z component of each direction, which
    converts camera depth ``d`` to ray length ``d / dz``.
    """
    uv = np.asarray(uv, dtype=np.float64)
    K = kf.intrinsics
    d_cam = np.stack([(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy, np.ones(uv.shape[:-1])], axis=-1)
    norm = np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_cam = d_cam / norm
    return d_cam @ kf.pose.rotation.T, d_cam[..., 2]


def pixel_ray(u, kf: Keyframe):
    """Ray ``(origin, unit_direction)`` through continuous pixel coordinate ``u``."""
    u = np.asarray(u, dtype=np.float64)
    K = kf.intrinsics
    if not (0 <= u[0] <= K.width and 0 <= u[1] <= K.height):
        raise ValueError(f"pixel {tuple(u)} outside {K.width}x{K.height} image")
    direction, _ = pixel_rays(u, kf)
    return kf.pose.center.copy(), direction


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of pixel-center coordinates."""
    jj, ii = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([ii + 0.5, jj + 0.5], axis=-1).astype(np.float64)


def world_to_voxel(points, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    p = np.asarray(points, dtype=np.float64)
    return np.floor((p - np.asarray(origin, dtype=np.float64)) / voxel_size).astype(np.int64)


def voxel_center(coords, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    return np.asarray(origin, dtype=np.float64) + (c + 0.5) * voxel_size


def pack_keys(coords) -> np.ndarray:
    """Pack (..., 3) signed voxel coords into sortable int64 keys.

    Key order equals lexicographic (x, y, z) order.
    """
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (c.min() < -KEY_OFFSET or c.max() >= KEY_OFFSET):
        raise OverflowError("voxel coordinate outside the 21-bit packing range")
    s = c + KEY_OFFSET
    return (s[..., 0] << (2 * KEY_BITS)) | (s[..., 1] << KEY_BITS) | s[..., 2]


def unpack_keys(keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    x = (k >> (2 * KEY_BITS)) & _KEY_MASK
    y = (k >> KEY_BITS) & _KEY_MASK
    z = k & _KEY_MASK
    return np.stack([x, y, z], axis=-1) - KEY_OFFSET
