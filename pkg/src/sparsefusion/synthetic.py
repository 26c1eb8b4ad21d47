"""Analytic SDF scenes used as ground truth for end-to-end runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depth_prior import GroundTruthDepth
from .geometry import Keyframe, Pose, pixel_centers, pixel_rays
from .sparse_volume import LevelConfig, SparseVolumeLevel

SURFACE_TOL = 1e-7
MAX_TRACE_STEPS = 2000


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center, dtype=np.float64), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center, dtype=np.float64)) - np.asarray(self.half_extents, dtype=np.float64)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Plane:
    """Half-space ``n·x <= offset`` is solid; ``normal`` is normalised on use."""

    normal: tuple
    offset: float

    def sdf(self, p):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return p @ n - self.offset


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.primitives) == 0:
            raise ValueError("scene needs at least one primitive")
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        out = self.primitives[0].sdf(p)
        for prim in self.primitives[1:]:
            out = np.minimum(out, prim.sdf(p))
        return out


def sdf(scene: AnalyticScene, point):
    """Signed distance of ``point`` (or an (..., 3) array of points) to ``scene``."""
    d = scene.sdf(point)
    return float(d) if np.ndim(d) == 0 else d


def default_scene() -> AnalyticScene:
    """Sphere of radius 0.8 m floating 0.2 m above a ground plane at z = 0."""
    return AnalyticScene((Sphere((0.0, 0.0, 1.0), 0.8), Plane((0.0, 0.0, 1.0), 0.0)))


# Default fragment cube for :func:`default_scene`; corner aligned to the 0.16 m grid.
DEFAULT_FRAGMENT_ORIGIN = (-1.92, -1.92, -0.64)


def trace_rays(scene: AnalyticScene, origins, directions, t_max) -> np.ndarray:
    """Sphere-trace rays; returns hit distance along each ray or ``inf`` on miss."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(directions))
    directions = np.asarray(directions, dtype=np.float64)
    n = directions.shape[0]
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
    t = np.zeros(n)
    hit = np.full(n, np.inf)
    active = np.arange(n)
    for _ in range(MAX_TRACE_STEPS):
        if active.size == 0:
            break
        p = origins[active] + t[active, None] * directions[active]
        d = scene.sdf(p)
        done = d < SURFACE_TOL
        hit[active[done]] = t[active[done]]
        t[active] += d
        keep = ~done & (t[active] <= t_max[active])
        active = active[keep]
    return hit


def render_gt_depth(scene: AnalyticScene, kf: Keyframe, max_depth: float = 3.0) -> GroundTruthDepth:
    """Exact depth map by sphere tracing each pixel center; misses are invalid (0)."""
    if max_depth <= 0:
        raise ValueError("max_depth must be positive")
    K = kf.intrinsics
    uv = pixel_centers(K.width, K.height).reshape(-1, 2)
    dirs, dz = pixel_rays(uv, kf)
    # a few ulps of slack so a surface exactly at max_depth still registers
    t = trace_rays(scene, kf.pose.center, dirs, max_depth / dz + 1e-9)
    depth = t * dz
    valid = np.isfinite(depth) & (depth <= max_depth) & (depth > 0)
    depth = np.where(valid, depth, 0.0).reshape(K.height, K.width)
    return GroundTruthDepth(depth, valid.reshape(K.height, K.width))


def gt_tsdf_volume(scene: AnalyticScene, level: LevelConfig, bounds, trunc: float) -> SparseVolumeLevel:
    """Ground-truth TSDF band of ``scene`` inside ``bounds = (min_corner, max_corner)``.

    Voxels with ``|sdf(center)| < trunc`` are allocated. The clamped TSDF and
    the occupancy target (1 inside the band) are written into the
    ``pred_tsdf`` / ``pred_occ`` channels so the volume can be meshed and
    rendered with the same code as a prediction.
    """
    if trunc <= 0:
        raise ValueError("trunc must be positive")
    lo_corner, hi_corner = (np.asarray(b, dtype=np.float64) for b in bounds)
    vol = SparseVolumeLevel(level, origin=(0.0, 0.0, 0.0))
    s = level.voxel_size
    lo = np.floor(lo_corner / s + 1e-9).astype(np.int64)
    hi = np.ceil(hi_corner / s - 1e-9).astype(np.int64)
    xs = np.arange(lo[0], hi[0])
    # slab-by-slab keeps memory flat for large grids
    yy, zz = np.meshgrid(np.arange(lo[1], hi[1]), np.arange(lo[2], hi[2]), indexing="ij")
    picked, values = [], []
    for x in xs:
        c = np.stack([np.full(yy.shape, x), yy, zz], axis=-1).reshape(-1, 3)
        d = scene.sdf(vol.centers_of(c))
        band = np.abs(d) < trunc
        picked.append(c[band])
        values.append(d[band])
    coords = np.concatenate(picked) if picked else np.zeros((0, 3), np.int64)
    dist = np.concatenate(values) if values else np.zeros(0)
    vol.insert(coords)
    idx = vol.lookup(coords)
    vol.pred_tsdf[idx] = np.clip(dist / trunc, -1.0, 1.0)
    vol.pred_occ[idx] = 1.0
    return vol


@dataclass(frozen=True)
class Trajectory:
    poses: tuple
    target: tuple
    radius: float
    elevation: float

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)


def orbit_trajectory(target, radius: float, count: int, elevation: float = math.radians(30.0)) -> Trajectory:
    """``count`` cameras evenly spaced in azimuth on a circle, all looking at ``target``.

    ``elevation`` is the angle (radians) above the horizontal plane through
    ``target``; every camera center is exactly ``radius`` from the target.
    """
    if radius <= 0 or count < 1:
        raise ValueError("radius must be positive and count >= 1")
    target = np.asarray(target, dtype=np.float64)
    poses = []
    for k in range(count):
        az = 2.0 * math.pi * k / count
        offset = radius * np.array(
            [math.cos(elevation) * math.cos(az), math.cos(elevation) * math.sin(az), math.sin(elevation)]
        )
        poses.append(Pose.look_at(target + offset, target))
    return Trajectory(tuple(poses), tuple(target), radius, elevation)


_FIELDS = {"sphere": 4, "box": 6, "plane": 4}


def parse_scene(text: str) -> AnalyticScene:
    """Parse the scene grammar (one primitive per line, ``#`` comments)::

    sphere <cx> <cy> <cz> <radius>
    box    <cx> <cy> <cz> <hx> <hy> <hz>
    plane  <nx> <ny> <nz> <offset>
    """
    prims = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *rest = line.split()
        kind = kind.lower()
        if kind not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown primitive {kind!r}")
        if len(rest) != _FIELDS[kind]:
            raise ValueError(f"line {lineno}: {kind} takes {_FIELDS[kind]} numbers, got {len(rest)}")
        try:
            v = [float(x) for x in rest]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if kind == "sphere":
            if v[3] <= 0:
                raise ValueError(f"line {lineno}: sphere radius must be positive")
            prims.append(Sphere(tuple(v[:3]), v[3]))
        elif kind == "box":
            if min(v[3:]) <= 0:
                raise ValueError(f"line {lineno}: box half-extents must be positive")
            prims.append(Box(tuple(v[:3]), tuple(v[3:])))
        else:
            if np.linalg.norm(v[:3]) == 0:
                raise ValueError(f"line {lineno}: plane normal must be nonzero")
            prims.append(Plane(tuple(v[:3]), v[3]))
    return AnalyticScene(tuple(prims))


def format_scene(scene: AnalyticScene) -> str:
    lines = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            vals = ("sphere", *p.center, p.radius)
        elif isinstance(p, Box):
            vals = ("box", *p.center, *p.half_extents)
        else:
            vals = ("plane", *p.normal, p.offset)
        lines.append(" ".join([vals[0]] + [repr(float(x)) for x in vals[1:]]))
    return "\n".join(lines) + "\n"


def load_scene(path) -> AnalyticScene:
    return parse_scene(Path(path).read_text())


def save_scene(scene: AnalyticScene, path) -> None:
    Path(path).write_text(format_scene(scene))
