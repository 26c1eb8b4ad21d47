"""Multi-level sparse voxel volumes and uncertainty-bounded ray allocation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import pack_keys, pixel_centers, pixel_rays, project_points, unpack_keys

# Segment ends are pulled in by this much (metres along the ray) so that an
# interval ending exactly on a cell face does not claim the next cell.
SEGMENT_EPS = 1e-9


@dataclass(frozen=True)
class LevelConfig:
    level: int
    voxel_size: float
    feature_channels: int
    hidden_channels: int | None = None
    # feature-map resolution relative to the input image
    feature_scale: float = 1.0

    def __post_init__(self):
        if self.level not in (0, 1, 2):
            raise ValueError("level must be 0, 1 or 2")
        if self.voxel_size <= 0 or self.feature_channels < 1:
            raise ValueError("voxel_size and feature_channels must be positive")
        if self.hidden_channels is None:
            object.__setattr__(self, "hidden_channels", self.feature_channels)


def default_levels(finest_voxel_size: float = 0.04) -> tuple[LevelConfig, ...]:
    """Coarse-to-fine level configs; level 2 is the finest.

    Coarser levels read lower-resolution, wider feature maps: 1/8 scale with
    80 channels, 1/4 with 40, 1/2 with 24.
    """
    s = finest_voxel_size
    return (
        LevelConfig(0, 4 * s, 80, feature_scale=1 / 8),
        LevelConfig(1, 2 * s, 40, feature_scale=1 / 4),
        LevelConfig(2, s, 24, feature_scale=1 / 2),
    )


def check_levels(levels) -> None:
    for coarse, fine in zip(levels[:-1], levels[1:]):
        if not np.isclose(coarse.voxel_size, 2.0 * fine.voxel_size, rtol=1e-12, atol=0):
            raise ValueError("each level's voxel size must be twice the next finer level's")


@dataclass(frozen=True)
class AllocationConfig:
    s: float = 2.0
    max_depth: float = 3.0

    def __post_init__(self):
        if self.s < 0 or self.max_depth <= 0:
            raise ValueError("s must be >= 0 and max_depth > 0")


class SparseVolumeLevel:
    """Sparse voxel grid at one resolution, stored as coordinate-sorted arrays.

    Voxels are keyed by packed int64 coordinates kept in ascending order, so
    every per-voxel array shares one row order and reductions over voxels
    run in a fixed (x, y, z)-lexicographic sequence.

    Payload per voxel: ``feature`` (C), ``mvs_tsdf``, ``mvs_weight``,
    ``hidden`` (C_h), ``pred_tsdf``, ``pred_occ``.
    """

    def __init__(self, config: LevelConfig, origin=(0.0, 0.0, 0.0), bounds=None):
        self.config = config
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.bounds = None if bounds is None else tuple(np.asarray(b, dtype=np.int64).reshape(3) for b in bounds)
        C, Ch = config.feature_channels, config.hidden_channels
        self.keys = np.zeros(0, dtype=np.int64)
        self.feature = np.zeros((0, C))
        self.mvs_tsdf = np.zeros(0)
        self.mvs_weight = np.zeros(0)
        self.hidden = np.zeros((0, Ch))
        self.pred_tsdf = np.zeros(0)
        self.pred_occ = np.zeros(0)

    _FIELDS = ("feature", "mvs_tsdf", "mvs_weight", "hidden", "pred_tsdf", "pred_occ")

    @property
    def voxel_size(self) -> float:
        return self.config.voxel_size

    def __len__(self) -> int:
        return int(self.keys.size)

    def __contains__(self, coord) -> bool:
        return bool(self.lookup(np.asarray(coord).reshape(1, 3))[0] >= 0)

    def __repr__(self):
        return f"SparseVolumeLevel(level={self.config.level}, voxel_size={self.voxel_size}, n={len(self)})"

    @property
    def coords(self) -> np.ndarray:
        return unpack_keys(self.keys)

    def centers(self) -> np.ndarray:
        return self.centers_of(self.coords)

    def centers_of(self, coords) -> np.ndarray:
        return self.origin + (np.asarray(coords, dtype=np.float64) + 0.5) * self.voxel_size

    def in_bounds(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if self.bounds is None:
            return np.ones(len(coords), dtype=bool)
        lo, hi = self.bounds
        return np.all((coords >= lo) & (coords < hi), axis=1)

    def lookup(self, coords) -> np.ndarray:
        """Row index of each coordinate, ``-1`` where not allocated."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if len(self) == 0 or len(coords) == 0:
            return np.full(len(coords), -1, dtype=np.int64)
        q = pack_keys(coords)
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, len(self) - 1)
        return np.where(self.keys[pos_c] == q, pos_c, -1)

    def insert(self, coords) -> np.ndarray:
        """Allocate ``coords`` with zero payload; returns the newly added coordinates.

        Coordinates outside ``bounds`` are dropped.
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        coords = coords[self.in_bounds(coords)]
        if len(coords) == 0:
            return np.zeros((0, 3), dtype=np.int64)
        new = np.unique(pack_keys(coords))
        if len(self):
            pos = np.minimum(np.searchsorted(self.keys, new), len(self) - 1)
            new = new[self.keys[pos] != new]
        if new.size == 0:
            return np.zeros((0, 3), dtype=np.int64)
        all_keys = np.concatenate([self.keys, new])
        order = np.argsort(all_keys, kind="stable")
        self.keys = all_keys[order]
        for name in self._FIELDS:
            old = getattr(self, name)
            pad = np.zeros((new.size,) + old.shape[1:])
            setattr(self, name, np.concatenate([old, pad])[order])
        return unpack_keys(new)

    def remove(self, rows) -> None:
        """Drop voxels by row index or boolean mask."""
        rows = np.asarray(rows)
        keep = np.ones(len(self), dtype=bool)
        keep[rows] = False
        self.keys = self.keys[keep]
        for name in self._FIELDS:
            setattr(self, name, getattr(self, name)[keep])

    def copy(self) -> "SparseVolumeLevel":
        out = SparseVolumeLevel(self.config, self.origin, self.bounds)
        out.keys = self.keys.copy()
        for name in self._FIELDS:
            setattr(out, name, getattr(self, name).copy())
        return out

    @property
    def payload_nbytes(self) -> int:
        return 8 * (self.config.feature_channels + self.config.hidden_channels + 4)


def fragment_bounds(origin_world, extent: float, level: LevelConfig, volume_origin=(0.0, 0.0, 0.0)):
    """Integer cell bounds ``(lo, hi)`` of a cube ``[origin, origin + extent)`` at ``level``."""
    s = level.voxel_size
    v = (np.asarray(origin_world, dtype=np.float64) - volume_origin) / s
    r = np.round(v)
    lo = np.where(np.abs(v - r) < 1e-6, r, np.floor(v)).astype(np.int64)
    n = int(round(extent / s))
    return lo, lo + n


def _shrink_segments(t0, t1):
    length = t1 - t0
    long_enough = length > 2 * SEGMENT_EPS
    mid = 0.5 * (t0 + t1)
    return np.where(long_enough, t0 + SEGMENT_EPS, mid), np.where(long_enough, t1 - SEGMENT_EPS, mid)


def traverse_segments(origins, directions, t0, t1, voxel_size: float, grid_origin=(0.0, 0.0, 0.0)):
    """Cells crossed by ray segments ``o + t*d, t in [t0, t1]`` (Amanatides-Woo stepping).

    All rays advance together; a ray stops once its next cell face lies at or
    beyond ``t1``. Returns an (M, 3) int64 array (duplicates possible).
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    o = np.broadcast_to(o, d.shape)
    t0 = np.asarray(t0, dtype=np.float64).reshape(-1)
    t1 = np.asarray(t1, dtype=np.float64).reshape(-1)
    if d.shape[0] == 0:
        return np.zeros((0, 3), dtype=np.int64)
    g = np.asarray(grid_origin, dtype=np.float64)
    s = float(voxel_size)

    p0 = o + t0[:, None] * d - g
    cell = np.floor(p0 / s).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    boundary = (cell + (step > 0)) * s
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t_max = np.where(step != 0, t0[:, None] + (boundary - p0) / d, np.inf)
        t_delta = np.where(step != 0, s / np.abs(d), np.inf)

    out = [cell.copy()]
    active = np.arange(d.shape[0])
    while active.size:
        tm = t_max[active]
        axis = np.argmin(tm, axis=1)
        nearest = tm[np.arange(active.size), axis]
        go = nearest < t1[active]
        active, axis = active[go], axis[go]
        if active.size == 0:
            break
        cell[active, axis] += step[active, axis]
        t_max[active, axis] += t_delta[active, axis]
        out.append(cell[active].copy())
    return np.concatenate(out)


def prior_segments(prior, kf, cfg: AllocationConfig):
    """Per-pixel ray segments ``(origin, direction, t0, t1)`` for the uncertainty band.

    The band ``[D - s*C, D + s*C]`` is clamped to ``(0, max_depth]`` in camera
    depth and converted to distance along the unit ray.
    """
    K = kf.intrinsics
    depth = prior.depth
    if depth.shape != (K.height, K.width):
        raise ValueError(f"prior shape {depth.shape} does not match intrinsics {K.height}x{K.width}")
    valid = (depth > 0) & (depth <= cfg.max_depth)
    uv = pixel_centers(K.width, K.height)[valid]
    dirs, dz = pixel_rays(uv, kf)
    D = depth[valid]
    C = prior.depth_uncertainty[valid]
    lo = np.maximum(D - cfg.s * C, 0.0)
    hi = np.minimum(D + cfg.s * C, cfg.max_depth)
    t0, t1 = _shrink_segments(lo / dz, hi / dz)
    return kf.pose.center, dirs, t0, t1


def allocate_from_prior(level: SparseVolumeLevel, prior, kf, cfg: AllocationConfig | None = None) -> np.ndarray:
    """Allocate every cell crossed by a pixel ray inside its depth-uncertainty band.

    Returns the coordinates that were newly added to ``level``.
    """
    cfg = cfg or AllocationConfig()
    origin, dirs, t0, t1 = prior_segments(prior, kf, cfg)
    cells = traverse_segments(origin, dirs, t0, t1, level.voxel_size, level.origin)
    return level.insert(cells)


def frustum_dense_coords(level: SparseVolumeLevel, keyframes, max_depth: float, bounds) -> np.ndarray:
    """Dense baseline: every cell in ``bounds`` whose center is in some keyframe's frustum."""
    lo, hi = (np.asarray(b, dtype=np.int64) for b in bounds)
    xs = np.arange(lo[0], hi[0])
    yy, zz = np.meshgrid(np.arange(lo[1], hi[1]), np.arange(lo[2], hi[2]), indexing="ij")
    picked = []
    for x in xs:
        c = np.stack([np.full(yy.shape, x), yy, zz], axis=-1).reshape(-1, 3)
        centers = level.centers_of(c)
        seen = np.zeros(len(c), dtype=bool)
        for kf in keyframes:
            _, z, vis = project_points(centers, kf)
            seen |= vis & (z <= max_depth)
        picked.append(c[seen])
    return np.concatenate(picked) if picked else np.zeros((0, 3), np.int64)


def parent_coords(coords) -> np.ndarray:
    return np.floor_divide(np.asarray(coords, dtype=np.int64), 2)


def child_coords(coords) -> np.ndarray:
    """The 8 children of each coarse cell, (M*8, 3)."""
    offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 1, 3) * 2 + offs
    return c.reshape(-1, 3)


def gate_mask(coarse: SparseVolumeLevel, fine_coords, threshold: float = 0.5) -> np.ndarray:
    """True for fine coordinates whose coarse parent exists with ``pred_occ >= threshold``."""
    idx = coarse.lookup(parent_coords(fine_coords))
    ok = idx >= 0
    ok[ok] = coarse.pred_occ[idx[ok]] >= threshold
    return ok


def _check_ratio(coarse, fine):
    if not np.isclose(coarse.voxel_size, 2.0 * fine.voxel_size, rtol=1e-12, atol=0):
        raise ValueError(f"fine voxel size {fine.voxel_size} is not half the coarse size {coarse.voxel_size}")
    if not np.allclose(coarse.origin, fine.origin):
        raise ValueError("coarse and fine volumes must share an origin")


def sparsify_to_finer(coarse: SparseVolumeLevel, fine: SparseVolumeLevel, threshold: float = 0.5) -> int:
    """Remove fine cells whose parent is missing or has occupancy below ``threshold``.

    Returns the number of fine cells retained.
    """
    _check_ratio(coarse, fine)
    keep = gate_mask(coarse, fine.coords, threshold)
    if not keep.all():
        fine.remove(~keep)
    return len(fine)


def eligible_children(coarse: SparseVolumeLevel, threshold: float = 0.5) -> np.ndarray:
    return child_coords(coarse.coords[coarse.pred_occ >= threshold])


def stats(level: SparseVolumeLevel) -> dict:
    n = len(level)
    return {"allocated_count": n, "bytes_estimate": n * level.payload_nbytes}


@dataclass
class SparsityReport:
    """Allocated vs frustum-dense cell counts per level."""

    sparse_counts: list = field(default_factory=list)
    dense_counts: list = field(default_factory=list)

    @property
    def reductions(self) -> list:
        return [100.0 * (1.0 - s / d) if d else 0.0 for s, d in zip(self.sparse_counts, self.dense_counts)]
