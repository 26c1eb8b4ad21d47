"""3D mesh metrics, 2D depth metrics and depth rendering of volumes and meshes."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Keyframe, pixel_centers, pixel_rays, project_points
from .meshing import TriangleMesh

DEFAULT_SAMPLE_RESOLUTION = 0.02
DEFAULT_DISTANCE_THRESHOLD = 0.05
DEFAULT_DEPTH_TRUNCATION = 10.0
# absorbs rounding in "distance == threshold" so the <= convention survives float noise
_THRESHOLD_SLACK = 1e-12
_BISECT_STEPS = 40
_PAIR_CHUNK = 1 << 21

CSV_COLUMNS_3D = ("Comp", "Acc", "Recall", "Prec", "F-score")
CSV_COLUMNS_2D = ("Abs-rel", "Abs-diff", "Sq-rel", "RMSE", "delta<1.25", "Comp")


@dataclass(frozen=True)
class Metrics3D:
    accuracy: float
    completeness: float
    precision: float
    recall: float
    fscore: float
    sample_resolution: float = DEFAULT_SAMPLE_RESOLUTION
    distance_threshold: float = DEFAULT_DISTANCE_THRESHOLD
    seed: int = 0

    def row(self) -> tuple:
        return (self.completeness, self.accuracy, self.recall, self.precision, self.fscore)


@dataclass(frozen=True)
class Metrics2D:
    abs_rel: float
    abs_diff: float
    sq_rel: float
    rmse: float
    delta_125: float
    completeness: float
    depth_truncation: float = DEFAULT_DEPTH_TRUNCATION

    def row(self) -> tuple:
        return (self.abs_rel, self.abs_diff, self.sq_rel, self.rmse, self.delta_125, self.completeness)


# ---------------------------------------------------------------------------
# 3D


def sample_mesh(mesh: TriangleMesh, resolution: float = DEFAULT_SAMPLE_RESOLUTION, seed: int = 0) -> np.ndarray:
    """Area-uniform surface samples, about one point per ``resolution**2`` of area."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if len(mesh.faces) == 0:
        return np.zeros((0, 3))
    areas = mesh.triangle_areas()
    total = float(areas.sum())
    n = int(round(total / resolution**2))
    if n == 0 or total == 0.0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.faces[tri]]
    return (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]


def nearest_distances(query, reference) -> np.ndarray:
    """Distance from each query point to its nearest reference point."""
    d, _ = cKDTree(np.asarray(reference, dtype=np.float64)).query(np.asarray(query, dtype=np.float64), k=1)
    return np.asarray(d, dtype=np.float64)


def metrics_3d(
    pred,
    gt,
    threshold: float = DEFAULT_DISTANCE_THRESHOLD,
    sample_resolution: float = DEFAULT_SAMPLE_RESOLUTION,
    seed: int = 0,
) -> Metrics3D:
    """Accuracy, completeness, precision, recall and F-score between point sets.

    A point counts as matched when its nearest-neighbour distance is
    ``<= threshold``.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("metrics_3d needs nonempty point sets")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    d_pred = nearest_distances(pred, gt)
    d_gt = nearest_distances(gt, pred)
    limit = threshold + _THRESHOLD_SLACK
    prec = float(np.mean(d_pred <= limit))
    rec = float(np.mean(d_gt <= limit))
    f = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return Metrics3D(
        accuracy=float(d_pred.mean()),
        completeness=float(d_gt.mean()),
        precision=prec,
        recall=rec,
        fscore=f,
        sample_resolution=sample_resolution,
        distance_threshold=threshold,
        seed=seed,
    )


def evaluate_meshes(
    pred: TriangleMesh,
    gt: TriangleMesh,
    resolution: float = DEFAULT_SAMPLE_RESOLUTION,
    threshold: float = DEFAULT_DISTANCE_THRESHOLD,
    seed: int = 0,
) -> Metrics3D:
    """Sample both meshes with the same seed and compare the point sets."""
    return metrics_3d(
        sample_mesh(pred, resolution, seed), sample_mesh(gt, resolution, seed), threshold, resolution, seed
    )


# ---------------------------------------------------------------------------
# 2D


def _valid_depth(d, truncation):
    return np.isfinite(d) & (d > 0) & (d <= truncation)


def metrics_2d(pred_depth, gt_depth, truncation: float = DEFAULT_DEPTH_TRUNCATION) -> Metrics2D:
    """Depth-map errors over jointly valid pixels.

    Pixels without a prediction are left out of the error means and count
    only against completeness.
    """
    pred = np.asarray(pred_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    vg = _valid_depth(gt, truncation)
    both = vg & _valid_depth(pred, truncation)
    if not both.any():
        raise ValueError("no pixel is valid in both depth maps")
    p, g = pred[both], gt[both]
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return Metrics2D(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        abs_diff=float(np.mean(np.abs(diff))),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        delta_125=float(np.mean(ratio < 1.25)),
        completeness=float(both.sum() / vg.sum()),
        depth_truncation=truncation,
    )


def mean_metrics_2d(items) -> Metrics2D:
    """Average a sequence of per-view ``Metrics2D``."""
    items = list(items)
    if not items:
        raise ValueError("no metrics to average")
    keys = ("abs_rel", "abs_diff", "sq_rel", "rmse", "delta_125", "completeness")
    means = {k: float(np.mean([getattr(m, k) for m in items])) for k in keys}
    return Metrics2D(**means, depth_truncation=items[0].depth_truncation)


# ---------------------------------------------------------------------------
# depth rendering


def _pixel_grid(kf: Keyframe):
    K = kf.intrinsics
    uv = pixel_centers(K.width, K.height).reshape(-1, 2)
    return pixel_rays(uv, kf)


def trilinear_tsdf(volume, points, values=None):
    """Trilinear TSDF at ``points`` over voxel centers; NaN where a corner is unallocated."""
    vals = volume.pred_tsdf if values is None else np.asarray(values, dtype=np.float64)
    g = (np.asarray(points, dtype=np.float64) - volume.origin) / volume.voxel_size - 0.5
    base = np.floor(g).astype(np.int64)
    f = g - base
    out = np.zeros(len(g))
    ok = np.ones(len(g), dtype=bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = volume.lookup(base + (dx, dy, dz))
                w = (
                    (f[:, 0] if dx else 1 - f[:, 0])
                    * (f[:, 1] if dy else 1 - f[:, 1])
                    * (f[:, 2] if dz else 1 - f[:, 2])
                )
                ok &= idx >= 0
                out += w * vals[np.where(idx >= 0, idx, 0)]
    out[~ok] = np.nan
    return out


def render_volume_depth(volume, kf: Keyframe, max_depth: float = 3.0, trunc: float | None = None) -> np.ndarray:
    """Depth of the first +/- TSDF crossing along each pixel ray (0 where none).

    Rays advance by half a voxel, or by ``0.8 * |S| * trunc`` when ``trunc``
    is given and that is longer (sphere-trace style). A sign change between
    two interpolable samples is refined by bisection.
    """
    if max_depth <= 0:
        raise ValueError("max_depth must be positive")
    K = kf.intrinsics
    depth = np.zeros(K.height * K.width)
    if len(volume) == 0:
        return depth.reshape(K.height, K.width)
    dirs, dz = _pixel_grid(kf)
    origin = kf.pose.center
    t_max = max_depth / dz
    base_step = 0.5 * volume.voxel_size
    n = len(dirs)
    t = np.zeros(n)
    prev_t = np.zeros(n)
    prev_v = np.full(n, np.nan)
    active = np.arange(n)
    while active.size:
        v = trilinear_tsdf(volume, origin + t[active, None] * dirs[active])
        crossing = (prev_v[active] > 0) & (v <= 0)
        if crossing.any():
            rows = active[crossing]
            lo, hi = prev_t[rows].copy(), t[rows].copy()
            for _ in range(_BISECT_STEPS):
                mid = 0.5 * (lo + hi)
                vm = trilinear_tsdf(volume, origin + mid[:, None] * dirs[rows])
                # an unallocated midpoint keeps the conservative (far) side
                above = vm > 0
                lo = np.where(above, mid, lo)
                hi = np.where(above, hi, mid)
            depth[rows] = 0.5 * (lo + hi) * dz[rows]
        step = np.full(active.size, base_step)
        if trunc is not None:
            step = np.maximum(step, np.where(np.isfinite(v), 0.8 * np.abs(v) * trunc, 0.0))
        prev_t[active] = t[active]
        prev_v[active] = v
        t[active] += step
        keep = ~crossing & (prev_t[active] < t_max[active])
        active = active[keep]
        # a final sample exactly at t_max so surfaces right at the limit are caught
        t[active] = np.minimum(t[active], t_max[active])
    depth[depth > max_depth] = 0.0
    return depth.reshape(K.height, K.width)


def render_mesh_depth(mesh: TriangleMesh, kf: Keyframe, max_depth: float = 3.0) -> np.ndarray:
    """Z-buffer depth of the nearest triangle hit per pixel center (0 where none)."""
    if max_depth <= 0:
        raise ValueError("max_depth must be positive")
    K = kf.intrinsics
    W, H = K.width, K.height
    zbuf = np.full(H * W, np.inf)
    if len(mesh.faces) == 0:
        return np.zeros((H, W))
    dirs, dz = _pixel_grid(kf)
    origin = kf.pose.center

    tri = mesh.vertices[mesh.faces]
    uv, z, _ = project_points(tri, kf)
    behind = (z <= 1e-9).any(axis=1)
    if (z <= 0).all(axis=1).any():
        keep = ~(z <= 0).all(axis=1)
        tri, uv, z, behind = tri[keep], uv[keep], z[keep], behind[keep]
    uvs = np.where(behind[:, None, None], 0.0, uv)
    i0 = np.where(behind, 0, np.ceil(uvs[:, :, 0].min(axis=1) - 0.5)).astype(np.int64)
    i1 = np.where(behind, W - 1, np.floor(uvs[:, :, 0].max(axis=1) - 0.5)).astype(np.int64)
    j0 = np.where(behind, 0, np.ceil(uvs[:, :, 1].min(axis=1) - 0.5)).astype(np.int64)
    j1 = np.where(behind, H - 1, np.floor(uvs[:, :, 1].max(axis=1) - 0.5)).astype(np.int64)
    i0, j0 = np.maximum(i0, 0), np.maximum(j0, 0)
    i1, j1 = np.minimum(i1, W - 1), np.minimum(j1, H - 1)
    wi = np.maximum(i1 - i0 + 1, 0)
    hj = np.maximum(j1 - j0 + 1, 0)
    counts = wi * hj

    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    bounds = np.concatenate([[0], np.cumsum(counts)])
    start = 0
    while start < len(tri):
        stop = int(np.searchsorted(bounds, bounds[start] + _PAIR_CHUNK, side="right")) - 1
        stop = max(stop, start + 1)
        sl = slice(start, stop)
        c = counts[sl]
        tid = np.repeat(np.arange(start, stop), c)
        local = np.arange(len(tid)) - np.repeat(bounds[sl] - bounds[start], c)
        px = i0[tid] + local % wi[tid]
        py = j0[tid] + local // np.maximum(wi[tid], 1)
        pix = py * W + px
        # Moller-Trumbore
        d = dirs[pix]
        p = np.cross(d, e2[tid])
        det = np.einsum("ij,ij->i", e1[tid], p)
        ok = np.abs(det) > 1e-15
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = origin - tri[tid, 0]
        bu = np.einsum("ij,ij->i", s, p) * inv
        q = np.cross(s, e1[tid])
        bv = np.einsum("ij,ij->i", d, q) * inv
        tt = np.einsum("ij,ij->i", e2[tid], q) * inv
        eps = 1e-12
        hit = ok & (bu >= -eps) & (bv >= -eps) & (bu + bv <= 1 + eps) & (tt > 0)
        np.minimum.at(zbuf, pix[hit], tt[hit] * dz[pix[hit]])
        start = stop
    zbuf[~np.isfinite(zbuf) | (zbuf > max_depth)] = 0.0
    return zbuf.reshape(H, W)


def render_depth(source, kf: Keyframe, max_depth: float = 3.0, trunc: float | None = None) -> np.ndarray:
    """Render a depth map from a ``TriangleMesh`` or a sparse volume level."""
    if isinstance(source, TriangleMesh):
        return render_mesh_depth(source, kf, max_depth)
    return render_volume_depth(source, kf, max_depth, trunc)


# ---------------------------------------------------------------------------
# reports


def metrics_to_text(metrics, **extra) -> str:
    """Flat ``key = value`` report."""
    items = {**asdict(metrics), **extra}
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in items.items())


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def metrics_csv(rows) -> str:
    """CSV with a leading ``name`` column and the fixed metric columns.

    ``rows`` is a sequence of ``(name, metrics)``; all must be the same kind.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows")
    kind = type(rows[0][1])
    if any(type(m) is not kind for _, m in rows):
        raise ValueError("cannot mix 3D and 2D metrics in one table")
    cols = CSV_COLUMNS_3D if kind is Metrics3D else CSV_COLUMNS_2D
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("name",) + cols)
    for name, m in rows:
        w.writerow((name,) + tuple(repr(float(x)) for x in m.row()))
    return buf.getvalue()


def read_metrics_csv(text: str) -> list:
    """Parse a table written by ``metrics_csv`` back into ``(name, metrics)`` rows."""
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header == ("name",) + CSV_COLUMNS_3D:
        out = []
        for r in reader:
            comp, acc, rec, prec, f = map(float, r[1:])
            out.append((r[0], Metrics3D(acc, comp, prec, rec, f)))
        return out
    if header == ("name",) + CSV_COLUMNS_2D:
        return [(r[0], Metrics2D(*map(float, r[1:]))) for r in reader]
    raise ValueError(f"unrecognised metrics header {header}")
