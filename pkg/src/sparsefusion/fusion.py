"""Fragment reconstruction: feature fetch and attention aggregation, MVS TSDF
fusion, GRU fragment-to-global fusion, TSDF/occupancy heads, and the
reconstruction loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import Keyframe, project_points
from .sparse_volume import (
    AllocationConfig,
    LevelConfig,
    SparseVolumeLevel,
    allocate_from_prior,
    check_levels,
    default_levels,
    fragment_bounds,
    frustum_dense_coords,
    gate_mask,
    sparsify_to_finer,
)

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
# voxels per attention batch; bounds peak memory
_CHUNK = 4096


@dataclass(frozen=True)
class FragmentConfig:
    num_keyframes: int = 9
    fragment_extent: float = 3.84
    levels: tuple = field(default_factory=default_levels)

    def __post_init__(self):
        if self.num_keyframes < 2:
            raise ValueError("a fragment needs at least 2 keyframes")
        if self.fragment_extent <= 0:
            raise ValueError("fragment_extent must be positive")
        if len(self.levels) != 3:
            raise ValueError("exactly three levels are required")
        check_levels(self.levels)


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class FeatureStack:
    """Per-view fetched features ``(..., N, C)`` with visibility mask ``(..., N)``."""

    features: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class GruWeights:
    mlp_h: nn.LinearLayer
    mlp_f: nn.LinearLayer
    conv_z: nn.SparseConvLayer
    conv_r: nn.SparseConvLayer
    conv_h: nn.SparseConvLayer

    def __post_init__(self):
        ch = self.mlp_h.out_features
        if self.mlp_h.in_features != ch + 2:
            raise nn.DimensionMismatchError("MLP_H must map [H, S, S_W] (C_h + 2) to C_h")
        if self.mlp_f.out_features != ch:
            raise nn.DimensionMismatchError("MLP_F must output C_h channels")
        for conv in (self.conv_z, self.conv_r, self.conv_h):
            if conv.in_channels != 2 * ch or conv.out_channels != ch:
                raise nn.DimensionMismatchError("gate convolutions must map 2*C_h to C_h")


@dataclass(frozen=True)
class LevelNetwork:
    attention: nn.AttentionBlock
    gru: GruWeights
    tsdf_head: tuple
    occ_head: tuple


@dataclass(frozen=True)
class PipelineConfig:
    fragment: FragmentConfig = field(default_factory=FragmentConfig)
    allocation: AllocationConfig = field(default_factory=AllocationConfig)
    occ_threshold: float = 0.5
    trunc_multiplier: float = 3.0
    max_weight: float = 64.0
    fragment_origin: tuple | None = None

    @classmethod
    def from_run_config(cls, rc, fragment_origin=None) -> "PipelineConfig":
        return cls(
            fragment=FragmentConfig(rc.num_keyframes, rc.fragment_extent, default_levels(rc.finest_voxel_size)),
            allocation=AllocationConfig(rc.s, rc.max_depth),
            occ_threshold=rc.occ_threshold,
            trunc_multiplier=rc.trunc_multiplier,
            max_weight=rc.max_weight,
            fragment_origin=fragment_origin if fragment_origin is not None else rc.origin_value(),
        )

    def trunc(self, level: LevelConfig) -> float:
        return self.trunc_multiplier * level.voxel_size


# ---------------------------------------------------------------------------
# network parameter layout


def level_shapes(level: LevelConfig, head_hidden: int = 16) -> dict:
    C, Ch = level.feature_channels, level.hidden_channels
    p = f"level{level.level}"
    shapes = nn.attention_shapes(f"{p}.attn", C)
    shapes.update(nn.linear_shapes(f"{p}.gru.mlp_h", Ch, Ch + 2))
    shapes.update(nn.linear_shapes(f"{p}.gru.mlp_f", Ch, C + 2))
    for gate in ("z", "r", "h"):
        shapes.update(nn.conv_shapes(f"{p}.gru.conv_{gate}", 2 * Ch, Ch))
    for head in ("tsdf_head", "occ_head"):
        shapes.update(nn.linear_shapes(f"{p}.{head}.0", head_hidden, Ch))
        shapes.update(nn.linear_shapes(f"{p}.{head}.1", 1, head_hidden))
    return shapes


def network_shapes(levels, head_hidden: int = 16) -> dict:
    shapes = {}
    for level in levels:
        shapes.update(level_shapes(level, head_hidden))
    return shapes


def networks_from(bundle: nn.WeightBundle, levels, head_hidden: int = 16) -> list:
    nets = []
    for level in levels:
        C, Ch = level.feature_channels, level.hidden_channels
        p = f"level{level.level}"
        gru = GruWeights(
            mlp_h=nn.linear_from(bundle, f"{p}.gru.mlp_h", Ch, Ch + 2),
            mlp_f=nn.linear_from(bundle, f"{p}.gru.mlp_f", Ch, C + 2),
            conv_z=nn.conv_from(bundle, f"{p}.gru.conv_z", 2 * Ch, Ch),
            conv_r=nn.conv_from(bundle, f"{p}.gru.conv_r", 2 * Ch, Ch),
            conv_h=nn.conv_from(bundle, f"{p}.gru.conv_h", 2 * Ch, Ch),
        )
        heads = {}
        for head in ("tsdf_head", "occ_head"):
            heads[head] = (
                nn.linear_from(bundle, f"{p}.{head}.0", head_hidden, Ch),
                nn.linear_from(bundle, f"{p}.{head}.1", 1, head_hidden),
            )
        nets.append(LevelNetwork(nn.attention_from(bundle, f"{p}.attn", C), gru, heads["tsdf_head"], heads["occ_head"]))
    return nets


# closed-form occupancy head: logit = A*(C - |S|) + B*(min(S_W, 1) - 1)
# Observed voxels stay above 0.98 for any |S| <= 1: grazing views saturate
# the projective TSDF right next to silhouettes, so |S| alone must not prune.
_OCC_A, _OCC_C, _OCC_B = 4.0, 2.0, 100.0
_GATE_CLOSED = -20.0


def closed_form_weights(levels, seed: int = 0, head_hidden: int = 16) -> nn.WeightBundle:
    """Seeded weights with hand-set GRU input projection, update gate and heads.

    The hidden state is made to carry the fused MVS TSDF (channel 0) and
    weight (channel 1); the update gate is held shut so ``H_t = H'``. The
    TSDF head then returns ``tanh(S)`` and the occupancy head marks voxels
    that were observed at least once, slightly favouring small ``|S|``. Attention,
    ``MLP_F`` and the reset/candidate convolutions keep their seeded values.
    """
    bundle = nn.WeightBundle.seeded(network_shapes(levels, head_hidden), seed)
    t = bundle.tensors
    for level in levels:
        Ch = level.hidden_channels
        p = f"level{level.level}"
        w = np.zeros((Ch, Ch + 2), np.float32)
        w[0, Ch] = 1.0
        w[1, Ch + 1] = 1.0
        t[f"{p}.gru.mlp_h.weight"] = w
        t[f"{p}.gru.mlp_h.bias"] = np.zeros(Ch, np.float32)
        t[f"{p}.gru.conv_z.kernel"] = np.zeros_like(t[f"{p}.gru.conv_z.kernel"])
        t[f"{p}.gru.conv_z.bias"] = np.full(Ch, _GATE_CLOSED, np.float32)

        w0 = np.zeros((head_hidden, Ch), np.float32)
        w0[0, 0], w0[1, 0] = 1.0, -1.0
        t[f"{p}.tsdf_head.0.weight"] = w0
        t[f"{p}.tsdf_head.0.bias"] = np.zeros(head_hidden, np.float32)
        w1 = np.zeros((1, head_hidden), np.float32)
        w1[0, 0], w1[0, 1] = 1.0, -1.0
        t[f"{p}.tsdf_head.1.weight"] = w1
        t[f"{p}.tsdf_head.1.bias"] = np.zeros(1, np.float32)

        w0 = np.zeros((head_hidden, Ch), np.float32)
        b0 = np.zeros(head_hidden, np.float32)
        w0[0, 0], w0[1, 0], w0[2, 1], w0[3, 1], b0[3] = 1.0, -1.0, 1.0, 1.0, -1.0
        t[f"{p}.occ_head.0.weight"] = w0
        t[f"{p}.occ_head.0.bias"] = b0
        w1 = np.zeros((1, head_hidden), np.float32)
        w1[0, :4] = (-_OCC_A, -_OCC_A, _OCC_B, -_OCC_B)
        t[f"{p}.occ_head.1.weight"] = w1
        t[f"{p}.occ_head.1.bias"] = np.array([_OCC_A * _OCC_C - _OCC_B], np.float32)
    return bundle


# ---------------------------------------------------------------------------
# feature providers


def _downsample_nearest(depth, factor: float):
    H, W = depth.shape
    h, w = int(round(H * factor)), int(round(W * factor))
    rows = np.minimum(((np.arange(h) + 0.5) / factor).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) / factor).astype(np.int64), W - 1)
    return depth[np.ix_(rows, cols)]


def depth_features(depth, intrinsics, channels: int) -> np.ndarray:
    """Deterministic per-pixel encoding of a depth map: inverse depth, camera-frame
    normal, validity, then sinusoids of depth at doubling frequencies. (H, W, C).
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    K = intrinsics
    jj, ii = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    pts = np.stack([(ii - K.cx) / K.fx * depth, (jj - K.cy) / K.fy * depth, depth], axis=-1)
    dx = np.gradient(pts, axis=1)
    dy = np.gradient(pts, axis=0)
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)
    valid = depth > 0
    inv = np.where(valid, 1.0 / np.where(valid, depth, 1.0), 0.0)
    base = [inv, n[..., 0], n[..., 1], n[..., 2], valid.astype(np.float64)]
    k = 0
    while len(base) < channels:
        freq = 2.0 ** (k // 2)
        base.append(np.where(valid, np.sin(freq * depth) if k % 2 == 0 else np.cos(freq * depth), 0.0))
        k += 1
    out = np.stack(base[:channels], axis=-1)
    out[~valid] = 0.0
    return out


class DepthFeatureProvider:
    """Multi-scale feature maps encoded from a per-keyframe depth source.

    ``depth_source(kf)`` returns an (H, W) depth map at image resolution.
    """

    def __init__(self, depth_source, levels):
        self.depth_source = depth_source
        self.levels = tuple(levels)

    def __call__(self, kf: Keyframe) -> list:
        depth = np.asarray(self.depth_source(kf), dtype=np.float64)
        maps = []
        for level in self.levels:
            d = _downsample_nearest(depth, level.feature_scale)
            maps.append(depth_features(d, kf.intrinsics.scaled(level.feature_scale), level.feature_channels))
        return maps


def oracle_feature_provider(scene, levels, max_depth: float = 3.0) -> DepthFeatureProvider:
    """Features encoded from the exact scene depth."""
    from .synthetic import render_gt_depth

    return DepthFeatureProvider(lambda kf: render_gt_depth(scene, kf, max_depth).depth, levels)


# ---------------------------------------------------------------------------
# per-voxel stages


def bilinear_sample(fmap, uv) -> np.ndarray:
    """Sample an (h, w, C) map at continuous pixel coords (pixel centers at +0.5), border-clamped."""
    h, w = fmap.shape[:2]
    x = uv[..., 0] - 0.5
    y = uv[..., 1] - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    ax = (x - x0)[..., None]
    ay = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    ya, yb = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    top = fmap[ya, xa] * (1 - ax) + fmap[ya, xb] * ax
    bottom = fmap[yb, xa] * (1 - ax) + fmap[yb, xb] * ax
    return top * (1 - ay) + bottom * ay


def fetch_features(voxel_centers, keyframes, feature_maps, level: LevelConfig) -> FeatureStack:
    """Bilinearly fetch each view's feature at the projection of every voxel center.

    ``feature_maps[i]`` is keyframe ``i``'s map for this level. Views where the
    center projects outside the map or behind the camera give zero rows and a
    false mask entry.
    """
    centers = np.asarray(voxel_centers, dtype=np.float64)
    single = centers.ndim == 1
    centers = centers.reshape(-1, 3)
    N, C = len(keyframes), level.feature_channels
    feats = np.zeros((len(centers), N, C))
    mask = np.zeros((len(centers), N), dtype=bool)
    for i, (kf, fmap) in enumerate(zip(keyframes, feature_maps)):
        K = kf.intrinsics.scaled(level.feature_scale)
        if fmap.shape != (K.height, K.width, C):
            raise ValueError(f"feature map {fmap.shape} does not match ({K.height}, {K.width}, {C})")
        scaled = Keyframe(K, kf.pose, index=kf.index)
        uv, _, vis = project_points(centers, scaled)
        if vis.any():
            feats[vis, i] = bilinear_sample(fmap, uv[vis])
        mask[:, i] = vis
    if single:
        return FeatureStack(feats[0], mask[0])
    return FeatureStack(feats, mask)


def aggregate(stack: FeatureStack, block: nn.AttentionBlock) -> np.ndarray:
    """Attention over views, then the mean of the visible rows."""
    x, m = stack.features, stack.mask
    single = x.ndim == 2
    if single:
        x, m = x[None], m[None]
    out = np.zeros((x.shape[0], x.shape[2]))
    for start in range(0, len(x), _CHUNK):
        sl = slice(start, start + _CHUNK)
        att = nn.masked_self_attention(x[sl], m[sl], block)
        w = m[sl].astype(np.float64)
        out[sl] = (att * w[..., None]).sum(axis=1) / w.sum(axis=1, keepdims=True)
    return out[0] if single else out


def _depth_lookup(depth, uv):
    H, W = depth.shape
    col = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, W - 1)
    row = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, H - 1)
    return depth[row, col]


def _footprint_visible(uv, z, kf: Keyframe, voxel_size: float) -> np.ndarray:
    """True where the voxel's projected half-size box overlaps the image."""
    K = kf.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = 0.5 * voxel_size * K.fx / z
        mv = 0.5 * voxel_size * K.fy / z
    return (z > 0) & (uv[:, 0] > -mu) & (uv[:, 0] < K.width + mu) & (uv[:, 1] > -mv) & (uv[:, 1] < K.height + mv)


def tsdf_fuse(
    volume: SparseVolumeLevel,
    depth,
    kf: Keyframe,
    trunc: float,
    max_weight: float = 64.0,
    rows=None,
) -> int:
    """Integrate one depth map into the ``mvs_tsdf`` / ``mvs_weight`` channels.

    Uses the depth of the pixel containing each voxel's projection, clamped
    to the image border for voxels that straddle it. Voxels whose footprint
    misses the image, with invalid depth, or more than ``trunc`` behind the
    surface are left untouched. Returns the number of voxels updated.
    """
    if trunc <= 0:
        raise ValueError("trunc must be positive")
    if hasattr(depth, "depth"):
        depth = depth.depth
    depth = np.asarray(depth, dtype=np.float64)
    rows = np.arange(len(volume)) if rows is None else np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return 0
    centers = volume.centers_of(volume.coords[rows]) if len(rows) != len(volume) else volume.centers()
    uv, z, _ = project_points(centers, kf)
    vis = _footprint_visible(uv, z, kf, volume.voxel_size)
    d = np.zeros(len(rows))
    d[vis] = _depth_lookup(depth, uv[vis])
    sdf = d - z
    upd = vis & (d > 0) & (sdf > -trunc)
    r = rows[upd]
    obs = np.clip(sdf[upd] / trunc, -1.0, 1.0)
    W = volume.mvs_weight[r]
    volume.mvs_tsdf[r] = (W * volume.mvs_tsdf[r] + obs) / (W + 1.0)
    volume.mvs_weight[r] = np.minimum(W + 1.0, max_weight)
    return int(upd.sum())


def gru_fuse(volume: SparseVolumeLevel, rows, fragment_features, weights: GruWeights, return_gates: bool = False):
    """GRU update of the hidden state at ``rows`` from this fragment's features.

    Gate convolutions run over the support formed by ``rows``. Writes and
    returns the new hidden states.
    """
    if weights is None:
        raise ValueError("GRU weights are required")
    rows = np.asarray(rows, dtype=np.int64)
    F = np.asarray(fragment_features, dtype=np.float64).reshape(len(rows), -1)
    S = volume.mvs_tsdf[rows, None]
    SW = volume.mvs_weight[rows, None]
    H = volume.hidden[rows]
    h1 = weights.mlp_h(np.concatenate([H, S, SW], axis=1))
    f1 = weights.mlp_f(np.concatenate([F, S, SW], axis=1))
    nbr = nn.neighbor_table(volume.coords[rows])
    x = np.concatenate([h1, f1], axis=1)
    z = nn.sigmoid(nn.sparse_conv3(volume.coords[rows], x, weights.conv_z, nbr))
    r = nn.sigmoid(nn.sparse_conv3(volume.coords[rows], x, weights.conv_r, nbr))
    cand = np.tanh(nn.sparse_conv3(volume.coords[rows], np.concatenate([r * h1, f1], axis=1), weights.conv_h, nbr))
    h_new = (1.0 - z) * h1 + z * cand
    volume.hidden[rows] = h_new
    if return_gates:
        return h_new, {"h_prime": h1, "f_prime": f1, "z": z, "r": r, "candidate": cand}
    return h_new


def predict_heads(volume: SparseVolumeLevel, tsdf_head, occ_head, rows=None):
    """``pred_tsdf = tanh(head(H))`` and ``pred_occ = sigmoid(head(H))``."""
    rows = np.arange(len(volume)) if rows is None else np.asarray(rows, dtype=np.int64)
    H = volume.hidden[rows]
    s = np.tanh(nn.mlp(tsdf_head, H)[:, 0])
    o = nn.sigmoid(nn.mlp(occ_head, H)[:, 0])
    volume.pred_tsdf[rows] = s
    volume.pred_occ[rows] = o
    return s, o


def log_transform(x):
    """``sign(x) * log(1 + |x|)``; odd and total, equal to the usual form on [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.log1p(np.abs(x))
    return float(out) if out.ndim == 0 else out


def gt_occupancy(gt_tsdf) -> np.ndarray:
    return (np.abs(np.asarray(gt_tsdf)) < 1.0).astype(np.float64)


def binary_cross_entropy(p, target):
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(target, dtype=np.float64)
    return -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))


def recon_loss(pred_tsdf, pred_occ, gt_tsdf, gt_occ, valid=None, cfg: LossConfig | None = None) -> float:
    """Mean over valid voxels of ``l1*|logt(S_pred) - logt(S)| + l2*BCE(O_pred, O)``."""
    cfg = cfg or LossConfig()
    arrays = [np.asarray(a, dtype=np.float64).reshape(-1) for a in (pred_tsdf, pred_occ, gt_tsdf, gt_occ)]
    if len({a.size for a in arrays}) != 1:
        raise ValueError("prediction and ground-truth arrays differ in length")
    ps, po, gs, go = arrays
    valid = np.ones(ps.size, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(-1)
    if not valid.any():
        raise ValueError("no voxels with valid ground truth")
    l1 = np.abs(log_transform(ps[valid]) - log_transform(gs[valid]))
    bce = binary_cross_entropy(po[valid], go[valid])
    return float(np.mean(cfg.lambda1 * l1 + cfg.lambda2 * bce))


# ---------------------------------------------------------------------------
# fragment driver


@dataclass
class FragmentResult:
    bounds: list = field(default_factory=list)
    allocated: list = field(default_factory=list)
    dense: list = field(default_factory=list)
    fused: list = field(default_factory=list)
    fragment_origin: np.ndarray | None = None

    @property
    def reductions(self) -> list:
        return [100.0 * (1.0 - a / d) if d else 0.0 for a, d in zip(self.allocated, self.dense)]


def auto_fragment_origin(keyframes, priors, extent: float, snap: float, max_depth: float = 3.0) -> np.ndarray:
    """Cube corner so the cube is centered on the mean back-projected prior point, snapped to ``snap``."""
    from .geometry import pixel_centers, pixel_rays

    pts = []
    for kf, prior in zip(keyframes, priors):
        d = prior.depth
        valid = (d > 0) & (d <= max_depth)
        if not valid.any():
            continue
        uv = pixel_centers(kf.intrinsics.width, kf.intrinsics.height)[valid]
        dirs, dz = pixel_rays(uv, kf)
        pts.append(kf.pose.center + dirs * (d[valid] / dz)[:, None])
    if pts:
        center = np.concatenate(pts).mean(axis=0)
    else:
        center = np.mean([kf.pose.center for kf in keyframes], axis=0)
    return np.floor((center - extent / 2.0) / snap) * snap


def run_fragment(
    keyframes,
    priors,
    feature_maps,
    global_volumes,
    networks,
    config: PipelineConfig | None = None,
    compute_dense: bool = False,
) -> FragmentResult:
    """Reconstruct one fragment coarse-to-fine and fuse it into ``global_volumes``.

    Per level: allocate from the priors inside the fragment cube, drop cells
    whose coarse parent is unoccupied, fuse MVS depths into (S, S_W), fetch
    and aggregate features, GRU-fuse into the global hidden state, predict
    TSDF/occupancy, then gate the next finer global level.

    ``feature_maps[k][l]`` is keyframe ``k``'s map for level ``l``.
    """
    config = config or PipelineConfig()
    levels = config.fragment.levels
    if len(keyframes) != config.fragment.num_keyframes:
        raise ValueError(f"expected {config.fragment.num_keyframes} keyframes, got {len(keyframes)}")
    if not (len(priors) == len(feature_maps) == len(keyframes)):
        raise ValueError("keyframes, priors and feature maps must align")

    origin = config.fragment_origin
    if origin is None:
        origin = auto_fragment_origin(
            keyframes, priors, config.fragment.fragment_extent, levels[0].voxel_size, config.allocation.max_depth
        )
    result = FragmentResult(fragment_origin=np.asarray(origin, dtype=np.float64))

    for li, level in enumerate(levels):
        glob = global_volumes[li]
        bounds = fragment_bounds(origin, config.fragment.fragment_extent, level, glob.origin)
        frag = SparseVolumeLevel(level, glob.origin, bounds)
        for kf, prior in zip(keyframes, priors):
            allocate_from_prior(frag, prior, kf, config.allocation)
        if li > 0 and len(frag):
            keep = gate_mask(global_volumes[li - 1], frag.coords, config.occ_threshold)
            frag.remove(~keep)
        result.bounds.append(bounds)
        result.allocated.append(len(frag))
        if compute_dense:
            result.dense.append(len(frustum_dense_coords(frag, keyframes, config.allocation.max_depth, bounds)))
        if len(frag) == 0:
            result.fused.append(0)
            if li + 1 < len(levels):
                sparsify_to_finer(glob, global_volumes[li + 1], config.occ_threshold)
            continue

        glob.insert(frag.coords)
        rows = glob.lookup(frag.coords)
        trunc = config.trunc(level)
        for kf, prior in zip(keyframes, priors):
            tsdf_fuse(glob, prior.depth, kf, trunc, config.max_weight, rows)

        net = networks[li]
        stack = fetch_features(glob.centers_of(frag.coords), keyframes, [fm[li] for fm in feature_maps], level)
        seen = stack.mask.any(axis=1)
        F = np.zeros((len(rows), level.feature_channels))
        if seen.any():
            F[seen] = aggregate(FeatureStack(stack.features[seen], stack.mask[seen]), net.attention)
        glob.feature[rows] = F
        gru_fuse(glob, rows, F, net.gru)
        predict_heads(glob, net.tsdf_head, net.occ_head, rows)
        result.fused.append(len(rows))
        logger.debug("level %d: %d voxels fused (%d unseen)", li, len(rows), int((~seen).sum()))

        if li + 1 < len(levels):
            sparsify_to_finer(glob, global_volumes[li + 1], config.occ_threshold)
    return result


def empty_global_volumes(levels, origin=(0.0, 0.0, 0.0)) -> list:
    return [SparseVolumeLevel(level, origin) for level in levels]
