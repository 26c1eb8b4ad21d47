"""Run-level orchestration: fragments over a keyframe sequence, meshing and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .config import ConfigError, RunConfig
from .depth_prior import synthetic_prior
from .fusion import (
    DepthFeatureProvider,
    FragmentResult,
    PipelineConfig,
    closed_form_weights,
    empty_global_volumes,
    network_shapes,
    networks_from,
    oracle_feature_provider,
    run_fragment,
)
from .geometry import Intrinsics, Keyframe, project_points
from .meshing import TriangleMesh, marching_cubes
from .metrics import Metrics2D, Metrics3D, mean_metrics_2d, metrics_2d, metrics_3d, render_depth, sample_mesh
from .sparse_volume import LevelConfig, default_levels, stats
from .synthetic import AnalyticScene, gt_tsdf_volume, orbit_trajectory, render_gt_depth

logger = logging.getLogger(__name__)


def load_networks(rc: RunConfig, levels=None) -> list:
    """Per-level networks from ``rc.weights``: ``closed-form``, ``seeded`` or a weight-file path."""
    levels = levels or default_levels(rc.finest_voxel_size)
    shapes = network_shapes(levels, rc.head_hidden)
    if rc.weights == "closed-form":
        bundle = closed_form_weights(levels, rc.seed, rc.head_hidden)
    elif rc.weights == "seeded":
        bundle = nn.WeightBundle.seeded(shapes, rc.seed)
    else:
        bundle = nn.load_weights(rc.weights, required=shapes)
    return networks_from(bundle, levels, rc.head_hidden)


def fragment_blocks(count: int, size: int) -> list:
    """Consecutive index blocks of ``size``; a short tail is covered by the last ``size`` frames."""
    if count < size:
        raise ValueError(f"need at least {size} keyframes for one fragment, got {count}")
    starts = list(range(0, count - size + 1, size))
    if starts[-1] + size < count:
        starts.append(count - size)
    return [list(range(s, s + size)) for s in starts]


def synthetic_keyframes(rc: RunConfig) -> list:
    K = Intrinsics(
        rc.focal_length, rc.focal_length, rc.image_width / 2, rc.image_height / 2, rc.image_width, rc.image_height
    )
    traj = orbit_trajectory(rc.orbit_target, rc.orbit_radius, rc.num_frames, rc.orbit_elevation)
    return [Keyframe(K, pose, index=i) for i, pose in enumerate(traj)]


def synthetic_inputs(scene: AnalyticScene, rc: RunConfig):
    """Keyframes, priors and ground-truth depths (to ``rc.max_depth``) for a synthetic run."""
    kfs = synthetic_keyframes(rc)
    priors, gts = [], []
    for kf in kfs:
        prior, _ = synthetic_prior(
            scene, kf, rc.noise_sigma, rc.seed, max_depth=rc.prior_range, min_uncertainty=rc.prior_min_uncertainty
        )
        priors.append(prior)
        gts.append(render_gt_depth(scene, kf, rc.max_depth))
    return kfs, priors, gts


def feature_provider(rc: RunConfig, levels, priors_by_index: dict, scene: AnalyticScene | None = None):
    """Feature maps from the exact scene depth when a scene is given, else from the prior depth."""
    if scene is not None:
        return oracle_feature_provider(scene, levels, rc.prior_range)
    return DepthFeatureProvider(lambda kf: priors_by_index[kf.index].depth, levels)


@dataclass
class Reconstruction:
    volumes: list
    fragments: list = field(default_factory=list)
    mesh: TriangleMesh | None = None

    def level_stats(self) -> list:
        return [stats(v) for v in self.volumes]

    def reductions(self) -> list:
        """Per level: percentage fewer cells than frustum-dense allocation, summed over fragments."""
        out = []
        for li in range(len(self.volumes)):
            a = sum(f.allocated[li] for f in self.fragments)
            d = sum(f.dense[li] for f in self.fragments if f.dense)
            out.append(100.0 * (1.0 - a / d) if d else 0.0)
        return out


def reconstruct(keyframes, priors, rc: RunConfig, features=None, networks=None, compute_dense: bool = True):
    """Fuse every fragment of ``keyframes`` into fresh global volumes and mesh the finest level."""
    levels = default_levels(rc.finest_voxel_size)
    if len(priors) != len(keyframes):
        raise ValueError("one prior per keyframe is required")
    networks = networks or load_networks(rc, levels)
    if features is None:
        features = feature_provider(rc, levels, {kf.index: p for kf, p in zip(keyframes, priors)})
    cfg = PipelineConfig.from_run_config(rc)
    volumes = empty_global_volumes(levels)
    rec = Reconstruction(volumes)
    for block in fragment_blocks(len(keyframes), rc.num_keyframes):
        kfs = [keyframes[i] for i in block]
        result: FragmentResult = run_fragment(
            kfs, [priors[i] for i in block], [features(kf) for kf in kfs], volumes, networks, cfg, compute_dense
        )
        rec.fragments.append(result)
        logger.info("fragment %s: allocated %s", block, result.allocated)
    rec.mesh = marching_cubes(volumes[-1], 0.0, min_occupancy=rc.occ_threshold)
    return rec


# ---------------------------------------------------------------------------
# evaluation against an analytic scene


def fragment_box(rec: Reconstruction, level: int = -1):
    """World-space bounding box covering every fragment at ``level``."""
    vol = rec.volumes[level]
    lo = np.min([f.bounds[level][0] for f in rec.fragments], axis=0)
    hi = np.max([f.bounds[level][1] for f in rec.fragments], axis=0)
    return vol.origin + lo * vol.voxel_size, vol.origin + hi * vol.voxel_size


def reference_mesh(scene: AnalyticScene, bounds, voxel_size: float) -> TriangleMesh:
    """Ground-truth surface: marching cubes of the exact SDF at ``voxel_size``."""
    level = LevelConfig(2, voxel_size, 1)
    return marching_cubes(gt_tsdf_volume(scene, level, bounds, 3.0 * voxel_size))


def observed_mask(points, keyframes, depth_maps, tolerance: float, max_depth: float) -> np.ndarray:
    """Points seen by at least one keyframe: within ``max_depth`` and within
    ``tolerance`` of the depth stored at the pixel they project into."""
    points = np.asarray(points, dtype=np.float64)
    seen = np.zeros(len(points), dtype=bool)
    for kf, depth in zip(keyframes, depth_maps):
        D = depth.depth if hasattr(depth, "depth") else np.asarray(depth)
        uv, z, vis = project_points(points, kf)
        px = np.clip(np.floor(uv[:, 0]), 0, kf.intrinsics.width - 1).astype(np.int64)
        py = np.clip(np.floor(uv[:, 1]), 0, kf.intrinsics.height - 1).astype(np.int64)
        d = D[py, px]
        seen |= vis & (d > 0) & (z <= max_depth) & (np.abs(d - z) < tolerance)
    return seen


def evaluate_3d(mesh: TriangleMesh, scene: AnalyticScene, keyframes, gt_depths, bounds, rc: RunConfig) -> Metrics3D:
    """Mesh metrics against the observed part of the analytic surface inside ``bounds``."""
    ref = reference_mesh(scene, bounds, rc.finest_voxel_size / 2)
    gt_pts = sample_mesh(ref, rc.sample_resolution, rc.seed)
    gt_pts = gt_pts[observed_mask(gt_pts, keyframes, gt_depths, rc.sample_resolution, rc.max_depth)]
    pred_pts = sample_mesh(mesh, rc.sample_resolution, rc.seed)
    if len(pred_pts) == 0:
        return Metrics3D(np.inf, np.inf, 0.0, 0.0, 0.0, rc.sample_resolution, rc.distance_threshold, rc.seed)
    return metrics_3d(pred_pts, gt_pts, rc.distance_threshold, rc.sample_resolution, rc.seed)


def evaluate_2d(source, keyframes, gt_depths, rc: RunConfig, trunc: float | None = None) -> Metrics2D:
    """Mean per-view depth metrics of ``source`` (mesh or volume) rendered at every keyframe."""
    per_view = []
    for kf, gt in zip(keyframes, gt_depths):
        pred = render_depth(source, kf, rc.max_depth, trunc)
        D = gt.depth if hasattr(gt, "depth") else gt
        try:
            per_view.append(metrics_2d(pred, D, rc.depth_truncation))
        except ValueError:
            logger.warning("view %d has no jointly valid pixels; skipped", kf.index)
    return mean_metrics_2d(per_view)


def check_run_config(rc: RunConfig) -> None:
    """Cross-field checks that need more than one module."""
    if rc.weights not in ("closed-form", "seeded") and not Path(rc.weights).exists():
        raise ConfigError(f"weights file {rc.weights!r} does not exist")
