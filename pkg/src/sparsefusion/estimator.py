"""Estimator-style facade over the fragment pipeline.

``fit`` consumes ``(Keyframe, DepthPrior)`` pairs and builds the global
volumes; ``partial_fit`` fuses further fragments into them. ``predict``
renders depth maps for query keyframes, ``transform`` samples the predicted
TSDF at world points, and ``score`` returns the F-score of the extracted
mesh against reference surface points.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import RunConfig
from .fusion import DepthFeatureProvider, PipelineConfig, empty_global_volumes, run_fragment
from .meshing import TriangleMesh, marching_cubes
from .metrics import metrics_3d, render_depth, sample_mesh, trilinear_tsdf
from .pipeline import Reconstruction, fragment_blocks, load_networks
from .sparse_volume import default_levels
from .validation import check_frames, check_mesh, check_points


class SparseFusionReconstructor(BaseEstimator):
    def __init__(
        self,
        num_keyframes: int = 9,
        fragment_extent: float = 3.84,
        fragment_origin: str = "auto",
        finest_voxel_size: float = 0.04,
        s: float = 2.0,
        max_depth: float = 3.0,
        occ_threshold: float = 0.5,
        trunc_multiplier: float = 3.0,
        max_weight: float = 64.0,
        weights: str = "closed-form",
        head_hidden: int = 16,
        sample_resolution: float = 0.02,
        distance_threshold: float = 0.05,
        seed: int = 0,
        feature_source=None,
    ):
        self.num_keyframes = num_keyframes
        self.fragment_extent = fragment_extent
        self.fragment_origin = fragment_origin
        self.finest_voxel_size = finest_voxel_size
        self.s = s
        self.max_depth = max_depth
        self.occ_threshold = occ_threshold
        self.trunc_multiplier = trunc_multiplier
        self.max_weight = max_weight
        self.weights = weights
        self.head_hidden = head_hidden
        self.sample_resolution = sample_resolution
        self.distance_threshold = distance_threshold
        self.seed = seed
        self.feature_source = feature_source

    def _run_config(self) -> RunConfig:
        params = {k: v for k, v in self.get_params().items() if k != "feature_source"}
        return RunConfig(**params)

    def _setup(self):
        self.config_ = self._run_config()
        self.levels_ = default_levels(self.finest_voxel_size)
        self.networks_ = load_networks(self.config_, self.levels_)
        self.volumes_ = empty_global_volumes(self.levels_)
        self.fragments_ = []
        self.mesh_ = None

    def _features(self, kfs, priors):
        if self.feature_source is not None:
            return [self.feature_source(kf) for kf in kfs]
        by_index = {id(kf): p for kf, p in zip(kfs, priors)}
        provider = DepthFeatureProvider(lambda kf: by_index[id(kf)].depth, self.levels_)
        return [provider(kf) for kf in kfs]

    def _fuse(self, kfs, priors):
        cfg = PipelineConfig.from_run_config(self.config_)
        result = run_fragment(kfs, priors, self._features(kfs, priors), self.volumes_, self.networks_, cfg, True)
        self.fragments_.append(result)
        self.mesh_ = None

    def fit(self, X, y=None):
        """Reconstruct from scratch; ``X`` is a sequence of ``(Keyframe, DepthPrior)``."""
        kfs, priors = check_frames(X)
        self._setup()
        for block in fragment_blocks(len(kfs), self.num_keyframes):
            self._fuse([kfs[i] for i in block], [priors[i] for i in block])
        return self

    def partial_fit(self, X, y=None):
        """Fuse exactly one more fragment of ``num_keyframes`` pairs."""
        kfs, priors = check_frames(X)
        if len(kfs) != self.num_keyframes:
            raise ValueError(f"partial_fit takes one fragment of {self.num_keyframes} frames, got {len(kfs)}")
        if not hasattr(self, "volumes_"):
            self._setup()
        self._fuse(kfs, priors)
        return self

    def _check_fitted(self):
        if not getattr(self, "fragments_", None):
            raise NotFittedError("call fit or partial_fit first")

    @property
    def mesh(self) -> TriangleMesh:
        self._check_fitted()
        if self.mesh_ is None:
            self.mesh_ = marching_cubes(self.volumes_[-1], 0.0, min_occupancy=self.occ_threshold)
        return self.mesh_

    def predict(self, X) -> np.ndarray:
        """Depth maps (n, H, W) of the extracted mesh seen from keyframes ``X``."""
        self._check_fitted()
        return np.stack([render_depth(self.mesh, kf, self.max_depth) for kf in X])

    def transform(self, X) -> np.ndarray:
        """Predicted TSDF at world points ``X`` (finest level; NaN outside the allocation)."""
        self._check_fitted()
        return trilinear_tsdf(self.volumes_[-1], check_points(X, "X"))

    def score(self, X, y=None) -> float:
        """F-score of the extracted mesh against reference points or a reference mesh ``X``."""
        self._check_fitted()
        if isinstance(X, TriangleMesh):
            X = sample_mesh(check_mesh(X), self.sample_resolution, self.seed)
        gt = check_points(X, "X")
        pred = sample_mesh(self.mesh, self.sample_resolution, self.seed)
        if len(pred) == 0:
            return 0.0
        return metrics_3d(pred, gt, self.distance_threshold, self.sample_resolution, self.seed).fscore

    @property
    def reductions_(self) -> list:
        self._check_fitted()
        return Reconstruction(self.volumes_, self.fragments_).reductions()
