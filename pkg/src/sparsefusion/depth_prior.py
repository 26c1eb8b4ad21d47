"""Depth priors: per-pixel depth with uncertainty, the MVS losses, and providers.

A depth of 0 marks an invalid pixel everywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_REL_TOL = 1e-9


def propagate_uncertainty(depth, inv_B) -> np.ndarray:
    """Linear propagation of inverse-depth uncertainty to depth: ``C = D**2 * B``.

    Zero where ``depth`` is invalid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    inv_B = np.asarray(inv_B, dtype=np.float64)
    if depth.shape != inv_B.shape:
        raise ValueError(f"shape mismatch {depth.shape} vs {inv_B.shape}")
    return np.where(depth > 0, depth * depth * inv_B, 0.0)


@dataclass(frozen=True)
class GroundTruthDepth:
    depth: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        m = np.asarray(self.valid_mask, dtype=bool)
        if d.shape != m.shape:
            raise ValueError("depth and valid_mask shapes differ")
        if np.any(d[m] <= 0):
            raise ValueError("ground-truth depth must be positive on valid pixels")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid_mask", m)

    @classmethod
    def from_depth(cls, depth) -> "GroundTruthDepth":
        d = np.asarray(depth, dtype=np.float64)
        return cls(d, d > 0)

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True)
class DepthPrior:
    """Predicted depth ``D``, inverse-depth uncertainty ``B`` and depth uncertainty ``C``."""

    depth: np.ndarray
    inv_depth_uncertainty: np.ndarray
    depth_uncertainty: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        b = np.asarray(self.inv_depth_uncertainty, dtype=np.float64)
        c = np.asarray(self.depth_uncertainty, dtype=np.float64)
        if not (d.shape == b.shape == c.shape):
            raise ValueError("depth, B and C maps must share a shape")
        valid = d > 0
        if np.any(~(b[valid] > 0)):
            raise ValueError("inverse-depth uncertainty must be > 0 on valid pixels")
        expected = d[valid] ** 2 * b[valid]
        if np.any(np.abs(c[valid] - expected) > _REL_TOL * np.maximum(np.abs(expected), 1e-300)):
            raise ValueError("depth uncertainty does not equal depth**2 * B")
        for a in (d, b, c):
            a.setflags(write=False)
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "inv_depth_uncertainty", b)
        object.__setattr__(self, "depth_uncertainty", c)

    @classmethod
    def from_inverse_uncertainty(cls, depth, inv_B) -> "DepthPrior":
        depth = np.asarray(depth, dtype=np.float64)
        inv_B = np.where(depth > 0, np.asarray(inv_B, dtype=np.float64), 0.0)
        return cls(depth, inv_B, propagate_uncertainty(depth, inv_B))

    @classmethod
    def from_depth_uncertainty(cls, depth, C) -> "DepthPrior":
        """Build from a depth-space uncertainty map; ``B = C / D**2``."""
        depth = np.asarray(depth, dtype=np.float64)
        C = np.asarray(C, dtype=np.float64)
        valid = depth > 0
        B = np.zeros_like(depth)
        B[valid] = C[valid] / depth[valid] ** 2
        return cls.from_inverse_uncertainty(depth, B)

    @property
    def shape(self):
        return self.depth.shape

    @property
    def inv_depth(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.depth > 0, 1.0 / np.where(self.depth > 0, self.depth, 1.0), 0.0)


def _valid_inverse_gt(pred_shape, gt: GroundTruthDepth):
    if tuple(pred_shape) != gt.shape:
        raise ValueError(f"prediction shape {tuple(pred_shape)} does not match ground truth {gt.shape}")
    omega = gt.valid_mask
    if not omega.any():
        raise ValueError("no valid ground-truth pixels")
    return omega, 1.0 / gt.depth[omega]


def laplacian_mle_loss(pred_inv_depth, pred_B, gt: GroundTruthDepth) -> float:
    """Laplacian negative log-likelihood on inverse depth, averaged over valid pixels:
    ``mean(|D^-1_pred - D^-1_gt| / B + log B)``.
    """
    pred_inv_depth = np.asarray(pred_inv_depth, dtype=np.float64)
    pred_B = np.asarray(pred_B, dtype=np.float64)
    if pred_B.shape != pred_inv_depth.shape:
        raise ValueError("pred_inv_depth and pred_B shapes differ")
    omega, gt_inv = _valid_inverse_gt(pred_inv_depth.shape, gt)
    b = pred_B[omega]
    if np.any(~(b > 0)):
        raise ValueError("B must be positive on every valid pixel")
    return float(np.mean(np.abs(pred_inv_depth[omega] - gt_inv) / b + np.log(b)))


def l1_inv_depth_loss(pred_inv_depth, gt: GroundTruthDepth) -> float:
    pred_inv_depth = np.asarray(pred_inv_depth, dtype=np.float64)
    omega, gt_inv = _valid_inverse_gt(pred_inv_depth.shape, gt)
    return float(np.mean(np.abs(pred_inv_depth[omega] - gt_inv)))


def synthetic_prior(
    scene,
    kf,
    noise_sigma: float = 0.0,
    seed: int = 0,
    *,
    max_depth: float = 3.0,
    min_uncertainty: float = 1e-3,
    coverage_scale: float = 1.25,
):
    """Depth prior for ``kf`` derived from the exact scene depth.

    Predicted depth is the traced depth plus seeded Gaussian noise, clamped
    positive. The depth uncertainty is ``max(coverage_scale * sigma,
    min_uncertainty)``; with the default scale, ``|D_pred - D| <= 2C`` holds
    for about 98.8% of pixels.

    Returns ``(DepthPrior, GroundTruthDepth)``.
    """
    from .synthetic import render_gt_depth

    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    gt = render_gt_depth(scene, kf, max_depth=max_depth)
    valid = gt.valid_mask
    depth = gt.depth.copy()
    if noise_sigma > 0:
        rng = np.random.default_rng([int(seed), int(kf.index)])
        noise = rng.normal(0.0, noise_sigma, size=depth.shape)
        depth[valid] = np.maximum(depth[valid] + noise[valid], 1e-3)
    C = np.where(valid, max(coverage_scale * noise_sigma, min_uncertainty), 0.0)
    return DepthPrior.from_depth_uncertainty(depth, C), gt


class SyntheticPriorProvider:
    """Stand-in for the MVS network: noisy priors traced from an analytic scene."""

    def __init__(self, scene, noise_sigma=0.0, seed=0, max_depth=3.0, min_uncertainty=1e-3):
        self.scene = scene
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.max_depth = max_depth
        self.min_uncertainty = min_uncertainty

    def __call__(self, kf) -> DepthPrior:
        prior, _ = synthetic_prior(
            self.scene,
            kf,
            self.noise_sigma,
            self.seed,
            max_depth=self.max_depth,
            min_uncertainty=self.min_uncertainty,
        )
        return prior


class FileDepthProvider:
    """Reads depth / inverse-depth-uncertainty maps written offline, keyed by frame index."""

    def __init__(self, root):
        from pathlib import Path

        self.root = Path(root)

    def __call__(self, kf) -> DepthPrior:
        from .fileio import prior_paths, read_depth_map

        depth_path, b_path = prior_paths(self.root, kf.index)
        depth = read_depth_map(depth_path)
        B = read_depth_map(b_path)
        if depth.shape != (kf.intrinsics.height, kf.intrinsics.width):
            raise ValueError(f"frame {kf.index}: prior size {depth.shape} does not match intrinsics")
        return DepthPrior.from_inverse_uncertainty(depth.astype(np.float64), B.astype(np.float64))
