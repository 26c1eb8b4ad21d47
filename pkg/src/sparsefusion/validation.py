"""Input validation helpers shared by the estimator facade and the CLI."""

from __future__ import annotations

import numpy as np

from .depth_prior import DepthPrior
from .geometry import Keyframe
from .meshing import TriangleMesh


def check_points(points, name: str = "points", allow_empty: bool = False) -> np.ndarray:
    """Return ``points`` as a finite float64 (N, 3) array."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1 and p.size == 3:
        p = p.reshape(1, 3)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {p.shape}")
    if not allow_empty and len(p) == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} contains non-finite values")
    return p


def check_depth_map(depth, shape=None, name: str = "depth") -> np.ndarray:
    """Return a 2-D float64 depth map, optionally checking its (H, W) shape."""
    d = np.asarray(depth.depth if hasattr(depth, "depth") else depth, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {d.shape}")
    if shape is not None and d.shape != tuple(shape):
        raise ValueError(f"{name} has shape {d.shape}, expected {tuple(shape)}")
    if np.any(np.isnan(d)):
        raise ValueError(f"{name} contains NaN")
    return d


def check_frames(frames) -> tuple[list, list]:
    """Split a sequence of ``(Keyframe, DepthPrior)`` pairs, checking types and sizes."""
    kfs, priors = [], []
    for i, item in enumerate(frames):
        try:
            kf, prior = item
        except (TypeError, ValueError):
            raise ValueError(f"frame {i}: expected a (Keyframe, DepthPrior) pair") from None
        if not isinstance(kf, Keyframe) or not isinstance(prior, DepthPrior):
            raise TypeError(
                f"frame {i}: expected (Keyframe, DepthPrior), got ({type(kf).__name__}, {type(prior).__name__})"
            )
        shape = (kf.intrinsics.height, kf.intrinsics.width)
        if prior.shape != shape:
            raise ValueError(f"frame {i}: prior shape {prior.shape} does not match intrinsics {shape}")
        kfs.append(kf)
        priors.append(prior)
    if not kfs:
        raise ValueError("no frames given")
    return kfs, priors


def check_mesh(mesh) -> TriangleMesh:
    if not isinstance(mesh, TriangleMesh):
        raise TypeError(f"expected a TriangleMesh, got {type(mesh).__name__}")
    return mesh
