"""Sparse, uncertainty-guided feature-volume fusion for incremental dense reconstruction."""

from .config import ConfigError, RunConfig, load_config, parse_config
from .depth_prior import DepthPrior, GroundTruthDepth, propagate_uncertainty, synthetic_prior
from .estimator import SparseFusionReconstructor
from .fusion import PipelineConfig, run_fragment
from .geometry import Intrinsics, Keyframe, Pose
from .meshing import TriangleMesh, export_mesh, import_mesh, marching_cubes
from .metrics import Metrics2D, Metrics3D, metrics_2d, metrics_3d, render_depth, sample_mesh
from .pipeline import reconstruct
from .sparse_volume import LevelConfig, SparseVolumeLevel, default_levels
from .synthetic import AnalyticScene, Box, Plane, Sphere, default_scene

__version__ = "0.1.0"

__all__ = [
    "AnalyticScene",
    "Box",
    "ConfigError",
    "DepthPrior",
    "GroundTruthDepth",
    "Intrinsics",
    "Keyframe",
    "LevelConfig",
    "Metrics2D",
    "Metrics3D",
    "PipelineConfig",
    "Plane",
    "Pose",
    "RunConfig",
    "SparseFusionReconstructor",
    "SparseVolumeLevel",
    "Sphere",
    "TriangleMesh",
    "default_levels",
    "default_scene",
    "export_mesh",
    "import_mesh",
    "load_config",
    "marching_cubes",
    "metrics_2d",
    "metrics_3d",
    "parse_config",
    "propagate_uncertainty",
    "reconstruct",
    "render_depth",
    "run_fragment",
    "sample_mesh",
    "synthetic_prior",
]
