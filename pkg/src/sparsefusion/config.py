"""Run configuration: one flat set of parameters, stored as ``key = value`` text."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # fragment / levels
    num_keyframes: int = 9
    fragment_extent: float = 3.84
    fragment_origin: str = "auto"
    finest_voxel_size: float = 0.04
    # allocation
    s: float = 2.0
    max_depth: float = 3.0
    # fusion
    occ_threshold: float = 0.5
    trunc_multiplier: float = 3.0
    max_weight: float = 64.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    head_hidden: int = 16
    weights: str = "closed-form"
    # evaluation
    sample_resolution: float = 0.02
    distance_threshold: float = 0.05
    depth_truncation: float = 10.0
    # synthetic data
    image_width: int = 160
    image_height: int = 120
    focal_length: float = 120.0
    num_frames: int = 9
    orbit_radius: float = 2.2
    orbit_elevation_deg: float = 30.0
    orbit_target_x: float = 0.0
    orbit_target_y: float = 0.0
    orbit_target_z: float = 0.5
    noise_sigma: float = 0.0
    prior_min_uncertainty: float = 0.06
    prior_range: float = 10.0
    # reproducibility
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "float" and isinstance(v, int) and not isinstance(v, bool):
                object.__setattr__(self, f.name, float(v))
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.num_keyframes >= 2, "num_keyframes must be >= 2"),
            (self.fragment_extent > 0, "fragment_extent must be > 0"),
            (self.finest_voxel_size > 0, "finest_voxel_size must be > 0"),
            (self.s >= 0, "s must be >= 0"),
            (self.max_depth > 0, "max_depth must be > 0"),
            (0.0 <= self.occ_threshold <= 1.0, "occ_threshold must be in [0, 1]"),
            (self.trunc_multiplier > 0, "trunc_multiplier must be > 0"),
            (self.max_weight >= 1, "max_weight must be >= 1"),
            (self.lambda1 >= 0 and self.lambda2 >= 0, "lambda1 and lambda2 must be >= 0"),
            (self.head_hidden >= 4, "head_hidden must be >= 4"),
            (self.sample_resolution > 0, "sample_resolution must be > 0"),
            (self.distance_threshold > 0, "distance_threshold must be > 0"),
            (self.depth_truncation > 0, "depth_truncation must be > 0"),
            (self.image_width >= 8 and self.image_height >= 8, "image must be at least 8x8"),
            (self.image_width % 8 == 0 and self.image_height % 8 == 0, "image size must be divisible by 8"),
            (self.focal_length > 0, "focal_length must be > 0"),
            (self.num_frames >= 1, "num_frames must be >= 1"),
            (self.orbit_radius > 0, "orbit_radius must be > 0"),
            (-90.0 < self.orbit_elevation_deg < 90.0, "orbit_elevation_deg must be in (-90, 90)"),
            (self.noise_sigma >= 0, "noise_sigma must be >= 0"),
            (self.prior_min_uncertainty > 0, "prior_min_uncertainty must be > 0"),
            (self.prior_range >= self.max_depth, "prior_range must be >= max_depth"),
            (self.weights.strip() != "", "weights must be 'closed-form', 'seeded' or a file path"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.threads >= 1, "threads must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        n = self.fragment_extent / (4 * self.finest_voxel_size)
        if abs(n - round(n)) > 1e-6:
            raise ConfigError("fragment_extent must be a whole number of coarsest voxels")
        self.origin_value()

    def origin_value(self):
        """Fixed fragment origin as a 3-tuple, or ``None`` for ``auto``."""
        text = self.fragment_origin.strip()
        if text == "auto":
            return None
        try:
            vals = tuple(float(v) for v in text.replace(",", " ").split())
        except ValueError:
            vals = ()
        if len(vals) != 3 or not all(math.isfinite(v) for v in vals):
            raise ConfigError(f"fragment_origin must be 'auto' or three numbers, got {text!r}")
        return vals

    @property
    def orbit_target(self) -> tuple:
        return (self.orbit_target_x, self.orbit_target_y, self.orbit_target_z)

    @property
    def orbit_elevation(self) -> float:
        return math.radians(self.orbit_elevation_deg)

    def updated(self, **overrides) -> "RunConfig":
        return replace(self, **overrides)

    def to_text(self) -> str:
        lines = ["# sparsefusion run configuration (all keys optional; defaults shown)"]
        lines += [f"{k} = {v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"


def _coerce(name, type_name, raw: str):
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type_name}") from None
    return raw


def parse_config(text: str, **overrides) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], value)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path=None, **overrides) -> RunConfig:
    text = Path(path).read_text() if path is not None else ""
    return parse_config(text, **overrides)
