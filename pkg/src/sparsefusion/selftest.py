"""Built-in oracle checks, runnable without the test suite (``sparsefusion selftest``)."""

from __future__ import annotations

import time

import numpy as np
from scipy.ndimage import correlate

from . import nn
from .depth_prior import DepthPrior, propagate_uncertainty
from .fusion import GruWeights, gru_fuse, tsdf_fuse
from .geometry import Intrinsics, Keyframe, Pose
from .metrics import metrics_2d, metrics_3d
from .sparse_volume import AllocationConfig, LevelConfig, SparseVolumeLevel, allocate_from_prior


def _check_allocation_band() -> str:
    K = Intrinsics(1.0, 1.0, 0.5, 0.5, 1, 1)
    kf = Keyframe(K, Pose.identity())
    prior = DepthPrior.from_depth_uncertainty(np.ones((1, 1)), np.full((1, 1), 0.06))
    vol = SparseVolumeLevel(LevelConfig(2, 0.04, 1))
    allocate_from_prior(vol, prior, kf, AllocationConfig(2.0, 3.0))
    z = sorted(vol.coords[:, 2].tolist())
    assert z == list(range(22, 28)) and (vol.coords[:, :2] == 0).all(), z
    return "6 on-axis cells spanning depth [0.88, 1.12]"


def _check_propagation(rng) -> str:
    D, B = rng.uniform(0.1, 5, (16, 16)), rng.uniform(0.01, 1, (16, 16))
    assert np.max(np.abs(propagate_uncertainty(D, B) - D * D * B)) <= 1e-12
    return "C = D^2 B elementwise"


def _check_gru_saturation(rng) -> str:
    ch = 3
    coords = rng.integers(0, 4, (10, 3))
    vol = SparseVolumeLevel(LevelConfig(2, 0.04, ch))
    vol.insert(coords)
    n = len(vol)
    vol.hidden[:] = rng.normal(size=(n, ch))
    vol.mvs_tsdf[:] = rng.uniform(-1, 1, n)
    vol.mvs_weight[:] = rng.integers(1, 5, n)
    lin = lambda o, i: nn.LinearLayer(rng.normal(size=(o, i)), rng.normal(size=o))  # noqa: E731
    conv = lambda b: nn.SparseConvLayer(np.zeros((3, 3, 3, 2 * ch, ch)), np.full(ch, b))  # noqa: E731
    rows = np.arange(n)
    F = rng.normal(size=(n, ch))
    for bias, key in ((-40.0, "h_prime"), (40.0, "candidate")):
        w = GruWeights(
            lin(ch, ch + 2),
            lin(ch, ch + 2),
            conv(bias),
            conv(0.0),
            nn.SparseConvLayer(rng.normal(size=(3, 3, 3, 2 * ch, ch)) * 0.1, rng.normal(size=ch)),
        )
        v = vol.copy()
        h, gates = gru_fuse(v, rows, F, w, return_gates=True)
        assert np.max(np.abs(h - gates[key])) <= 1e-6
    return "z->0 keeps H', z->1 takes the candidate"


def _check_sparse_conv(rng) -> str:
    cin, cout = 2, 3
    coords = np.unique(rng.integers(0, 5, (40, 3)), axis=0)
    x = rng.normal(size=(len(coords), cin))
    layer = nn.SparseConvLayer(rng.normal(size=(3, 3, 3, cin, cout)), rng.normal(size=cout))
    got = nn.sparse_conv3(coords, x, layer)
    grid = np.zeros((5, 5, 5, cin))
    grid[tuple(coords.T)] = x
    want = np.tile(layer.bias, (len(coords), 1))
    for i in range(cin):
        for o in range(cout):
            dense = correlate(grid[..., i], layer.kernel[..., i, o], mode="constant", cval=0.0)
            want[:, o] += dense[tuple(coords.T)]
    assert np.max(np.abs(got - want)) <= 1e-6
    return "equals dense correlation on the support"


def _check_tsdf_mean(rng) -> str:
    K = Intrinsics(1.0, 1.0, 0.5, 0.5, 1, 1)
    kf = Keyframe(K, Pose.identity())
    vol = SparseVolumeLevel(LevelConfig(2, 0.04, 1))
    vol.insert([[0, 0, 25]])
    z = vol.centers()[0, 2]
    obs = []
    for d in rng.uniform(0.9, 1.3, 30):
        tsdf_fuse(vol, np.array([[d]]), kf, 0.12)
        if d - z > -0.12:
            obs.append(np.clip((d - z) / 0.12, -1, 1))
    assert abs(vol.mvs_tsdf[0] - np.mean(obs)) <= 1e-9 and vol.mvs_weight[0] == len(obs)
    return "running weighted mean of clamped observations"


def _check_metrics(rng) -> str:
    pts = rng.uniform(0, 1, (200, 3))
    m = metrics_3d(pts, pts, 0.05)
    assert m.fscore == 1.0 and m.accuracy == 0.0
    far = metrics_3d(pts + [10.0, 0, 0], pts, 0.05)
    assert far.fscore == 0.0
    d = rng.uniform(0.5, 4, (8, 8))
    m2 = metrics_2d(d, d)
    assert m2.abs_rel == 0.0 and m2.delta_125 == 1.0 and m2.completeness == 1.0
    return "identity and far-offset limits"


def _check_end_to_end() -> str:
    from .config import RunConfig
    from .pipeline import evaluate_3d, feature_provider, fragment_box, reconstruct, synthetic_inputs
    from .sparse_volume import default_levels
    from .synthetic import DEFAULT_FRAGMENT_ORIGIN, default_scene

    rc = RunConfig(fragment_origin=" ".join(map(str, DEFAULT_FRAGMENT_ORIGIN)))
    scene = default_scene()
    kfs, priors, gts = synthetic_inputs(scene, rc)
    rec = reconstruct(kfs, priors, rc, features=feature_provider(rc, default_levels(), {}, scene))
    m = evaluate_3d(rec.mesh, scene, kfs, gts, fragment_box(rec), rc)
    assert m.fscore >= 0.95, m
    return f"F-score {m.fscore:.4f}"


def run_selftest(full: bool = False, out=print) -> bool:
    rng = np.random.default_rng(0)
    checks = [
        ("allocation band", _check_allocation_band),
        ("uncertainty propagation", lambda: _check_propagation(rng)),
        ("GRU saturation", lambda: _check_gru_saturation(rng)),
        ("sparse convolution", lambda: _check_sparse_conv(rng)),
        ("TSDF running mean", lambda: _check_tsdf_mean(rng)),
        ("metrics identities", lambda: _check_metrics(rng)),
    ]
    if full:
        checks.append(("end-to-end reconstruction", _check_end_to_end))
    ok = True
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            detail = fn()
            out(f"PASS {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
        except AssertionError as exc:
            ok = False
            out(f"FAIL {name}: {exc}")
    return ok
