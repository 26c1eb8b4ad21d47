import numpy as np
import pytest

from sparsefusion.config import ConfigError, RunConfig
from sparsefusion.depth_prior import DepthPrior
from sparsefusion.geometry import Intrinsics, Keyframe, Pose
from sparsefusion.meshing import TriangleMesh
from sparsefusion.pipeline import (
    check_run_config,
    fragment_blocks,
    load_networks,
    observed_mask,
    reconstruct,
    synthetic_keyframes,
)
from sparsefusion.selftest import run_selftest
from sparsefusion.validation import check_depth_map, check_frames, check_mesh, check_points


def test_fragment_blocks():
    assert fragment_blocks(9, 9) == [list(range(9))]
    assert fragment_blocks(18, 9) == [list(range(9)), list(range(9, 18))]
    assert fragment_blocks(11, 9) == [list(range(9)), list(range(2, 11))]
    with pytest.raises(ValueError):
        fragment_blocks(3, 9)


def test_synthetic_keyframes_follow_config():
    kfs = synthetic_keyframes(RunConfig(num_frames=4, image_width=32, image_height=24))
    assert [k.index for k in kfs] == [0, 1, 2, 3]
    assert kfs[0].intrinsics.width == 32 and kfs[0].intrinsics.cx == 16


def test_load_networks_variants(tmp_path):
    rc = RunConfig()
    assert len(load_networks(rc)) == 3
    assert len(load_networks(rc.updated(weights="seeded"))) == 3
    with pytest.raises(ConfigError):
        check_run_config(rc.updated(weights=str(tmp_path / "missing.npz")))


def test_reconstruct_needs_matching_priors():
    kfs = synthetic_keyframes(RunConfig())
    with pytest.raises(ValueError):
        reconstruct(kfs, [], RunConfig())


def test_observed_mask():
    kf = Keyframe(Intrinsics(10.0, 10.0, 4.0, 4.0, 8, 8), Pose.identity())
    depth = np.full((8, 8), 2.0)
    pts = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 2.5], [0.0, 0.0, -2.0], [0.0, 0.0, 2.01]])
    assert observed_mask(pts, [kf], [depth], 0.02, 3.0).tolist() == [True, False, False, True]
    assert not observed_mask(pts[:1], [kf], [depth], 0.02, 1.0).any()


def test_oracle_run_meets_quality(oracle_run):
    m = oracle_run["metrics"]
    assert m.fscore >= 0.95 and m.distance_threshold == 0.05 and m.sample_resolution == 0.02


def test_selftest_quick():
    lines = []
    assert run_selftest(out=lines.append)
    assert len(lines) == 6 and all(line.startswith("PASS") for line in lines)


def test_check_points():
    assert check_points([1, 2, 3]).shape == (1, 3)
    with pytest.raises(ValueError):
        check_points(np.zeros((0, 3)))
    assert check_points(np.zeros((0, 3)), allow_empty=True).shape == (0, 3)
    with pytest.raises(ValueError):
        check_points([[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        check_points(np.zeros((3, 2)))


def test_check_depth_map():
    assert check_depth_map(np.ones((2, 3)), (2, 3)).dtype == np.float64
    with pytest.raises(ValueError):
        check_depth_map(np.ones(3))
    with pytest.raises(ValueError):
        check_depth_map(np.ones((2, 3)), (3, 2))
    with pytest.raises(ValueError):
        check_depth_map(np.full((2, 2), np.nan))


def test_check_frames_and_mesh():
    kf = Keyframe(Intrinsics(10.0, 10.0, 4.0, 4.0, 8, 8), Pose.identity())
    prior = DepthPrior.from_inverse_uncertainty(np.ones((8, 8)), np.ones((8, 8)))
    kfs, priors = check_frames([(kf, prior)])
    assert kfs == [kf] and priors == [prior]
    small = DepthPrior.from_inverse_uncertainty(np.ones((4, 4)), np.ones((4, 4)))
    with pytest.raises(ValueError):
        check_frames([(kf, small)])
    with pytest.raises(ValueError):
        check_frames([])
    assert isinstance(check_mesh(TriangleMesh.empty()), TriangleMesh)
    with pytest.raises(TypeError):
        check_mesh(np.zeros((3, 3)))
