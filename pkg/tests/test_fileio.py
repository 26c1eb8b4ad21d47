import numpy as np
import pytest

from sparsefusion import fileio
from sparsefusion.config import RunConfig
from sparsefusion.fileio import CorruptFileError, DatasetError, FrameDimensionError, MissingFrameFileError
from sparsefusion.geometry import Intrinsics, Keyframe, Pose
from sparsefusion.pipeline import synthetic_inputs
from sparsefusion.sparse_volume import LevelConfig, SparseVolumeLevel
from sparsefusion.synthetic import default_scene


def test_depth_map_round_trip_is_bitwise(tmp_path, rng):
    d = rng.uniform(0, 5, (7, 11)).astype(np.float32)
    d[0, 0] = 0
    fileio.write_depth_map(tmp_path / "d.bin", d)
    back = fileio.read_depth_map(tmp_path / "d.bin")
    assert back.dtype == np.float32 and back.tobytes() == d.tobytes()
    assert fileio.depth_map_bytes(back) == (tmp_path / "d.bin").read_bytes()


def test_depth_map_corruption_detected(tmp_path):
    blob = bytearray(fileio.depth_map_bytes(np.ones((3, 4), np.float32)))
    with pytest.raises(CorruptFileError):
        fileio.depth_map_from_bytes(bytes(blob[:-1]))
    blob[20] ^= 1
    with pytest.raises(CorruptFileError, match="CRC"):
        fileio.depth_map_from_bytes(bytes(blob))
    with pytest.raises(CorruptFileError, match="magic"):
        fileio.depth_map_from_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(ValueError):
        fileio.depth_map_bytes(np.ones(3))


def _volume(rng):
    vol = SparseVolumeLevel(LevelConfig(1, 0.08, 40, 4), origin=(0.5, -1.0, 0.25))
    vol.insert(rng.integers(-20, 20, (50, 3)))
    for name in SparseVolumeLevel._FIELDS:
        arr = getattr(vol, name)
        arr[...] = rng.normal(size=arr.shape)
    return vol


def test_volume_round_trip_is_bitwise(tmp_path, rng):
    vol = _volume(rng)
    fileio.write_volume(tmp_path / "v.svol", vol)
    back = fileio.read_volume(tmp_path / "v.svol")
    assert np.array_equal(back.coords, vol.coords)
    assert back.config == vol.config and np.array_equal(back.origin, vol.origin)
    for name in SparseVolumeLevel._FIELDS:
        assert getattr(back, name).tobytes() == getattr(vol, name).tobytes()
    assert fileio.volume_bytes(back) == (tmp_path / "v.svol").read_bytes()


def test_volume_corruption_detected(rng):
    blob = bytearray(fileio.volume_bytes(_volume(rng)))
    blob[100] ^= 0xFF
    with pytest.raises(CorruptFileError):
        fileio.volume_from_bytes(bytes(blob))
    with pytest.raises(CorruptFileError):
        fileio.volume_from_bytes(b"SVOL")


def test_camera_text_round_trip():
    K = Intrinsics(120.5, 119.25, 80.0, 60.0, 160, 120)
    assert fileio.parse_intrinsics(fileio.format_intrinsics(K)) == K
    pose = Pose.look_at([1.0, 2.0, 0.5], [0.0, 0.1, 0.3])
    assert np.array_equal(fileio.parse_pose(fileio.format_pose(pose)).matrix, pose.matrix)
    with pytest.raises(ValueError):
        fileio.parse_intrinsics("1 2 3")
    with pytest.raises(ValueError):
        fileio.parse_pose("1 0 0 0\n0 1 0 0\n")


@pytest.fixture
def small_dataset(tmp_path):
    rc = RunConfig(image_width=32, image_height=24, focal_length=24.0, num_frames=3)
    kfs, priors, gts = synthetic_inputs(default_scene(), rc)
    root = tmp_path / "ds"
    for kf, p, g in zip(kfs, priors, gts):
        fileio.write_frame(root, kf, g, p)
    return root, kfs, priors, gts


def test_dataset_round_trip(small_dataset):
    root, kfs, priors, gts = small_dataset
    frames = fileio.load_dataset(root)
    assert [kf.index for kf, _ in frames] == [0, 1, 2]
    for (kf, gt), kf0, gt0 in zip(frames, kfs, gts):
        assert kf.intrinsics == kf0.intrinsics
        assert np.array_equal(kf.pose.matrix, kf0.pose.matrix)
        assert np.array_equal(gt.depth, gt0.depth.astype(np.float32))
    loaded = fileio.load_priors(root, [kf for kf, _ in frames])
    assert np.array_equal(loaded[1].depth, priors[1].depth.astype(np.float32))
    assert fileio.has_priors(root)


def test_corrupt_frame_is_named(small_dataset):
    root = small_dataset[0]
    path = fileio.frame_paths(root, 1)["depth"]
    blob = bytearray(path.read_bytes())
    blob[30] ^= 1
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptFileError) as exc:
        fileio.load_dataset(root)
    assert exc.value.frame == 1 and "frame 1" in str(exc.value)


def test_missing_and_mismatched_files(small_dataset):
    root = small_dataset[0]
    fileio.frame_paths(root, 2)["intrinsics"].unlink()
    with pytest.raises(MissingFrameFileError) as exc:
        fileio.load_dataset(root)
    assert exc.value.frame == 2
    fileio.frame_paths(root, 2)["intrinsics"].write_text("24.0 24.0 8.0 12.0 16 24\n")
    with pytest.raises(FrameDimensionError):
        fileio.load_dataset(root)


def test_non_contiguous_and_empty(small_dataset, tmp_path):
    root = small_dataset[0]
    for p in fileio.frame_paths(root, 1).values():
        p.unlink(missing_ok=True)
    with pytest.raises(DatasetError, match="contiguous"):
        fileio.load_dataset(root)
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError):
        fileio.load_dataset(tmp_path / "empty")
    with pytest.raises(DatasetError):
        fileio.load_dataset(tmp_path / "nope")


def test_frame_without_image_loads(small_dataset):
    root = small_dataset[0]
    kf, _ = fileio.load_frame(root, 0)
    assert kf.image is None and isinstance(kf, Keyframe)


def test_out_of_order_writes_load_sorted(tmp_path):
    rc = RunConfig(image_width=16, image_height=16, focal_length=12.0, num_frames=12)
    kfs, priors, gts = synthetic_inputs(default_scene(), rc)
    root = tmp_path / "ds"
    for i in [11, 3, 7, 0, 10, 1, 2, 9, 4, 8, 5, 6]:
        fileio.write_frame(root, kfs[i], gts[i], priors[i])
    frames = fileio.load_dataset(root)
    assert [kf.index for kf, _ in frames] == list(range(12))
    assert np.array_equal(frames[10][0].pose.matrix, kfs[10].pose.matrix)
