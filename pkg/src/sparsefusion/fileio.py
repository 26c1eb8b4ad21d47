"""On-disk formats: depth maps, per-frame camera files, datasets and volume dumps.

Depth map (``.bin``)::

    b"SFDM" | u32 width | u32 height | f32[height*width] row-major | u32 crc32

Volume dump (``.svol``)::

    b"SVOL" | u32 version | u32 level | f64 voxel_size | f64 feature_scale
    | f64[3] origin | u32 C | u32 C_h | u64 count | i32[count, 3] coords
    | f64 payload blocks (feature, mvs_tsdf, mvs_weight, hidden, pred_tsdf, pred_occ)
    | u32 crc32

All integers and floats are little-endian; each CRC covers every preceding byte.
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .depth_prior import DepthPrior, GroundTruthDepth
from .geometry import Intrinsics, Keyframe, Pose
from .sparse_volume import LevelConfig, SparseVolumeLevel

_DEPTH_MAGIC = b"SFDM"
_VOLUME_MAGIC = b"SVOL"
_VOLUME_VERSION = 1
_FRAME_RE = re.compile(r"^(\d{6})\.pose\.txt$")


class DatasetError(ValueError):
    """A dataset file is missing or malformed; ``frame`` and ``path`` say which."""

    def __init__(self, message: str, frame: int | None = None, path=None):
        where = f"frame {frame}: " if frame is not None else ""
        super().__init__(f"{where}{message}" + (f" [{path}]" if path is not None else ""))
        self.frame = frame
        self.path = None if path is None else Path(path)


class MissingFrameFileError(DatasetError):
    pass


class CorruptFileError(DatasetError):
    """Bad magic, truncated data or CRC mismatch."""


class FrameDimensionError(DatasetError):
    pass


# ---------------------------------------------------------------------------
# depth maps


def depth_map_bytes(depth) -> bytes:
    d = np.asarray(depth)
    if d.ndim != 2:
        raise ValueError("depth map must be 2-D")
    h, w = d.shape
    body = _DEPTH_MAGIC + struct.pack("<II", w, h) + np.ascontiguousarray(d, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def depth_map_from_bytes(blob: bytes, path=None) -> np.ndarray:
    if len(blob) < 16 or blob[:4] != _DEPTH_MAGIC:
        raise CorruptFileError("not a depth map (bad magic or too short)", path=path)
    w, h = struct.unpack_from("<II", blob, 4)
    expected = 12 + 4 * w * h + 4
    if len(blob) != expected:
        raise CorruptFileError(f"depth map size {len(blob)} bytes, expected {expected} for {w}x{h}", path=path)
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(blob[: expected - 4]) != crc:
        raise CorruptFileError("depth map CRC mismatch", path=path)
    return np.frombuffer(blob, dtype="<f4", count=w * h, offset=12).reshape(h, w).astype(np.float32)


def write_depth_map(path, depth) -> None:
    Path(path).write_bytes(depth_map_bytes(depth))


def read_depth_map(path) -> np.ndarray:
    """Read a float32 (H, W) map; raises ``CorruptFileError`` on any format problem."""
    return depth_map_from_bytes(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# camera text files


def format_intrinsics(K: Intrinsics) -> str:
    return f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n"


def parse_intrinsics(text: str) -> Intrinsics:
    parts = text.split()
    if len(parts) != 6:
        raise ValueError(f"intrinsics need 6 fields (fx fy cx cy w h), got {len(parts)}")
    fx, fy, cx, cy = (float(p) for p in parts[:4])
    return Intrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))


def format_pose(pose: Pose) -> str:
    M = pose.matrix[:3]
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in M)


def parse_pose(text: str) -> Pose:
    rows = [line.split() for line in text.strip().splitlines() if line.strip()]
    if len(rows) != 3 or any(len(r) != 4 for r in rows):
        raise ValueError("pose needs 3 rows of 4 numbers (camera-to-world, row-major)")
    M = np.eye(4)
    M[:3] = np.array([[float(v) for v in r] for r in rows])
    return Pose.from_matrix(M)


# ---------------------------------------------------------------------------
# datasets


def frame_paths(root, index: int) -> dict:
    stem = Path(root) / f"{index:06d}"
    return {
        "intrinsics": stem.with_name(stem.name + ".intrinsics.txt"),
        "pose": stem.with_name(stem.name + ".pose.txt"),
        "depth": stem.with_name(stem.name + ".depth.bin"),
        "image": stem.with_name(stem.name + ".image.bin"),
    }


def prior_paths(root, index: int):
    """``(depth, inverse-depth uncertainty)`` prior map paths for frame ``index``."""
    stem = f"{index:06d}"
    root = Path(root)
    return root / f"{stem}.prior_depth.bin", root / f"{stem}.prior_invunc.bin"


def frame_indices(root) -> list:
    """Sorted indices of all frames (one ``NNNNNN.pose.txt`` each) under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    return sorted(int(m.group(1)) for p in root.iterdir() if (m := _FRAME_RE.match(p.name)))


def _read_text(path, index, field):
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise MissingFrameFileError(f"missing {field} file", index, path) from None


def _read_map(path, index, field):
    if not Path(path).exists():
        raise MissingFrameFileError(f"missing {field} file", index, path)
    try:
        return read_depth_map(path)
    except CorruptFileError as exc:
        raise CorruptFileError(f"{field}: {exc}", index, path) from None


def load_frame(root, index: int):
    """One ``(Keyframe, GroundTruthDepth)`` pair."""
    paths = frame_paths(root, index)
    try:
        K = parse_intrinsics(_read_text(paths["intrinsics"], index, "intrinsics"))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"intrinsics: {exc}", index, paths["intrinsics"]) from None
    try:
        pose = parse_pose(_read_text(paths["pose"], index, "pose"))
    except ValueError as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"pose: {exc}", index, paths["pose"]) from None
    depth = _read_map(paths["depth"], index, "depth")
    if depth.shape != (K.height, K.width):
        raise FrameDimensionError(
            f"depth is {depth.shape[1]}x{depth.shape[0]} but intrinsics say {K.width}x{K.height}",
            index,
            paths["depth"],
        )
    image = None
    if paths["image"].exists():
        image = _read_map(paths["image"], index, "image")
        if image.shape != (K.height, K.width):
            raise FrameDimensionError("image size does not match intrinsics", index, paths["image"])
    return Keyframe(K, pose, image=image, index=index), GroundTruthDepth.from_depth(depth.astype(np.float64))


def load_dataset(root) -> list:
    """All frames under ``root`` as index-sorted ``(Keyframe, GroundTruthDepth)`` pairs."""
    indices = frame_indices(root)
    if not indices:
        raise DatasetError(f"no frames found in {root}")
    gaps = [b for a, b in zip(indices, indices[1:]) if b != a + 1]
    if gaps:
        raise DatasetError(f"frame indices are not contiguous (gap before {gaps[0]})", gaps[0])
    return [load_frame(root, i) for i in indices]


def load_priors(root, keyframes) -> list:
    """Prior maps for each keyframe; errors name the frame like ``load_dataset``."""
    out = []
    for kf in keyframes:
        dpath, bpath = prior_paths(root, kf.index)
        depth = _read_map(dpath, kf.index, "prior depth")
        inv_b = _read_map(bpath, kf.index, "prior uncertainty")
        shape = (kf.intrinsics.height, kf.intrinsics.width)
        if depth.shape != shape or inv_b.shape != shape:
            raise FrameDimensionError("prior maps do not match intrinsics", kf.index, dpath)
        try:
            out.append(DepthPrior.from_inverse_uncertainty(depth.astype(np.float64), inv_b.astype(np.float64)))
        except ValueError as exc:
            raise DatasetError(f"prior: {exc}", kf.index, bpath) from None
    return out


def has_priors(root) -> bool:
    return any(Path(root).glob("*.prior_depth.bin"))


def write_frame(root, kf: Keyframe, gt_depth, prior: DepthPrior | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = frame_paths(root, kf.index)
    paths["intrinsics"].write_text(format_intrinsics(kf.intrinsics))
    paths["pose"].write_text(format_pose(kf.pose))
    depth = gt_depth.depth if isinstance(gt_depth, GroundTruthDepth) else gt_depth
    write_depth_map(paths["depth"], depth)
    if kf.image is not None:
        write_depth_map(paths["image"], kf.image)
    if prior is not None:
        dpath, bpath = prior_paths(root, kf.index)
        write_depth_map(dpath, prior.depth)
        write_depth_map(bpath, prior.inv_depth_uncertainty)


# ---------------------------------------------------------------------------
# volume dumps

_VOL_HEADER = struct.Struct("<4sIId d3dIIQ")


def volume_bytes(volume: SparseVolumeLevel) -> bytes:
    cfg = volume.config
    n = len(volume)
    head = _VOL_HEADER.pack(
        _VOLUME_MAGIC,
        _VOLUME_VERSION,
        cfg.level,
        cfg.voxel_size,
        cfg.feature_scale,
        *volume.origin.tolist(),
        cfg.feature_channels,
        cfg.hidden_channels,
        n,
    )
    parts = [head, np.ascontiguousarray(volume.coords, dtype="<i4").tobytes()]
    for name in SparseVolumeLevel._FIELDS:
        parts.append(np.ascontiguousarray(getattr(volume, name), dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def volume_from_bytes(blob: bytes, path=None) -> SparseVolumeLevel:
    hs = _VOL_HEADER.size
    if len(blob) < hs + 4 or blob[:4] != _VOLUME_MAGIC:
        raise CorruptFileError("not a volume dump (bad magic or too short)", path=path)
    _, version, level, vs, fscale, ox, oy, oz, C, Ch, n = _VOL_HEADER.unpack_from(blob, 0)
    if version != _VOLUME_VERSION:
        raise CorruptFileError(f"unsupported volume version {version}", path=path)
    expected = hs + 12 * n + 8 * n * (C + Ch + 4) + 4
    if len(blob) != expected:
        raise CorruptFileError(f"volume size {len(blob)} bytes, expected {expected}", path=path)
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(blob[: expected - 4]) != crc:
        raise CorruptFileError("volume CRC mismatch", path=path)
    vol = SparseVolumeLevel(LevelConfig(level, vs, C, Ch, fscale), (ox, oy, oz))
    off = hs
    coords = np.frombuffer(blob, dtype="<i4", count=3 * n, offset=off).reshape(n, 3).astype(np.int64)
    off += 12 * n
    vol.insert(coords)
    if len(vol) != n:
        raise CorruptFileError("volume has duplicate coordinates", path=path)
    order = vol.lookup(coords)
    widths = {"feature": C, "hidden": Ch}
    for name in SparseVolumeLevel._FIELDS:
        k = widths.get(name, 1)
        arr = np.frombuffer(blob, dtype="<f8", count=n * k, offset=off).astype(np.float64)
        off += 8 * n * k
        target = getattr(vol, name)
        target[order] = arr.reshape(target.shape)
    return vol


def write_volume(path, volume: SparseVolumeLevel) -> None:
    Path(path).write_bytes(volume_bytes(volume))


def read_volume(path) -> SparseVolumeLevel:
    return volume_from_bytes(Path(path).read_bytes(), path)


@dataclass(frozen=True)
class ReconOutputs:
    """File names written by a reconstruction run."""

    mesh: str = "mesh.ply"
    stats: str = "stats.txt"
    metrics: str = "metrics.csv"
    config: str = "config.txt"

    @staticmethod
    def volume(level: int) -> str:
        return f"level{level}.svol"
