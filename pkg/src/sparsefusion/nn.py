"""Small numpy network kernels: linear layers, layer norm, masked multi-head
self-attention, submanifold sparse 3D convolution, and a weight-file format.

Everything is forward-only and evaluated in float64. Stored weights are
float32 so that a save/load round trip is bitwise exact.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import pack_keys


class WeightFileError(Exception):
    """Base class for weight-bundle problems."""


class ChecksumError(WeightFileError):
    pass


class MissingLayerError(WeightFileError, KeyError):
    pass


class DimensionMismatchError(WeightFileError, ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


@dataclass(frozen=True)
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or b.shape[0] != w.shape[0]:
            raise DimensionMismatchError(f"linear layer weight {w.shape} / bias {b.shape} inconsistent")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("linear layer has non-finite entries")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_features:
            raise DimensionMismatchError(f"expected {self.in_features} input channels, got {x.shape[-1]}")
        return x @ self.weight.T + self.bias


def mlp(layers, x):
    """Apply linear layers with ReLU between them (none after the last)."""
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = relu(x)
    return x


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


@dataclass(frozen=True)
class AttentionLayer:
    """One post-norm transformer encoder layer."""

    query: LinearLayer
    key: LinearLayer
    value: LinearLayer
    output: LinearLayer
    norm1_gain: np.ndarray
    norm1_bias: np.ndarray
    ffn_in: LinearLayer
    ffn_out: LinearLayer
    norm2_gain: np.ndarray
    norm2_bias: np.ndarray


@dataclass(frozen=True)
class AttentionBlock:
    layers: tuple
    num_heads: int = 2
    eps: float = 1e-5

    def __post_init__(self):
        if len(self.layers) != 2:
            raise ValueError("attention block must have exactly two layers")
        dim = self.dim
        if dim % self.num_heads:
            raise ValueError(f"model dim {dim} not divisible by {self.num_heads} heads")

    @property
    def dim(self) -> int:
        return self.layers[0].query.in_features


def _multi_head(x, mask, layer: AttentionLayer, num_heads: int):
    B, N, C = x.shape
    dh = C // num_heads
    q = layer.query(x).reshape(B, N, num_heads, dh).transpose(0, 2, 1, 3)
    k = layer.key(x).reshape(B, N, num_heads, dh).transpose(0, 2, 1, 3)
    v = layer.value(x).reshape(B, N, num_heads, dh).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    scores = np.where(mask[:, None, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    ctx = (w @ v).transpose(0, 2, 1, 3).reshape(B, N, C)
    return layer.output(ctx), w


def masked_self_attention(features, mask, block: AttentionBlock, return_weights: bool = False):
    """Two-layer masked self-attention over views.

    ``features`` is (N, C) or batched (B, N, C); ``mask`` (N,) or (B, N) marks
    visible views. Masked keys get a score of -inf; masked rows are zeroed on
    input and their outputs are computed but carry no meaning.
    """
    x = np.asarray(features, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    single = x.ndim == 2
    if single:
        x, m = x[None], m[None]
    if x.shape[:2] != m.shape:
        raise ValueError(f"mask shape {m.shape} does not match features {x.shape[:2]}")
    if x.shape[1] < 1:
        raise ValueError("need at least one view")
    if not m.any(axis=1).all():
        raise ValueError("every voxel needs at least one visible view")
    x = x * m[..., None]
    weights = []
    for layer in block.layers:
        attn, w = _multi_head(x, m, layer, block.num_heads)
        x = layer_norm(x + attn, layer.norm1_gain, layer.norm1_bias, block.eps)
        ff = layer.ffn_out(relu(layer.ffn_in(x)))
        x = layer_norm(x + ff, layer.norm2_gain, layer.norm2_bias, block.eps)
        weights.append(w)
    out = x[0] if single else x
    if return_weights:
        return out, [w[0] if single else w for w in weights]
    return out


@dataclass(frozen=True)
class SparseConvLayer:
    kernel: np.ndarray  # (3, 3, 3, Cin, Cout)
    bias: np.ndarray  # (Cout,)

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if k.ndim != 5 or k.shape[:3] != (3, 3, 3) or k.shape[4] != b.shape[0]:
            raise DimensionMismatchError(f"sparse conv kernel {k.shape} / bias {b.shape} inconsistent")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(b))):
            raise ValueError("sparse conv layer has non-finite entries")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[3]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[4]


NEIGHBOR_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


def neighbor_table(coords) -> np.ndarray:
    """(M, 27) row index of each neighbor offset within ``coords``, -1 if absent."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    keys = pack_keys(coords)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    table = np.full((len(coords), 27), -1, dtype=np.int64)
    if len(coords) == 0:
        return table
    for j, off in enumerate(NEIGHBOR_OFFSETS):
        q = pack_keys(coords + off)
        pos = np.minimum(np.searchsorted(sk, q), len(sk) - 1)
        hit = sk[pos] == q
        table[hit, j] = order[pos[hit]]
    return table


def sparse_conv3(support, features, layer: SparseConvLayer, neighbors=None):
    """Submanifold 3x3x3 convolution over a sparse support.

    ``out[c] = bias + sum_o kernel[o] . in[c + o]`` over the offsets whose
    neighbor is present; output support equals input support.

    ``support`` is an (M, 3) coordinate array or a ``SparseVolumeLevel``;
    ``features`` is an (M, Cin) array or, with a volume, the name of a
    per-voxel field (e.g. ``"hidden"``).
    """
    if isinstance(features, str):
        features = getattr(support, features)
    coords = support.coords if hasattr(support, "coords") else support
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_channels:
        raise DimensionMismatchError(f"expected (M, {layer.in_channels}) features, got {x.shape}")
    nb = neighbor_table(coords) if neighbors is None else neighbors
    if len(nb) != len(x):
        raise ValueError("feature rows do not match support size")
    out = np.tile(layer.bias, (len(x), 1))
    kflat = layer.kernel.reshape(27, layer.in_channels, layer.out_channels)
    for j in range(27):
        idx = nb[:, j]
        hit = idx >= 0
        if hit.any():
            out[hit] += x[idx[hit]] @ kflat[j]
    return out


# ---------------------------------------------------------------------------
# weight bundles

_MAGIC = b"SFWT"
_VERSION = 1


class WeightBundle:
    """Named float32 tensors with a CRC over the serialised form."""

    def __init__(self, tensors: dict | None = None):
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in (tensors or {}).items()}

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def __eq__(self, other):
        if not isinstance(other, WeightBundle) or self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)

    @property
    def dims(self) -> dict:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    @property
    def checksum(self) -> int:
        return zlib.crc32(self._body())

    def get(self, name: str, shape=None) -> np.ndarray:
        try:
            t = self.tensors[name]
        except KeyError:
            raise MissingLayerError(f"weight bundle has no layer {name!r}") from None
        if shape is not None and tuple(t.shape) != tuple(shape):
            raise DimensionMismatchError(f"layer {name!r} has shape {t.shape}, expected {tuple(shape)}")
        return t.astype(np.float64)

    def require(self, shapes: dict) -> None:
        for name, shape in shapes.items():
            self.get(name, shape)

    @classmethod
    def seeded(cls, shapes: dict, seed: int = 0) -> "WeightBundle":
        """Deterministic init: uniform(+-1/sqrt(fan_in)); ``*.gain`` tensors are ones, ``*.norm*.bias`` zeros."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name in sorted(shapes):
            shape = tuple(shapes[name])
            if name.endswith(".gain"):
                tensors[name] = np.ones(shape, np.float32)
            elif ".norm" in name:
                tensors[name] = np.zeros(shape, np.float32)
            else:
                fan_in = _fan_in(name, shape, shapes)
                bound = 1.0 / np.sqrt(fan_in)
                tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return cls(tensors)

    def _body(self) -> bytes:
        names = sorted(self.tensors)
        header = [_MAGIC, struct.pack("<II", _VERSION, len(names))]
        offset = 0
        for name in names:
            t = self.tensors[name]
            raw = name.encode("utf-8")
            header.append(struct.pack("<H", len(raw)) + raw)
            header.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            header.append(struct.pack("<Q", offset))
            offset += t.size * 4
        data = b"".join(self.tensors[n].astype("<f4").tobytes() for n in names)
        return b"".join(header) + data

    def to_bytes(self) -> bytes:
        body = self._body()
        return body + struct.pack("<I", zlib.crc32(body))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def _fan_in(name, shape, shapes):
    if name.endswith(".bias"):
        w = shapes.get(name[: -len(".bias")] + ".weight") or shapes.get(name[: -len(".bias")] + ".kernel")
        if w is not None:
            return _fan_in(name[: -len(".bias")] + ".weight", tuple(w), shapes)
        return max(shape[0], 1)
    if len(shape) == 5:
        return 27 * shape[3]
    return shape[-1] if len(shape) >= 2 else shape[0]


def bundle_from_bytes(blob: bytes) -> WeightBundle:
    if len(blob) < 16:
        raise ChecksumError("weight file truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("weight file checksum mismatch")
    if body[:4] != _MAGIC:
        raise WeightFileError("not a weight file (bad magic)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != _VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    pos = 12
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        table.append((name, dims, offset))
    tensors = {}
    for name, dims, offset in table:
        size = int(np.prod(dims, dtype=np.int64))
        start = pos + offset
        if start + 4 * size > len(body):
            raise DimensionMismatchError(f"layer {name!r} extends past end of data")
        tensors[name] = np.frombuffer(body, dtype="<f4", count=size, offset=start).reshape(dims).astype(np.float32)
    return WeightBundle(tensors)


def load_weights(path, required: dict | None = None) -> WeightBundle:
    """Read a weight file; optionally check that ``required`` name->shape entries exist."""
    bundle = bundle_from_bytes(Path(path).read_bytes())
    if required:
        bundle.require(required)
    return bundle


def linear_from(bundle: WeightBundle, prefix: str, out_dim: int, in_dim: int) -> LinearLayer:
    return LinearLayer(bundle.get(f"{prefix}.weight", (out_dim, in_dim)), bundle.get(f"{prefix}.bias", (out_dim,)))


def linear_shapes(prefix: str, out_dim: int, in_dim: int) -> dict:
    return {f"{prefix}.weight": (out_dim, in_dim), f"{prefix}.bias": (out_dim,)}


def attention_shapes(prefix: str, dim: int, ffn_mult: int = 2) -> dict:
    shapes = {}
    for i in range(2):
        p = f"{prefix}.layer{i}"
        for proj in ("query", "key", "value", "output"):
            shapes.update(linear_shapes(f"{p}.{proj}", dim, dim))
        shapes.update(linear_shapes(f"{p}.ffn_in", ffn_mult * dim, dim))
        shapes.update(linear_shapes(f"{p}.ffn_out", dim, ffn_mult * dim))
        for n in ("norm1", "norm2"):
            shapes[f"{p}.{n}.gain"] = (dim,)
            shapes[f"{p}.{n}.bias"] = (dim,)
    return shapes


def attention_from(
    bundle: WeightBundle, prefix: str, dim: int, ffn_mult: int = 2, num_heads: int = 2
) -> AttentionBlock:
    layers = []
    for i in range(2):
        p = f"{prefix}.layer{i}"
        layers.append(
            AttentionLayer(
                query=linear_from(bundle, f"{p}.query", dim, dim),
                key=linear_from(bundle, f"{p}.key", dim, dim),
                value=linear_from(bundle, f"{p}.value", dim, dim),
                output=linear_from(bundle, f"{p}.output", dim, dim),
                norm1_gain=bundle.get(f"{p}.norm1.gain", (dim,)),
                norm1_bias=bundle.get(f"{p}.norm1.bias", (dim,)),
                ffn_in=linear_from(bundle, f"{p}.ffn_in", ffn_mult * dim, dim),
                ffn_out=linear_from(bundle, f"{p}.ffn_out", dim, ffn_mult * dim),
                norm2_gain=bundle.get(f"{p}.norm2.gain", (dim,)),
                norm2_bias=bundle.get(f"{p}.norm2.bias", (dim,)),
            )
        )
    return AttentionBlock(tuple(layers), num_heads=num_heads)


def conv_shapes(prefix: str, cin: int, cout: int) -> dict:
    return {f"{prefix}.kernel": (3, 3, 3, cin, cout), f"{prefix}.bias": (cout,)}


def conv_from(bundle: WeightBundle, prefix: str, cin: int, cout: int) -> SparseConvLayer:
    return SparseConvLayer(bundle.get(f"{prefix}.kernel", (3, 3, 3, cin, cout)), bundle.get(f"{prefix}.bias", (cout,)))
