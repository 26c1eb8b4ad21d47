import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sparsefusion import nn
from sparsefusion.sparse_volume import LevelConfig, SparseVolumeLevel


def _block(rng, dim=4, scale=0.3):
    shapes = nn.attention_shapes("a", dim)
    bundle = nn.WeightBundle({k: rng.normal(scale=scale, size=v) for k, v in shapes.items()})
    return nn.attention_from(bundle, "a", dim)


def test_sigmoid_is_stable_at_extremes():
    out = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert out.tolist() == [0.0, 0.5, 1.0]


def test_linear_layer_checks():
    with pytest.raises(nn.DimensionMismatchError):
        nn.LinearLayer(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        nn.LinearLayer(np.full((1, 1), np.nan), np.zeros(1))
    layer = nn.LinearLayer(np.eye(2), np.ones(2))
    with pytest.raises(nn.DimensionMismatchError):
        layer(np.zeros(3))
    assert layer(np.array([1.0, 2.0])).tolist() == [2.0, 3.0]


def test_mlp_applies_relu_between_layers():
    a = nn.LinearLayer(np.array([[1.0], [-1.0]]), np.zeros(2))
    b = nn.LinearLayer(np.array([[1.0, 1.0]]), np.array([-5.0]))
    assert nn.mlp([a, b], np.array([2.0])).tolist() == [-3.0]


def test_layer_norm_examples():
    assert np.allclose(nn.layer_norm(np.full(4, 3.0), np.ones(4), np.zeros(4)), 0.0)
    assert np.allclose(nn.layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2), eps=0.0), [-1.0, 1.0])
    rng = np.random.default_rng(0)
    bias = rng.normal(size=6)
    out = nn.layer_norm(rng.normal(size=6), np.ones(6), bias)
    assert out.mean() == pytest.approx(bias.mean())


def test_single_view_attention_weight_is_one():
    rng = np.random.default_rng(1)
    block = _block(rng)
    x = rng.normal(size=(1, 4))
    out, weights = nn.masked_self_attention(x, [True], block, return_weights=True)
    assert all(np.all(w == 1.0) for w in weights)
    want, _ = oracles.attention(x, [True], block)
    assert np.allclose(out, want, atol=1e-9)


def test_attention_matches_loop_oracle_with_masked_view():
    rng = np.random.default_rng(2)
    block = _block(rng, dim=6)
    x = rng.normal(size=(3, 6))
    mask = np.array([True, False, True])
    out = nn.masked_self_attention(x, mask, block)
    want, _ = oracles.attention(x, mask, block)
    assert np.max(np.abs(out[mask] - want[mask])) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_attention_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    block = _block(rng)
    x = rng.normal(size=(n, 4))
    mask = rng.random(n) < 0.6
    mask[0] = True
    perm = rng.permutation(n)
    out, w = nn.masked_self_attention(x, mask, block, return_weights=True)
    outp = nn.masked_self_attention(x[perm], mask[perm], block)
    assert np.allclose(outp[mask[perm]], out[perm][mask[perm]], atol=1e-9)
    for layer_w in w:
        assert np.allclose(layer_w.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_batched_equals_single():
    rng = np.random.default_rng(3)
    block = _block(rng)
    x = rng.normal(size=(5, 3, 4))
    m = rng.random((5, 3)) < 0.7
    m[:, 0] = True
    batched = nn.masked_self_attention(x, m, block)
    for b in range(5):
        assert np.allclose(batched[b], nn.masked_self_attention(x[b], m[b], block), atol=1e-12)


def test_attention_input_validation():
    block = _block(np.random.default_rng(4))
    with pytest.raises(ValueError):
        nn.masked_self_attention(np.zeros((2, 4)), [False, False], block)
    with pytest.raises(ValueError):
        nn.masked_self_attention(np.zeros((2, 4)), [True], block)
    with pytest.raises(ValueError):
        nn.AttentionBlock(block.layers, num_heads=3)


def test_identity_kernel_returns_input():
    k = np.zeros((3, 3, 3, 2, 2))
    k[1, 1, 1] = np.eye(2)
    coords = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 1]])
    x = np.random.default_rng(5).normal(size=(3, 2))
    assert np.array_equal(nn.sparse_conv3(coords, x, nn.SparseConvLayer(k, np.zeros(2))), x)


def test_isolated_voxel_sees_only_center_tap():
    rng = np.random.default_rng(6)
    layer = nn.SparseConvLayer(rng.normal(size=(3, 3, 3, 2, 3)), rng.normal(size=3))
    x = rng.normal(size=(1, 2))
    out = nn.sparse_conv3(np.array([[4, 4, 4]]), x, layer)
    assert np.allclose(out[0], x[0] @ layer.kernel[1, 1, 1] + layer.bias)


def test_voxel_pair_matches_loop_oracle():
    rng = np.random.default_rng(7)
    layer = nn.SparseConvLayer(rng.normal(size=(3, 3, 3, 2, 2)) * 0.1, rng.normal(size=2))
    coords = np.array([[0, 0, 0], [1, 0, 0]])
    x = rng.normal(size=(2, 2))
    assert np.allclose(nn.sparse_conv3(coords, x, layer), oracles.conv3(coords, x, layer), atol=1e-12)


def test_sparse_conv_on_volume_field():
    rng = np.random.default_rng(8)
    vol = SparseVolumeLevel(LevelConfig(2, 0.04, 2))
    vol.insert(rng.integers(0, 3, (10, 3)))
    vol.hidden[:] = rng.normal(size=vol.hidden.shape)
    layer = nn.SparseConvLayer(rng.normal(size=(3, 3, 3, 2, 2)), rng.normal(size=2))
    assert np.array_equal(nn.sparse_conv3(vol, "hidden", layer), nn.sparse_conv3(vol.coords, vol.hidden, layer))
    with pytest.raises(nn.DimensionMismatchError):
        nn.sparse_conv3(vol.coords, np.zeros((len(vol), 3)), layer)


def test_neighbor_table_symmetry():
    coords = np.unique(np.random.default_rng(9).integers(0, 4, (30, 3)), axis=0)
    nb = nn.neighbor_table(coords)
    for j in range(27):
        hit = nb[:, j] >= 0
        assert np.array_equal(coords[nb[hit, j]] - coords[hit], np.tile(nn.NEIGHBOR_OFFSETS[j], (hit.sum(), 1)))
        assert np.all(nb[nb[hit, j], 26 - j] == np.nonzero(hit)[0])


def test_weight_bundle_round_trip(tmp_path):
    shapes = {**nn.linear_shapes("m", 3, 4), **nn.conv_shapes("c", 2, 2)}
    a = nn.WeightBundle.seeded(shapes, seed=7)
    assert a == nn.WeightBundle.seeded(shapes, seed=7)
    assert a != nn.WeightBundle.seeded(shapes, seed=8)
    path = tmp_path / "w.bin"
    a.save(path)
    b = nn.load_weights(path, required=shapes)
    assert a == b and b.to_bytes() == path.read_bytes()
    bound = 1 / np.sqrt(4)
    assert np.all(np.abs(a.tensors["m.weight"]) <= bound)


def test_weight_file_errors(tmp_path):
    shapes = nn.linear_shapes("m", 3, 4)
    blob = nn.WeightBundle.seeded(shapes).to_bytes()
    with pytest.raises(nn.ChecksumError):
        nn.bundle_from_bytes(blob[:-10])
    with pytest.raises(nn.ChecksumError):
        nn.bundle_from_bytes(blob[:8])
    bad = bytearray(blob)
    bad[-20] ^= 0xFF
    with pytest.raises(nn.ChecksumError):
        nn.bundle_from_bytes(bytes(bad))
    bundle = nn.bundle_from_bytes(blob)
    with pytest.raises(nn.MissingLayerError):
        bundle.require({"other.weight": (1, 1)})
    with pytest.raises(nn.DimensionMismatchError):
        bundle.require({"m.weight": (4, 3)})
