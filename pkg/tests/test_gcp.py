import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxmt.config import PROFILES
from voxmt.errors import ConfigError, InternalError
from voxmt.gcp import ExtractorConfig, bev_extractor, bev_to_sparse, extractor_layers, global_context_pooling, sparse_to_bev
from voxmt.selftest import random_sparse
from voxmt.sparse import SparseTensor
from voxmt.weights import WeightStore


def test_waymo_bev_dims():
    cfg = PROFILES["waymo"]
    assert cfg.bottom_dims == (188, 188, 5)
    assert cfg.bev_channels_in == 1280


def test_single_voxel_packing():
    x = SparseTensor(np.array([[3, 2, 1]]), np.array([[7.0, 9.0]]), (5, 4, 3), stride=8)
    bev = sparse_to_bev(x)
    assert bev.shape == (6, 4, 5)
    nz = np.argwhere(bev)
    np.testing.assert_array_equal(nz, [[2, 2, 3], [3, 2, 3]])
    assert bev[2, 2, 3] == 7.0 and bev[3, 2, 3] == 9.0
    back = bev_to_sparse(bev, x)
    np.testing.assert_array_equal(back.features, x.features)


def test_empty_and_zero():
    x = SparseTensor(np.zeros((0, 3)), np.zeros((0, 4)), (3, 3, 2), stride=8)
    assert not sparse_to_bev(x).any()
    y = SparseTensor(np.array([[0, 1, 1]]), np.ones((1, 4)), (3, 3, 2), stride=8)
    assert not bev_to_sparse(np.zeros((8, 3, 3)), y).features.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_roundtrip_and_injective_scatter(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(int(v) for v in rng.integers(1, 12, size=3))
    x = random_sparse(rng, dims, 100, int(rng.integers(1, 5)), stride=8)
    bev = sparse_to_bev(x)
    # injectivity: every feature value lands in its own cell
    assert np.count_nonzero(bev) == np.count_nonzero(x.features)
    back = bev_to_sparse(bev, x)
    assert np.array_equal(back.features, x.features)
    sparse, plane = global_context_pooling(x, WeightStore(), identity=True)
    assert np.array_equal(sparse.features, x.features)
    assert np.array_equal(plane, bev)


def test_channel_arithmetic_errors():
    x = SparseTensor(np.array([[0, 0, 0]]), np.ones((1, 2)), (2, 2, 3), stride=8)
    with pytest.raises(ConfigError):
        bev_to_sparse(np.ones((5, 2, 2)), x)
    with pytest.raises(ConfigError):
        bev_to_sparse(np.ones((6, 2, 2)), x, out_channels=3)


def test_sparse_to_bev_rejects_out_of_grid():
    class Fake:
        grid_dims = (2, 2, 1)
        channels = 1
        coords = np.array([[2, 0, 0]])
        features = np.ones((1, 1))

    with pytest.raises(InternalError):
        sparse_to_bev(Fake())


def _identity_weights(c, cfg):
    store = WeightStore()
    for name, c_in, c_out, _ in extractor_layers(c, cfg):
        w = np.zeros((c_out, c_in, 3, 3))
        w[np.arange(c_out), np.arange(c_out), 1, 1] = 1.0
        store[f"{name}.weight"] = w
        store[f"{name}.bias"] = np.zeros(c_out)
    return store


def test_extractor_identity_single_layer():
    cfg = ExtractorConfig((1, 0), (3, 3))
    x = np.abs(np.random.default_rng(0).normal(size=(3, 5, 5)))
    np.testing.assert_allclose(bev_extractor(x, _identity_weights(3, cfg), cfg), x)


def test_extractor_shapes_and_zero_weights():
    cfg = ExtractorConfig((2, 2), (4, 6))
    rng = np.random.default_rng(1)
    store = WeightStore()
    for name, c_in, c_out, _ in extractor_layers(3, cfg):
        store[f"{name}.weight"] = np.zeros((c_out, c_in, 3, 3))
        store[f"{name}.bias"] = np.zeros(c_out)
    out = bev_extractor(rng.normal(size=(3, 16, 16)), store, cfg)
    assert out.shape == (10, 16, 16)
    assert not out.any()
    odd = bev_extractor(rng.normal(size=(3, 5, 7)), store, cfg)
    assert odd.shape == (10, 5, 7)


def test_extractor_level_two_runs_at_half_resolution():
    cfg = ExtractorConfig((1, 1), (2, 2))
    store = _identity_weights(2, cfg)
    x = np.abs(np.random.default_rng(2).normal(size=(2, 16, 16)))
    out = bev_extractor(x, store, cfg)
    # level 2 is the stride-2 subsample of level 1, upsampled back
    np.testing.assert_allclose(out[:2], x)
    np.testing.assert_allclose(out[2:], np.repeat(np.repeat(x[:, ::2, ::2], 2, 1), 2, 2))


def test_extractor_missing_weight():
    with pytest.raises(ConfigError, match="gcp.l1.conv0.weight"):
        bev_extractor(np.ones((2, 4, 4)), WeightStore(), ExtractorConfig((1, 1), (2, 2)))


def test_extractor_default_widths():
    layers = extractor_layers(1280, ExtractorConfig())
    assert len(layers) == 12
    assert layers[0] == ("gcp.l1.conv0", 1280, 128, 1)
    assert layers[6] == ("gcp.l2.conv0", 128, 256, 2)
    assert sum(ExtractorConfig().widths) == 384
