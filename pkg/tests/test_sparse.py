import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxmt.dense import dense_conv3d_oracle
from voxmt.errors import ConfigError, InternalError
from voxmt.selftest import random_sparse
from voxmt.sparse import (
    ConvMode,
    ConvSpec,
    CoordIndex,
    SparseTensor,
    build_rulebook,
    concat_skip,
    coord_keys,
    inverse_conv,
    kernel_offsets,
    sparse_conv,
)


def single(coord, dims=(16, 16, 16), c=1):
    return SparseTensor(np.array([coord]), np.ones((1, c)), dims)


def spec(c_in=1, c_out=1, k=3, stride=1, mode=ConvMode.SUBMANIFOLD, weights=None, bias=None):
    if weights is None:
        weights = np.random.default_rng(0).normal(size=(k**3, c_in, c_out))
    return ConvSpec((k, k, k), stride, c_in, c_out, weights, bias, mode)


def test_kernel_offsets_order_z_major():
    off = kernel_offsets((3, 3, 3))
    assert off.shape == (27, 3)
    np.testing.assert_array_equal(off[0], [-1, -1, -1])
    np.testing.assert_array_equal(off[1], [0, -1, -1])  # x varies fastest
    np.testing.assert_array_equal(off[3], [-1, 0, -1])
    np.testing.assert_array_equal(off[9], [-1, -1, 0])
    np.testing.assert_array_equal(off[13], [0, 0, 0])


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        ConvSpec((2, 2, 2), 1, 1, 1, np.zeros((8, 1, 1)))


def test_submanifold_needs_stride_one():
    with pytest.raises(ConfigError):
        spec(stride=2, mode=ConvMode.SUBMANIFOLD)


def test_coord_index_lookup():
    dims = (5, 4, 3)
    coords = np.array([[1, 2, 0], [4, 3, 2], [0, 0, 1]])
    idx = CoordIndex(coord_keys(coords, dims))
    q = coord_keys(np.array([[4, 3, 2], [2, 2, 2], [1, 2, 0]]), dims)
    np.testing.assert_array_equal(idx.lookup(q), [1, -1, 0])


def test_single_site_submanifold_has_one_pair():
    x = single((5, 5, 5))
    rb = build_rulebook(x, spec())
    assert rb.pairs() == [(13, 0, 0)]


def test_single_site_strided_outputs_match_window_enumeration():
    x = single((5, 5, 5))
    rb = build_rulebook(x, spec(stride=2, mode=ConvMode.STRIDED))
    expected = set()
    for o in itertools.product(range(8), repeat=3):
        for d in itertools.product((-1, 0, 1), repeat=3):
            if all(2 * o[a] + d[a] == 5 for a in range(3)):
                expected.add(o)
    assert {tuple(c) for c in rb.output_coords.tolist()} == expected
    assert rb.output_dims == (8, 8, 8)


def test_two_adjacent_sites_four_pairs():
    x = SparseTensor(np.array([[0, 0, 0], [1, 0, 0]]), np.ones((2, 1)), (4, 4, 4))
    rb = build_rulebook(x, spec())
    pairs = rb.pairs()
    assert len(pairs) == 4
    assert {(i, o) for _, i, o in pairs} == {(0, 0), (1, 1), (0, 1), (1, 0)}


def test_rulebook_pairs_valid_and_unique():
    rng = np.random.default_rng(4)
    x = random_sparse(rng, (10, 9, 8), 200, 2)
    for sp in (spec(2, 2), spec(2, 2, stride=2, mode=ConvMode.STRIDED)):
        rb = build_rulebook(x, sp)
        pairs = rb.pairs()
        assert len(pairs) == len(set(pairs))
        assert all(0 <= i < x.num_active and 0 <= o < len(rb.output_coords) for _, i, o in pairs)


def test_identity_1x1_kernel():
    rng = np.random.default_rng(5)
    x = random_sparse(rng, (8, 8, 8), 50, 3)
    sp = spec(3, 3, k=1, weights=np.eye(3)[None])
    out = sparse_conv(x, sp, build_rulebook(x, sp))
    np.testing.assert_array_equal(out.features, x.features)


def test_zero_features_zero_output():
    rng = np.random.default_rng(6)
    x = random_sparse(rng, (8, 8, 8), 50, 2)
    x = x.with_features(np.zeros_like(x.features))
    sp = spec(2, 3)
    out = sparse_conv(x, sp, build_rulebook(x, sp))
    assert not out.features.any()


def test_bias_added_once_per_site():
    x = single((2, 2, 2), (4, 4, 4))
    sp = spec(weights=np.zeros((27, 1, 1)), bias=np.array([0.5]))
    out = sparse_conv(x, sp, build_rulebook(x, sp))
    np.testing.assert_array_equal(out.features, [[0.5]])


def test_channel_mismatch():
    x = single((1, 1, 1), c=2)
    sp = spec(3, 1)
    with pytest.raises(ConfigError):
        sparse_conv(x, sp, build_rulebook(x, sp))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 3]), st.sampled_from([1, 2]))
def test_strided_matches_dense_oracle_on_16_cube(seed, k, stride):
    rng = np.random.default_rng(seed)
    x = random_sparse(rng, (16, 16, 16), 200, 2)
    sp = spec(2, 3, k=k, stride=stride, mode=ConvMode.STRIDED, weights=rng.normal(size=(k**3, 2, 3)))
    out = sparse_conv(x, sp, build_rulebook(x, sp))
    ref = dense_conv3d_oracle(x.dense(), sp.weights, sp.kernel, stride)
    np.testing.assert_allclose(out.dense(), ref, rtol=1e-5, atol=1e-12)
    assert out.stride == stride


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_submanifold_preserves_sites(seed):
    rng = np.random.default_rng(seed)
    x = random_sparse(rng, tuple(int(v) for v in rng.integers(1, 20, size=3)), 300, 2)
    sp = spec(2, 2, weights=rng.normal(size=(27, 2, 2)))
    out = sparse_conv(x, sp, build_rulebook(x, sp))
    np.testing.assert_array_equal(out.coords, x.coords)


def test_inverse_restores_active_set():
    rng = np.random.default_rng(7)
    x = random_sparse(rng, (9, 7, 5), 120, 2)
    down = spec(2, 2, stride=2, mode=ConvMode.STRIDED)
    rb = build_rulebook(x, down)
    y = sparse_conv(x, down, rb)
    assert y.stride == 2
    up = inverse_conv(y, spec(2, 2, stride=2, mode=ConvMode.INVERSE), rb)
    np.testing.assert_array_equal(up.coords, x.coords)
    assert up.grid_dims == x.grid_dims and up.stride == 1


def test_down_up_two_hop_product():
    x = SparseTensor(np.array([[2, 2, 2]]), np.array([[3.0]]), (4, 4, 4))
    w_down = np.zeros((27, 1, 1))
    w_down[13] = 2.0  # center tap
    w_up = np.zeros((27, 1, 1))
    w_up[13] = 5.0
    down = spec(weights=w_down, stride=2, mode=ConvMode.STRIDED)
    rb = build_rulebook(x, down)
    y = sparse_conv(x, down, rb)
    up = inverse_conv(y, spec(weights=w_up, stride=2, mode=ConvMode.INVERSE), rb)
    # (2,2,2) reaches output (1,1,1) through the center tap only
    np.testing.assert_allclose(up.features, [[3.0 * 2.0 * 5.0]])


def test_inverse_of_empty_is_empty():
    x = SparseTensor(np.zeros((0, 3)), np.zeros((0, 2)), (4, 4, 4))
    down = spec(2, 2, stride=2, mode=ConvMode.STRIDED)
    rb = build_rulebook(x, down)
    y = sparse_conv(x, down, rb)
    up = inverse_conv(y, spec(2, 2, stride=2, mode=ConvMode.INVERSE), rb)
    assert y.num_active == 0 and up.num_active == 0


def test_inverse_with_mismatched_rulebook():
    rng = np.random.default_rng(8)
    x = random_sparse(rng, (8, 8, 8), 40, 1)
    other = random_sparse(rng, (8, 8, 8), 40, 1)
    down = spec(stride=2, mode=ConvMode.STRIDED)
    rb = build_rulebook(other, down)
    y = sparse_conv(x, down, build_rulebook(x, down))
    if not np.array_equal(y.coords, rb.output_coords):
        with pytest.raises(InternalError):
            inverse_conv(y, spec(stride=2, mode=ConvMode.INVERSE), rb)


def test_concat_skip():
    rng = np.random.default_rng(9)
    a = random_sparse(rng, (6, 6, 6), 30, 2)
    b = a.with_features(rng.normal(size=(a.num_active, 3)))
    c = concat_skip(a, b)
    assert c.channels == 5
    np.testing.assert_array_equal(c.features[:, :2], a.features)
    np.testing.assert_array_equal(c.features[:, 2:], b.features)
    empty = a.with_features(np.zeros((a.num_active, 0)))
    np.testing.assert_array_equal(concat_skip(a, empty).features, a.features)


def test_concat_skip_reports_first_differing_row():
    a = SparseTensor(np.array([[0, 0, 0], [1, 0, 0]]), np.ones((2, 1)), (4, 4, 4))
    b = SparseTensor(np.array([[0, 0, 0], [2, 0, 0]]), np.ones((2, 1)), (4, 4, 4))
    with pytest.raises(InternalError, match="row 1"):
        concat_skip(a, b)


def test_sparse_tensor_invariants():
    with pytest.raises(InternalError):
        SparseTensor(np.array([[0, 0, 0], [0, 0, 0]]), np.ones((2, 1)), (2, 2, 2))
    with pytest.raises(InternalError):
        SparseTensor(np.array([[2, 0, 0]]), np.ones((1, 1)), (2, 2, 2))
    with pytest.raises(InternalError):
        SparseTensor(np.array([[0, 0, 0]]), np.ones((1, 1)), (2, 2, 2), stride=3)


def test_dense_roundtrip():
    rng = np.random.default_rng(10)
    x = random_sparse(rng, (5, 6, 7), 40, 2)
    back = SparseTensor.from_dense(x.dense())
    order = np.lexsort(x.coords.T[::-1])
    back_order = np.lexsort(back.coords.T[::-1])
    np.testing.assert_array_equal(back.coords[back_order], x.coords[order])
    np.testing.assert_array_equal(back.features[back_order], x.features[order])


def test_determinism():
    rng = np.random.default_rng(11)
    x = random_sparse(rng, (12, 12, 12), 200, 3)
    sp = spec(3, 4, stride=2, mode=ConvMode.STRIDED, weights=rng.normal(size=(27, 3, 4)))
    a = sparse_conv(x, sp, build_rulebook(x, sp))
    b = sparse_conv(x, sp, build_rulebook(x, sp))
    assert np.array_equal(a.features, b.features) and np.array_equal(a.coords, b.coords)
