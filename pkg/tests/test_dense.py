import numpy as np
import pytest

from voxmt.dense import conv1x1, conv2d, dense_conv3d_oracle, upsample2x
from voxmt.errors import ConfigError


def test_conv2d_identity_1x1():
    x = np.random.default_rng(0).normal(size=(3, 5, 6))
    np.testing.assert_array_equal(conv2d(x, np.eye(3)[:, :, None, None]), x)


def test_conv2d_averaging_on_one_hot():
    x = np.zeros((1, 7, 7))
    x[0, 3, 3] = 1.0
    out = conv2d(x, np.full((1, 1, 3, 3), 1 / 9))
    expected = np.zeros((7, 7))
    expected[2:5, 2:5] = 1 / 9
    np.testing.assert_allclose(out[0], expected)


def test_conv2d_stride_two_shape():
    assert conv2d(np.ones((2, 8, 8)), np.ones((4, 2, 3, 3)), stride=2).shape == (4, 4, 4)
    assert conv2d(np.ones((2, 5, 7)), np.ones((4, 2, 3, 3)), stride=2).shape == (4, 3, 4)


def test_conv2d_channel_mismatch():
    with pytest.raises(ConfigError):
        conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_conv2d_relu_and_bias():
    out = conv2d(np.ones((1, 3, 3)), -np.ones((1, 1, 1, 1)), bias=np.array([0.5]), relu=True)
    assert not out.any()


def test_conv2d_linearity():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 2, 3, 3))
    x, y = rng.normal(size=(2, 2, 9, 9))
    np.testing.assert_allclose(conv2d(2.0 * x - 3.0 * y, w), 2.0 * conv2d(x, w) - 3.0 * conv2d(y, w), atol=1e-6)


def test_conv2d_translation_equivariance_interior():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(1, 1, 3, 3))
    x = np.zeros((1, 16, 16))
    x[0, 5:8, 5:8] = rng.normal(size=(3, 3))
    shifted = np.roll(x, (2, 3), axis=(1, 2))
    np.testing.assert_allclose(np.roll(conv2d(x, w), (2, 3), axis=(1, 2)), conv2d(shifted, w), atol=1e-12)


def test_conv2d_matches_shifted_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    ref = np.zeros((3, 6, 5))
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    for co in range(3):
        for r in range(6):
            for c in range(5):
                ref[co, r, c] = np.sum(pad[:, r : r + 3, c : c + 3] * w[co])
    np.testing.assert_allclose(conv2d(x, w), ref, atol=1e-12)


def test_conv1x1_accepts_matrix():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 4, 4))
    w = rng.normal(size=(2, 3))
    np.testing.assert_allclose(conv1x1(x, w), conv1x1(x, w[:, :, None, None]))


def test_upsample2x():
    np.testing.assert_array_equal(upsample2x(np.full((1, 1, 1), 7.0)), np.full((1, 2, 2), 7.0))
    x = np.random.default_rng(5).normal(size=(2, 4, 4))
    up = upsample2x(x)
    assert up.shape == (2, 8, 8)
    np.testing.assert_array_equal(up[:, ::2, ::2], x)


def test_oracle_identity_and_imprint():
    rng = np.random.default_rng(6)
    vol = rng.normal(size=(2, 4, 5, 6))
    np.testing.assert_array_equal(dense_conv3d_oracle(vol, np.eye(2)[None], (1, 1, 1)), vol)
    one = np.zeros((1, 5, 5, 5))
    one[0, 2, 2, 2] = 1.0
    w = rng.normal(size=(27, 1, 1))
    out = dense_conv3d_oracle(one, w)
    # output at (2,2,2) - d collects tap d; offsets enumerate z-major
    k = 0
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                assert out[0, 2 - dz, 2 - dy, 2 - dx] == w[k, 0, 0]
                k += 1
    assert np.count_nonzero(out) == 27


def test_oracle_stride_two_shape():
    assert dense_conv3d_oracle(np.ones((1, 5, 6, 7)), np.ones((27, 1, 2)), stride=2).shape == (2, 3, 3, 4)
