import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from voxmt.losses import (
    COMPONENTS,
    UncertaintyParams,
    binary_cross_entropy,
    combine_losses,
    cross_entropy,
    gaussian_focal,
    group_det,
    l1_loss,
    lovasz_softmax,
    softmax,
    total_uncertainty_loss,
    uncertainty_weighted,
)
from voxmt.selftest import _fd_grad, _lovasz_instance, _rel_err


def params(s_seg=0.0, s_det=0.0, s_bev=0.0):
    return UncertaintyParams({"SEG": s_seg, "DET": s_det, "BEV": s_bev})


def lovasz_extension_oracle(probs, labels):
    """Threshold integral of the Jaccard set loss, averaged over present classes."""
    total = []
    for c in np.unique(labels):
        fg = labels == c
        err = np.where(fg, 1.0 - probs[:, c], probs[:, c])

        def jaccard_loss(mistakes):
            return mistakes.sum() / (fg | mistakes).sum()

        levels = np.unique(err[err > 0])[::-1]
        value = 0.0
        for j, v in enumerate(levels):
            nxt = levels[j + 1] if j + 1 < len(levels) else 0.0
            value += (v - nxt) * jaccard_loss(err >= v)
        total.append(value)
    return float(np.mean(total))


# ---------------------------------------------------------------- cross-entropy


def test_ce_confident_limit():
    logits = np.array([[100.0, 0.0, 0.0], [0.0, 0.0, 100.0]])
    value, _ = cross_entropy(logits, [0, 2])
    assert value < 1e-6


def test_ce_uniform_is_log_k():
    value, _ = cross_entropy(np.zeros((3, 4)), [0, 1, 3])
    assert value == pytest.approx(math.log(4))


def test_ce_gradient_5x3():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 3))
    labels = rng.integers(0, 3, size=5)
    _, g = cross_entropy(logits, labels)
    assert _rel_err(g, _fd_grad(lambda z: cross_entropy(z, labels)[0], logits)) < 1e-4


def test_ce_ignored_rows():
    logits = np.random.default_rng(1).normal(size=(4, 3))
    value, g = cross_entropy(logits, [0, 1, 2, 0], ignore_mask=[True] * 4)
    assert value == 0.0 and not g.any()
    v1, g1 = cross_entropy(logits, [0, 1, 2, 0], ignore_mask=[False, True, False, True])
    v2, _ = cross_entropy(logits[[0, 2]], [0, 2])
    assert v1 == pytest.approx(v2)
    assert not g1[[1, 3]].any()


# ---------------------------------------------------------------- Lovasz


def test_lovasz_perfect_prediction_is_zero():
    labels = np.array([0, 1, 1, 0])
    value, _ = lovasz_softmax(np.eye(2)[labels], labels)
    assert value == 0.0


def test_lovasz_hard_binary_is_one_minus_iou():
    gt = np.array([1, 1, 0, 0, 1, 0, 0, 1])
    pred = np.array([1, 0, 0, 1, 1, 0, 1, 1])
    value, _ = lovasz_softmax(np.eye(2)[pred], gt)
    iou = [np.sum((pred == c) & (gt == c)) / np.sum((pred == c) | (gt == c)) for c in (0, 1)]
    assert value == pytest.approx(1 - np.mean(iou))


def test_lovasz_six_elements_matches_extension_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        probs = softmax(rng.normal(size=(6, 3)), axis=1)
        labels = rng.integers(0, 3, size=6)
        value, _ = lovasz_softmax(probs, labels)
        assert value == pytest.approx(lovasz_extension_oracle(probs, labels), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=10), st.data())
def test_lovasz_vertices_up_to_ten(gt, data):
    gt = np.array(gt)
    pred = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(gt), max_size=len(gt))))
    value, _ = lovasz_softmax(np.eye(2)[pred], gt)
    present = np.unique(gt)
    ref = np.mean([1 - np.sum((pred == c) & (gt == c)) / np.sum((pred == c) | (gt == c)) for c in present])
    assert value == pytest.approx(ref, abs=1e-12)


def test_lovasz_gradient_off_ties():
    rng = np.random.default_rng(3)
    for _ in range(10):
        probs, labels = _lovasz_instance(rng)
        _, g = lovasz_softmax(probs, labels)
        assert _rel_err(g, _fd_grad(lambda p: lovasz_softmax(p, labels)[0], probs)) < 1e-4


def test_lovasz_empty_and_ignored():
    assert lovasz_softmax(np.zeros((0, 3)), np.zeros(0))[0] == 0.0
    probs = softmax(np.random.default_rng(4).normal(size=(3, 2)), axis=1)
    value, g = lovasz_softmax(probs, [0, 1, 1], ignore_mask=[True, True, True])
    assert value == 0.0 and not g.any()


# ---------------------------------------------------------------- focal


def test_focal_hand_value():
    value, _ = gaussian_focal(np.array([[0.5]]), np.array([[1.0]]))
    assert value == pytest.approx(0.25 * math.log(2), abs=5e-5)
    assert value == pytest.approx(0.1733, abs=5e-5)


def test_focal_perfect_within_clamp():
    target = np.zeros((4, 4))
    target[1, 2] = target[3, 0] = 1.0
    value, _ = gaussian_focal(target.copy(), target)
    assert value < 1e-9


def test_focal_gradient_8x8():
    rng = np.random.default_rng(5)
    pred = rng.uniform(0.05, 0.95, size=(8, 8))
    target = rng.uniform(0, 0.9, size=(8, 8))
    target[2, 2] = target[5, 6] = 1.0
    _, g = gaussian_focal(pred, target)
    assert _rel_err(g, _fd_grad(lambda p: gaussian_focal(p, target)[0], pred)) < 1e-4


def test_focal_normalizer_has_floor_of_one():
    pred = np.full((2, 2), 0.3)
    value, _ = gaussian_focal(pred, np.zeros((2, 2)))
    assert value == pytest.approx(4 * -(0.3**2) * math.log(0.7))


# ---------------------------------------------------------------- L1, BCE


def test_l1_cases():
    assert l1_loss(np.ones(3), np.ones(3))[0] == 0.0
    assert l1_loss(np.array([1.0, -2.0]), np.zeros(2))[0] == pytest.approx(1.5)
    assert l1_loss(np.ones(2), np.zeros(2), mask=[False, False])[0] == 0.0
    _, g = l1_loss(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(g, [0.0, -0.5])


def test_bce_value_and_gradient():
    rng = np.random.default_rng(6)
    p = rng.uniform(0.1, 0.9, size=6)
    t = rng.integers(0, 2, size=6).astype(float)
    value, g = binary_cross_entropy(p, t)
    assert value == pytest.approx(-np.mean(t * np.log(p) + (1 - t) * np.log(1 - p)))
    assert _rel_err(g, _fd_grad(lambda q: binary_cross_entropy(q, t)[0], p)) < 1e-4


# ---------------------------------------------------------------- combination


def test_group_det():
    assert group_det(0, 0, 0) == 0
    assert group_det(1, 1, 1) == 4
    assert group_det(0.5, 0.25, 0.1) == pytest.approx(1.1)


def test_uncertainty_unit_variance():
    total, _ = total_uncertainty_loss(1.0, 2.0, 3.5, params())
    assert total == pytest.approx(3.25)


@pytest.mark.parametrize("value", [0.5, 1.0, 4.0])
def test_uncertainty_stationary_at_log_loss(value):
    _, g = total_uncertainty_loss(value, value, value, params(*(math.log(value),) * 3))
    assert all(abs(v) < 1e-12 for v in g.values())
    root = brentq(lambda s: total_uncertainty_loss(value, 1, 1, params(s))[1]["SEG"], -30, 30, xtol=1e-14)
    assert abs(root - math.log(value)) < 1e-8


def test_uncertainty_gradient_fd():
    rng = np.random.default_rng(7)
    for _ in range(20):
        losses = rng.uniform(0.01, 10, size=3)
        s = rng.normal(size=3) * 2

        def f(v):
            return total_uncertainty_loss(*losses, params(*v))[0]

        _, gd = total_uncertainty_loss(*losses, params(*s))
        assert _rel_err([gd["SEG"], gd["DET"], gd["BEV"]], _fd_grad(f, s)) < 1e-6


def test_uncertainty_weight_decreases_with_s():
    # d total / d L_i = exp(-s_i) / 2 strictly decreases in s_i
    weights = []
    for s in (-1.0, 0.0, 1.0):
        a, _ = total_uncertainty_loss(1.0, 0, 0, params(s))
        b, _ = total_uncertainty_loss(2.0, 0, 0, params(s))
        weights.append(b - a)
    assert weights[0] > weights[1] > weights[2]
    assert weights[1] == pytest.approx(0.5)


def test_combine_grouped_and_per_loss():
    comps = dict(zip(COMPONENTS, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]))
    rep = combine_losses(comps, params(0.5, -0.5, 1.0))
    assert rep.seg == pytest.approx(0.3)
    assert rep.det == pytest.approx(0.3 + 0.8 + 0.5)
    assert rep.bev == pytest.approx(1.3)
    expected, _ = total_uncertainty_loss(0.3, 1.6, 1.3, params(0.5, -0.5, 1.0))
    assert rep.total == pytest.approx(expected)
    per = combine_losses(comps, per_loss=True)
    ref, _ = uncertainty_weighted(comps, {k: 0.0 for k in COMPONENTS})
    assert per.total == pytest.approx(ref)
    text = rep.to_text()
    assert "ce_v = " in text and "total = " in text


def test_losses_nonnegative():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(10, 4))
    labels = rng.integers(0, 4, size=10)
    assert cross_entropy(logits, labels)[0] >= 0
    assert lovasz_softmax(softmax(logits, axis=1), labels)[0] >= 0
    assert gaussian_focal(rng.uniform(size=(3, 3)), rng.uniform(size=(3, 3)))[0] >= 0
