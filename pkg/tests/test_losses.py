import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xseason.dataset_io import CorrespondenceSample
from xseason.gradcheck import check_ce_corr, check_hinge, check_supervised_ce
from xseason.losses import (
    CITYSCAPES_CLASSES, CITYSCAPES_NONSTATIONARY, CorrLossConfig, FeatureMap, ce_corr_loss,
    confusion_matrix, filter_nonstationary, hinge_corr_loss, hinge_diagnostics, margin_angle_deg,
    mean_iou, supervised_ce_loss, total_loss, warmup_gate,
)


def one_pair():
    return CorrespondenceSample("r", "t", "x", [[0, 0]], [[0, 0]])


def fmap(vectors, kind="features"):
    return FeatureMap(np.asarray(vectors, dtype=float).reshape(1, 1, -1), kind=kind)


def random_pairs(rng, n, w, h):
    return CorrespondenceSample("r", "t", "x", rng.uniform(0, [w, h], (n, 2)) * 0.999,
                                rng.uniform(0, [w, h], (n, 2)) * 0.999)


# -- hinge ------------------------------------------------------------------------

def test_hinge_identical_vectors_zero():
    loss, gr, gt = hinge_corr_loss(fmap([1, 2, 3]), fmap([1, 2, 3]), one_pair(), 0.8)
    assert loss == 0.0 and not gr.any() and not gt.any()


def test_hinge_orthogonal_vectors():
    loss, _, _ = hinge_corr_loss(fmap([1, 0]), fmap([0, 1]), one_pair(), 0.8)
    assert loss == pytest.approx(0.8, abs=1e-15)


def test_hinge_activation_boundary():
    assert margin_angle_deg(0.8) == pytest.approx(36.8699, abs=1e-4)
    just_in = math.radians(36.86)
    just_out = math.radians(36.88)
    ref = fmap([1, 0])
    assert hinge_corr_loss(ref, fmap([math.cos(just_in), math.sin(just_in)]), one_pair())[0] == 0.0
    assert hinge_corr_loss(ref, fmap([math.cos(just_out), math.sin(just_out)]), one_pair())[0] > 0.0


def test_hinge_degenerate_vector():
    loss, gr, gt = hinge_corr_loss(fmap([0, 0]), fmap([0, 1]), one_pair(), 0.8)
    assert loss == 0.8 and not gr.any() and not gt.any()


def test_hinge_diagnostics_count_active(rng):
    ref = FeatureMap(rng.normal(size=(4, 4, 8)))
    tgt = FeatureMap(rng.normal(size=(4, 4, 8)))
    s = random_pairs(rng, 30, 4, 4)
    d = hinge_diagnostics(ref, tgt, s, 0.8)
    assert d["margin_angle_deg"] == pytest.approx(36.8699, abs=1e-4)
    rr, rc = ref.cells(s.x_ref)
    tr, tc = tgt.cells(s.x_tgt)
    a, b = ref.values[rr, rc], tgt.values[tr, tc]
    cos = [float(x @ y) / (np.linalg.norm(x) * np.linalg.norm(y)) for x, y in zip(a, b)]
    assert d["n_active"] == sum(c < 0.8 for c in cos)
    loss = hinge_corr_loss(ref, tgt, s, 0.8)[0]
    assert loss == pytest.approx(np.mean([max(0.0, 0.8 - c) for c in cos]), abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), F=st.integers(1, 12), m=st.floats(-1, 1))
def test_hinge_bounded_and_scale_invariant(seed, F, m):
    r = np.random.default_rng(seed)
    ref = FeatureMap(r.normal(size=(3, 3, F)))
    tgt = FeatureMap(r.normal(size=(3, 3, F)))
    s = random_pairs(r, 10, 3, 3)
    loss = hinge_corr_loss(ref, tgt, s, m)[0]
    assert 0.0 <= loss <= 1.0 + m + 1e-12
    scaled_ref = FeatureMap(ref.values * r.uniform(0.01, 100, (3, 3, 1)))
    scaled_tgt = FeatureMap(tgt.values * r.uniform(0.01, 100, (3, 3, 1)))
    assert abs(hinge_corr_loss(scaled_ref, scaled_tgt, s, m)[0] - loss) < 1e-12


# -- correspondence cross-entropy -------------------------------------------------------

def test_ce_confident_target_zero():
    ref = fmap([0.0, 5.0, 1.0], "logits")
    tgt = fmap([-800.0, 0.0, -800.0], "logits")
    loss, grad = ce_corr_loss(ref, tgt, one_pair())
    assert loss == 0.0
    assert np.abs(grad).max() < 1e-300 or not grad.any()


def test_ce_uniform_target_is_log_classes():
    ref = fmap(np.arange(19.0), "logits")
    loss, _ = ce_corr_loss(ref, fmap(np.zeros(19), "logits"), one_pair())
    assert loss == pytest.approx(math.log(19), abs=1e-12)
    assert round(loss, 4) == 2.9444


def test_ce_argmax_ties_go_to_lowest_class():
    ref = fmap([3.0, 3.0, 1.0], "logits")
    tgt = fmap([0.0, 2.0, 0.0], "logits")
    loss, _ = ce_corr_loss(ref, tgt, one_pair())
    expected = -(0.0 - math.log(2 + math.exp(2)))
    assert loss == pytest.approx(expected, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), C=st.integers(2, 20))
def test_ce_nonnegative_and_ref_shift_invariant(seed, C):
    r = np.random.default_rng(seed)
    ref = FeatureMap(r.normal(size=(3, 4, C)), kind="logits")
    tgt = FeatureMap(r.normal(scale=3, size=(3, 4, C)), kind="logits")
    s = random_pairs(r, 12, 4, 3)
    loss = ce_corr_loss(ref, tgt, s)[0]
    assert loss >= 0
    shifted = FeatureMap(ref.values + r.uniform(-50, 50, (3, 4, 1)), kind="logits")
    assert ce_corr_loss(shifted, tgt, s)[0] == loss


# -- supervised cross-entropy --------------------------------------------------------------

def test_supervised_confident_logits():
    v = np.zeros((2, 2, 5))
    labels = np.array([[0, 1], [2, 3]])
    for (i, j), c in np.ndenumerate(labels):
        v[i, j, c] = 30.0
    loss, _ = supervised_ce_loss(FeatureMap(v, kind="logits"), labels)
    assert loss < 1e-9


def test_supervised_all_ignored():
    loss, grad = supervised_ce_loss(FeatureMap(np.ones((2, 2, 3)), kind="logits"),
                                    np.full((2, 2), 255))
    assert loss == 0.0 and not grad.any()


def test_supervised_shape_mismatch():
    with pytest.raises(ValueError):
        supervised_ce_loss(FeatureMap(np.ones((2, 2, 3)), kind="logits", stride=2), np.zeros((8, 8)))


# -- gradients (a few fixed instances; the full sweep lives in the acceptance suite) --

@pytest.mark.parametrize("F,n", [(3, 1), (19, 7), (64, 50)])
def test_gradients_match_finite_differences(F, n):
    rng = np.random.default_rng([F, n])
    assert check_hinge(rng, F, n) < 1e-5
    assert check_ce_corr(rng, F, n) < 1e-5
    assert check_supervised_ce(rng, F, n) < 1e-5


def test_hinge_gradient_zero_for_inactive_pairs():
    loss, gr, gt = hinge_corr_loss(fmap([1, 0.1]), fmap([1, 0]), one_pair(), 0.8)
    assert loss == 0.0 and not gr.any() and not gt.any()


# -- combination, warm-up, refinement, metrics ---------------------------------------------

def test_total_loss():
    assert total_loss(2, 4, 1) == 3
    assert total_loss(2.5, 100.0, 0) == 2.5
    assert total_loss(7, 3, 1) == (7 + 3) / 2


@settings(max_examples=100)
@given(a=st.floats(0, 1e6), b=st.floats(0, 1e6), d=st.floats(0, 1e3), lam=st.floats(0, 100))
def test_total_loss_monotone(a, b, d, lam):
    assert total_loss(a + d, b, lam) >= total_loss(a, b, lam)
    assert total_loss(a, b + d, lam) >= total_loss(a, b, lam)


def test_warmup():
    cfg = CorrLossConfig(lam=0.1)
    assert warmup_gate(0, cfg) == 0.0
    assert warmup_gate(499, cfg) == 0.0
    assert warmup_gate(500, cfg) == 0.1
    assert warmup_gate(0, CorrLossConfig(warmup_iters=0)) == 1.0


def test_nonstationary_names():
    assert [CITYSCAPES_CLASSES[c] for c in sorted(CITYSCAPES_NONSTATIONARY)] == [
        "person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle"]


def test_filter_all_road_and_all_car(rng):
    s = random_pairs(rng, 20, 10, 10)
    assert filter_nonstationary(s, np.zeros((10, 10), int)) == s
    assert filter_nonstationary(s, np.full((10, 10), 13)).n == 0


def test_filter_matches_scalar_oracle_and_is_idempotent(rng):
    s = random_pairs(rng, 500, 40, 30)
    pred = rng.integers(0, 19, (30, 40))
    out = filter_nonstationary(s, pred)
    keep = [k for k, (u, v) in enumerate(s.x_ref)
            if int(pred[min(int(math.floor(v + 0.5)), 29), min(int(math.floor(u + 0.5)), 39)])
            not in {11, 12, 13, 14, 15, 16, 17, 18}]
    assert out == s.subset(keep)
    assert filter_nonstationary(out, pred) == out


def test_mean_iou_examples():
    cm = np.array([[5, 5], [0, 10]])
    assert mean_iou(np.diag([3, 4, 5])) == 1.0
    assert mean_iou(cm, {0, 1}) == pytest.approx((0.5 + 10 / 15) / 2, abs=1e-15)
    assert round(mean_iou(cm, {0, 1}), 5) == 0.58333
    assert mean_iou(cm, {0}) == 0.5


def test_confusion_matrix_counts():
    gt = np.array([0, 0, 1, 255, 1])
    pred = np.array([0, 1, 1, 0, 1])
    np.testing.assert_array_equal(confusion_matrix(gt, pred, 2), [[1, 1], [0, 2]])
