from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsfcn.metrics import (ConfusionMatrix, EmptyMatrixError, class_ious, ensemble_infer,
                           filter_false_positive_classes, miou, pixacc, predict_labels)
from wsfcn.model import IGNORE, ModelConfig, build_model, infer_masks


def brute_force(pred, gt, k, ignore=IGNORE):
    """Per-pixel counting with exact fractions."""
    inter, pred_n, gt_n = [0] * k, [0] * k, [0] * k
    correct = total = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g == ignore:
            continue
        total += 1
        gt_n[g] += 1
        pred_n[p] += 1
        if p == g:
            inter[g] += 1
            correct += 1
    ious = [Fraction(inter[c], gt_n[c] + pred_n[c] - inter[c]) for c in range(k) if gt_n[c] + pred_n[c] - inter[c]]
    return sum(ious) / len(ious), Fraction(correct, total)


def test_hand_case():
    cm = ConfusionMatrix(2).accumulate(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]))
    assert class_ious(cm) == {0: 0.5, 1: 2 / 3}
    assert miou(cm) == pytest.approx(7 / 12, abs=1e-15)
    assert pixacc(cm) == 0.75


def test_hundred_random_pairs_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        gt = rng.integers(0, k, size=(8, 8))
        gt[rng.random((8, 8)) < 0.1] = IGNORE
        pred = rng.integers(0, k, size=(8, 8))
        cm = ConfusionMatrix(k).accumulate(pred, gt)
        m, a = brute_force(pred, gt, k)
        assert miou(cm) == pytest.approx(float(m), abs=1e-15)
        assert pixacc(cm) == float(a)
        expected = np.zeros((k, k), np.int64)
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g != IGNORE:
                expected[g, p] += 1
        assert np.array_equal(cm.counts, expected)


def test_perfect_and_disjoint():
    gt = np.array([[0, 1], [2, 2]])
    cm = ConfusionMatrix(3).accumulate(gt, gt)
    assert np.array_equal(cm.counts, np.diag(np.diag(cm.counts))) and miou(cm) == 1 and pixacc(cm) == 1
    pred = np.array([[0, 2], [2, 2]])
    cm = ConfusionMatrix(3).accumulate(pred, gt)
    assert class_ious(cm)[1] == 0
    assert miou(cm) == pytest.approx((1 + 0 + 2 / 3) / 3)


def test_all_ignored_is_empty():
    cm = ConfusionMatrix(3).accumulate(np.zeros((2, 2), int), np.full((2, 2), IGNORE))
    assert cm.total() == 0 and not cm.counts.any()
    with pytest.raises(EmptyMatrixError):
        miou(cm)
    with pytest.raises(EmptyMatrixError):
        pixacc(cm)


def test_out_of_range_names_pixel():
    with pytest.raises(ValueError, match=r"\(1, 0\)"):
        ConfusionMatrix(3).accumulate(np.array([[0, 1], [7, 1]]), np.array([[0, 1], [1, 1]]))
    with pytest.raises(ValueError, match="shape"):
        ConfusionMatrix(3).accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_permutation_invariance(seed, k):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, k, size=(8, 8)), rng.integers(0, k, size=(8, 8))
    perm = rng.permutation(k)
    a = ConfusionMatrix(k).accumulate(pred, gt)
    b = ConfusionMatrix(k).accumulate(perm[pred], perm[gt])
    assert miou(a) == pytest.approx(miou(b), abs=1e-15) and pixacc(a) == pixacc(b)


def test_accumulation_order_independent():
    rng = np.random.default_rng(1)
    pairs = [(rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))) for _ in range(6)]
    a = ConfusionMatrix(4)
    for p, g in pairs:
        a.accumulate(p, g)
    parts = [ConfusionMatrix(4).accumulate(p, g) for p, g in reversed(pairs)]
    b = parts[0]
    for part in parts[1:]:
        b = part.merge(b)
    assert np.array_equal(a.counts, b.counts)


# --- false-positive filtering -------------------------------------------------------------


def test_filter_all_present_is_identity():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((2, 4, 3, 3))
    m = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(filter_false_positive_classes(m, np.ones((2, 3))), m, rtol=1e-15)


def test_filter_no_foreground_collapses_to_background():
    rng = np.random.default_rng(3)
    m = rng.dirichlet(np.ones(4), size=(2, 3, 3)).transpose(0, 3, 1, 2)
    m[0, :, 0, 0] = [0, 1, 0, 0]
    out = filter_false_positive_classes(m, np.zeros((2, 3)))
    assert np.all(out[:, 0] == 1) and np.all(predict_labels(out) == 0)


def test_filter_never_hurts_when_removed_channels_are_false_positives():
    rng = np.random.default_rng(4)
    gt = np.zeros((1, 8, 8), np.uint8)
    gt[0, 2:6, 2:6] = 1
    # class 1 present; class 2 predicted on part of the background (false positive)
    logits = rng.standard_normal((1, 3, 8, 8)) * 0.1
    logits[0, 1, 2:6, 2:6] += 3
    logits[0, 2, :2] += 4
    masks = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    before = ConfusionMatrix(3).accumulate(predict_labels(masks)[0], gt[0])
    after = ConfusionMatrix(3).accumulate(predict_labels(filter_false_positive_classes(masks, [[1, 0]]))[0], gt[0])
    assert miou(after) >= miou(before) and pixacc(after) >= pixacc(before)
    assert pixacc(after) > pixacc(before)


# --- ensembling --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(d2=8, kernel_sizes=[1, 3]), "full", seed=3)


def image(seed, n=2, size=32):
    return np.random.default_rng(seed).standard_normal((n, 3, size, size)).astype(np.float32)


def test_single_scale_bit_identical(model):
    x = image(5)
    assert ensemble_infer(model, x, [1.0], False).tobytes() == infer_masks(model, x).tobytes()


def test_duplicate_scale_is_idempotent(model):
    x = image(6)
    np.testing.assert_array_equal(ensemble_infer(model, x, [1.0, 1.0], False), ensemble_infer(model, x, [1.0], False))


def test_multiscale_flip_protocol_is_simplex(model):
    x = image(7, size=40)
    out = ensemble_infer(model, x, [1, 0.5, 1.5, 2], True)
    assert out.shape == (2, 5, 10, 10)
    assert np.all(out >= 0) and np.all(np.abs(out.sum(axis=1) - 1) <= 1e-5)


def test_flip_of_flipped_input(model):
    x = image(8)
    a = ensemble_infer(model, x, [1.0], True)
    b = ensemble_infer(model, np.ascontiguousarray(x[..., ::-1]), [1.0], True)
    np.testing.assert_allclose(a, b[..., ::-1], atol=1e-6)
