import math

import mpmath
import numpy as np
import pytest
from scipy.special import logit

from sim4seg.exceptions import InvalidInputError
from sim4seg.losses import (TRAINING_CONSTANTS, LossWeights, SoftMask, bce_loss, dice_loss,
                            mask_loss, text_ce_loss, total_loss)

STEP = 1e-4


def central_difference(fn, x):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += STEP
        down[idx] -= STEP
        grad[idx] = (fn(up) - fn(down)) / (2 * STEP)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def random_instance(rng):
    return rng.normal(scale=2.0, size=(8, 8)), rng.random((8, 8)) > 0.5


@pytest.mark.parametrize("loss", [bce_loss, dice_loss])
def test_gradient_matches_finite_differences(loss):
    rng = np.random.default_rng(99)
    for _ in range(20):
        x, gt = random_instance(rng)
        _, grad = loss(SoftMask(x), gt)
        numeric = central_difference(lambda z: loss(SoftMask(z), gt)[0], x)
        assert relative_error(grad, numeric) < 1e-4


def test_bce_at_half_is_ln2(rng):
    gt = rng.random((5, 7)) > 0.3
    value, _ = bce_loss(SoftMask(np.zeros((5, 7))), gt)
    assert abs(value - math.log(2)) < 1e-9


def test_bce_matches_probability_form(rng):
    x, gt = random_instance(rng)
    p = 1 / (1 + np.exp(-x))
    direct = -np.mean(gt * np.log(p) + (1 - gt) * np.log(1 - p))
    assert bce_loss(SoftMask(x), gt)[0] == pytest.approx(direct, rel=1e-12)


def test_bce_near_perfect_prediction_is_bounded_and_monotone(rng):
    gt = rng.random((4, 4)) > 0.5
    prev = None
    for eps in (1e-1, 1e-3, 1e-6, 1e-10):
        x = np.where(gt, logit(1 - eps), logit(eps))
        value, _ = bce_loss(SoftMask(x), gt)
        assert value <= eps / (1 - eps) + 1e-15
        if prev is not None:
            assert value < prev
        prev = value


def test_bce_is_finite_for_extreme_logits():
    gt = np.array([[1, 0]], dtype=bool)
    value, grad = bce_loss(SoftMask(np.array([[-800.0, 800.0]])), gt)
    assert value == pytest.approx(800.0) and np.all(np.isfinite(grad))


def test_dice_exact_prediction_is_zero():
    gt = np.array([[1, 0], [0, 1]], dtype=bool)
    x = np.where(gt, 800.0, -800.0)  # saturates the logistic to exactly 0/1
    assert dice_loss(SoftMask(x), gt)[0] == 0.0


def test_dice_empty_masks_with_smoothing():
    assert dice_loss(SoftMask(np.full((3, 3), -800.0)), np.zeros((3, 3), dtype=bool))[0] == 0.0


def test_dice_value_formula(rng):
    x, gt = random_instance(rng)
    p = 1 / (1 + np.exp(-x))
    expected = 1 - (2 * np.sum(p * gt) + 1) / (np.sum(p) + np.sum(gt) + 1)
    assert dice_loss(SoftMask(x), gt)[0] == pytest.approx(expected, rel=1e-12)


def test_dice_not_symmetric_under_complementation(rng):
    x, gt = random_instance(rng)
    a = dice_loss(SoftMask(x), gt)[0]
    b = dice_loss(SoftMask(-x), ~gt)[0]
    assert abs(a - b) > 1e-6


def test_dice_rejects_non_positive_smoothing(rng):
    x, gt = random_instance(rng)
    with pytest.raises(InvalidInputError):
        dice_loss(SoftMask(x), gt, eps=0.0)


@pytest.mark.parametrize("loss", [bce_loss, dice_loss])
def test_shape_mismatch(loss):
    with pytest.raises(InvalidInputError):
        loss(SoftMask(np.zeros((2, 2))), np.zeros((2, 3), dtype=bool))


def test_losses_are_non_negative(rng):
    for _ in range(50):
        x, gt = random_instance(rng)
        assert bce_loss(SoftMask(x), gt)[0] >= 0
        assert 0 <= dice_loss(SoftMask(x), gt)[0] < 1


def test_text_ce_uniform():
    assert text_ce_loss(np.zeros((3, 4)), [0, 3, 1]) == pytest.approx(math.log(4), abs=1e-12)


def test_text_ce_margin_limit():
    values = []
    for margin in (1.0, 5.0, 20.0, 60.0):
        logits = np.zeros((2, 5))
        logits[0, 2] = logits[1, 4] = margin
        values.append(text_ce_loss(logits, [2, 4]))
    assert all(a > b for a, b in zip(values, values[1:])) and values[-1] < 1e-20


def test_text_ce_matches_extended_precision(rng):
    logits = rng.normal(scale=3.0, size=(5, 7))
    targets = rng.integers(0, 7, 5)
    with mpmath.workdps(50):
        terms = []
        for row, t in zip(logits, targets):
            lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in row))
            terms.append(lse - mpmath.mpf(float(row[t])))
        expected = float(mpmath.fsum(terms) / len(terms))
    assert abs(text_ce_loss(logits, targets) - expected) < 1e-10


def test_text_ce_target_out_of_range():
    with pytest.raises(InvalidInputError):
        text_ce_loss(np.zeros((2, 3)), [0, 3])


def test_default_weights():
    w = LossWeights()
    assert (w.txt, w.mask, w.bce, w.dice) == (1.0, 1.0, 2.0, 0.5)


def test_weights_from_config():
    w = LossWeights.from_config({"lambda_bce": "2.0", "lambda_dice": 0.5, "lambda_txt": 1,
                                 "lambda_mask": 1.0, "unrelated": 3})
    assert w == LossWeights()
    assert LossWeights.from_config({"lambda_dice": 0.25}).dice == 0.25


def test_negative_weight_rejected():
    with pytest.raises(InvalidInputError):
        LossWeights(bce=-1.0)


def test_weighted_sums():
    assert mask_loss(0.693147, 0.2) == pytest.approx(1.486294, abs=1e-12)
    assert total_loss(1.0, 1.486294) == pytest.approx(2.486294, abs=1e-12)
    zero = LossWeights(0.0, 0.0, 0.0, 0.0)
    assert mask_loss(0.7, 0.3, zero) == 0.0 and total_loss(0.7, 0.3, zero) == 0.0
    assert mask_loss(0.7, 0.3, LossWeights(bce=1.0, dice=0.0)) == 0.7
    assert total_loss(0.7, 0.3, LossWeights(mask=0.0)) == 0.7


def test_total_loss_is_linear(rng):
    a, b = rng.random(2), rng.random(2)
    assert total_loss(*(a + b)) == pytest.approx(total_loss(*a) + total_loss(*b), rel=1e-14)


def test_training_constants_recorded():
    assert TRAINING_CONSTANTS["learning_rate"] == 3e-4
    assert TRAINING_CONSTANTS["optimizer"] == "AdamW"
