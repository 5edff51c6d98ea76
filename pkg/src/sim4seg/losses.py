"""Segmentation and text training losses with analytic gradients."""

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import InvalidInputError
from .validation import check_binary_mask, check_same_shape, frozen

#: Optimiser settings of the reference training run. Recorded, never executed.
TRAINING_CONSTANTS = {
    "optimizer": "AdamW",
    "learning_rate": 3e-4,
    "weight_decay": 0.01,
    "batch_size": 2,
    "gradient_accumulation_steps": 10,
    "epochs": 4,
}


@dataclass(frozen=True)
class LossWeights:
    txt: float = 1.0
    mask: float = 1.0
    bce: float = 2.0
    dice: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidInputError(f"loss weight {f.name} must be >= 0")

    @classmethod
    def from_config(cls, mapping):
        """Build from ``lambda_txt`` / ``lambda_mask`` / ``lambda_bce`` / ``lambda_dice`` keys."""
        kwargs = {}
        for f in fields(cls):
            key = f"lambda_{f.name}"
            if key in mapping:
                kwargs[f.name] = float(mapping[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class SoftMask:
    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 2:
            raise InvalidInputError("soft mask logits must be 2-D")
        object.__setattr__(self, "logits", frozen(logits))

    @property
    def probabilities(self):
        return expit(self.logits)


def _checked(pred, gt):
    check_same_shape(pred.logits, gt)
    return check_binary_mask(gt, name="ground truth").astype(np.float64)


def bce_loss(pred, gt):
    """Pixel-mean binary cross-entropy and its gradient w.r.t. the logits."""
    g = _checked(pred, gt)
    x = pred.logits
    # softplus(x) - g*x, written to stay finite for large |x|
    per_pixel = np.maximum(x, 0.0) - x * g + np.log1p(np.exp(-np.abs(x)))
    value = float(per_pixel.mean())
    grad = (expit(x) - g) / x.size
    return value, grad


def dice_loss(pred, gt, eps=1.0):
    """Smoothed soft DICE loss and its gradient w.r.t. the logits."""
    if eps <= 0:
        raise InvalidInputError("dice smoothing must be > 0")
    g = _checked(pred, gt)
    p = pred.probabilities
    num = 2.0 * np.sum(p * g) + eps
    den = np.sum(p) + np.sum(g) + eps
    value = 1.0 - num / den
    d_value_dp = -(2.0 * g * den - num) / (den * den)
    return float(value), d_value_dp * p * (1.0 - p)


def text_ce_loss(logits, targets):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise InvalidInputError("expected (T, V) logits and T targets")
    if np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise InvalidInputError("target id outside the vocabulary")
    picked = logits[np.arange(logits.shape[0]), targets]
    return float(np.mean(logsumexp(logits, axis=1) - picked))


def mask_loss(bce, dice, w=LossWeights()):
    return w.bce * bce + w.dice * dice


def total_loss(txt, mask, w=LossWeights()):
    return w.txt * txt + w.mask * mask
