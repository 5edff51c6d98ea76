"""Prompt-conditioned toy mask decoder.

Per-pixel visual features are dotted with the segmentation embedding and the
nearest-neighbour-upsampled region prompt is added with gain ``beta`` before a
logistic squash. The prompt can only raise scores, so a larger prompt never
removes foreground pixels.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import InvalidInputError
from .validation import check_image, frozen

#: Local statistics per pixel: intensity, 3x3 mean, 3x3 std, 5x5 mean.
N_PIXEL_STATS = 4


@dataclass(frozen=True)
class VisualFeatures:
    values: np.ndarray  # (h, w, d)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or 0 in values.shape:
            raise InvalidInputError(f"features must be (h, w, d), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("features contain NaN or infinite values")
        object.__setattr__(self, "values", frozen(values))

    @property
    def shape(self):
        return self.values.shape[:2]

    @property
    def dim(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class PredictedMask:
    scores: np.ndarray
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "scores", frozen(np.asarray(self.scores, dtype=np.float64)))
        object.__setattr__(self, "bits", frozen(self.scores >= self.threshold))

    @property
    def shape(self):
        return self.scores.shape

    def __eq__(self, other):
        return (isinstance(other, PredictedMask) and self.threshold == other.threshold
                and np.array_equal(self.scores, other.scores))

    __hash__ = None


@dataclass(frozen=True)
class DecoderConfig:
    beta: float = 4.0
    threshold: float = 0.6

    def __post_init__(self):
        if self.beta < 0:
            raise InvalidInputError("prompt gain beta must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidInputError("decision threshold must lie in (0, 1)")


def _box_mean(img, radius):
    padded = np.pad(img, radius, mode="edge")
    side = 2 * radius + 1
    h, w = img.shape
    out = np.zeros_like(img)
    for dy in range(side):
        for dx in range(side):
            out += padded[dy:dy + h, dx:dx + w]
    return out / (side * side)


def pixel_statistics(image):
    img = check_image(image)
    mean3 = _box_mean(img, 1)
    var3 = np.maximum(_box_mean(img * img, 1) - mean3 * mean3, 0.0)
    return np.stack([img, mean3, np.sqrt(var3), _box_mean(img, 2)], axis=-1)


def extract_features(image, dim=16, seed=0, scale=0.1):
    """Seeded linear map of centred local statistics, one ``dim``-vector per pixel.

    Borders replicate edge pixels, so a constant image gives constant features.
    """
    if dim < 1:
        raise InvalidInputError("feature dim must be >= 1")
    stats = pixel_statistics(image)
    stats[..., [0, 1, 3]] -= 0.5
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, scale, (dim, N_PIXEL_STATS))
    return VisualFeatures(stats @ proj.T)


def upsample_nearest(bits, height, width):
    g_h, g_w = bits.shape
    rows = (np.arange(height) * g_h) // height
    cols = (np.arange(width) * g_w) // width
    return bits.take(rows, axis=0).take(cols, axis=1)


def decode_logits(feature_logits, region, cfg=DecoderConfig()):
    """Decode from precomputed ``feats . seg`` logits (shape ``(h, w)``)."""
    h, w = feature_logits.shape
    if region.grid > min(h, w):
        raise InvalidInputError(f"region grid {region.grid} exceeds feature map {h}x{w}")
    prompt = upsample_nearest(region.bits, h, w)
    return PredictedMask(expit(feature_logits + cfg.beta * prompt), cfg.threshold)


def decode(feats, seg, region, cfg=DecoderConfig()):
    if feats.dim != seg.dim:
        raise InvalidInputError(
            f"features have dim {feats.dim}, seg embedding has dim {seg.dim}")
    return decode_logits(feats.values @ seg.values, region, cfg)
