"""Region-aware vision-language similarity to mask.

Turns token-level similarity between image tokens and the projected
segmentation embedding into a ``g x g`` binary region prompt:

    similarity -> softmax -> 2-D reshape -> block average -> thresholding
"""

import json
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .embeddings import project
from .exceptions import ContractViolation, GridTooFineError, InvalidInputError
from .validation import check_vector, frozen


@dataclass(frozen=True)
class SimilarityVector:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = check_vector(self.values, name="similarity")
        if self.normalized:
            if np.any(values < 0.0) or np.any(values > 1.0):
                raise ContractViolation("normalized similarity outside [0, 1]")
            if abs(values.sum() - 1.0) > 1e-9:
                raise ContractViolation("normalized similarity does not sum to 1")
        object.__setattr__(self, "values", frozen(values))

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class SimilarityMap:
    """Row-major 2-D arrangement of a normalized similarity vector.

    ``pad_count`` trailing cells beyond the ``n`` tokens are exactly zero.
    """

    values: np.ndarray
    pad_count: int

    def __post_init__(self):
        object.__setattr__(self, "values", frozen(np.asarray(self.values, dtype=np.float64)))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class RegionMatrix:
    values: np.ndarray
    block: int

    def __post_init__(self):
        object.__setattr__(self, "values", frozen(np.asarray(self.values, dtype=np.float64)))

    @property
    def grid(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class RegionMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise InvalidInputError(f"region mask must be square, got {bits.shape}")
        object.__setattr__(self, "bits", frozen(bits.astype(bool)))

    @property
    def grid(self):
        return self.bits.shape[0]

    @property
    def popcount(self):
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, RegionMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())

    def to_json(self):
        return json.dumps(["".join("1" if b else "0" for b in row) for row in self.bits])

    @classmethod
    def from_json(cls, text):
        rows = json.loads(text)
        return cls(np.array([[c == "1" for c in row] for row in rows], dtype=bool))


@dataclass(frozen=True)
class TopK:
    k: int = 36

    def resolve(self, grid):
        if not 1 <= self.k <= grid * grid:
            raise InvalidInputError(f"TopK k={self.k} outside [1, {grid * grid}]")
        return self.k


@dataclass(frozen=True)
class AbsoluteThreshold:
    t: float

    def resolve(self, grid):
        return None


@dataclass(frozen=True)
class TopFraction:
    f: float

    def __post_init__(self):
        if not 0.0 < self.f <= 1.0:
            raise InvalidInputError(f"TopFraction f={self.f} outside (0, 1]")

    def resolve(self, grid):
        # 1e-9 slack keeps exact products like 0.1 * 100 from rounding up
        return max(1, math.ceil(self.f * grid * grid - 1e-9))


TauStrategy = Union[TopK, AbsoluteThreshold, TopFraction]


def similarity(imgs, seg):
    if imgs.dim != seg.dim:
        raise InvalidInputError(
            f"image embeddings have dim {imgs.dim}, seg embedding has dim {seg.dim}")
    return SimilarityVector(imgs.values @ seg.values, normalized=False)


def normalize(sim):
    if sim.normalized:
        raise ContractViolation("similarity vector is already normalized")
    s = sim.values
    e = np.exp(s - s.max())
    return SimilarityVector(e / e.sum(), normalized=True)


def map_shape(n):
    h = math.isqrt(n)
    return h, -(-n // h)


def to_map(sim):
    if not sim.normalized:
        raise ContractViolation("to_map requires a softmax-normalized similarity vector")
    n = len(sim)
    h, w = map_shape(n)
    flat = np.zeros(h * w)
    flat[:n] = sim.values
    return SimilarityMap(flat.reshape(h, w), pad_count=h * w - n)


def block_size(height, width, grid):
    if grid < 1:
        raise InvalidInputError("grid size must be >= 1")
    b = min(height, width) // grid
    if b < 1:
        raise GridTooFineError(
            f"grid {grid} exceeds the {height}x{width} similarity map")
    return b


def pool_regions(smap, grid):
    """Average ``b x b`` blocks; rows/columns past ``b * grid`` are ignored.

    Accumulates block offsets in row-major order so the result is bitwise
    reproducible by a plain double loop.
    """
    b = block_size(smap.height, smap.width, grid)
    span = b * grid
    m = smap.values
    acc = np.zeros((grid, grid))
    for i in range(b):
        for j in range(b):
            acc += m[i:span:b, j:span:b]
    return RegionMatrix(acc / (b * b), block=b)


def apply_tau(regions, strategy):
    """Binarise the region matrix; ties go to the smallest row-major index."""
    g = regions.grid
    values = regions.values
    if isinstance(strategy, AbsoluteThreshold):
        return RegionMask(values >= strategy.t)
    if not isinstance(strategy, (TopK, TopFraction)):
        raise InvalidInputError(f"unknown tau strategy {strategy!r}")
    k = strategy.resolve(g)
    order = np.argsort(-values.ravel(), kind="stable")
    bits = np.zeros(g * g, dtype=bool)
    bits[order[:k]] = True
    return RegionMask(bits.reshape(g, g))


def rvls2m(imgs, raw, head, grid=16, strategy=TopK(36)):
    seg = project(raw, head)
    return rvls2m_projected(imgs, seg, grid, strategy)


def rvls2m_projected(imgs, seg, grid=16, strategy=TopK(36)):
    """Same pipeline starting from an already projected seg embedding."""
    smap = to_map(normalize(similarity(imgs, seg)))
    return apply_tau(pool_regions(smap, grid), strategy)


def validate_strategy(strategy, grid):
    """Raise early when ``strategy`` cannot be applied on a ``grid x grid`` matrix."""
    if isinstance(strategy, (TopK, TopFraction)):
        strategy.resolve(grid)
    elif not isinstance(strategy, AbsoluteThreshold):
        raise InvalidInputError(f"unknown tau strategy {strategy!r}")
