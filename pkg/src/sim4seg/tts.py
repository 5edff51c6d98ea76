"""Test-time scaling: m sampled reasoning paths x n perturbed region prompts.

Every random draw is seeded from ``(path seed, j)`` only, so the candidate at
``(i, j)`` does not depend on how many paths or perturbations were requested.
Candidate sets for ``(m, n)`` are therefore nested in those for any larger
``(m', n')``.
"""

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .decoder import DecoderConfig, decode_logits
from .embeddings import SegTokenRaw, project
from .exceptions import InvalidInputError
from .metrics import MaskPair, extract_diagnosis, quality
from .rvls2m import RegionMask
from .synthdata import LABELS
from .validation import check_binary_mask

SEG_TEXT = "It is [SEG]."
#: Std of the diagnosis-score jitter per unit of path noise.
DIAGNOSIS_NOISE_GAIN = 0.2

_PHRASINGS = (
    "Firstly, the modality of the image is {modality}. Secondly, I analyze the bright "
    "region and its boundary. Finally, the lesion is most consistent with a {label} finding.",
    "Firstly, the modality of the image is {modality}. The outlined region shows its shape "
    "and margin clearly. Finally, these features indicate a {label} lesion.",
    "Firstly, the modality of the image is {modality}. Then, I compare the lesion outline "
    "against a regular contour. Finally, the assessment is {label}.",
)


@dataclass(frozen=True)
class ReasoningPath:
    index: int
    text: str
    seg: SegTokenRaw
    seed: int
    noise: float
    diagnosis: Optional[str] = None


@dataclass(frozen=True)
class PerturbationParams:
    flips: int = 0
    radius: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.flips < 0:
            raise InvalidInputError("flip budget must be >= 0")
        if self.radius not in (0, 1):
            raise InvalidInputError("dilation radius must be 0 or 1")


@dataclass(frozen=True)
class PerturbationDistribution:
    """Independent draws of a flip budget in ``0..max_flips`` and a dilation radius."""

    max_flips: int = 4
    dilation_prob: float = 0.25

    def __post_init__(self):
        if self.max_flips < 0 or not 0.0 <= self.dilation_prob <= 1.0:
            raise InvalidInputError("invalid perturbation distribution")

    @property
    def is_identity(self):
        return self.max_flips == 0 and self.dilation_prob == 0.0

    def draw(self, seed):
        rng = np.random.default_rng(seed)
        flips = int(rng.integers(0, self.max_flips + 1))
        radius = int(rng.random() < self.dilation_prob)
        return PerturbationParams(flips=flips, radius=radius,
                                  seed=int(rng.integers(0, 2 ** 32)))


@dataclass(frozen=True)
class Candidate:
    i: int
    j: int
    mask: object  # PredictedMask
    params: PerturbationParams


@dataclass
class CandidateSet:
    m: int
    n: int
    candidates: list = field(default_factory=list)
    qualities: Optional[list] = None

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)


@dataclass(frozen=True)
class Oracle:
    reference: np.ndarray


@dataclass(frozen=True)
class ReferenceFree:
    pass


def _path_seed(base_seed, i):
    return int(base_seed) + i


def render_path_text(label, index, modality="Ultrasound"):
    body = _PHRASINGS[index % len(_PHRASINGS)].format(modality=modality, label=label)
    return f"{SEG_TEXT} {body}"


def sample_paths(model, image, query, m, base_seed, noise=0.0, modality="Ultrasound",
                 diagnosis_score=None):
    """Draw ``m`` reasoning paths; path ``i`` is seeded with ``base_seed + i``.

    Each path jitters the model's seg state and its diagnosis score with
    Gaussian noise scaled by ``noise``. ``diagnosis_score`` skips recomputing
    the image-level score when the caller already has it.
    """
    if m < 1:
        raise InvalidInputError("need at least one reasoning path")
    if noise < 0:
        raise InvalidInputError("noise scale must be >= 0")
    base = model.seg_token(image).values
    jitter_scale = noise * np.linalg.norm(base) / np.sqrt(base.size)
    if diagnosis_score is None:
        diagnosis_score = model.diagnosis_score(image)
    paths = []
    for i in range(m):
        seed = _path_seed(base_seed, i)
        rng = np.random.default_rng(seed)
        seg = base + jitter_scale * rng.standard_normal(base.size)
        score = diagnosis_score + noise * DIAGNOSIS_NOISE_GAIN * rng.standard_normal()
        label = LABELS[1] if score > model.cutoff_ else LABELS[0]
        paths.append(ReasoningPath(index=i, text=render_path_text(label, i, modality),
                                   seg=SegTokenRaw(seg), seed=seed, noise=noise,
                                   diagnosis=label))
    return paths


def dilate(bits, radius):
    bits = np.asarray(bits, dtype=bool)
    if radius == 0:
        return bits.copy()
    return ndimage.binary_dilation(bits, structure=np.ones((3, 3), dtype=bool),
                                   iterations=radius)


def perturb(region, params):
    """Dilate (8-neighbourhood) then toggle ``params.flips`` distinct seeded cells."""
    g = region.grid
    if params.flips > g * g:
        raise InvalidInputError(f"flip budget {params.flips} exceeds {g * g} cells")
    bits = dilate(region.bits, params.radius).ravel()
    if params.flips:
        rng = np.random.default_rng(params.seed)
        cells = rng.choice(g * g, size=params.flips, replace=False)
        bits[cells] = ~bits[cells]
    return RegionMask(bits.reshape(g, g))


def perturbation_seed(path_seed, j):
    return int(np.random.SeedSequence([int(path_seed), j]).generate_state(1)[0])


def generate_candidates(paths, n, regions, feats, cfg=DecoderConfig(),
                        distribution=PerturbationDistribution(), head=None, workers=None):
    """Decode every ``(path i, perturbation j)`` pair.

    ``head`` projects each path's raw seg state; ``regions[i]`` is the region
    mask computed for path ``i``. Output order is row-major in ``(i, j)``
    whatever the worker count.
    """
    if n < 1:
        raise InvalidInputError("need at least one perturbation per path")
    if len(regions) != len(paths):
        raise InvalidInputError("one region mask per path is required")
    if head is None:
        raise InvalidInputError("a projection head is required")
    logits = [feats.values @ project(p.seg, head).values for p in paths]

    def build(ij):
        i, j = ij
        params = distribution.draw(perturbation_seed(paths[i].seed, j))
        prompt = perturb(regions[i], params)
        return Candidate(i=i, j=j, mask=decode_logits(logits[i], prompt, cfg), params=params)

    jobs = [(i, j) for i in range(len(paths)) for j in range(n)]
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cands = list(pool.map(build, jobs))
    else:
        cands = [build(ij) for ij in jobs]
    return CandidateSet(m=len(paths), n=n, candidates=cands)


def majority_reference(candidates):
    """Per-pixel strict-majority vote over candidate masks."""
    stack = np.stack([c.mask.bits for c in candidates])
    return stack.sum(axis=0) * 2 > stack.shape[0]


def select(candidates, mode, cache=None):
    """Return ``(mask, i, j, score)`` maximising quality; ties keep the smallest ``(i, j)``.

    ``cache`` (Oracle mode only) maps ``(i, j)`` to an already computed
    quality against the same reference and is filled as candidates are scored.
    """
    cands = sorted(candidates, key=lambda c: (c.i, c.j))
    if not cands:
        raise InvalidInputError("cannot select from an empty candidate set")
    if isinstance(mode, Oracle):
        reference = check_binary_mask(mode.reference, name="reference")
    elif isinstance(mode, ReferenceFree):
        reference = majority_reference(cands)
        cache = None  # the pseudo-reference changes with the set
    else:
        raise InvalidInputError(f"unknown selection mode {mode!r}")
    best, best_q = None, -1.0
    scores = []
    for c in cands:
        q = None if cache is None else cache.get((c.i, c.j))
        if q is None:
            q = quality(MaskPair(c.mask.bits, reference))
            if cache is not None:
                cache[c.i, c.j] = q
        scores.append(q)
        if q > best_q:
            best, best_q = c, q
    if isinstance(candidates, CandidateSet):
        candidates.qualities = scores
    return best.mask, best.i, best.j, best_q


def majority_diagnosis(texts, vocabulary=LABELS):
    """Most frequent extracted label; ties go to the label seen first in path order."""
    labels = [extract_diagnosis(t, vocabulary) for t in texts]
    counts = Counter(lab for lab in labels if lab is not None)
    if not counts:
        return None
    top = max(counts.values())
    return next(lab for lab in labels if lab is not None and counts[lab] == top)
