"""Overlap and diagnosis metrics.

gIoU is the mean of per-image IoU; cIoU is cumulative intersection over
cumulative union. An empty prediction against an empty ground truth scores 1.
"""

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .exceptions import InvalidInputError
from .validation import check_binary_mask, check_same_shape

SEG_MARKER = "[SEG]"


@dataclass(frozen=True)
class MaskPair:
    predicted: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        pred = check_binary_mask(self.predicted, name="predicted mask")
        truth = check_binary_mask(self.truth, name="ground-truth mask")
        check_same_shape(pred, truth)
        object.__setattr__(self, "predicted", pred)
        object.__setattr__(self, "truth", truth)

    def counts(self):
        """``(intersection, union)`` pixel counts."""
        inter = int(np.count_nonzero(self.predicted & self.truth))
        union = int(np.count_nonzero(self.predicted | self.truth))
        return inter, union


def _pair(pair):
    return pair if isinstance(pair, MaskPair) else MaskPair(*pair)


def iou(pair):
    inter, union = _pair(pair).counts()
    return 1.0 if union == 0 else inter / union


def mean_iou(counts):
    """Mean IoU of ``(intersection, union)`` counts, exact until one final rounding."""
    counts = list(counts)
    total = sum(Fraction(1) if u == 0 else Fraction(i, u) for i, u in counts)
    return float(total / len(counts))


def giou_dataset(pairs):
    pairs = list(pairs)
    if not pairs:
        raise InvalidInputError("gIoU of an empty dataset is undefined")
    return mean_iou(_pair(p).counts() for p in pairs)


def ciou_dataset(pairs):
    pairs = list(pairs)
    if not pairs:
        raise InvalidInputError("cIoU of an empty dataset is undefined")
    counts = [_pair(p).counts() for p in pairs]
    total_inter = sum(c[0] for c in counts)
    total_union = sum(c[1] for c in counts)
    return 1.0 if total_union == 0 else total_inter / total_union


def quality(pair):
    """Mean of gIoU and cIoU over the single pair (collapses to its IoU)."""
    pair = _pair(pair)
    return (giou_dataset([pair]) + ciou_dataset([pair])) / 2.0


def extract_diagnosis(text, vocabulary):
    """Vocabulary label occurring earliest after the ``[SEG]`` marker, or ``None``.

    Matching is case-insensitive surface matching; without a marker the whole
    text is searched.
    """
    labels = list(vocabulary)
    if not labels:
        raise InvalidInputError("diagnosis vocabulary is empty")
    if len({lab.lower() for lab in labels}) != len(labels):
        raise InvalidInputError("diagnosis labels must be distinct case-insensitively")
    lowered = text.lower()
    start = lowered.find(SEG_MARKER.lower())
    tail = lowered if start < 0 else lowered[start + len(SEG_MARKER):]
    best, best_pos = None, None
    for label in labels:
        pos = tail.find(label.lower())
        if pos >= 0 and (best_pos is None or pos < best_pos):
            best, best_pos = label, pos
    return best


def accuracy(predictions, truths):
    predictions, truths = list(predictions), list(truths)
    if len(predictions) != len(truths):
        raise InvalidInputError("predictions and truths differ in length")
    if not truths:
        raise InvalidInputError("accuracy of an empty list is undefined")
    hits = sum(1 for p, t in zip(predictions, truths) if p is not None and p == t)
    return hits / len(truths)


@dataclass
class EvalReport:
    """Per-subset and overall metrics, stored as fractions in ``[0, 1]``."""

    overall: dict
    subsets: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, rows):
        """Aggregate rows carrying ``subset``, ``intersection``, ``union``, ``iou``, ``pred``, ``label``."""
        rows = list(rows)
        if not rows:
            raise InvalidInputError("cannot report on zero samples")

        def summarize(group):
            inter = sum(r["intersection"] for r in group)
            union = sum(r["union"] for r in group)
            return {
                "gIoU": mean_iou((r["intersection"], r["union"]) for r in group),
                "cIoU": 1.0 if union == 0 else inter / union,
                "Acc": accuracy([r["pred"] for r in group], [r["label"] for r in group]),
                "n": len(group),
            }

        subsets = {}
        for name in sorted({r["subset"] for r in rows}):
            subsets[name] = summarize([r for r in rows if r["subset"] == name])
        return cls(overall=summarize(rows), subsets=subsets)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["subset", "gIoU", "cIoU", "Acc", "n"])
        for name, stats in [*self.subsets.items(), ("overall", self.overall)]:
            writer.writerow([name, *(repr(100.0 * stats[k]) for k in ("gIoU", "cIoU", "Acc")),
                             stats["n"]])
        return buf.getvalue()

    def to_json(self):
        def pct(stats):
            return {"gIoU": 100.0 * stats["gIoU"], "cIoU": 100.0 * stats["cIoU"],
                    "Acc": 100.0 * stats["Acc"], "n": stats["n"]}

        doc = {"overall": pct(self.overall),
               "subsets": {k: pct(v) for k, v in self.subsets.items()}}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
