"""Multi-role chain-of-thought generation with critic review.

A medical assistant writes a diagnostic chain of thought from a structured
prompt; a critical assistant reviews it. Rejections feed their failure class
into the next prompt until the round budget runs out, at which point the
sample goes to the human-review queue.
"""

import datetime as _dt
import json
import logging
import math
import re
import threading
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .exceptions import EmptyDatasetError, InvalidInputError, PipelineIOError, UnparseableVerdictError

logger = logging.getLogger(__name__)

MODALITIES = ("X-Ray", "Dermoscopy", "Endoscopy", "Ultrasound", "Fundus Photography")
FAILURE_CLASSES = ("Missing Step", "Logical Flaw", "Factual Error", "Non-standard Terminology")
DEFAULT_FAILURE_CLASS = "Logical Flaw"
DEFAULT_MAX_ROUNDS = 3
SPLITS = ("train", "val", "test")

GENERATION_TEMPLATE = """\
Question: {question}

Query: Act as a medical assistant and answer with a step-by-step chain of thought
that follows exactly this outline.

Firstly, the modality of the image is {modality}

Secondly, describe what the image shows and which findings matter ...

Then, relate those findings to possible diagnoses ...

...

Finally, {answer}
"""

FEEDBACK_TEMPLATE = """
Correction: a reviewer rejected the previous answer for `{failure}`.
Fix that problem in the new chain of thought."""

REVIEW_TEMPLATE = """\
Input: {cot}

Review the diagnostic chain of thought above as a strict critic.
Check that it names the modality, analyses the image step by step, reaches the
diagnosis through sound reasoning, and uses standard medical terminology.

If every check holds, output [pass].
Otherwise output [reject] and name one failure type:
`Missing Step` | `Logical Flaw` | `Factual Error` | `Non-standard Terminology`

Final decision: [pass]/[reject]
"""

_DECISION_RE = re.compile(r"final decision:\s*\[(pass|reject)\](?!\s*/)", re.IGNORECASE)


@dataclass(frozen=True)
class SampleInput:
    image_id: str
    question: str
    modality: str
    diagnosis: str

    def __post_init__(self):
        for name in ("image_id", "question", "modality", "diagnosis"):
            if not str(getattr(self, name)).strip():
                raise InvalidInputError(f"sample field {name!r} is empty")
        if self.modality not in MODALITIES:
            raise InvalidInputError(f"modality {self.modality!r} not in {MODALITIES}")


@dataclass(frozen=True)
class ReviewVerdict:
    decision: str  # "pass", "reject" or "unparseable"
    failure_class: Optional[str] = None
    raw: str = ""

    def __post_init__(self):
        if self.decision not in ("pass", "reject", "unparseable"):
            raise InvalidInputError(f"unknown decision {self.decision!r}")
        if self.decision == "pass" and self.failure_class is not None:
            raise InvalidInputError("a passing verdict carries no failure class")
        if self.failure_class is not None and self.failure_class not in FAILURE_CLASSES:
            raise InvalidInputError(f"unknown failure class {self.failure_class!r}")


@dataclass
class CoTRecord:
    sample_id: str
    text: str
    status: str  # "approved" or "human_review"
    rounds: int
    verdicts: List[ReviewVerdict] = field(default_factory=list)
    prompts: List[str] = field(default_factory=list)
    timestamps: List[str] = field(default_factory=list)
    modality: str = ""
    diagnosis: str = ""

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        doc = json.loads(line)
        doc["verdicts"] = [ReviewVerdict(**v) for v in doc.get("verdicts", [])]
        return cls(**doc)


class AssistantEndpoint:
    """Either a scripted mock or an HTTP JSON service.

    The mock hands out its canned responses in order. The external backend
    POSTs ``{"role", "prompt", "sample_id"}`` to ``base_url`` and expects
    ``{"text": ...}`` back.
    """

    def __init__(self, role, backend="mock", script=None, base_url=None, timeout=30.0,
                 retries=2):
        if role not in ("medical", "critic"):
            raise InvalidInputError(f"unknown assistant role {role!r}")
        if backend == "mock" and script is None:
            raise InvalidInputError("mock backend needs a script")
        if backend == "external" and not base_url:
            raise InvalidInputError("external backend needs a base URL")
        if backend not in ("mock", "external"):
            raise InvalidInputError(f"unknown backend {backend!r}")
        self.role = role
        self.backend = backend
        self.script = list(script or [])
        self.base_url = base_url
        self.timeout = timeout
        self.retries = retries
        self._cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_script_file(cls, role, path):
        """Mock endpoint from newline-delimited JSON objects with a ``text`` field."""
        with open(path) as fh:
            script = [json.loads(line)["text"] for line in fh if line.strip()]
        return cls(role, backend="mock", script=script)

    def complete(self, prompt, sample_id):
        if self.backend == "mock":
            with self._lock:
                if self._cursor >= len(self.script):
                    raise PipelineIOError(f"{self.role} mock script exhausted", sample_id)
                text = self.script[self._cursor]
                self._cursor += 1
            return text
        return self._post(prompt, sample_id)

    def _post(self, prompt, sample_id):
        body = json.dumps({"role": self.role, "prompt": prompt,
                           "sample_id": sample_id}).encode("utf-8")
        last = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.base_url, data=body, method="POST",
                                         headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))["text"]
            except (urllib.error.URLError, OSError, ValueError, KeyError, TypeError) as exc:
                last = exc
                logger.warning("%s request for %s failed (attempt %d): %s",
                               self.role, sample_id, attempt + 1, exc)
        raise PipelineIOError(
            f"{self.role} endpoint failed after {self.retries + 1} attempts: {last}", sample_id)


def build_generation_prompt(sample, feedback=None):
    prompt = GENERATION_TEMPLATE.format(question=sample.question, modality=sample.modality,
                                        answer=sample.diagnosis)
    if feedback is not None:
        if feedback not in FAILURE_CLASSES:
            raise InvalidInputError(f"unknown failure class {feedback!r}")
        prompt += FEEDBACK_TEMPLATE.format(failure=feedback)
    return prompt


def build_review_prompt(cot):
    return REVIEW_TEMPLATE.format(cot=cot)


def parse_verdict(text):
    """Read the last ``Final decision: [pass]`` / ``[reject]`` marker in critic output."""
    if not text or not text.strip():
        raise UnparseableVerdictError("empty critic output")
    matches = _DECISION_RE.findall(text)
    if not matches:
        raise UnparseableVerdictError("critic output has no final decision marker")
    decision = matches[-1].lower()
    if decision == "pass":
        return ReviewVerdict("pass", None, text)
    found = [(text.find(c), c) for c in FAILURE_CLASSES if c in text]
    failure = min(found)[1] if found else DEFAULT_FAILURE_CLASS
    return ReviewVerdict("reject", failure, text)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def run_pipeline(sample, medical, critic, r_max=DEFAULT_MAX_ROUNDS, clock=_now):
    """Generate, review and retry until approval or ``r_max`` rounds."""
    if r_max < 1:
        raise InvalidInputError("r_max must be >= 1")
    record = CoTRecord(sample_id=sample.image_id, text="", status="human_review", rounds=0,
                       modality=sample.modality, diagnosis=sample.diagnosis)
    feedback = None
    for _ in range(r_max):
        prompt = build_generation_prompt(sample, feedback)
        cot = medical.complete(prompt, sample.image_id)
        critique = critic.complete(build_review_prompt(cot), sample.image_id)
        record.rounds += 1
        record.prompts.append(prompt)
        record.timestamps.append(clock())
        record.text = cot
        try:
            verdict = parse_verdict(critique)
        except UnparseableVerdictError:
            record.verdicts.append(ReviewVerdict("unparseable", None, critique))
            return record
        record.verdicts.append(verdict)
        if verdict.decision == "pass":
            record.status = "approved"
            return record
        feedback = verdict.failure_class
    return record


class RecordStore:
    """Append-only NDJSON files for approved records and the human-review queue."""

    def __init__(self, records_path, review_path):
        self.records_path = records_path
        self.review_path = review_path
        self._lock = threading.Lock()

    def append(self, record):
        path = self.records_path if record.status == "approved" else self.review_path
        with self._lock, open(path, "a") as fh:
            fh.write(record.to_json() + "\n")


def _split_sizes(total, ratios):
    raw = [r * total for r in ratios]
    sizes = [math.floor(x + 1e-9) for x in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[:total - sum(sizes)]:
        sizes[k] += 1
    return sizes


def package_dataset(records, ratios=(0.8, 0.1, 0.1), seed=0):
    """Seeded shuffle of the approved records, then contiguous train/val/test split."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios):
        raise InvalidInputError("need three non-negative split ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidInputError(f"split ratios sum to {sum(ratios)}, not 1")
    approved = [r for r in records if r.status == "approved"]
    if not approved:
        raise EmptyDatasetError("no approved records to package")
    order = np.random.default_rng(seed).permutation(len(approved))
    shuffled = [approved[k] for k in order]
    splits, start = {}, 0
    for name, size in zip(SPLITS, _split_sizes(len(shuffled), ratios)):
        splits[name] = shuffled[start:start + size]
        start += size
    modalities = sorted({r.modality for r in approved})
    return {
        "seed": seed,
        "ratios": list(ratios),
        "splits": {name: [r.sample_id for r in recs] for name, recs in splits.items()},
        "sizes": {name: len(recs) for name, recs in splits.items()},
        "modality_counts": {
            m: {name: sum(r.modality == m for r in recs) for name, recs in splits.items()}
            for m in modalities
        },
    }
