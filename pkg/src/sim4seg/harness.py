"""End-to-end evaluation runs and parameter sweeps over synthetic or on-disk data.

Every random choice is derived from ``RunConfig.seed`` through
:func:`derive_seed`, keyed by what it is for (dataset split, trial, sample
index), never by worker or setting order. Serial and threaded runs, and sweeps
with settings added or removed, produce identical numbers.
"""

import csv
import dataclasses
import io
import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import List, Optional

import numpy as np

from . import tts
from .decoder import PredictedMask, decode_logits
from .embeddings import project
from .exceptions import InvalidInputError, SampleError, Sim4SegError
from .formats import encode_pbm, heatmap_svg, write_bytes
from .losses import LossWeights
from .metrics import EvalReport, MaskPair, iou
from .model import Sim4SegSegmenter, make_strategy
from .rvls2m import (RegionMatrix, SimilarityMap, TopFraction, TopK, block_size, map_shape,
                     normalize, pool_regions, rvls2m_projected, similarity, to_map,
                     validate_strategy)
from .synthdata import SceneSpec, generate, read_dataset


@dataclass
class RunConfig:
    # data
    dataset: Optional[str] = None
    height: int = 64
    width: int = 64
    shape: str = "ellipse"  # ellipse, polygon or mixed
    count: int = 50
    train_count: int = 32
    texture_noise: float = 0.2
    size_min: float = 0.10
    size_max: float = 0.18
    irregularity_min: float = 0.3
    irregularity_max: float = 0.9
    cutoff: float = 0.6
    modality: str = "Ultrasound"
    # model
    patch: int = 2
    embed_dim: int = 16
    hidden_dim: int = 32
    mid_dim: int = 64
    nonlinearity: str = "relu"
    similarity_spread: float = 2.0
    feature_scale: float = 0.1
    grid: int = 16
    tau: str = "topk"
    tau_value: float = 36.0
    beta: float = 4.0
    threshold: float = 0.6
    # losses (recorded with the run)
    lambda_txt: float = 1.0
    lambda_mask: float = 1.0
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5
    # test-time scaling
    m: int = 1
    n: int = 1
    noise: float = 0.0
    max_flips: int = 0
    dilation_prob: float = 0.0
    selection: str = "oracle"  # oracle or reference-free
    inject_ground_truth: bool = False
    # run
    out: Optional[str] = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.shape not in ("ellipse", "polygon", "mixed"):
            raise InvalidInputError("shape must be ellipse, polygon or mixed")
        if self.selection not in ("oracle", "reference-free"):
            raise InvalidInputError("selection must be oracle or reference-free")
        if self.m < 1 or self.n < 1:
            raise InvalidInputError("m and n must be >= 1")

    @property
    def loss_weights(self):
        return LossWeights.from_config(dataclasses.asdict(self))

    @property
    def strategy(self):
        return make_strategy(self.tau, self.tau_value)

    @property
    def distribution(self):
        return tts.PerturbationDistribution(self.max_flips, self.dilation_prob)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"


def _coerce(name, raw):
    ftype = {f.name: f for f in fields(RunConfig)}[name]
    default = ftype.default
    if raw is None or (isinstance(raw, str) and raw.strip() == ""):
        return None
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise InvalidInputError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise InvalidInputError(f"{name}: {exc}") from exc
    return text


def parse_config_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise InvalidInputError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config(path=None, overrides=None):
    """File values first, then ``overrides`` (CLI) on top."""
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = _coerce(key, value)
    return RunConfig(**values)


def derive_seed(master, *keys):
    """Stable 32-bit seed from the master seed and a path of str/int keys."""
    words = [int(master) & 0xFFFFFFFF]
    for key in keys:
        words.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def scene_specs(config, split):
    shapes = ["ellipse", "polygon"] if config.shape == "mixed" else [config.shape]
    return [SceneSpec(height=config.height, width=config.width, shape=shape,
                      size_range=(config.size_min, config.size_max),
                      irregularity_range=(config.irregularity_min, config.irregularity_max),
                      cutoff=config.cutoff, texture_noise=config.texture_noise,
                      seed=derive_seed(config.seed, split, shape), subset=shape)
            for shape in shapes]


def synth_samples(config, split, count):
    specs = scene_specs(config, split)
    per = [count // len(specs) + (k < count % len(specs)) for k in range(len(specs))]
    out = []
    for spec, c in zip(specs, per):
        if c:
            out.extend(generate(spec, c))
    return out


def build_model(config, train):
    model = Sim4SegSegmenter(
        patch_size=config.patch, embed_dim=config.embed_dim, hidden_dim=config.hidden_dim,
        mid_dim=config.mid_dim, nonlinearity=config.nonlinearity, grid_size=config.grid,
        tau=config.tau, tau_value=config.tau_value, beta=config.beta,
        decision_threshold=config.threshold, feature_scale=config.feature_scale,
        similarity_spread=config.similarity_spread, random_state=config.seed)
    return model.fit([s.image for s in train], [s.mask for s in train],
                     labels=[s.label for s in train])


def prepare(config):
    """Return ``(fitted model, evaluation samples)``."""
    if config.dataset:
        samples = read_dataset(config.dataset)
    else:
        samples = synth_samples(config, "test", config.count)
    if not samples:
        raise InvalidInputError("dataset has no samples")
    return build_model(config, synth_samples(config, "train", config.train_count)), samples


class _SampleContext:
    """Per-sample cache of everything that does not depend on the TTS draw."""

    def __init__(self, model, sample):
        self.sample = sample
        self.tokens = model.encode(sample.image)
        self.features = model.features(sample.image)
        self.diagnosis_score = model.diagnosis_score(sample.image)


class _CandidatePool:
    """Lazily decoded candidates for one (trial, sample); shared by all (m, n) settings."""

    def __init__(self, model, ctx, config, base_seed, max_m):
        self.model = model
        self.ctx = ctx
        self.config = config
        self.paths = tts.sample_paths(model, ctx.sample.image, ctx.sample.query, max_m,
                                      base_seed, noise=config.noise, modality=config.modality,
                                      diagnosis_score=ctx.diagnosis_score)
        self.strategy = config.strategy
        self._regions, self._logits, self._masks = {}, {}, {}

    def _path_state(self, i):
        if i not in self._regions:
            seg = project(self.paths[i].seg, self.model.head_)
            self._regions[i] = rvls2m_projected(self.ctx.tokens, seg, self.config.grid,
                                                self.strategy)
            self._logits[i] = self.ctx.features.values @ seg.values
        return self._regions[i], self._logits[i]

    def candidate(self, i, j):
        if (i, j) not in self._masks:
            region, logits = self._path_state(i)
            params = self.config.distribution.draw(tts.perturbation_seed(self.paths[i].seed, j))
            mask = decode_logits(logits, tts.perturb(region, params), self.model.decoder_config)
            self._masks[i, j] = tts.Candidate(i=i, j=j, mask=mask, params=params)
        return self._masks[i, j]

    def candidate_set(self, m, n):
        cands = [self.candidate(i, j) for i in range(m) for j in range(n)]
        return tts.CandidateSet(m=m, n=n, candidates=cands)

    def diagnosis(self, m):
        return tts.majority_diagnosis([p.text for p in self.paths[:m]])


def _selection_mode(config, truth):
    return tts.Oracle(truth) if config.selection == "oracle" else tts.ReferenceFree()


def evaluate_sample(model, ctx, config, index, trial=0, settings=None):
    """Metrics for one sample under each ``(m, n)`` in ``settings`` (default: the config's)."""
    settings = settings or [(config.m, config.n)]
    base_seed = derive_seed(config.seed, "tts", trial, index)
    pool = _CandidatePool(model, ctx, config, base_seed, max(m for m, _ in settings))
    truth = ctx.sample.mask
    mode = _selection_mode(config, truth)
    cache = {}
    results = {}
    for m, n in settings:
        cands = pool.candidate_set(m, n)
        if config.inject_ground_truth:
            planted = PredictedMask(truth.astype(np.float64), model.decoder_config.threshold)
            cands.candidates.append(tts.Candidate(i=m, j=0, mask=planted,
                                                  params=tts.PerturbationParams()))
        mask, i, j, score = tts.select(cands, mode, cache=None if config.inject_ground_truth
                                       else cache)
        inter, union = MaskPair(mask.bits, truth).counts()
        results[m, n] = {
            "id": ctx.sample.sample_id,
            "subset": ctx.sample.subset,
            "intersection": inter,
            "union": union,
            "iou": iou(MaskPair(mask.bits, truth)),
            "quality": score,
            "pred": pool.diagnosis(m),
            "label": ctx.sample.label,
            "sel_i": i,
            "sel_j": j,
            "mask": mask.bits,
        }
    return results


def _context(model, sample):
    try:
        return _SampleContext(model, sample)
    except Sim4SegError as exc:
        raise SampleError(str(exc), sample.sample_id) from exc


def _evaluate(model, ctx, config, index, **kwargs):
    try:
        return evaluate_sample(model, ctx, config, index, **kwargs)
    except SampleError:
        raise
    except Sim4SegError as exc:
        raise SampleError(str(exc), ctx.sample.sample_id) from exc


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


PER_SAMPLE_COLUMNS = ["id", "subset", "intersection", "union", "iou", "quality", "pred",
                      "label", "sel_i", "sel_j"]


def per_sample_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PER_SAMPLE_COLUMNS)
    for r in rows:
        writer.writerow([repr(r[c]) if isinstance(r[c], float) else
                         ("" if r[c] is None else r[c]) for c in PER_SAMPLE_COLUMNS])
    return buf.getvalue()


def read_per_sample_csv(text):
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({"id": r["id"], "subset": r["subset"],
                     "intersection": int(r["intersection"]), "union": int(r["union"]),
                     "iou": float(r["iou"]), "quality": float(r["quality"]),
                     "pred": r["pred"] or None, "label": r["label"]})
    return rows


def run_eval(config, prepared=None):
    """Evaluate every sample and, when ``config.out`` is set, write the report files.

    Returns ``(EvalReport, per-sample rows)``.
    """
    validate_strategy(config.strategy, config.grid)
    model, samples = prepared or prepare(config)
    _check_grid(config, samples[0].image.shape)

    def run_one(args):
        index, sample = args
        return _evaluate(model, _context(model, sample), config, index)[config.m, config.n]

    rows = _map(run_one, list(enumerate(samples)), config.workers)
    report = EvalReport.from_samples(rows)
    if config.out:
        write_eval_outputs(config, report, rows)
    return report, rows


def write_eval_outputs(config, report, rows):
    os.makedirs(os.path.join(config.out, "masks"), exist_ok=True)
    with open(os.path.join(config.out, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(config.out, "report.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(config.out, "per_sample.csv"), "w") as fh:
        fh.write(per_sample_csv(rows))
    with open(os.path.join(config.out, "config.txt"), "w") as fh:
        fh.write(config.replace(out=None, workers=1).to_text())
    for r in rows:
        write_bytes(os.path.join(config.out, "masks", f"{r['id']}.pbm"), encode_pbm(r["mask"]))


def _check_grid(config, image_shape):
    h, w = image_shape
    n_tokens = (h // config.patch) * (w // config.patch)
    block_size(*map_shape(n_tokens), config.grid)


@dataclass
class SweepResult:
    axis: str
    values: list
    rows: List[dict] = field(default_factory=list)
    trials: int = 1

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if self.axis == "tts":
            writer.writerow(["m", "n", "noise", "mean_Q", "accuracy", "trials"])
            for r in self.rows:
                writer.writerow([r["m"], r["n"], r["noise"], repr(r["mean_Q"]),
                                 repr(r["accuracy"]), self.trials])
        else:
            writer.writerow([self.axis, "gIoU", "cIoU", "Avg", "Acc", "mean_Q"])
            for value, r in zip(self.values, self.rows):
                avg = (r["gIoU"] + r["cIoU"]) / 2.0
                writer.writerow([value, *(f"{100.0 * x:.2f}" for x in
                                          (r["gIoU"], r["cIoU"], avg, r["Acc"], r["mean_Q"]))])
        return buf.getvalue()


def _tau_settings(config, k_values, g_values, hold):
    settings = []
    for k in k_values or []:
        settings.append((f"n={k}", config.grid, TopK(int(k))))
    base_fraction = float(config.tau_value) / (config.grid * config.grid)
    for g in g_values or []:
        g = int(g)
        if hold == "fraction":
            strategy = TopFraction(base_fraction)
        elif hold == "count":
            strategy = config.strategy
        else:
            raise InvalidInputError("hold must be 'count' or 'fraction'")
        settings.append((f"{g}x{g}", g, strategy))
    if not settings:
        raise InvalidInputError("sweep needs at least one k or g value")
    return settings


def sweep_tau(config, k_values=None, g_values=None, hold="count", prepared=None):
    """One evaluation per (k at the config grid) and per (g at the config k or fraction)."""
    settings = _tau_settings(config, k_values, g_values, hold)
    model, samples = prepared or prepare(config)
    for _, g, strategy in settings:
        validate_strategy(strategy, g)
        _check_grid(config.replace(grid=g), samples[0].image.shape)
    ctxs = _map(lambda s: _context(model, s), samples, config.workers)
    result = SweepResult(axis="setting", values=[label for label, _, _ in settings])
    for label, g, strategy in settings:
        cfg = config.replace(grid=g, m=1, n=1, **_strategy_fields(strategy))
        rows = _map(lambda a: _evaluate(model, a[1], cfg, a[0])[1, 1],
                    list(enumerate(ctxs)), config.workers)
        report = EvalReport.from_samples(rows)
        result.rows.append({**{k: report.overall[k] for k in ("gIoU", "cIoU", "Acc")},
                            "mean_Q": float(np.mean([r["quality"] for r in rows])),
                            "grid": g, "strategy": strategy})
    return result


def _strategy_fields(strategy):
    if isinstance(strategy, TopK):
        return {"tau": "topk", "tau_value": strategy.k}
    if isinstance(strategy, TopFraction):
        return {"tau": "fraction", "tau_value": strategy.f}
    return {"tau": "threshold", "tau_value": strategy.t}


def sweep_tts(config, settings, trials=1, prepared=None):
    """Mean selected quality and majority-vote accuracy per ``(m, n)`` over seeded trials."""
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    settings = [(int(m), int(n)) for m, n in settings]
    if not settings or any(m < 1 or n < 1 for m, n in settings):
        raise InvalidInputError("every (m, n) setting needs m, n >= 1")
    model, samples = prepared or prepare(config)
    _check_grid(config, samples[0].image.shape)
    ctxs = _map(lambda s: _context(model, s), samples, config.workers)
    jobs = [(t, k) for t in range(trials) for k in range(len(ctxs))]
    outcomes = _map(lambda tk: _evaluate(model, ctxs[tk[1]], config, tk[1],
                                               trial=tk[0], settings=settings),
                    jobs, config.workers)
    result = SweepResult(axis="tts", values=settings, trials=trials)
    for m, n in settings:
        rows = [o[m, n] for o in outcomes]
        result.rows.append({
            "m": m, "n": n, "noise": config.noise,
            "mean_Q": float(np.mean([r["quality"] for r in rows])),
            "accuracy": float(np.mean([r["pred"] == r["label"] for r in rows])),
        })
    return result


def similarity_map(model, image):
    """Softmax similarity map of ``image`` against the model's seg embedding."""
    return to_map(normalize(similarity(model.encode(image), model.seg_embedding_)))


def region_matrix(model, image, grid):
    return pool_regions(similarity_map(model, image), grid)


def emit_heatmap(smap, path):
    """Write ``smap`` (SimilarityMap, RegionMatrix or 2-D array) as an SVG heatmap."""
    values = smap.values if isinstance(smap, (SimilarityMap, RegionMatrix)) else smap
    svg = heatmap_svg(values)
    with open(path, "w") as fh:
        fh.write(svg)
    return path
