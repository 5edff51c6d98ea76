"""Command-line entry point.

Every RunConfig field is also a ``--flag``; flags override values read from
``--config FILE`` (``key = value`` lines, ``#`` comments). Failures print a
JSON object to stderr and exit nonzero.
"""

import argparse
import dataclasses
import json
import os
import sys

from . import cotgen, harness
from .exceptions import InvalidInputError, Sim4SegError
from .formats import decode_pgm, read_bytes
from .synthdata import write_dataset

EXIT_INVALID = 2
EXIT_FAILURE = 1


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from exc


def _add_config_flags(parser):
    parser.add_argument("--config", help="key = value config file")
    group = parser.add_argument_group("run config (override the config file)")
    for f in dataclasses.fields(harness.RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                           metavar=f.name.upper())


def _config(args):
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(harness.RunConfig)}
    return harness.load_config(args.config, overrides)


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def cmd_gen(args):
    config = _config(args)
    if not config.out:
        raise InvalidInputError("gen needs --out")
    samples = harness.synth_samples(config, "test", config.count)
    specs = harness.scene_specs(config, "test")
    write_dataset(samples, config.out, specs[0] if len(specs) == 1 else None)
    return {"samples": len(samples), "out": config.out}


def cmd_eval(args):
    config = _config(args)
    report, _ = harness.run_eval(config)
    return json.loads(report.to_json())


def _emit_sweep(result, path):
    text = result.to_csv()
    if path:
        _write(path, text)
    else:
        sys.stdout.write(text)


def cmd_sweep_tau(args):
    config = _config(args)
    result = harness.sweep_tau(config, args.k_values, args.g_values, hold=args.hold)
    _emit_sweep(result, args.csv)
    return None


def cmd_sweep_tts(args):
    config = _config(args)
    settings = [(m, n) for m in args.m_values for n in args.n_values]
    result = harness.sweep_tts(config, settings, trials=args.trials)
    _emit_sweep(result, args.csv)
    return None


def _endpoint(role, script, url, timeout):
    if script:
        return cotgen.AssistantEndpoint.from_script_file(role, script)
    if url:
        return cotgen.AssistantEndpoint(role, backend="external", base_url=url, timeout=timeout)
    raise InvalidInputError(f"{role} assistant needs a script file or a URL")


def cmd_cot(args):
    medical = _endpoint("medical", args.medical_script, args.medical_url, args.timeout)
    critic = _endpoint("critic", args.critic_script, args.critic_url, args.timeout)
    with open(args.samples) as fh:
        samples = [cotgen.SampleInput(**json.loads(line)) for line in fh if line.strip()]
    os.makedirs(args.out, exist_ok=True)
    store = cotgen.RecordStore(os.path.join(args.out, "records.ndjson"),
                               os.path.join(args.out, "human_review.ndjson"))
    records = []
    for sample in samples:
        record = cotgen.run_pipeline(sample, medical, critic, r_max=args.r_max)
        store.append(record)
        records.append(record)
    summary = {"approved": sum(r.status == "approved" for r in records),
               "human_review": sum(r.status == "human_review" for r in records)}
    if summary["approved"]:
        manifest = cotgen.package_dataset(records, seed=args.split_seed)
        _write(os.path.join(args.out, "dataset.json"),
               json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_heatmap(args):
    config = _config(args)
    model, samples = harness.prepare(config)
    if args.image:
        image = decode_pgm(read_bytes(args.image))
    else:
        if not 0 <= args.index < len(samples):
            raise InvalidInputError(f"sample index {args.index} out of range")
        image = samples[args.index].image
    if args.kind == "similarity":
        values = harness.similarity_map(model, image)
    else:
        values = harness.region_matrix(model, image, config.grid)
    harness.emit_heatmap(values, args.svg)
    return {"svg": args.svg, "shape": list(values.values.shape)}


class _Parser(argparse.ArgumentParser):
    """Usage errors are reported as JSON like every other failure."""

    def error(self, message):
        sys.stderr.write(json.dumps({"error": "UsageError", "message": message}) + "\n")
        sys.exit(EXIT_INVALID)


def build_parser():
    parser = _Parser(prog="sim4seg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset (PGM, PBM, manifest.json)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("eval", help="evaluate and write report.csv/json, per_sample.csv, masks/")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-tau", help="sweep top-k at the config grid and/or the grid size")
    _add_config_flags(p)
    p.add_argument("--k-values", type=_int_list, default=[])
    p.add_argument("--g-values", type=_int_list, default=[])
    p.add_argument("--hold", choices=("count", "fraction"), default="count",
                   help="keep the config strategy or its selected-area fraction across grids")
    p.add_argument("--csv", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_sweep_tau)

    p = sub.add_parser("sweep-tts", help="sweep reasoning paths m x perturbations n")
    _add_config_flags(p)
    p.add_argument("--m-values", type=_int_list, default=[1])
    p.add_argument("--n-values", type=_int_list, default=[1])
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--csv", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_sweep_tts)

    p = sub.add_parser("cot", help="generate and review chains of thought")
    p.add_argument("--samples", required=True,
                   help="NDJSON with image_id, question, modality, diagnosis")
    p.add_argument("--out", required=True)
    p.add_argument("--medical-script")
    p.add_argument("--critic-script")
    p.add_argument("--medical-url")
    p.add_argument("--critic-url")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--r-max", type=int, default=cotgen.DEFAULT_MAX_ROUNDS)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_cot)

    p = sub.add_parser("heatmap", help="SVG heatmap of a similarity map or region matrix")
    _add_config_flags(p)
    p.add_argument("--svg", required=True)
    p.add_argument("--image", help="PGM image (default: a synthetic test sample)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--kind", choices=("similarity", "regions"), default="similarity")
    p.set_defaults(func=cmd_heatmap)
    return parser


def _error(exc, code):
    doc = {"error": type(exc).__name__, "message": str(exc)}
    if getattr(exc, "sample_id", None):
        doc["sample_id"] = exc.sample_id
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except (InvalidInputError, ValueError) as exc:
        return _error(exc, EXIT_INVALID)
    except (Sim4SegError, OSError) as exc:
        return _error(exc, EXIT_FAILURE)
    if result is not None:
        sys.stdout.write(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
