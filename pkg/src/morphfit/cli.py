"""morphfit command line.

Every run option can come from a JSON/TOML config (``--config`` or
$MORPHFIT_CONFIG) and be overridden by its own ``--kebab-case`` flag.
Exit status: 0 success, 1 processing failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ENV_VAR, RunConfig, default_config
from .errors import ConfigError, MorphfitError

log = logging.getLogger("morphfit")

USAGE_EXIT = 2
FAILURE_EXIT = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_run_options(p):
    g = p.add_argument_group("run options (override the config file)")
    g.add_argument("--config", help=f"JSON or TOML run config (default: ${ENV_VAR})")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(RunConfig(), f.name)
        if isinstance(default, bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None,
                           help=f"default {default}")
        else:
            g.add_argument(flag, dest=f.name, type=type(default), default=None, metavar=f.name.upper(),
                           help=f"default {default}")


def _config(args) -> RunConfig:
    cfg = default_config(args.config)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name, None) is not None}
    return RunConfig.from_dict(overrides, base=cfg) if overrides else cfg


def build_parser():
    p = _Parser(prog="morphfit", description="Joint multi-scan face alignment and morphable-model fitting.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    s.add_argument("--spec", help="JSON file of generator settings")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="overrides the spec seed")

    s = sub.add_parser("preprocess", help="clean one scan (crop, roughness filter, largest cluster)")
    s.add_argument("--scan", required=True, help="PLY scan")
    s.add_argument("--landmarks", help="landmark JSON used for the face crop")
    s.add_argument("--out", required=True)
    _add_run_options(s)

    s = sub.add_parser("init-pose", help="landmark triplet pose for every scan in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    _add_run_options(s)

    s = sub.add_parser("fit", help="all phases for one subject (no relabeling)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--subject", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dump-offsets", action="store_true", help="write the last offset fields")
    _add_run_options(s)

    s = sub.add_parser("pipeline", help="full dataset: phases I-III with relabeling")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dump-offsets", action="store_true", help="write the last offset fields")
    s.add_argument("--no-aligned", action="store_true", help="skip writing aligned scans")
    _add_run_options(s)

    s = sub.add_parser("eval", help="score a pipeline output against ground truth")
    s.add_argument("--run", required=True, help="pipeline output directory")
    s.add_argument("--truth", required=True, help="ground_truth.json")
    s.add_argument("--out", required=True)

    s = sub.add_parser("report", help="error-history CSV and SVG plots")
    s.add_argument("--run", required=True, help="pipeline output directory")
    s.add_argument("--out", required=True)
    return p


# ---------------------------------------------------------------- commands


def _require(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def cmd_synth(args):
    from .synth import SynthSpec, generate_model, generate_subject_scans, write_dataset

    raw = {}
    if args.spec:
        try:
            raw = json.loads(_require(args.spec, "spec file").read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.spec}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.spec}: spec must be an object")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    model = generate_model(spec)
    ds = generate_subject_scans(model, spec)
    manifest = write_dataset(ds, args.out)
    print(json.dumps({"manifest": str(manifest), "scans": len(ds.scans), "swaps": len(ds.swaps)}))


def cmd_preprocess(args):
    from .dataset import load_scan
    from .io_formats import read_landmarks, write_ply
    from .preprocess import preprocess_scan

    cfg = _config(args)
    path = _require(args.scan, "scan")
    scan = load_scan(path, path.stem)
    lm = read_landmarks(_require(args.landmarks, "landmarks")) if args.landmarks else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clean = preprocess_scan(scan, lm, cfg.filter_params())
    write_ply(out / f"{path.stem}.ply", clean.points, clean.normals, clean.colors)
    write_ply(out / f"{path.stem}.removed.ply", clean.removed_points)
    print(json.dumps({"input": len(scan), "kept": len(clean), "removed": len(clean.removed_points)}))


def cmd_init_pose(args):
    from .dataset import load_manifest
    from .geometry import MeshQuery
    from .io_formats import write_transforms
    from .pipeline import prepare_scan

    cfg = _config(args)
    model, data = load_manifest(_require(args.manifest, "manifest"))
    mq = MeshQuery(model.mean_mesh())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    transforms, flags = {}, {}
    for subject, records in data.items():
        for r in records:
            try:
                ready = prepare_scan(r, model, cfg, mq)
            except MorphfitError as exc:
                log.warning("scan %s skipped: %s", r.scan_id, exc)
                continue
            transforms[r.scan_id] = ready.transform
            flags[r.scan_id] = {"subject": subject, "low_confidence": ready.low_confidence}
    write_transforms(out / "transforms.json", transforms)
    (out / "init_pose.json").write_text(json.dumps(flags, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"scans": len(transforms),
                      "low_confidence": sum(f["low_confidence"] for f in flags.values())}))


def cmd_fit(args):
    from .dataset import load_manifest, write_results
    from .pipeline import PipelineResult, fit_subject

    cfg = _config(args)
    model, data = load_manifest(_require(args.manifest, "manifest"))
    if args.subject not in data:
        raise UsageError(f"subject {args.subject!r} not in manifest")
    state = fit_subject(args.subject, data[args.subject], model, cfg)
    result = PipelineResult({args.subject: state}, [], [], [], [],
                            [(i, m, 0.0) for i, m, _ in state.error_history])
    write_results(result, model, args.out, cfg, dump_offsets=args.dump_offsets)
    print(json.dumps({"subject": args.subject, "final_mean_distance": state.error_history[-1][1]}))


def cmd_pipeline(args):
    from .dataset import load_manifest, write_results
    from .pipeline import run_pipeline

    cfg = _config(args)
    model, data = load_manifest(_require(args.manifest, "manifest"))
    result = run_pipeline(data, model, cfg)
    write_results(result, model, args.out, cfg, dump_offsets=args.dump_offsets,
                  write_aligned=not args.no_aligned)
    print(json.dumps({"subjects": len(result.states), "relabeled":
                      sum(1 for o in result.relabels if o.new_label), "excluded_scans":
                      len(result.excluded_scans)}))


def cmd_eval(args):
    from .dataset import evaluate
    from .io_formats import write_csv

    scores = evaluate(_require(args.run, "run directory"), _require(args.truth, "ground truth"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "pose_errors.csv", ["subject", "scan_id", "rotation_deg", "translation_mm"],
              scores.pop("scans"))
    write_csv(out / "coefficient_errors.csv", ["subject", "relative_error"], scores.pop("subjects"))
    (out / "eval.json").write_text(json.dumps(scores, indent=1, sort_keys=True) + "\n")
    print(json.dumps(scores, sort_keys=True))


def cmd_report(args):
    from .io_formats import read_csv, write_csv
    from .report import line_chart_svg

    run = _require(args.run, "run directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = {}
    for d in sorted((run / "subjects").iterdir()) if (run / "subjects").is_dir() else []:
        rows = read_csv(d / "error_history.csv")
        series[d.name] = [(int(r["iteration"]), float(r["mean"]), float(r["variance"])) for r in rows]
    if not series:
        raise UsageError(f"no subject histories under {run}")
    iters = sorted({i for s in series.values() for i, _, _ in s})
    table = []
    for it in iters:
        vals = [m for s in series.values() for i, m, _ in s if i == it]
        table.append((it, float(np.mean(vals)), float(np.var(vals))))
    write_csv(out / "error_history.csv", ["iteration", "mean", "variance"], table)
    (out / "mean_error.svg").write_text(line_chart_svg(
        {sid: [(i, m) for i, m, _ in s] for sid, s in series.items()},
        title="Mean point-to-surface distance per subject", ylabel="mm"))
    (out / "variance.svg").write_text(line_chart_svg(
        {"across subjects": [(i, v) for i, _, v in table]},
        title="Variance of subject mean distance", ylabel="mm²"))
    print(json.dumps({"iterations": len(table), "subjects": len(series)}))


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "init-pose": cmd_init_pose, "fit": cmd_fit,
    "pipeline": cmd_pipeline, "eval": cmd_eval, "report": cmd_report,
}


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a command is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(USAGE_EXIT, "usage", str(exc))
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(USAGE_EXIT, "usage", str(exc))
    except ConfigError as exc:
        return _fail(USAGE_EXIT, "config", str(exc))
    except FileNotFoundError as exc:
        return _fail(USAGE_EXIT, "missing_file", str(exc))
    except MorphfitError as exc:
        return _fail(FAILURE_EXIT, type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
