"""Command-line interface: ``normalscreen <command> [options]``.

Exit status is 0 on success, 2 for bad arguments or configuration and 1 when
a command fails; for ``xval`` the failing stage is named on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import dataset, metrics, pipeline, thresholds
from .autodiff import RngState
from .config import ConfigError
from .pipeline import StageError

log = logging.getLogger("normalscreen")


def _config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key (repeatable)")
    p.add_argument("--profile", choices=sorted(config_mod.PROFILES))
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest")


def _load_config(args, **extra) -> config_mod.RunConfig:
    overrides = {"profile": args.profile, "seed": args.seed, "manifest": args.manifest, **extra}
    overrides.update(config_mod.parse_assignments(args.set))
    return config_mod.load(args.config, overrides)


def _fold(cfg, folds_path: Path, index: int):
    samples = dataset.load_manifest(cfg.manifest)
    if folds_path is not None:
        folds = dataset.load_folds(folds_path)
    else:
        folds = dataset.grouped_kfold(samples, cfg.k, RngState(cfg.seed), cfg.stratify)
    matches = [f for f in folds if f.fold_index == index]
    if not matches:
        raise ConfigError(f"fold {index} not in split (k={len(folds)})")
    return samples, matches[0]


def cmd_synth(args) -> int:
    lo, hi = (int(v) for v in args.images_per_patient.split(","))
    path = dataset.synth_dataset(args.out, args.patients, args.size, args.seed, (lo, hi),
                                 args.format)
    print(path)
    return 0


def cmd_split(args) -> int:
    samples = dataset.load_manifest(args.manifest)
    folds = dataset.grouped_kfold(samples, args.k, RngState(args.seed), args.stratify)
    dataset.save_folds(args.out, folds)
    for f in folds:
        n = len(f.test_samples(samples))
        print(f"fold {f.fold_index}: {len(f.test_ids)} patients, {n} images")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args).validate()
    samples, split = _fold(cfg, args.folds, args.fold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = pipeline.new_model(cfg, split.fold_index)
    try:
        result = pipeline.train_model(model, split.train_samples(samples),
                                      pipeline.make_pipeline(cfg),
                                      cfg.train_config(pipeline.fold_seed(cfg, split.fold_index)),
                                      out / "weights.nsw")
    except (ValueError, FloatingPointError, OSError) as exc:
        raise StageError("train", str(exc), split.fold_index) from exc
    pipeline.write_loss_log(out / "loss.csv", result.losses)
    print(out / "weights.nsw")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args).validate()
    samples, split = _fold(cfg, args.folds, args.fold)
    try:
        row = pipeline.evaluate_weights(cfg, samples, split, args.weights, Path(args.out))
    except (ValueError, FloatingPointError, OSError) as exc:
        raise StageError("eval", str(exc), split.fold_index) from exc
    print(json.dumps(row, indent=2, sort_keys=True))
    return 0


def cmd_threshold(args) -> int:
    try:
        scores = metrics.read_scores_csv(args.scores)
    except (OSError, ValueError) as exc:
        raise StageError("load", str(exc)) from exc
    cfg = config_mod.RunConfig(threshold_method=args.method, max_evals=args.max_evals)
    try:
        res = pipeline.pick_threshold(cfg, scores)
    except ValueError as exc:
        raise StageError("threshold", str(exc)) from exc
    doc = dict(res.as_dict(), method=args.method, evals=res.evals)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.json:
        Path(args.json).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_xval(args) -> int:
    extra = {"out_dir": args.out_dir, "threshold_method": args.threshold_method,
             "threshold_on": args.threshold_on,
             "parallel_folds": True if args.parallel_folds else None}
    cfg = _load_config(args, **extra)
    report = pipeline.run_xval(cfg)
    sys.stdout.write(thresholds.format_table(report))
    print(f"written to {cfg.output_dir()}")
    return 0


def cmd_report(args) -> int:
    cfg = config_mod.RunConfig(threshold_method=args.method)
    if args.run is not None:
        report = pipeline.report_from_run(cfg, Path(args.run))
        out = Path(args.out or args.run)
    else:
        if not args.scores:
            raise ConfigError("give --run or --scores")
        try:
            report = pipeline.report_from_scores(cfg, [Path(p) for p in args.scores])
        except (OSError, ValueError) as exc:
            raise StageError("report", str(exc)) from exc
        out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_report(out, report)
    sys.stdout.write(thresholds.format_table(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="normalscreen",
                                     description="Normal-vs-abnormal chest radiograph screening")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labelled image set and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=100)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images-per-patient", default="1,3", metavar="LO,HI")
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="patient-grouped k-fold split to JSON")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stratify", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold and save its weights")
    _config_args(p)
    p.add_argument("--folds", type=Path, help="split JSON (default: derive from the seed)")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a fold's test set with saved weights")
    _config_args(p)
    p.add_argument("--folds", type=Path)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("threshold", help="pick an operating threshold from a score,label CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--method", choices=(thresholds.SWEEP, thresholds.DIRECT),
                   default=thresholds.SWEEP)
    p.add_argument("--max-evals", type=int, default=0, help="DIRECT budget (0: automatic)")
    p.add_argument("--json", help="also write the result here")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("xval", help="run the full k-fold experiment")
    _config_args(p)
    p.add_argument("--out-dir")
    p.add_argument("--threshold-method", choices=(thresholds.SWEEP, thresholds.DIRECT))
    p.add_argument("--threshold-on", choices=("test", "validation"))
    p.add_argument("--parallel-folds", action="store_true")
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("report", help="rebuild the summary table from fold outputs")
    p.add_argument("--run", help="xval output directory")
    p.add_argument("--scores", nargs="*", help="per-fold score CSVs, in fold order")
    p.add_argument("--method", choices=(thresholds.SWEEP, thresholds.DIRECT),
                   default=thresholds.SWEEP)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: stage {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
