"""End-to-end cross-validation: split, train, score, pick thresholds, report.

Output layout under the run directory::

    config.txt            resolved configuration
    folds.json            patient-level split
    fold_<i>/weights.nsw  trained weights
    fold_<i>/loss.csv     mean training loss per epoch
    fold_<i>/scores.csv   test scores (image_path, patient_id, score, label)
    fold_<i>/roc.csv, roc.svg, pr.csv, pr.svg
    fold_<i>/report.json  fold row plus threshold details
    report.json           all folds and the Min/Max/Average/Std summary
    table.txt             the same as a plain-text table
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import metrics, thresholds
from .archive import load_weights
from .autodiff import RngState
from .config import RunConfig
from .dataset import (NORMAL, FoldSplit, ImagePipeline, Sample, grouped_kfold, load_folds,
                      load_manifest, patient_labels, save_folds)
from .model import Model, build_model
from .train import score_split, train_model, write_loss_log

log = logging.getLogger(__name__)

# stream keys for the derived random states
_INIT_KEY = 10
_TRAIN_KEY = 11
_VALIDATION_KEY = 12

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["folds", "summary", "threshold_method", "threshold_on", "seed", "profile", "k"],
    "properties": {
        "seed": {"type": "integer"},
        "profile": {"type": "string"},
        "k": {"type": "integer", "minimum": 2},
        "threshold_method": {"enum": ["sweep", "direct"]},
        "threshold_on": {"enum": ["test", "validation"]},
        "folds": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["fold", "roc_auc", "pr_auc", "threshold", "tp", "fp", "tn", "fn",
                             "recall", "specificity", "precision", "n_test"],
                "properties": {
                    "fold": {"type": "integer", "minimum": 0},
                    "n_test": {"type": "integer", "minimum": 1},
                    "roc_auc": {"type": "number", "minimum": 0, "maximum": 1},
                    "pr_auc": {"type": "number", "minimum": 0, "maximum": 1},
                    "threshold": {"type": "number", "minimum": 0, "maximum": 1},
                    "tp": {"type": "integer", "minimum": 0},
                    "fp": {"type": "integer", "minimum": 0},
                    "tn": {"type": "integer", "minimum": 0},
                    "fn": {"type": "integer", "minimum": 0},
                    "recall": {"type": ["number", "null"]},
                    "specificity": {"type": ["number", "null"]},
                    "precision": {"type": ["number", "null"]},
                },
            },
        },
        "summary": {
            "type": "object",
            "required": ["min", "max", "average", "std"],
            "additionalProperties": {
                "type": "object",
                "required": list(thresholds.REPORT_FIELDS),
                "additionalProperties": {"type": "number"},
            },
        },
    },
}


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it (and ``fold`` where relevant)."""

    def __init__(self, stage: str, message: str, fold: int | None = None):
        where = stage if fold is None else f"{stage} (fold {fold})"
        super().__init__(f"{where}: {message}")
        self.stage = stage
        self.fold = fold


@dataclass
class FoldOutcome:
    row: dict
    losses: list[float]
    out_dir: Path


def make_pipeline(cfg: RunConfig) -> ImagePipeline:
    return ImagePipeline(size=(cfg.input_size, cfg.input_size),
                         tiles=(cfg.clahe_tiles, cfg.clahe_tiles),
                         clip_limit=cfg.clahe_clip, augment=cfg.augment)


def fold_seed(cfg: RunConfig, fold: int) -> int:
    return int(RngState.derive(cfg.seed, _TRAIN_KEY, fold).generator.integers(2 ** 31))


def new_model(cfg: RunConfig, fold: int) -> Model:
    return build_model(cfg.model_config(), RngState.derive(cfg.seed, _INIT_KEY, fold))


def validation_split(cfg: RunConfig, samples: Sequence[Sample],
                     fold: int) -> tuple[list[Sample], list[Sample]]:
    """Hold out ``validation_frac`` of each class's patients from ``samples``."""
    labels = patient_labels(samples)
    gen = RngState.derive(cfg.seed, _VALIDATION_KEY, fold).generator
    held: set[str] = set()
    for cls in (NORMAL, 1 - NORMAL):
        ids = sorted(p for p, y in labels.items() if y == cls)
        ids = [ids[i] for i in gen.permutation(len(ids))]
        take = max(1, math.ceil(cfg.validation_frac * len(ids))) if len(ids) > 1 else 0
        held.update(ids[:take])
    fit = [s for s in samples if s.patient_id not in held]
    val = [s for s in samples if s.patient_id in held]
    return fit, val


def run_fold(cfg: RunConfig, samples: Sequence[Sample], split: FoldSplit,
             out_dir: Path) -> FoldOutcome:
    """Train and evaluate one fold, writing its artifacts to ``out_dir``."""
    i = split.fold_index
    out_dir.mkdir(parents=True, exist_ok=True)
    pipe = make_pipeline(cfg)
    train_set = split.train_samples(samples)
    test_set = split.test_samples(samples)
    if not train_set or not test_set:
        raise StageError("split", "empty train or test set", i)
    val_set: list[Sample] = []
    if cfg.threshold_on == "validation":
        train_set, val_set = validation_split(cfg, train_set, i)

    model = new_model(cfg, i)
    try:
        result = train_model(model, train_set, pipe, cfg.train_config(fold_seed(cfg, i)),
                             out_dir / "weights.nsw")
    except (ValueError, FloatingPointError, OSError) as exc:
        losses = getattr(exc, "losses", None)
        if losses:
            write_loss_log(out_dir / "loss.csv", losses)
        raise StageError("train", str(exc), i) from exc
    write_loss_log(out_dir / "loss.csv", result.losses)

    try:
        scores = score_split(model, test_set, pipe)
        metrics.write_scores_csv(out_dir / "scores.csv", scores,
                                 [{"image_path": s.image_path, "patient_id": s.patient_id}
                                  for s in test_set])
    except (ValueError, FloatingPointError, OSError) as exc:
        raise StageError("score", str(exc), i) from exc

    try:
        operating = None
        if val_set:
            val_scores = score_split(model, val_set, pipe)
            metrics.write_scores_csv(out_dir / "validation_scores.csv", val_scores)
            operating = pick_threshold(cfg, val_scores)
        else:
            operating = pick_threshold(cfg, scores)
        row = thresholds.fold_row(scores, cfg.threshold_method, operating)
    except ValueError as exc:
        raise StageError("threshold", str(exc), i) from exc

    row = {"fold": i, "n_test": len(scores), **row}
    write_fold_artifacts(out_dir, scores, row, result.losses)
    return FoldOutcome(row, result.losses, out_dir)


def pick_threshold(cfg: RunConfig, scores) -> thresholds.ThresholdResult:
    dcfg = None
    if cfg.threshold_method == thresholds.DIRECT:
        dcfg = cfg.direct_config(thresholds.direct_budget(scores))
    return thresholds.optimize_threshold(scores, cfg.threshold_method, dcfg)


def write_fold_artifacts(out_dir: Path, scores, row: dict, losses: Sequence[float]) -> None:
    for curve in (metrics.roc_curve(scores), metrics.pr_curve(scores)):
        metrics.write_curve_csv(out_dir / f"{curve.kind}.csv", curve)
        metrics.write_curve_svg(out_dir / f"{curve.kind}.svg", curve,
                                title=f"fold {row['fold']} {curve.kind.upper()}")
    doc = dict(row, final_loss=float(losses[-1]) if losses else None)
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def evaluate_weights(cfg: RunConfig, samples: Sequence[Sample], split: FoldSplit,
                     weights: Path, out_dir: Path) -> dict:
    """Score a fold's test set with saved weights and write its artifacts."""
    model = load_weights(new_model(cfg, split.fold_index), weights)
    out_dir.mkdir(parents=True, exist_ok=True)
    test_set = split.test_samples(samples)
    scores = score_split(model, test_set, make_pipeline(cfg))
    metrics.write_scores_csv(out_dir / "scores.csv", scores,
                             [{"image_path": s.image_path, "patient_id": s.patient_id}
                              for s in test_set])
    row = {"fold": split.fold_index, "n_test": len(scores),
           **thresholds.fold_row(scores, cfg.threshold_method, pick_threshold(cfg, scores))}
    write_fold_artifacts(out_dir, scores, row, [])
    return row


def build_report(cfg: RunConfig, rows: Sequence[dict]) -> dict:
    rows = sorted(rows, key=lambda r: r["fold"])
    report = thresholds.xval_report(rows=rows, method=cfg.threshold_method)
    report.update(seed=cfg.seed, profile=cfg.profile, k=len(rows), threshold_on=cfg.threshold_on)
    return report


def prepare(cfg: RunConfig, out: Path) -> tuple[list[Sample], list[FoldSplit]]:
    try:
        samples = load_manifest(cfg.manifest)
    except (OSError, ValueError) as exc:
        raise StageError("load", str(exc)) from exc
    folds_file = out / "folds.json"
    try:
        if folds_file.exists():
            folds = load_folds(folds_file)
            if len(folds) != cfg.k:
                raise ValueError(f"{folds_file} has {len(folds)} folds, config asks for {cfg.k}")
        else:
            folds = grouped_kfold(samples, cfg.k, RngState(cfg.seed), cfg.stratify)
            save_folds(folds_file, folds)
    except (OSError, ValueError) as exc:
        raise StageError("split", str(exc)) from exc
    return samples, folds


def run_xval(cfg: RunConfig) -> dict:
    """Full k-fold run; returns the report dict and writes all artifacts.

    An existing ``folds.json`` in the run directory is reused, so a run can
    be repeated on a fixed split. Raises :class:`StageError` on failure.
    """
    cfg.validate()
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    samples, folds = prepare(cfg, out)

    def one(split: FoldSplit) -> FoldOutcome:
        log.info("fold %d: %d train / %d test patients", split.fold_index,
                 len(split.train_ids), len(split.test_ids))
        return run_fold(cfg, samples, split, out / f"fold_{split.fold_index}")

    if cfg.parallel_folds:
        with ThreadPoolExecutor(max_workers=len(folds)) as pool:
            outcomes = list(pool.map(one, folds))
    else:
        outcomes = [one(f) for f in folds]

    try:
        report = build_report(cfg, [o.row for o in outcomes])
        write_report(out, report)
    except (OSError, ValueError) as exc:
        raise StageError("report", str(exc)) from exc
    return report


def write_report(out: Path, report: dict) -> None:
    (out / "report.json").write_text(thresholds.report_json(report))
    (out / "table.txt").write_text(thresholds.format_table(report))


def report_from_run(cfg: RunConfig, run_dir: Path) -> dict:
    """Rebuild the summary report from the per-fold reports of a finished run."""
    rows = []
    for path in sorted(run_dir.glob("fold_*/report.json")):
        doc = json.loads(path.read_text())
        doc.pop("final_loss", None)
        rows.append(doc)
    if not rows:
        raise StageError("report", f"no fold reports under {run_dir}")
    return build_report(cfg, rows)


def report_from_scores(cfg: RunConfig, paths: Sequence[Path]) -> dict:
    """Summary report from per-fold score CSVs, thresholds picked on each."""
    rows = []
    for i, path in enumerate(paths):
        scores = metrics.read_scores_csv(path)
        rows.append({"fold": i, "n_test": len(scores),
                     **thresholds.fold_row(scores, cfg.threshold_method,
                                           pick_threshold(cfg, scores))})
    return build_report(cfg, rows)
