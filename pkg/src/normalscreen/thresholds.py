"""Precision-first operating-point selection and the cross-validation summary table."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import metrics
from .direct import DirectConfig, direct_minimize
from .metrics import ConfusionCounts, ScoredSample

SWEEP = "sweep"
DIRECT = "direct"

REPORT_FIELDS = ("roc_auc", "pr_auc", "threshold", "tp", "fp", "tn", "fn", "recall", "specificity")
TABLE_HEADER = ("Test", "ROC AUC", "PR AUC", "Threshold", "TP", "FP", "TN", "FN",
                "Recall", "Specificity")


@dataclass(frozen=True)
class ThresholdResult:
    threshold: float
    counts: ConfusionCounts
    precision: float
    recall: float
    specificity: float
    objective: float
    evals: int = 0

    def as_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "tp": self.counts.tp, "fp": self.counts.fp,
            "tn": self.counts.tn, "fn": self.counts.fn,
            "precision": _json_float(self.precision),
            "recall": _json_float(self.recall),
            "specificity": _json_float(self.specificity),
        }


def _json_float(v):
    return None if metrics.is_undefined(v) else float(v)


def _check_classes(scores: Sequence[ScoredSample]):
    labels = {s.label for s in scores}
    if labels != {0, 1}:
        raise ValueError("both classes required")


def objective(counts: ConfusionCounts, n: int) -> float:
    """precision + recall / (2 n^2); undefined precision counts as 0.

    Distinct precisions over ``n`` samples differ by at least 1/n^2, so the
    recall term only ever breaks ties between equal precisions.
    """
    p = metrics.precision(counts)
    r = metrics.recall(counts)
    p = 0.0 if metrics.is_undefined(p) else p
    r = 0.0 if metrics.is_undefined(r) else r
    return p + r / (2.0 * n * n)


def candidate_thresholds(scores: Sequence[ScoredSample]) -> np.ndarray:
    """0, 1 and the midpoints between consecutive distinct scores, ascending."""
    s = np.unique([x.score for x in scores])
    mids = (s[:-1] + s[1:]) / 2.0
    return np.unique(np.r_[0.0, mids, 1.0])


def _knots(scores: Sequence[ScoredSample]) -> np.ndarray:
    # leading 0 gives the predict-everything case a segment of its own even
    # when some score is exactly 0
    return np.r_[0.0, np.unique(np.r_[0.0, [x.score for x in scores], 1.0])]


def direct_budget(scores: Sequence[ScoredSample]) -> int:
    """Default DIRECT evaluation budget: enough to resolve every score interval
    of the rank-space map at least twice over, and never below 200."""
    return max(200, 8 * len(_knots(scores)))


class _Tally:
    """Confusion counts at any threshold by binary search over sorted scores."""

    def __init__(self, scores: Sequence[ScoredSample]):
        s = np.array([x.score for x in scores])
        y = np.array([x.label for x in scores])
        self.pos = np.sort(s[y == 1])
        self.neg = np.sort(s[y == 0])
        self.n = len(s)

    def counts(self, t: float) -> ConfusionCounts:
        tp = len(self.pos) - int(np.searchsorted(self.pos, t, side="left"))
        fp = len(self.neg) - int(np.searchsorted(self.neg, t, side="left"))
        return ConfusionCounts(tp, fp, len(self.neg) - fp, len(self.pos) - tp)

    def objective(self, t: float) -> float:
        return objective(self.counts(t), self.n)


def _result(scores, t: float, evals: int = 0) -> ThresholdResult:
    c = metrics.confusion_at(scores, t)
    return ThresholdResult(float(t), c, metrics.precision(c), metrics.recall(c),
                           metrics.specificity(c), objective(c, len(scores)), evals)


def optimize_threshold(scores: Sequence[ScoredSample], method: str = SWEEP,
                       cfg: DirectConfig | None = None) -> ThresholdResult:
    """Threshold maximizing precision, then recall, for predicting Normal at ``score >= t``.

    ``sweep`` evaluates every candidate from :func:`candidate_thresholds` and
    keeps the first maximum. ``direct`` minimizes the negated objective with
    DIRECT on [0, 1], where a point ``u`` maps to a threshold by piecewise
    linear interpolation through the sorted distinct scores (plus 0 and 1)
    placed at equal spacing. The map is monotone, so it only changes how wide
    each constant stretch of the objective looks to the optimizer.
    """
    _check_classes(scores)
    tally = _Tally(scores)
    if method == SWEEP:
        cands = candidate_thresholds(scores)
        best, best_j = None, -math.inf
        for t in cands:
            j = tally.objective(t)
            if j > best_j:
                best, best_j = t, j
        return _result(scores, best, len(cands))
    if method == DIRECT:
        knots = _knots(scores)
        grid = np.linspace(0.0, 1.0, len(knots))
        if cfg is None:
            cfg = DirectConfig(max_evals=direct_budget(scores))

        def to_threshold(u: float) -> float:
            return float(np.clip(np.interp(u, grid, knots), 0.0, 1.0))

        def neg_j(u):
            return -tally.objective(to_threshold(float(u[0])))

        res = direct_minimize(neg_j, DirectConfig(cfg.max_evals, cfg.eps_balance, cfg.size_tol,
                                                  ((0.0, 1.0),), cfg.locally_biased))
        return _result(scores, to_threshold(float(res.x[0])), res.evals)
    raise ValueError(f"method must be 'sweep' or 'direct', got {method!r}")


# ---------------------------------------------------------------- fold summary

def fold_row(scores: Sequence[ScoredSample], method: str = SWEEP,
             operating: ThresholdResult | None = None) -> dict:
    """Per-fold report row. ``operating`` overrides the threshold choice
    (e.g. a threshold tuned on a separate validation split)."""
    if not scores:
        raise ValueError("empty fold")
    res = operating if operating is not None else optimize_threshold(scores, method)
    counts = metrics.confusion_at(scores, res.threshold)
    return {
        "roc_auc": metrics.roc_auc(scores),
        "pr_auc": metrics.pr_auc(scores),
        "threshold": res.threshold,
        "tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn,
        "recall": _json_float(metrics.recall(counts)),
        "specificity": _json_float(metrics.specificity(counts)),
        "precision": _json_float(metrics.precision(counts)),
    }


def summarize(rows: Sequence[dict]) -> dict[str, dict]:
    """Min / Max / Average / Std (sample, ddof=1; 0 for a single fold) per field."""
    if not rows:
        raise ValueError("no folds")
    out = {"min": {}, "max": {}, "average": {}, "std": {}}
    for key in REPORT_FIELDS:
        vals = np.array([np.nan if r[key] is None else r[key] for r in rows], dtype=np.float64)
        out["min"][key] = float(np.nanmin(vals))
        out["max"][key] = float(np.nanmax(vals))
        out["average"][key] = float(np.nanmean(vals))
        out["std"][key] = float(np.nanstd(vals, ddof=1)) if np.sum(~np.isnan(vals)) > 1 else 0.0
    return out


def xval_report(per_fold: Sequence[Sequence[ScoredSample]] | None = None, method: str = SWEEP,
                rows: Sequence[dict] | None = None) -> dict:
    """Aggregate table from per-fold scores (or from ready-made rows)."""
    if rows is None:
        if not per_fold:
            raise ValueError("no folds")
        rows = [fold_row(s, method) for s in per_fold]
    rows = [dict(r, fold=i) if "fold" not in r else dict(r) for i, r in enumerate(rows)]
    return {"folds": rows, "summary": summarize(rows), "threshold_method": method}


def _fmt(key: str, v) -> str:
    if v is None:
        return "n/a"
    if key in ("tp", "fp", "tn", "fn") and float(v).is_integer():
        return str(int(v))
    return f"{v:.2f}"


def format_table(report: dict) -> str:
    """Plain-text table in the column order Test, ROC AUC, ..., Specificity."""
    lines = [TABLE_HEADER]
    for r in report["folds"]:
        lines.append((str(r["fold"]), *[_fmt(k, r[k]) for k in REPORT_FIELDS]))
    summary = report["summary"]
    for label, key in (("Min", "min"), ("Max", "max"), ("Average", "average"), ("Std", "std")):
        row = summary[key]
        cells = []
        for k in REPORT_FIELDS:
            v = row[k]
            # averages and spreads of counts are reported with two decimals
            cells.append(f"{v:.2f}" if key in ("average", "std") else _fmt(k, v))
        lines.append((label, *cells))
    widths = [max(len(line[i]) for line in lines) for i in range(len(TABLE_HEADER))]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    text = []
    for i, line in enumerate(lines):
        text.append("  ".join(c.rjust(w) for c, w in zip(line, widths)))
        if i == 0 or i == len(report["folds"]):
            text.append(rule)
    return "\n".join(text) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
