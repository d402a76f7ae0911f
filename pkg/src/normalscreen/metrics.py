"""Confusion counts, recall/precision/specificity, ROC and PR curves, AUC.

Normal is the positive class (label 1). A sample is predicted Normal when
``score >= threshold``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ROC = "roc"
PR = "pr"


class Undefined(float):
    """NaN-valued marker for a ratio whose denominator is zero."""

    def __new__(cls):
        return super().__new__(cls, math.nan)

    def __repr__(self):
        return "UNDEFINED"


UNDEFINED = Undefined()


def is_undefined(value) -> bool:
    return isinstance(value, Undefined) or (isinstance(value, float) and math.isnan(value))


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Curve:
    kind: str
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray

    def points(self):
        return list(zip(self.x.tolist(), self.y.tolist(), self.thresholds.tolist()))


def _arrays(scores: Sequence[ScoredSample]):
    if len(scores) == 0:
        raise ValueError("no scored samples")
    s = np.fromiter((x.score for x in scores), dtype=np.float64, count=len(scores))
    y = np.fromiter((x.label for x in scores), dtype=np.int64, count=len(scores))
    return s, y


def confusion_at(scores: Sequence[ScoredSample], threshold: float) -> ConfusionCounts:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    s, y = _arrays(scores)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int) -> float:
    return UNDEFINED if den == 0 else num / den


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


def _sweep_counts(scores: Sequence[ScoredSample]):
    """Cumulative (tp, fp) after admitting each group of tied scores, highest first."""
    s, y = _arrays(scores)
    pos, neg = int(y.sum()), int(len(y) - y.sum())
    if pos == 0 or neg == 0:
        raise ValueError("both classes required")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    return s[last], tp[last], fp[last], pos, neg


def roc_curve(scores: Sequence[ScoredSample]) -> Curve:
    """ROC points (1 - specificity, recall), one per distinct score plus the origin.

    The first point has threshold ``inf`` (nothing predicted Normal).
    """
    thr, tp, fp, pos, neg = _sweep_counts(scores)
    x = np.r_[0.0, fp / neg]
    y = np.r_[0.0, tp / pos]
    return Curve(ROC, x, y, np.r_[math.inf, thr])


def pr_curve(scores: Sequence[ScoredSample]) -> Curve:
    """PR points (recall, precision) per distinct score, starting from (0, 1)."""
    thr, tp, fp, pos, _ = _sweep_counts(scores)
    x = np.r_[0.0, tp / pos]
    y = np.r_[1.0, tp / (tp + fp)]
    return Curve(PR, x, y, np.r_[math.inf, thr])


def auc(curve: Curve) -> float:
    """Trapezoidal area under ``curve`` over its x axis, clipped to [0, 1]."""
    x, y = np.asarray(curve.x, dtype=np.float64), np.asarray(curve.y, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("AUC needs at least two points")
    if np.any(np.diff(x) < 0):
        raise ValueError("curve x values must be non-decreasing")
    area = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    return min(max(area, 0.0), 1.0)


def roc_auc(scores: Sequence[ScoredSample]) -> float:
    return auc(roc_curve(scores))


def pr_auc(scores: Sequence[ScoredSample]) -> float:
    return auc(pr_curve(scores))


def write_scores_csv(path, scores: Sequence[ScoredSample], extra: Sequence[dict] | None = None) -> Path:
    """CSV with ``score`` and ``label`` columns, plus any ``extra`` per-row columns first."""
    path = Path(path)
    extra_keys = list(extra[0]) if extra else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*extra_keys, "score", "label"])
        for i, s in enumerate(scores):
            cells = [extra[i][k] for k in extra_keys] if extra else []
            w.writerow([*cells, repr(float(s.score)), s.label])
    return path


def read_scores_csv(path) -> list[ScoredSample]:
    """Read a CSV with ``score`` and ``label`` columns (other columns ignored).

    Labels may be 0/1 or normal/abnormal.
    """
    path = Path(path)
    tokens = {"1": 1, "0": 0, "normal": 1, "abnormal": 0}
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"score", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain score and label columns")
        for lineno, row in enumerate(reader, start=2):
            try:
                label = tokens[row["label"].strip().lower()]
                out.append(ScoredSample(float(row["score"]), label))
            except (KeyError, ValueError, AttributeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad row ({exc})") from None
    return out


def write_curve_csv(path, curve: Curve) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "x", "y"])
        for x, y, t in curve.points():
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])
    return path


def write_curve_svg(path, curve: Curve, title: str = "", size: int = 320) -> Path:
    """Minimal dependency-free line plot of ``curve`` on the unit square."""
    path = Path(path)
    pad = 40
    inner = size - 2 * pad
    pts = " ".join(f"{pad + x * inner:.2f},{pad + (1 - y) * inner:.2f}"
                   for x, y in zip(curve.x, curve.y))
    xlabel, ylabel = ("1 - specificity", "recall") if curve.kind == ROC else ("recall", "precision")
    diag = (f'<line x1="{pad}" y1="{pad + inner}" x2="{pad + inner}" y2="{pad}" '
            f'stroke="#bbb" stroke-dasharray="4 3"/>' if curve.kind == ROC else "")
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">\n'
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="#000"/>\n'
        f'{diag}\n'
        f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>\n'
        f'<text x="{size / 2}" y="{size - 10}" text-anchor="middle" font-size="12">{xlabel}</text>\n'
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">{ylabel}</text>\n'
        f'<text x="{size / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>\n'
        f'</svg>\n'
    )
    path.write_text(svg)
    return path
