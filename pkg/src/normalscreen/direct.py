"""DIRECT (DIviding RECTangles) box-constrained global minimizer.

The box is rescaled to the unit hypercube. Every rectangle is a hyper-cube
trisected some number of times per dimension, so side ``i`` has length
``3 ** -level[i]``. Each iteration picks the potentially optimal rectangles
from the lower convex hull of (size, value) and trisects them along their
longest sides.

The default is the locally biased variant: size is half the longest side and
only one rectangle per size class is considered. ``locally_biased=False``
gives the original rule (size is the center-to-vertex distance; ties within
a size class are all divided).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class DirectError(FloatingPointError):
    pass


@dataclass
class HyperRect:
    center: np.ndarray
    level: np.ndarray
    value: float

    def longest_side(self) -> float:
        return 3.0 ** -int(self.level.min())

    def size(self, locally_biased: bool = True) -> float:
        if locally_biased:
            return 0.5 * self.longest_side()
        return 0.5 * math.sqrt(float(np.sum(9.0 ** -self.level.astype(np.float64))))

    def size_key(self, locally_biased: bool = True):
        if locally_biased:
            return int(self.level.min())
        return tuple(sorted(self.level.tolist()))


@dataclass(frozen=True)
class DirectConfig:
    max_evals: int = 200
    eps_balance: float = 1e-4
    size_tol: float = 1e-6
    bounds: tuple[tuple[float, float], ...] = ((0.0, 1.0),)
    locally_biased: bool = True

    def __post_init__(self):
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")
        if self.eps_balance < 0:
            raise ValueError("eps_balance must be >= 0")
        object.__setattr__(self, "bounds", tuple((float(a), float(b)) for a, b in self.bounds))
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ValueError(f"bad bounds ({lo}, {hi}): need lo < hi")


@dataclass
class DirectResult:
    x: np.ndarray
    value: float
    evals: int
    iterations: int
    trace: list[tuple[np.ndarray, float]] = field(default_factory=list)
    best_history: list[float] = field(default_factory=list)


def _hull(points: list[tuple[float, float]]) -> list[int]:
    """Indices of the lower convex hull of points sorted by x (collinear points kept)."""
    hull: list[int] = []
    for i, (x, y) in enumerate(points):
        while len(hull) >= 2:
            (x0, y0), (x1, y1) = points[hull[-2]], points[hull[-1]]
            if (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return hull


def potentially_optimal(rects: Sequence[HyperRect], eps: float,
                        locally_biased: bool = True) -> list[int]:
    """Indices of the potentially optimal rectangles, largest first."""
    groups: dict = {}
    for i, r in enumerate(rects):
        key = r.size_key(locally_biased)
        best = groups.get(key)
        if best is None or r.value < rects[best[0]].value:
            groups[key] = [i]
        elif not locally_biased and r.value == rects[best[0]].value:
            best.append(i)
    classes = sorted(groups.values(), key=lambda ids: rects[ids[0]].size(locally_biased))
    pts = [(rects[ids[0]].size(locally_biased), rects[ids[0]].value) for ids in classes]
    fmin = min(v for _, v in pts)
    start = max(i for i, (_, v) in enumerate(pts) if v == fmin)
    cand = pts[start:]
    hull = _hull(cand)
    chosen: list[int] = []
    threshold = fmin - eps * abs(fmin)
    for h_pos, j in enumerate(hull):
        if h_pos + 1 < len(hull):
            k = hull[h_pos + 1]
            slope = (cand[k][1] - cand[j][1]) / (cand[k][0] - cand[j][0])
            if cand[j][1] - slope * cand[j][0] > threshold:
                continue
        chosen.extend(classes[start + j])
    chosen.sort(key=lambda i: (-rects[i].size(locally_biased), i))
    return chosen


def direct_minimize(f: Callable[[np.ndarray], float], cfg: DirectConfig = DirectConfig()) -> DirectResult:
    """Minimize ``f`` over ``cfg.bounds``.

    Stops when the budget would be exceeded, when the incumbent's rectangle
    has longest side below ``size_tol`` (in unit-box terms), or when no
    rectangle can be divided. The evaluation count never exceeds
    ``max_evals``: a rectangle is only divided if all its new samples fit.
    """
    lo = np.array([b[0] for b in cfg.bounds])
    hi = np.array([b[1] for b in cfg.bounds])
    n = len(lo)
    trace: list[tuple[np.ndarray, float]] = []

    def evaluate(u: np.ndarray) -> float:
        x = lo + u * (hi - lo)
        v = float(f(x))
        if math.isnan(v):
            raise DirectError(f"objective returned NaN at {x.tolist()}")
        trace.append((x, v))
        return v

    center = np.full(n, 0.5)
    rects = [HyperRect(center, np.zeros(n, dtype=np.int64), evaluate(center))]
    best = 0
    history = [rects[0].value]
    iterations = 0
    done = False
    while not done and len(trace) < cfg.max_evals:
        if rects[best].longest_side() < cfg.size_tol:
            break
        selected = potentially_optimal(rects, cfg.eps_balance, cfg.locally_biased)
        divided = 0
        for idx in selected:
            rect = rects[idx]
            dims = np.flatnonzero(rect.level == rect.level.min())
            if len(trace) + 2 * len(dims) > cfg.max_evals:
                done = True
                break
            delta = 3.0 ** -(int(rect.level.min()) + 1)
            samples = []
            for d in dims:
                step = np.zeros(n)
                step[d] = delta
                cp, cm = rect.center + step, rect.center - step
                samples.append((d, cp, evaluate(cp), cm, evaluate(cm)))
            # divide the best direction first so its children get the largest share
            samples.sort(key=lambda s: min(s[2], s[4]))
            level = rect.level.copy()
            for d, cp, fp, cm, fm in samples:
                level[d] += 1
                rects.append(HyperRect(cp, level.copy(), fp))
                rects.append(HyperRect(cm, level.copy(), fm))
            rect.level = level
            divided += 1
        if divided == 0:
            break
        iterations += 1
        for i in range(len(rects)):
            if rects[i].value < rects[best].value:
                best = i
        history.append(rects[best].value)
    x = lo + rects[best].center * (hi - lo)
    return DirectResult(x, rects[best].value, len(trace), iterations, trace, history)


def write_trace_csv(path, result: DirectResult) -> Path:
    path = Path(path)
    dims = len(result.x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eval_index", *[f"x{i}" for i in range(dims)], "value"])
        for i, (x, v) in enumerate(result.trace):
            w.writerow([i, *[repr(float(c)) for c in x], repr(float(v))])
    return path
