import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normalscreen import metrics
from normalscreen.metrics import UNDEFINED, ConfusionCounts, Curve, ScoredSample

from helpers import mann_whitney_auc, random_scores

REFERENCE_ROWS = [  # test, tp, fp, tn, fn, recall, specificity
    (0, 121, 0, 381, 135, 0.47, 1.00),
    (1, 122, 0, 390, 146, 0.46, 1.00),
    (2, 138, 0, 378, 117, 0.54, 1.00),
    (3, 119, 0, 387, 141, 0.46, 1.00),
    (4, 146, 0, 381, 115, 0.56, 1.00),
]


def scored(s, y):
    return [ScoredSample(float(a), int(b)) for a, b in zip(s, y)]


HAND = scored([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0])


def test_confusion_degenerate_thresholds():
    c = metrics.confusion_at(HAND, 0.0)
    assert (c.fp, c.fn) == (2, 0)
    c = metrics.confusion_at(HAND, np.nextafter(0.9, 1))
    assert (c.tp, c.fp) == (0, 0)
    c = metrics.confusion_at(HAND, 0.8)  # ties predict Normal
    assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 1)


def test_confusion_matches_per_sample_tally():
    rng = np.random.default_rng(0)
    s, y = random_scores(rng, 50)
    data = scored(s, y)
    for t in rng.random(20):
        c = metrics.confusion_at(data, t)
        tp = sum(1 for a, b in zip(s, y) if a >= t and b == 1)
        fp = sum(1 for a, b in zip(s, y) if a >= t and b == 0)
        assert (c.tp, c.fp) == (tp, fp)
        assert c.total == 50


def test_confusion_errors():
    with pytest.raises(ValueError):
        metrics.confusion_at([], 0.5)
    with pytest.raises(ValueError):
        metrics.confusion_at(HAND, 1.5)
    with pytest.raises(ValueError):
        ScoredSample(1.2, 1)


@pytest.mark.parametrize("row", REFERENCE_ROWS, ids=lambda r: f"test{r[0]}")
def test_reference_rows_from_counts(row):
    _, tp, fp, tn, fn, rec, spec = row
    c = ConfusionCounts(tp, fp, tn, fn)
    assert abs(metrics.recall(c) - rec) <= 0.005
    assert abs(metrics.specificity(c) - spec) <= 0.005
    assert metrics.precision(c) == 1.0


def test_reference_named_values():
    assert metrics.recall(ConfusionCounts(121, 0, 381, 135)) == 121 / 256
    assert metrics.recall(ConfusionCounts(146, 0, 381, 115)) == 146 / 261


def test_zero_denominator_is_undefined():
    c = ConfusionCounts(0, 0, 5, 0)
    assert metrics.is_undefined(metrics.precision(c))
    assert metrics.is_undefined(metrics.recall(c))
    assert metrics.precision(c) is UNDEFINED
    assert metrics.precision(c) != 0 and metrics.precision(c) != 1


def test_hand_worked_curves():
    roc = metrics.roc_curve(HAND)
    assert roc.points() == [(0.0, 0.0, math.inf), (0.0, 0.5, 0.9), (0.5, 0.5, 0.8),
                            (0.5, 1.0, 0.7), (1.0, 1.0, 0.1)]
    pr = metrics.pr_curve(HAND)
    np.testing.assert_allclose(pr.x, [0, 0.5, 0.5, 1, 1])
    np.testing.assert_allclose(pr.y, [1, 1, 0.5, 2 / 3, 0.5])
    assert metrics.auc(roc) == 0.75


def test_curve_invariants_and_ties():
    rng = np.random.default_rng(1)
    s, y = random_scores(rng, 40)
    roc = metrics.roc_curve(scored(s, y))
    assert np.all(np.diff(roc.thresholds) < 0)
    assert np.all(np.diff(roc.x) >= 0) and np.all(np.diff(roc.y) >= 0)
    assert len(roc.x) == len(np.unique(s)) + 1
    assert (roc.x[-1], roc.y[-1]) == (1.0, 1.0)


def test_perfect_separation():
    data = scored([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    roc = metrics.roc_curve(data)
    assert (0.0, 1.0) in [(x, y) for x, y, _ in roc.points()]
    assert metrics.roc_auc(data) == 1.0
    assert metrics.pr_auc(data) == 1.0


def test_random_labels_hug_diagonal():
    rng = np.random.default_rng(2)
    data = scored(rng.random(10000), rng.integers(0, 2, 10000))
    assert abs(metrics.roc_auc(data) - 0.5) < 0.05


def test_auc_simple_and_errors():
    diag = Curve("roc", np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([math.inf, 0.0]))
    assert metrics.auc(diag) == 0.5
    with pytest.raises(ValueError):
        metrics.auc(Curve("roc", np.array([0.5, 0.2]), np.array([0.0, 1.0]), np.array([1.0, 0.0])))
    with pytest.raises(ValueError, match="both classes"):
        metrics.roc_curve(scored([0.1, 0.2], [1, 1]))


def test_auc_equals_rank_statistic_small_sets():
    rng = np.random.default_rng(3)
    for _ in range(100):
        s, y = random_scores(rng, int(rng.integers(2, 21)))
        assert abs(metrics.roc_auc(scored(s, y)) - mann_whitney_auc(s, y)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(4, 40))
def test_properties(seed, n):
    rng = np.random.default_rng(seed)
    s, y = random_scores(rng, n)
    data = scored(s, y)
    # monotone transform leaves ROC AUC unchanged
    warped = scored(np.sqrt(s), y)
    assert metrics.roc_auc(data) == pytest.approx(metrics.roc_auc(warped), abs=1e-12)
    # recall and fall-out are non-increasing in t
    ts = np.linspace(0, 1, 11)
    cs = [metrics.confusion_at(data, t) for t in ts]
    rec = [metrics.recall(c) for c in cs]
    fpr = [1 - metrics.specificity(c) for c in cs]
    assert all(a >= b for a, b in zip(rec, rec[1:]))
    assert all(a >= b for a, b in zip(fpr, fpr[1:]))
    assert all(c.total == n for c in cs)


def test_curve_exports(tmp_path):
    roc = metrics.roc_curve(HAND)
    text = metrics.write_curve_csv(tmp_path / "roc.csv", roc).read_text().splitlines()
    assert text[0] == "threshold,x,y"
    assert text[1] == "inf,0.0,0.0"
    assert len(text) == 6
    svg = metrics.write_curve_svg(tmp_path / "roc.svg", roc, "fold 0").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_scores_csv_round_trip(tmp_path):
    path = metrics.write_scores_csv(tmp_path / "s.csv", HAND, [{"id": i} for i in range(4)])
    assert path.read_text().splitlines()[0] == "id,score,label"
    assert metrics.read_scores_csv(path) == HAND
    bad = tmp_path / "bad.csv"
    bad.write_text("score,label\n0.5,maybe\n")
    with pytest.raises(ValueError, match=":2:"):
        metrics.read_scores_csv(bad)
    bad.write_text("value,label\n0.5,1\n")
    with pytest.raises(ValueError, match="header"):
        metrics.read_scores_csv(bad)
