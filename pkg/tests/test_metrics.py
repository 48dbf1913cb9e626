import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histograde import metrics
from histograde.errors import ContractError, DegenerateBootstrapError, UndefinedMetricError
from histograde.trainer import PredictionRecord


def records(y, probs):
    return [PredictionRecord.from_probs(f"S{i}", "P", int(t), p, 0) for i, (t, p) in enumerate(zip(y, probs))]


def random_records(seed, n=60, signal=1.0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 4, size=n)
    z = rng.normal(size=(n, 4))
    z[np.arange(n), y] += signal
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    return records(y, p)


REPORTED_CORRECT = [531, 622, 171, 125]
REPORTED_SUPPORT = [647, 885, 358, 187]


def reported_confusion():
    # diagonal and row totals from the text; off-diagonal mass spread to neighbours
    c = np.zeros((4, 4), int)
    for k in range(4):
        c[k, k] = REPORTED_CORRECT[k]
    c[0, 1] = 647 - 531
    c[1, 0], c[1, 2] = 150, 885 - 622 - 150
    c[2, 1], c[2, 3] = 120, 358 - 171 - 120
    c[3, 2] = 187 - 125
    return metrics.ConfusionMatrix(c)


def test_confusion_basics():
    y = [0, 1, 2, 3, 1]
    recs = records(y, np.eye(4)[y])
    assert np.array_equal(metrics.confusion_matrix(recs).counts, np.diag([1, 2, 1, 1]))
    one = metrics.confusion_matrix(records([2], [[0.1, 0.6, 0.2, 0.1]])).counts
    assert one[2, 1] == 1 and one.sum() == 1
    with pytest.raises(ContractError):
        metrics.confusion_matrix([])


def test_reported_recalls():
    s = metrics.prf(reported_confusion())
    assert np.allclose(s.recall, [0.821, 0.703, 0.478, 0.668], atol=5e-4)
    # weighted recall is total-correct over total, exactly
    assert s.weighted["recall"] == pytest.approx(1449 / 2077, abs=1e-15)


def test_prf_conventions():
    s = metrics.prf(metrics.ConfusionMatrix(np.eye(4, dtype=int) * 5))
    assert np.all(s.precision == 1) and np.all(s.f1 == 1) and s.weighted["f1"] == 1
    c = np.array([[3, 1, 0, 0], [1, 2, 0, 0], [0, 0, 0, 4], [0, 0, 0, 2]])
    s = metrics.prf(metrics.ConfusionMatrix(c))
    assert s.precision[2] == 0 and s.zero_division == [2] and s.f1[2] == 0
    # hand computation for class 0: p = 3/4, r = 3/4
    assert s.f1[0] == pytest.approx(0.75)


def test_auc_examples():
    assert metrics.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert metrics.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(UndefinedMetricError):
        metrics.roc_auc([0.1, 0.2], [1, 1])


def _pair_auc(s, y):
    pos = [a for a, t in zip(s, y) if t]
    neg = [a for a, t in zip(s, y) if not t]
    wins = sum((a > b) + 0.5 * (a == b) for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_auc_three_ways(data):
    s = np.array([d[0] for d in data], float) / 6
    y = np.array([d[1] for d in data])
    if y.all() or not y.any():
        return
    a = metrics.roc_auc(s, y)
    assert a == pytest.approx(_pair_auc(s, y), abs=1e-12)
    assert a == pytest.approx(metrics.roc_auc_trapezoid(s, y), abs=1e-12)
    assert a + metrics.roc_auc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_weighted_auc():
    assert metrics.support_weighted_mean([0.925, 0.826, 0.861, 0.923], REPORTED_SUPPORT) == \
        pytest.approx(1810.324 / 2077, abs=1e-12)
    assert metrics.support_weighted_mean([0.6, 0.8], [5, 5]) == pytest.approx(0.7)
    recs = records([0, 0, 1, 1], [[0.9, 0.1, 0, 0], [0.8, 0.2, 0, 0], [0.1, 0.9, 0, 0], [0.3, 0.7, 0, 0]])
    assert metrics.weighted_auc(recs) == 1.0


def test_relabeling_keeps_row_sums():
    recs = random_records(3)
    base = metrics.confusion_matrix(recs).support
    perm = [2, 0, 3, 1]
    moved = [PredictionRecord(r.slide_id, r.patient_id, r.true_label, r.probabilities, perm[r.predicted_label], 0)
             for r in recs]
    assert np.array_equal(metrics.confusion_matrix(moved).support, base)


def test_bootstrap_properties():
    recs = random_records(4)
    a = metrics.bootstrap_ci(recs, metrics.weighted_f1, B=200, seed=7)
    assert a == metrics.bootstrap_ci(recs, metrics.weighted_f1, B=200, seed=7)
    assert a[0] <= a[1]
    assert metrics.bootstrap_ci(recs, lambda r: 0.42, B=50) == (0.42, 0.42)


def test_bootstrap_percentiles_by_hand():
    recs = random_records(5, n=30)
    rng = np.random.default_rng(11)
    stats = []
    while len(stats) < 100:
        idx = rng.integers(0, 30, size=30)
        stats.append(metrics.weighted_f1([recs[i] for i in idx]))
    want = np.percentile(stats, [2.5, 97.5])
    assert metrics.bootstrap_ci(recs, metrics.weighted_f1, B=100, seed=11) == tuple(want)


def test_bootstrap_redraw_and_give_up():
    # class 3 appears once in 40 records, so many resamples lack it
    y = [0] * 39 + [3]
    recs = records(y, np.eye(4)[y])
    lo, hi = metrics.bootstrap_ci(recs, metrics.class_recall(3), B=20, seed=1)
    assert lo == hi == 1.0
    with pytest.raises(DegenerateBootstrapError):
        metrics.bootstrap_ci(records([0, 0], np.eye(4)[[0, 0]]), metrics.class_recall(3), B=5)


def test_report_files(tmp_path):
    recs = random_records(6)
    rep = metrics.metric_report(recs, B=50, seed=0)
    w = rep["weighted"]
    per = rep["per_class"]
    sup = [per[n]["support"] for n in per]
    for k in ("precision", "recall", "f1", "auc"):
        assert w[k] == pytest.approx(metrics.support_weighted_mean([per[n][k] for n in per], sup))
        lo, hi = rep["ci95"][k]
        assert 0 <= lo <= hi <= 1
    metrics.write_report(rep, tmp_path / "m.json")
    assert json.loads((tmp_path / "m.json").read_text())["weighted"] == w
    metrics.write_confusion_csv(metrics.confusion_matrix(recs), tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0][1:] == ["inactive", "mild", "moderate", "severe"]
    assert sum(int(v) for r in rows[1:] for v in r[1:]) == 60


def test_zero_division_warning():
    y = [0, 1, 2, 3]
    recs = records(y, np.eye(4)[[0, 1, 1, 3]])
    with pytest.warns(RuntimeWarning, match="moderate"):
        rep = metrics.metric_report(recs, with_ci=False)
    assert rep["per_class"]["moderate"]["precision"] == 0.0
