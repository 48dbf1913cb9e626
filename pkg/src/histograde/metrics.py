"""Slide-level classification metrics with percentile-bootstrap intervals."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DegenerateBootstrapError, UndefinedMetricError
from .slides import CLASS_NAMES

N_CLASSES = 4


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted class

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_CLASSES, N_CLASSES) or np.any(self.counts < 0):
            raise ContractError("confusion counts must be a 4x4 nonnegative integer matrix")

    @property
    def support(self):
        return self.counts.sum(axis=1)

    @property
    def total(self):
        return int(self.counts.sum())

    def percentages(self):
        rows = self.support[:, None].astype(float)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)


@dataclass
class PRF:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weighted: dict
    zero_division: list = field(default_factory=list)  # classes whose precision had a 0 denominator


def _labels(records):
    y = np.fromiter((r.true_label for r in records), dtype=np.int64, count=len(records))
    yhat = np.fromiter((r.predicted_label for r in records), dtype=np.int64, count=len(records))
    return y, yhat


def _probs(records):
    return np.array([r.probabilities for r in records], dtype=np.float64).reshape(-1, N_CLASSES)


def confusion_from_labels(y, yhat):
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (np.asarray(y), np.asarray(yhat)), 1)
    return ConfusionMatrix(counts)


def confusion_matrix(records):
    if len(records) == 0:
        raise ContractError("confusion_matrix needs at least one record")
    return confusion_from_labels(*_labels(records))


def prf(conf):
    c = conf.counts.astype(np.float64)
    diag = np.diag(c)
    col = c.sum(axis=0)
    row = c.sum(axis=1)
    precision = np.divide(diag, col, out=np.zeros(N_CLASSES), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros(N_CLASSES), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(N_CLASSES), where=denom > 0)
    zero_div = [int(i) for i in np.nonzero(col == 0)[0] if row[i] > 0]
    total = row.sum()

    def wavg(v):
        return float((row * v).sum() / total) if total > 0 else 0.0

    weighted = {"precision": wavg(precision), "recall": wavg(recall), "f1": wavg(f1)}
    return PRF(precision, recall, f1, row.astype(np.int64), weighted, zero_div)


def roc_auc(scores, labels):
    """One-vs-rest AUC via the rank (Mann-Whitney) formulation, ties counted half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """Empirical ROC points (fpr, tpr), one per distinct threshold, from (0, 0) to (1, 1)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], y.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / max(1, y.sum())]
    fpr = np.r_[0.0, fps / max(1, (~y).sum())]
    return fpr, tpr


def roc_auc_trapezoid(scores, labels):
    """AUC as trapezoidal area under the empirical ROC curve."""
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    fpr, tpr = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def support_weighted_mean(values, supports):
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(supports, dtype=np.float64)
    return float((v * w).sum() / w.sum())


def per_class_auc(y, probs):
    out = []
    for c in range(N_CLASSES):
        pos = y == c
        if pos.all() or not pos.any():
            out.append(None)
        else:
            out.append(roc_auc(probs[:, c], pos))
    return out


def weighted_auc(records):
    y = _labels(records)[0]
    aucs = per_class_auc(y, _probs(records))
    present = [c for c in range(N_CLASSES) if aucs[c] is not None]
    if len(present) < 2:
        raise UndefinedMetricError("weighted AUC needs at least two classes present")
    support = np.bincount(y, minlength=N_CLASSES)
    return support_weighted_mean([aucs[c] for c in present], support[present])


def weighted_f1(records):
    return prf(confusion_matrix(records)).weighted["f1"]


def weighted_precision(records):
    return prf(confusion_matrix(records)).weighted["precision"]


def weighted_recall(records):
    return prf(confusion_matrix(records)).weighted["recall"]


def class_recall(c):
    def fn(records):
        y, yhat = _labels(records)
        pos = y == c
        if not pos.any():
            raise UndefinedMetricError(f"class {c} absent from resample")
        return float((yhat[pos] == c).mean())
    fn.__name__ = f"recall_class{c}"
    return fn


def bootstrap_ci(records, metric_fn, B=1000, alpha=0.05, seed=0):
    """Percentile bootstrap interval of ``metric_fn`` over slide-level resamples.

    Resamples on which the metric is undefined are redrawn; more than ``10 * B``
    draws in total raises DegenerateBootstrapError.
    """
    records = list(records)
    n = len(records)
    if n == 0:
        raise ContractError("bootstrap_ci needs at least one record")
    rng = np.random.default_rng(seed)
    stats = []
    attempts = 0
    while len(stats) < B:
        attempts += 1
        if attempts > 10 * B:
            raise DegenerateBootstrapError(
                f"only {len(stats)} of {B} resamples gave a defined {getattr(metric_fn, '__name__', 'metric')}")
        idx = rng.integers(0, n, size=n)
        try:
            stats.append(metric_fn([records[i] for i in idx]))
        except UndefinedMetricError:
            continue
    lo, hi = np.percentile(np.asarray(stats), [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


WEIGHTED_METRICS = {
    "auc": weighted_auc,
    "precision": weighted_precision,
    "recall": weighted_recall,
    "f1": weighted_f1,
}


def metric_report(records, B=1000, alpha=0.05, seed=0, with_ci=True):
    """Per-class and weighted AUC/precision/recall/F1 as a JSON-ready dict."""
    conf = confusion_matrix(records)
    scores = prf(conf)
    y = _labels(records)[0]
    aucs = per_class_auc(y, _probs(records))
    report = {"n_records": len(records), "per_class": {}, "weighted": {}, "warnings": []}
    for c, name in enumerate(CLASS_NAMES):
        report["per_class"][name] = {
            "auc": aucs[c],
            "precision": float(scores.precision[c]),
            "recall": float(scores.recall[c]),
            "f1": float(scores.f1[c]),
            "support": int(scores.support[c]),
        }
    for c in scores.zero_division:
        msg = f"precision for class {CLASS_NAMES[c]} has no predicted samples; reported as 0"
        report["warnings"].append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    try:
        report["weighted"]["auc"] = weighted_auc(records)
    except UndefinedMetricError as exc:
        report["weighted"]["auc"] = None
        report["warnings"].append(str(exc))
    report["weighted"].update(scores.weighted)
    if with_ci:
        report["ci95"] = {}
        for k, fn in WEIGHTED_METRICS.items():
            if report["weighted"].get(k) is None:
                continue
            lo, hi = bootstrap_ci(records, fn, B=B, alpha=alpha, seed=seed)
            report["ci95"][k] = [lo, hi]
        report["bootstrap"] = {"B": B, "alpha": alpha, "seed": seed, "method": "percentile"}
    report["confusion"] = conf.counts.tolist()
    return report


def write_report(report, path):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def write_confusion_csv(conf, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\predicted", *CLASS_NAMES])
        for name, row in zip(CLASS_NAMES, conf.counts):
            w.writerow([name, *map(int, row)])
