"""Accuracy, F1 and ROC-AUC with percentile-bootstrap confidence intervals."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

POSITIVE = 1  # bad outcome, mRS > 2
RESAMPLES = 2000
MIN_BOOTSTRAP_N = 10
CI_LEVEL = 0.95


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"expected two equal-length 1D arrays, got {a.shape} and {b.shape}")
    return a, b


def accuracy(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    if preds.size == 0:
        raise ValueError("accuracy of an empty sample")
    return float(np.mean(preds == labels))


def f1(preds, labels, positive: int = POSITIVE) -> float:
    """F1 of the ``positive`` class; 0 when precision + recall is 0."""
    preds, labels = _pair(preds, labels)
    tp = int(np.sum((preds == positive) & (labels == positive)))
    fp = int(np.sum((preds == positive) & (labels != positive)))
    fn = int(np.sum((preds != positive) & (labels == positive)))
    # 2PR/(P+R) == 2TP/(2TP+FP+FN); zero exactly when TP is zero.
    return 0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn)


def auc(scores, labels, positive: int = POSITIVE) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted half."""
    scores, labels = _pair(scores, labels)
    pos = labels == positive
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bootstrap_ci(
    metric: Callable[[np.ndarray, np.ndarray], float],
    values,
    labels,
    resamples: int = RESAMPLES,
    seed: int = 0,
    level: float = CI_LEVEL,
) -> tuple[float, float]:
    """Percentile bootstrap interval of ``metric(values, labels)``.

    Resample ``i`` draws from its own generator seeded by ``(seed, i)``;
    a draw on which the metric is undefined is redrawn from that stream.
    """
    values, labels = _pair(values, labels)
    n = values.size
    if n < MIN_BOOTSTRAP_N:
        raise ValueError(f"bootstrap needs at least {MIN_BOOTSTRAP_N} cases, got {n}")
    metric(values, labels)  # undefined on the full sample -> propagate
    stats = np.empty(resamples)
    for i in range(resamples):
        rng = np.random.default_rng((seed, i))
        while True:
            idx = rng.integers(0, n, size=n)
            try:
                stats[i] = metric(values[idx], labels[idx])
                break
            except UndefinedMetricError:
                continue
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return float(lo), float(hi)


@dataclass
class MetricValue:
    value: float
    ci: tuple[float, float]


@dataclass
class EvalReport:
    n: int
    acc: MetricValue
    f1: MetricValue
    auc: MetricValue
    resamples: int = RESAMPLES
    seed: int = 0
    positive_class: str = "bad (mRS > 2)"
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float, float, float]]:
        return [(name, m.value, *m.ci) for name, m in (("acc", self.acc), ("f1", self.f1), ("auc", self.auc))]

    def to_csv(self) -> str:
        lines = ["metric,value,ci_lo,ci_hi"]
        lines += [f"{name},{v!r},{lo!r},{hi!r}" for name, v, lo, hi in self.rows()]
        lines.append(f"n,{self.n},,")
        lines.append(f"bootstrap_resamples,{self.resamples},,")
        lines.append(f"bootstrap_seed,{self.seed},,")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return "  ".join(f"{name.upper()} {v:.3f} ({lo:.3f}-{hi:.3f})" for name, v, lo, hi in self.rows())


def report_from_scores(scores, labels, resamples: int = RESAMPLES, seed: int = 0) -> EvalReport:
    scores, labels = _pair(np.asarray(scores, dtype=np.float64), np.asarray(labels))
    preds = (scores > 0.5).astype(np.int64)
    return EvalReport(
        n=int(scores.size),
        acc=MetricValue(accuracy(preds, labels), bootstrap_ci(accuracy, preds, labels, resamples, seed)),
        f1=MetricValue(f1(preds, labels), bootstrap_ci(f1, preds, labels, resamples, seed)),
        auc=MetricValue(auc(scores, labels), bootstrap_ci(auc, scores, labels, resamples, seed)),
        resamples=resamples,
        seed=seed,
    )


def write_predictions(path, ids, scores, preds, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "score", "pred", "label"])
        for row in zip(ids, scores, preds, labels):
            w.writerow([row[0], repr(float(row[1])), int(row[2]), int(row[3])])


def evaluate(model, subset, out_dir=None, resamples: int = RESAMPLES, seed: int = 0) -> EvalReport:
    """Infer-mode pass over ``subset``; optionally write the report and per-case dump."""
    if len(subset) == 0:
        raise ValueError("cannot evaluate an empty split")
    probs = model.predict_proba(subset.volumes, subset.features)
    scores = probs[:, POSITIVE]
    preds = np.argmax(probs, axis=1)
    report = report_from_scores(scores, subset.labels, resamples, seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(report.to_csv())
        write_predictions(out_dir / "predictions.csv", subset.ids, scores, preds, subset.labels)
    return report
