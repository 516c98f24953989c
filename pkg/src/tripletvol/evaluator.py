"""Confusion metrics, stratified folds, confidence intervals, Welch t-test, silhouette."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import betainc

from .errors import ContractError, DataError


@dataclass
class FoldReport:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    sensitivity: Optional[float]
    specificity: Optional[float]

    def to_json(self) -> dict:
        return asdict(self)


def confusion_metrics(predictions, labels, threshold: float = 0.5) -> FoldReport:
    """Counts and rates for ``P(positive) >= threshold``.

    A rate whose denominator is zero (no positives, or no negatives) is
    reported as ``None`` rather than 0.
    """
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0:
        raise ContractError("confusion_metrics needs at least one prediction")
    if p.shape != y.shape:
        raise ContractError(f"{p.size} predictions for {y.size} labels")
    pred = p >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return FoldReport(
        tp, tn, fp, fn,
        accuracy=(tp + tn) / p.size,
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
    )


def kfold_split(manifest, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold index per manifest entry, stratified by label and grouped by subject.

    Subjects of each class are shuffled and dealt round-robin, so per-class
    fold sizes (in subjects) differ by at most one. The deal for each class
    starts on the fold that currently holds the fewest entries.
    """
    if k < 2:
        raise ContractError("k must be at least 2")
    entries = manifest.entries
    subjects: dict[str, int] = {}
    for e in entries:
        prev = subjects.setdefault(e.subject, e.label)
        if prev != e.label:
            raise DataError(f"subject {e.subject} carries both labels")
    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    totals = np.zeros(k, dtype=np.int64)
    for label in sorted(set(subjects.values())):
        members = sorted(s for s, y in subjects.items() if y == label)
        if len(members) < k:
            raise DataError(f"class {label} has {len(members)} subjects, fewer than k={k}")
        order = [members[i] for i in rng.permutation(len(members))]
        start = int(np.argmin(totals))
        for j, s in enumerate(order):
            fold_of[s] = (start + j) % k
            totals[fold_of[s]] += 1
    return np.array([fold_of[e.subject] for e in entries], dtype=np.int64)


# ----------------------------------------------------------------------
# Student t


def student_t_cdf(t: float, df: float) -> float:
    """CDF of Student's t through the regularised incomplete beta function."""
    if df <= 0:
        raise ContractError("degrees of freedom must be positive")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    x = df / (df + t * t)
    tail = 0.5 * float(betainc(df / 2.0, 0.5, x))
    return 1.0 - tail if t > 0 else tail


def student_t_sf(t: float, df: float) -> float:
    """Upper tail ``P(T > t)``, accurate far into the tail."""
    if t < 0:
        return 1.0 - student_t_sf(-t, df)
    return 0.5 * float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def student_t_ppf(q: float, df: float) -> float:
    if not 0.0 < q < 1.0:
        raise ContractError("quantile level must lie in (0, 1)")
    if q == 0.5:
        return 0.0
    hi = 1.0
    while student_t_cdf(hi, df) < max(q, 1 - q):
        hi *= 2.0
    root = brentq(lambda t: student_t_cdf(t, df) - max(q, 1 - q), 0.0, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    return root if q > 0.5 else -root


@dataclass
class SummaryStat:
    mean: float
    std: float
    half_width: float
    n: int

    def format(self, scale: float = 100.0) -> str:
        return f"{self.mean * scale:.1f} ± {self.half_width * scale:.1f}"

    def to_json(self) -> dict:
        return asdict(self)


def summarize_folds(values: Sequence[float], confidence: float = 0.95) -> SummaryStat:
    """Mean, sample std and the two-sided Student-t CI half-width."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < 2:
        raise ContractError("summarize_folds needs at least two values")
    std = float(v.std(ddof=1))
    q = student_t_ppf(0.5 + confidence / 2.0, n - 1)
    return SummaryStat(float(v.mean()), std, q * std / math.sqrt(n), n)


def one_sided_t_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Welch test p-value for H1: mean(a) > mean(b).

    With zero variance in both samples, equal means give 0.5 and unequal
    means give 0 or 1 according to direction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ContractError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return 0.5
        return 0.0 if diff > 0 else 1.0
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return student_t_sf(t, df)


# ----------------------------------------------------------------------
# clustering quality


def silhouette(embeddings, labels) -> float:
    """Mean silhouette over points, using class labels as clusters.

    Points whose intra- and nearest-other-class distances are both zero
    score 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ContractError("silhouette needs at least two classes")
    if counts.min() < 2:
        raise ContractError("silhouette needs at least two points per class")
    d = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1), 0.0))
    scores = np.empty(len(y))
    for i in range(len(y)):
        own = y == y[i]
        a = d[i, own].sum() / (own.sum() - 1)
        b = min(d[i, y == c].mean() for c in classes if c != y[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


# ----------------------------------------------------------------------
# report assembly

METRICS = ("accuracy", "sensitivity", "specificity")


def metric_values(folds: Sequence[FoldReport], metric: str) -> list[float]:
    return [getattr(f, metric) for f in folds if getattr(f, metric) is not None]


def metrics_report(model_name: str, folds: Sequence[FoldReport], extra: Optional[dict] = None) -> dict:
    report = {
        "model": model_name,
        "folds": [f.to_json() for f in folds],
        "summary": {m: summarize_folds(metric_values(folds, m)).to_json() for m in METRICS},
        "ci": "95% CI half-width (Student t, n-1 df)",
    }
    if extra:
        report.update(extra)
    return report


def compare_reports(report: dict, other: dict) -> dict:
    """One-sided p-values for ``report`` outperforming ``other``, per metric."""
    out = {}
    for m in METRICS:
        a = [f[m] for f in report["folds"] if f[m] is not None]
        b = [f[m] for f in other["folds"] if f[m] is not None]
        out[m] = one_sided_t_test(a, b)
    return out


def format_table(reports: Sequence[dict], p_values: Optional[dict] = None) -> str:
    """Plain-text table with ``mean ± CI half-width`` cells in percent."""
    header = f"{'Model':<16}" + "".join(f"{m.capitalize() + ' (mu ± CI95, %)':<34}" for m in METRICS)
    lines = [header, "-" * len(header)]
    for i, r in enumerate(reports):
        cells = []
        for m in METRICS:
            s = r["summary"][m]
            cell = SummaryStat(**s).format()
            if p_values is not None and i == 0:
                cell += f" (p = {p_values[m]:.3f})"
            cells.append(f"{cell:<34}")
        lines.append(f"{r['model']:<16}" + "".join(cells))
    return "\n".join(lines) + "\n"
