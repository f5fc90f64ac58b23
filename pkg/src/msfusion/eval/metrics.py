"""Classification metrics and the Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm, rankdata

from ..errors import DataError

EXACT_MAX_N = 20


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.isin(y, (0, 1)).all():
        raise DataError("labels must be a 1-D sequence of 0/1")
    if y.min() == y.max():
        raise DataError("both classes must be present")
    return y.astype(np.int64)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties count one half."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise DataError(f"{s.shape[0]} scores for {y.shape[0]} labels")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    # midranks make every tie worth exactly one half; the rank sum is a
    # multiple of 0.5 so the numerator below is exact
    r = rankdata(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def gmean(preds, labels) -> float:
    y = _binary_labels(labels)
    p = np.asarray(preds, dtype=np.int64)
    if p.shape != y.shape:
        raise DataError(f"{p.shape[0]} predictions for {y.shape[0]} labels")
    sens = float(np.mean(p[y == 1] == 1))
    spec = float(np.mean(p[y == 0] == 0))
    return math.sqrt(sens * spec)


@dataclass(frozen=True)
class MetricsRecord:
    accuracy: float
    auc: float
    gmean: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int

    @classmethod
    def from_predictions(cls, probs, labels, preds=None) -> "MetricsRecord":
        """``probs`` are class-1 probabilities; ``preds`` default to ``probs > 0.5``."""
        y = _binary_labels(labels)
        probs = np.asarray(probs, dtype=np.float64)
        p = (probs > 0.5).astype(np.int64) if preds is None else np.asarray(preds, dtype=np.int64)
        tp = int(np.sum((p == 1) & (y == 1)))
        fp = int(np.sum((p == 1) & (y == 0)))
        tn = int(np.sum((p == 0) & (y == 0)))
        fn = int(np.sum((p == 0) & (y == 1)))
        n = len(y)
        return cls((tp + tn) / n, auc(probs, y), gmean(p, y), tp, fp, tn, fn, n)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    degenerate: bool = False
    method: str = "exact"


def _exact_upper_tail(ranks2: np.ndarray, w2: int) -> float:
    """P(W+ >= w) under H0, with ranks and W+ doubled to integers."""
    total = int(ranks2.sum())
    # counts[s] = number of sign assignments whose positive ranks sum to s
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts += shifted
    return float(counts[w2:].sum() / 2.0 ** len(ranks2))


def wilcoxon_signed_rank(a, b, exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Two-sided paired test on ``a - b``.

    Zero differences are dropped. Up to ``exact_max_n`` pairs the null
    distribution is enumerated exactly over all sign assignments (midranks
    for ties); beyond that a tie-corrected normal approximation is used.
    The statistic is ``min(W+, W-)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, degenerate=True)
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        upper = _exact_upper_tail(ranks2, int(round(2 * max(w_plus, w_minus))))
        return WilcoxonResult(stat, min(1.0, 2.0 * upper), n)
    mean = n * (n + 1) / 4
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float((counts**3 - counts).sum()) / 48
    z = (stat - mean) / math.sqrt(var)
    return WilcoxonResult(stat, min(1.0, 2.0 * float(norm.cdf(z))), n, method="normal")


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; std is 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DataError("no values to summarise")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
