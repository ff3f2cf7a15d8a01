"""Summary statistics used in cohort reports: SEM/CI, Pearson, Bland-Altman, Wilcoxon."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as sps

EXACT_MAX_N = 12


class UndefinedTestError(ValueError):
    """The test statistic is undefined for the given data."""


def mean_sem_ci(values: Sequence[float], z: float = 1.96) -> dict:
    """Mean, standard error (sample sd / sqrt(n)) and the symmetric 95% interval."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    mean = float(v.mean())
    sem = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return {"mean": mean, "sem": sem, "ci": [mean - z * sem, mean + z * sem]}


def pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Pearson r with a two-sided p-value from the t distribution (n - 2 df)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    n = x.size
    if n < 3:
        raise ValueError("pearson needs at least 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson undefined for zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * sps.t.sf(abs(t), n - 2))


def bland_altman(pred: Sequence[float], ref: Sequence[float], z: float = 1.96):
    """Mean difference and limits of agreement md +/- z * sd (population sd)."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {ref.shape}")
    if pred.size < 2:
        raise ValueError("bland_altman needs at least 2 pairs")
    d = pred - ref
    md, sd = float(d.mean()), float(d.std())
    return md, md - z * sd, md + z * sd


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    pvalue: float
    n: int
    method: str

    def __iter__(self):
        yield self.statistic
        yield self.pvalue


def signed_ranks(a: Sequence[float], b: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Midranks of |a - b| and the signs, zero differences dropped."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    return sps.rankdata(np.abs(d)), np.sign(d)


def _exact_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """counts[s] = number of sign patterns whose doubled positive-rank sum is s."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float],
                         exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    W = min(W+, W-). For n <= exact_max_n the p-value is the exact share of
    the 2**n equally likely sign patterns whose min(W+, W-) is no larger than
    the observed one; above that a tie- and continuity-corrected normal
    approximation is used.
    """
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    ranks, signs = signed_ranks(a, b)
    n = ranks.size
    if n == 0:
        raise UndefinedTestError("all paired differences are zero")
    w_plus = float(ranks[signs > 0].sum())
    total = float(ranks.sum())
    w = min(w_plus, total - w_plus)

    if n <= exact_max_n:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _exact_null_counts(doubled)
        t2 = sum(doubled)
        s = np.arange(t2 + 1)
        extreme = np.minimum(s, t2 - s) <= int(round(2 * w))
        p = float(counts[extreme].sum()) / 2**n
        return WilcoxonResult(w, min(1.0, p), n, "exact")

    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float(((tie_counts**3 - tie_counts)).sum()) / 48
    if var <= 0:
        raise UndefinedTestError("zero variance under the null")
    zstat = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return WilcoxonResult(w, min(1.0, float(2 * sps.norm.sf(zstat))), n, "normal")
