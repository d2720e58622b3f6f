"""Nonparametric model comparison: Shapiro-Wilk, Friedman, Wilcoxon, Holm."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import special, stats as sps


class StatTestError(ValueError):
    """The data do not admit the requested test."""


class ProtocolError(ValueError):
    pass


def _poly(coefs: Sequence[float], x: float) -> float:
    return sum(c * x**i for i, c in enumerate(coefs))


def _norm_ppf(p):
    return special.ndtri(p)


def _norm_sf(z: float) -> float:
    return float(special.ndtr(-z))


def shapiro_wilk(sample) -> tuple[float, float]:
    """W statistic and p-value via Royston's AS R94 approximations.

    Valid for 3 <= n <= 5000.
    """
    x = np.sort(np.asarray(sample, dtype=np.float64))
    n = len(x)
    if n < 3:
        raise StatTestError(f"Shapiro-Wilk needs n >= 3, got {n}")
    if n > 5000:
        raise StatTestError(f"Shapiro-Wilk approximation is valid up to n = 5000, got {n}")
    if x[-1] - x[0] <= 1e-19 * max(1.0, abs(x[0])):
        raise StatTestError("Shapiro-Wilk is undefined for a constant sample")

    half = n // 2
    a = np.zeros(half)
    if n == 3:
        a[0] = math.sqrt(0.5)
    else:
        m = -_norm_ppf((np.arange(1, half + 1) - 0.375) / (n + 0.25))
        summ2 = 2.0 * np.sum(m**2)
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly([0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056], rsn) + m[0] / ssumm2
        if n > 5:
            a2 = _poly([0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633], rsn) + m[1] / ssumm2
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2) / (1.0 - 2.0 * a1**2 - 2.0 * a2**2))
            a[1] = a2
            start = 2
        else:
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1**2))
            start = 1
        a[0] = a1
        a[start:] = m[start:] / fac

    centred = x - x.mean()
    ss = float(np.dot(centred, centred))
    numerator = float(np.dot(a, x[::-1][:half] - x[:half])) ** 2
    w = min(numerator / ss, 1.0)

    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, max(p, 0.0)
    y = math.log1p(-w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly([-2.273, 0.459], n)
        if y >= gamma:
            return w, 1e-99
        y = -math.log(gamma - y)
        mu = _poly([0.5440, -0.39978, 0.025054, -6.714e-4], n)
        sigma = math.exp(_poly([1.3822, -0.77857, 0.062767, -0.0020322], n))
    else:
        ln = math.log(n)
        mu = _poly([-1.5861, -0.31082, -0.083751, 0.0038915], ln)
        sigma = math.exp(_poly([-0.4803, -0.082676, 0.0030302], ln))
    if y == -math.inf:
        return w, 1.0
    return w, _norm_sf((y - mu) / sigma)


def _average_ranks(row: np.ndarray) -> np.ndarray:
    return sps.rankdata(row, method="average")


def friedman(matrix) -> tuple[float, int, float]:
    """Friedman chi-square with tie correction for an (n_blocks, k) matrix."""
    data = np.asarray(matrix, dtype=np.float64)
    if data.ndim != 2:
        raise StatTestError("Friedman test needs a 2-D (blocks x treatments) matrix")
    n, k = data.shape
    if k < 2:
        raise StatTestError(f"Friedman test needs k >= 2 treatments, got {k}")
    if n < 2:
        raise StatTestError(f"Friedman test needs n >= 2 blocks, got {n}")
    ranks = np.apply_along_axis(_average_ranks, 1, data)
    rank_sums = ranks.sum(axis=0)
    chi2 = 12.0 / (n * k * (k + 1)) * np.sum(rank_sums**2) - 3.0 * n * (k + 1)
    ties = 0.0
    for row in data:
        _, counts = np.unique(row, return_counts=True)
        ties += np.sum(counts**3 - counts)
    correction = 1.0 - ties / (n * k * (k * k - 1))
    df = k - 1
    if correction <= 0.0:
        return 0.0, df, 1.0
    chi2 = max(float(chi2 / correction), 0.0)
    return chi2, df, float(sps.chi2.sf(chi2, df))


def _signed_rank_null(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of every attainable doubled rank-sum over all 2^n sign patterns."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


EXACT_MAX_N = 12


def wilcoxon_signed_rank(x, y, exact: bool | None = None) -> tuple[float, float]:
    """Paired two-sided Wilcoxon signed-rank test.

    Zero differences are dropped.  The statistic is the rank sum of the
    negative differences (x < y).  The p-value is exact by enumeration for up
    to 12 remaining pairs, otherwise from the tie-corrected normal
    approximation with continuity correction.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatTestError("Wilcoxon test needs two 1-D samples of equal length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise StatTestError("all paired differences are zero")
    ranks = sps.rankdata(np.abs(d), method="average")
    w_neg = float(ranks[d < 0].sum())
    total = float(ranks.sum())
    if exact is None:
        exact = n <= EXACT_MAX_N
    if exact:
        doubled = np.rint(2.0 * ranks).astype(int)
        counts = _signed_rank_null(doubled)
        obs = int(round(2.0 * w_neg))
        lower = counts[: obs + 1].sum()
        upper = counts[obs:].sum()
        p = float(min(1.0, 2.0 * min(lower, upper) / 2.0**n))
        return w_neg, p
    mean = total / 2.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    diff = w_neg - mean
    if diff == 0:
        return w_neg, 1.0
    z = (abs(diff) - 0.5) / math.sqrt(var)
    return w_neg, min(1.0, 2.0 * _norm_sf(max(z, 0.0)))


def sign_test(x, y) -> tuple[float, float]:
    """Exact two-sided sign test; statistic is the number of negative differences."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    if len(d) == 0:
        raise StatTestError("all paired differences are zero")
    neg = int(np.sum(d < 0))
    return float(neg), float(sps.binomtest(neg, len(d), 0.5).pvalue)


def holm_adjust(p_values) -> np.ndarray:
    """Holm step-down adjusted p-values, in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise StatTestError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * (m - np.arange(m))
    adjusted = np.minimum(np.maximum.accumulate(scaled), 1.0)
    out = np.empty(m)
    out[order] = adjusted
    return out


# ----------------------------------------------------------------------


@dataclass
class PairwiseResult:
    first: str
    second: str
    statistic: float | None
    p_raw: float
    p_adjusted: float = 1.0
    note: str = ""


@dataclass
class StatReport:
    models: list[str]
    n_subjects: int
    normality: dict[str, tuple[float, float]]
    friedman_chi2: float
    friedman_df: int
    friedman_p: float
    pairwise: list[PairwiseResult] = field(default_factory=list)
    alpha: float = 0.05
    posthoc: str = "wilcoxon"
    notes: list[str] = field(default_factory=list)

    @property
    def omnibus_significant(self) -> bool:
        return self.friedman_p < self.alpha

    def to_dict(self) -> dict:
        return {
            "models": list(self.models),
            "n_subjects": self.n_subjects,
            "alpha": self.alpha,
            "shapiro_wilk": {m: {"W": w, "p": p} for m, (w, p) in self.normality.items()},
            "friedman": {"chi2": self.friedman_chi2, "df": self.friedman_df, "p": self.friedman_p},
            "posthoc": self.posthoc,
            "pairwise": [
                {
                    "pair": [r.first, r.second],
                    "statistic": r.statistic,
                    "p_raw": r.p_raw,
                    "p_adjusted": r.p_adjusted,
                    "note": r.note,
                }
                for r in self.pairwise
            ],
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def compare_models(
    accuracy_vectors: Mapping[str, Sequence[float]],
    alpha: float = 0.05,
    posthoc: str = "wilcoxon",
) -> StatReport:
    """Normality per model, Friedman omnibus and, if it rejects, Holm-corrected
    pairwise tests.  Vectors must be aligned on the same subjects."""
    names = list(accuracy_vectors)
    if len(names) < 2:
        raise ProtocolError("need at least two models to compare")
    lengths = {len(accuracy_vectors[m]) for m in names}
    if len(lengths) != 1:
        raise ProtocolError(f"accuracy vectors have different lengths {sorted(lengths)}")
    if posthoc not in ("wilcoxon", "sign"):
        raise ValueError(f"posthoc must be 'wilcoxon' or 'sign', got {posthoc!r}")
    matrix = np.column_stack([np.asarray(accuracy_vectors[m], dtype=np.float64) for m in names])
    n, k = matrix.shape

    normality = {}
    notes = [f"Friedman df = k - 1 = {k - 1} for k = {k} models"]
    for j, m in enumerate(names):
        try:
            normality[m] = shapiro_wilk(matrix[:, j])
        except StatTestError as exc:
            normality[m] = (float("nan"), float("nan"))
            notes.append(f"Shapiro-Wilk skipped for {m}: {exc}")
    chi2, df, p = friedman(matrix)
    report = StatReport(names, n, normality, chi2, df, p, alpha=alpha, posthoc=posthoc, notes=notes)

    if report.omnibus_significant:
        test = wilcoxon_signed_rank if posthoc == "wilcoxon" else sign_test
        for a, b in itertools.combinations(range(k), 2):
            try:
                stat, pr = test(matrix[:, a], matrix[:, b])
                report.pairwise.append(PairwiseResult(names[a], names[b], stat, pr))
            except StatTestError:
                report.pairwise.append(
                    PairwiseResult(names[a], names[b], None, 1.0, note="no difference detectable")
                )
        adjusted = holm_adjust([r.p_raw for r in report.pairwise])
        for r, pa in zip(report.pairwise, adjusted):
            r.p_adjusted = float(pa)
    return report
