"""Descriptive statistics, Shapiro-Wilk, Mann-Whitney U and Pearson correlation.

Only Student-t tail and quantile functions come from scipy; the tests
themselves are implemented here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from statistics import NormalDist
from typing import Sequence

import numpy as np
from scipy import stats as _sps

ALPHA = 0.05
EXACT_MAX_MIN_SIZE = 8
_NORMAL = NormalDist()


class StatsError(ValueError):
    pass


class OutOfRangeN(StatsError):
    pass


class ZeroVariance(StatsError):
    pass


class ConstantInput(StatsError):
    pass


def _vector(values: Sequence[float], min_n: int = 3) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise StatsError("expected a one-dimensional sample")
    if len(v) < min_n:
        raise OutOfRangeN(f"need at least {min_n} values, got {len(v)}")
    if not np.all(np.isfinite(v)):
        raise StatsError("sample contains non-finite values")
    return v


# --- descriptive ----------------------------------------------------------

@dataclass(frozen=True)
class StatReport:
    n: int
    aec: float
    std: float
    rsec: float | None
    ci95_half_width: float
    shapiro_p: float | None = None


def descriptive(values: Sequence[float]) -> StatReport:
    """Mean, sample std, relative std and the 95% t-interval half width.

    ``rsec`` is None when the mean is zero; ``shapiro_p`` is None when the
    sample is constant or too large for the normality test.
    """
    v = _vector(values)
    n = len(v)
    mean = float(np.mean(v))
    std = float(np.std(v, ddof=1))
    if np.all(v == v[0]):
        std = 0.0
    rsec = std / abs(mean) if mean != 0 else None
    half = float(_sps.t.ppf(0.975, n - 1)) * std / math.sqrt(n)
    try:
        p = shapiro(v)
    except (ZeroVariance, OutOfRangeN):
        p = None
    return StatReport(n=n, aec=mean, std=std, rsec=rsec, ci95_half_width=half, shapiro_p=p)


# --- Shapiro-Wilk (Royston 1995) -------------------------------------------

# polynomial coefficients, constant term first
_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coeffs, x: float) -> float:
    result = 0.0
    for c in reversed(coeffs):
        result = result * x + c
    return result


@lru_cache(maxsize=64)
def _sw_coefficients(n: int) -> tuple[float, ...]:
    """The ``n // 2`` positive weights for the upper half of the ordered sample."""
    nn2 = n // 2
    if n == 3:
        return (math.sqrt(0.5),)
    an25 = n + 0.25
    m = [_NORMAL.inv_cdf((i - 0.375) / an25) for i in range(1, nn2 + 1)]
    summ2 = 2.0 * sum(mi * mi for mi in m)
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a1 = _poly(_C1, rsn) - m[0] / ssumm2
    if n > 5:
        a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2) / (1.0 - 2.0 * a1 ** 2 - 2.0 * a2 ** 2))
        head = [a1, a2]
    else:
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1 ** 2))
        head = [a1]
    return tuple(head + [-mi / fac for mi in m[len(head):]])


@dataclass(frozen=True)
class ShapiroResult:
    w: float
    p_value: float


def shapiro_wilk(values: Sequence[float]) -> ShapiroResult:
    """W statistic and its p-value by Royston's normalizing approximation (3 <= n <= 5000)."""
    v = _vector(values)
    n = len(v)
    if n > 5000:
        raise OutOfRangeN(f"Shapiro-Wilk supports n <= 5000, got {n}")
    x = np.sort(v)
    rng = x[-1] - x[0]
    if rng < 1e-19 * max(1.0, abs(x[0])):
        raise ZeroVariance("Shapiro-Wilk is undefined for a constant sample")
    x = (x - np.mean(x)) / rng
    a = np.asarray(_sw_coefficients(n))
    nn2 = n // 2
    num = float(np.dot(a, x[::-1][:nn2] - x[:nn2]))
    ssq = float(np.dot(x, x))
    w = min(1.0, num * num / ssq)

    if n == 3:
        w = max(w, 0.75)
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.pi / 3.0)
        return ShapiroResult(w, min(1.0, max(0.0, p)))

    w1 = 1.0 - w
    if w1 <= 0:
        return ShapiroResult(w, 1.0)
    y = math.log(w1)
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return ShapiroResult(w, 1e-99)
        y = -math.log(gamma - y)
        mean = _poly(_C3, n)
        sd = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mean = _poly(_C5, ln)
        sd = math.exp(_poly(_C6, ln))
    p = _NORMAL.cdf(-(y - mean) / sd)
    return ShapiroResult(w, p)


def shapiro(values: Sequence[float]) -> float:
    return shapiro_wilk(values).p_value


# --- Mann-Whitney U -------------------------------------------------------

@dataclass(frozen=True)
class PairwiseComparison:
    u_statistic: float
    p_value: float
    dec_percent: float | None = None
    method: str = "normal"

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p_value out of [0, 1]: {self.p_value}")
        if self.dec_percent is not None and not self.p_value < ALPHA:
            raise ValueError("dec_percent may only be reported for p < 0.05")


def rankdata(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based), ties sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=float)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@lru_cache(maxsize=None)
def _u_counts(n: int, m: int) -> tuple[int, ...]:
    """Number of rank labelings giving each U in 0..n*m, for group sizes n and m."""
    if n == 0 or m == 0:
        return (1,)
    # the largest pooled value belongs to group 1 (adds m to U) or to group 2
    with_top = _u_counts(n - 1, m)
    without_top = _u_counts(n, m - 1)
    counts = [0] * (n * m + 1)
    for u, c in enumerate(with_top):
        counts[u + m] += c
    for u, c in enumerate(without_top):
        counts[u] += c
    return tuple(counts)


def exact_u_pvalue(u: float, n: int, m: int) -> float:
    """Two-sided exact p for the U statistic of a tie-free sample."""
    counts = _u_counts(n, m)
    total = sum(counts)
    k = int(round(u))
    lower = sum(counts[:k + 1])
    upper = sum(counts[k:])
    return float(min(Fraction(1), Fraction(2 * min(lower, upper), total)))


def _dec_percent(a: np.ndarray, b: np.ndarray) -> float | None:
    base = float(np.mean(b))
    if base == 0:
        return None
    return 100.0 * (float(np.mean(a)) - base) / base


def mann_whitney(a: Sequence[float], b: Sequence[float]) -> PairwiseComparison:
    """Two-sided Wilcoxon-Mann-Whitney test of ``a`` against baseline ``b``.

    Tie-free samples whose smaller group has at most 8 values use the exact
    null distribution; otherwise the normal approximation with tie and
    continuity corrections applies. ``dec_percent`` is the change of the mean
    of ``a`` relative to ``b``, given only when significant.
    """
    x = _vector(a)
    y = _vector(b)
    n, m = len(x), len(y)
    pooled = np.concatenate([x, y])
    ranks = rankdata(pooled)
    u = float(np.sum(ranks[:n]) - n * (n + 1) / 2.0)
    has_ties = len(np.unique(pooled)) < len(pooled)
    if not has_ties and min(n, m) <= EXACT_MAX_MIN_SIZE:
        p = exact_u_pvalue(u, n, m)
        method = "exact"
    else:
        big_n = n + m
        _, tie_sizes = np.unique(pooled, return_counts=True)
        tie_term = float(np.sum(tie_sizes ** 3 - tie_sizes)) / (big_n * (big_n - 1))
        var = n * m / 12.0 * ((big_n + 1) - tie_term)
        if var <= 0:
            p = 1.0
        else:
            z = max(0.0, abs(u - n * m / 2.0) - 0.5) / math.sqrt(var)
            p = min(1.0, 2.0 * _NORMAL.cdf(-z))
        method = "normal"
    dec = _dec_percent(x, y) if p < ALPHA else None
    return PairwiseComparison(u_statistic=u, p_value=p, dec_percent=dec, method=method)


# --- Pearson --------------------------------------------------------------

@dataclass(frozen=True)
class Correlation:
    r: float
    p_value: float


def pearson(x: Sequence[float], y: Sequence[float]) -> Correlation:
    xv = _vector(x)
    yv = _vector(y)
    if len(xv) != len(yv):
        raise StatsError(f"length mismatch: {len(xv)} vs {len(yv)}")
    dx = xv - xv.mean()
    dy = yv - yv.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise ConstantInput("Pearson correlation is undefined for a constant input")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    n = len(xv)
    if abs(r) == 1.0:
        return Correlation(r, 0.0)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = float(2.0 * _sps.t.sf(abs(t), n - 2))
    return Correlation(r, min(1.0, p))
