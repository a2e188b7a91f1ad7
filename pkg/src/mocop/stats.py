"""Inferential statistics used by the analysis report.

Everything here is a pure function over plain sequences (or :class:`Sample`).
p-values come from the kernels in :mod:`mocop.special`; nothing is delegated
to scipy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import NamedTuple, Sequence, Union

import numpy as np

from . import special


class StatsError(ValueError):
    """Base class for statistic-specific failures."""


class InsufficientData(StatsError):
    pass


class InvalidCounts(StatsError):
    pass


class DegenerateMargins(StatsError):
    pass


class ZeroReferenceRate(StatsError):
    pass


class ZeroVariance(StatsError):
    pass


class RankDeficient(StatsError):
    pass


class OutOfRangeN(StatsError):
    pass


@dataclass(frozen=True)
class Sample:
    values: tuple[float, ...]
    label: str = ""

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise InsufficientData("a sample needs at least one value")
        if not all(math.isfinite(v) for v in vals):
            raise StatsError("sample values must be finite")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)


ArrayLike = Union[Sample, Sequence[float], np.ndarray]


def _arr(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Sample):
        return np.asarray(x.values, dtype=float)
    a = np.asarray(x, dtype=float).ravel()
    if a.size and not np.all(np.isfinite(a)):
        raise StatsError("values must be finite")
    return a


def two_tailed(cdf_value: float) -> float:
    return min(1.0, 2.0 * min(cdf_value, 1.0 - cdf_value))


class Describe(NamedTuple):
    n: int
    mean: float
    median: float
    sd: float
    min: float
    max: float


class Interval(NamedTuple):
    lower: float
    upper: float


class Chi2Result(NamedTuple):
    chi2: float
    df: int
    p: float
    cramers_v: float
    n: int


class RiskResult(NamedTuple):
    rr: float
    arr: float  # percentage points
    rate1: float
    rate2: float


class TTestResult(NamedTuple):
    t: float
    df: float
    p: float


class FTestResult(NamedTuple):
    f: float
    df1: float
    df2: float
    p: float


class CorrResult(NamedTuple):
    r: float
    p: float
    n: int


class OLSResult(NamedTuple):
    gamma0: float
    gamma1: float
    gamma2: float
    residual_variance: float
    vif1: float
    vif2: float
    n: int


class ShapiroResult(NamedTuple):
    w: float
    p: float
    n: int


def sample_sd(x: ArrayLike) -> float:
    a = _arr(x)
    if a.size < 2:
        raise InsufficientData("sd needs n >= 2")
    return float(np.std(a, ddof=1))


def describe(sample: ArrayLike) -> Describe:
    """Mean, median, sd (n-1 denominator), min and max of one sample."""
    a = _arr(sample)
    if a.size == 0:
        raise InsufficientData("empty sample")
    return Describe(
        n=int(a.size),
        mean=float(np.mean(a)),
        median=float(np.median(a)),
        sd=sample_sd(a),
        min=float(np.min(a)),
        max=float(np.max(a)),
    )


def wilson_interval(k: int, n: int, z: float = 1.96) -> Interval:
    """Wilson score interval for k successes out of n trials."""
    if n < 1 or k < 0 or k > n or int(k) != k or int(n) != n:
        raise InvalidCounts(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    p = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2.0 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom
    lower = 0.0 if k == 0 else max(0.0, center - half)
    upper = 1.0 if k == n else min(1.0, center + half)
    return Interval(lower, upper)


def _table(table) -> np.ndarray:
    t = np.asarray(table, dtype=float)
    if t.shape != (2, 2):
        raise InvalidCounts("expected a 2x2 table")
    if np.any(t < 0) or np.any(t != np.round(t)):
        raise InvalidCounts("counts must be non-negative integers")
    return t


def chi2_2x2(table, yates: bool = False) -> Chi2Result:
    """Pearson chi-square on a 2x2 table, with Cramer's V = sqrt(chi2 / N).

    Rows are groups (models), columns are (outcome, not outcome).
    """
    t = _table(table)
    rows = t.sum(axis=1)
    cols = t.sum(axis=0)
    n = t.sum()
    if np.any(rows == 0) or np.any(cols == 0):
        raise DegenerateMargins("every row and column total must be positive")
    expected = np.outer(rows, cols) / n
    dev = np.abs(t - expected)
    if yates:
        dev = np.maximum(dev - 0.5, 0.0)
    chi2 = float(np.sum(dev * dev / expected))
    return Chi2Result(chi2, 1, special.chi2_sf(chi2, 1), math.sqrt(chi2 / n), int(n))


def risk_ratio_arr(table) -> RiskResult:
    """Risk ratio rate2/rate1 and absolute risk reduction rate1 - rate2 (pp)."""
    t = _table(table)
    rows = t.sum(axis=1)
    if np.any(rows == 0):
        raise DegenerateMargins("both groups need at least one observation")
    rate1 = t[0, 0] / rows[0]
    rate2 = t[1, 0] / rows[1]
    if rate1 == 0:
        raise ZeroReferenceRate("reference group has zero event rate")
    return RiskResult(float(rate2 / rate1), float(100.0 * (rate1 - rate2)),
                      float(rate1), float(rate2))


def t_test_pooled_from_stats(m1, s1, n1, m2, s2, n2) -> TTestResult:
    if n1 < 2 or n2 < 2:
        raise InsufficientData("each group needs n >= 2")
    df = n1 + n2 - 2
    sp2 = ((n1 - 1) * s1 * s1 + (n2 - 1) * s2 * s2) / df
    if sp2 <= 0:
        raise ZeroVariance("pooled variance is zero")
    t = (m1 - m2) / math.sqrt(sp2 * (1.0 / n1 + 1.0 / n2))
    return TTestResult(t, float(df), two_tailed(special.t_cdf(t, df)))


def t_test_pooled(a: ArrayLike, b: ArrayLike) -> TTestResult:
    """Student's two-sample t-test with pooled variance, two-tailed."""
    x, y = _arr(a), _arr(b)
    if x.size < 2 or y.size < 2:
        raise InsufficientData("each group needs n >= 2")
    return t_test_pooled_from_stats(x.mean(), x.std(ddof=1), x.size,
                                    y.mean(), y.std(ddof=1), y.size)


def t_test_welch_from_stats(m1, s1, n1, m2, s2, n2) -> TTestResult:
    if n1 < 2 or n2 < 2:
        raise InsufficientData("each group needs n >= 2")
    v1 = s1 * s1 / n1
    v2 = s2 * s2 / n2
    if v1 + v2 <= 0:
        raise ZeroVariance("both variances are zero")
    t = (m1 - m2) / math.sqrt(v1 + v2)
    df = (v1 + v2) ** 2 / (v1 * v1 / (n1 - 1) + v2 * v2 / (n2 - 1))
    return TTestResult(t, df, two_tailed(special.t_cdf(t, df)))


def t_test_welch(a: ArrayLike, b: ArrayLike) -> TTestResult:
    """Welch's unequal-variance t-test, Welch-Satterthwaite df, two-tailed."""
    x, y = _arr(a), _arr(b)
    if x.size < 2 or y.size < 2:
        raise InsufficientData("each group needs n >= 2")
    return t_test_welch_from_stats(x.mean(), x.std(ddof=1), x.size,
                                   y.mean(), y.std(ddof=1), y.size)


def f_variance_ratio_from_stats(s1, n1, s2, n2) -> FTestResult:
    if s1 <= 0 or s2 <= 0:
        raise ZeroVariance("variance ratio needs both variances > 0")
    f = (s1 * s1) / (s2 * s2)
    d1, d2 = n1 - 1, n2 - 1
    return FTestResult(f, float(d1), float(d2), two_tailed(special.f_cdf(f, d1, d2)))


def f_variance_ratio(a: ArrayLike, b: ArrayLike) -> FTestResult:
    """F = var(a) / var(b) with a two-tailed p-value."""
    x, y = _arr(a), _arr(b)
    if x.size < 2 or y.size < 2:
        raise InsufficientData("each group needs n >= 2")
    return f_variance_ratio_from_stats(x.std(ddof=1), x.size, y.std(ddof=1), y.size)


def levene(*samples: ArrayLike) -> FTestResult:
    """Mean-centred Levene test: one-way ANOVA on |x - group mean|."""
    groups = [_arr(s) for s in samples]
    if len(groups) < 2:
        raise InsufficientData("Levene needs at least two groups")
    if any(g.size < 2 for g in groups):
        raise InsufficientData("each group needs n >= 2")
    z = [np.abs(g - g.mean()) for g in groups]
    k = len(z)
    n_total = sum(g.size for g in z)
    grand = np.concatenate(z).mean()
    between = sum(g.size * (g.mean() - grand) ** 2 for g in z)
    within = sum(np.sum((g - g.mean()) ** 2) for g in z)
    if within <= 0:
        raise ZeroVariance("centred deviations have zero within-group variance")
    d1, d2 = k - 1, n_total - k
    f = float((d2 / d1) * between / within)
    return FTestResult(f, float(d1), float(d2), special.f_sf(f, d1, d2))


def rankdata(x: ArrayLike) -> np.ndarray:
    """Ranks starting at 1, ties receive the average of their positions."""
    a = _arr(x)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.size, dtype=float)
    # boundaries of tie blocks in sorted order
    edges = np.flatnonzero(np.diff(sorted_a)) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [a.size]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks


def _paired(x: ArrayLike, y: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    a, b = _arr(x), _arr(y)
    if a.size != b.size:
        raise StatsError("x and y must have equal length")
    if a.size < 3:
        raise InsufficientData("correlation needs n >= 3")
    return a, b


def pearson(x: ArrayLike, y: ArrayLike) -> float:
    a, b = _paired(x, y)
    da, db = a - a.mean(), b - b.mean()
    sxx, syy = float(da @ da), float(db @ db)
    if sxx <= 0 or syy <= 0:
        raise ZeroVariance("correlation undefined for a constant variable")
    r = float(da @ db) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _corr_p(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return two_tailed(special.t_cdf(t, n - 2))


def pearson_test(x: ArrayLike, y: ArrayLike) -> CorrResult:
    r = pearson(x, y)
    n = len(_arr(x))
    return CorrResult(r, _corr_p(r, n), n)


def spearman(x: ArrayLike, y: ArrayLike) -> float:
    a, b = _paired(x, y)
    return pearson(rankdata(a), rankdata(b))


def spearman_test(x: ArrayLike, y: ArrayLike) -> CorrResult:
    # t approximation, fine for n >= 10
    rho = spearman(x, y)
    n = len(_arr(x))
    return CorrResult(rho, _corr_p(rho, n), n)


def _lstsq_qr(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-12 * max(diag.max(), 1.0) * X.shape[0]:
        raise RankDeficient("design matrix is rank deficient")
    return np.linalg.solve(r, q.T @ y)


def _r_squared(y: np.ndarray, x: np.ndarray) -> float:
    X = np.column_stack([np.ones_like(x), x])
    beta = _lstsq_qr(X, y)
    resid = y - X @ beta
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 0:
        raise ZeroVariance("predictor is constant")
    return 1.0 - float(resid @ resid) / ss_tot


def ols2(y: ArrayLike, x1: ArrayLike, x2: ArrayLike) -> OLSResult:
    """Fit y = g0 + g1*x1 + g2*x2 by least squares; report VIFs."""
    yy, a, b = _arr(y), _arr(x1), _arr(x2)
    if not (yy.size == a.size == b.size):
        raise StatsError("y, x1, x2 must have equal length")
    n = yy.size
    if n < 4:
        raise InsufficientData("ols2 needs n >= 4")
    X = np.column_stack([np.ones(n), a, b])
    g0, g1, g2 = _lstsq_qr(X, yy)
    resid = yy - X @ np.array([g0, g1, g2])
    resid_var = float(resid @ resid) / (n - 3)
    vif1 = 1.0 / (1.0 - _r_squared(a, b))
    vif2 = 1.0 / (1.0 - _r_squared(b, a))
    return OLSResult(float(g0), float(g1), float(g2), resid_var, vif1, vif2, n)


def _poly(coefs: Sequence[float], x: float) -> float:
    return sum(c * x ** i for i, c in enumerate(coefs))


_SW_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_SW_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_SW_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_SW_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_SW_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_SW_C6 = (-0.4803, -0.082676, 0.0030302)
_SW_G = (-2.273, 0.459)


def _sw_coefficients(n: int) -> np.ndarray:
    """Royston's approximation to the Shapiro-Wilk weights for the top half."""
    half = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    inv = NormalDist().inv_cdf
    m = np.array([inv((i - 0.375) / (n + 0.25)) for i in range(1, half + 1)])
    summ2 = 2.0 * float(m @ m)
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = np.empty(half)
    a1 = _poly(_SW_C1, rsn) - m[0] / ssumm2
    if n > 5:
        a2 = -m[1] / ssumm2 + _poly(_SW_C2, rsn)
        fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2)
                        / (1 - 2 * a1 ** 2 - 2 * a2 ** 2))
        a[1] = a2
        first = 2
    else:
        fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1 ** 2))
        first = 1
    a[0] = a1
    a[first:] = -m[first:] / fac
    return a


def shapiro_wilk(sample: ArrayLike) -> ShapiroResult:
    """Shapiro-Wilk W with Royston's (1992/1995) normalising p-value."""
    x = np.sort(_arr(sample))
    n = x.size
    if n < 3 or n > 5000:
        raise OutOfRangeN(f"Shapiro-Wilk needs 3 <= n <= 5000, got {n}")
    ss = float(np.sum((x - x.mean()) ** 2))
    if ss <= 0:
        raise ZeroVariance("constant sample")
    a = _sw_coefficients(n)
    half = n // 2
    spread = x[::-1][:half] - x[:half]
    w = min(1.0, float(a @ spread) ** 2 / ss)

    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.pi / 3.0)
        return ShapiroResult(w, max(0.0, min(1.0, p)), n)
    if w >= 1.0:
        return ShapiroResult(w, 1.0, n)
    y = math.log(1.0 - w)
    if n <= 11:
        gamma = _poly(_SW_G, n)
        if y >= gamma:
            return ShapiroResult(w, 1e-99, n)
        y = -math.log(gamma - y)
        mean = _poly(_SW_C3, n)
        sd = math.exp(_poly(_SW_C4, n))
    else:
        ln = math.log(n)
        mean = _poly(_SW_C5, ln)
        sd = math.exp(_poly(_SW_C6, ln))
    return ShapiroResult(w, special.normal_sf((y - mean) / sd), n)
