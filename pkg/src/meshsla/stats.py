"""Nearest-rank quantiles and Welch's t-test.

The Student-t CDF is evaluated through the regularized incomplete beta
function, computed with the modified Lentz continued fraction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptySamples, InsufficientSamples

TWO_SIDED = "two_sided"
A_LESS_THAN_B = "a_less_than_b"
REJECT = "reject"
FAIL_TO_REJECT = "fail_to_reject"

_RANK_EPS = 1e-9
_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 100_000


def nearest_rank(p: float, n: int) -> int:
    """1-based rank of the ``p``-th percentile among ``n`` samples."""
    r = p * n / 100.0
    k = math.ceil(r - _RANK_EPS * max(1.0, r))
    return min(max(k, 1), n)


def empirical_quantile(samples: Sequence[float], p: float) -> float:
    """The ``ceil(p*n/100)``-th smallest sample (nearest-rank definition)."""
    n = len(samples)
    if n == 0:
        raise EmptySamples("cannot take a quantile of an empty sample")
    if not 0 < p <= 100:
        raise ValueError(f"percentile {p} outside (0, 100]")
    k = nearest_rank(p, n)
    arr = np.asarray(samples, dtype=float)
    return float(np.partition(arr, k - 1)[k - 1])


def quantiles(samples: Sequence[float], grid: Sequence[float]) -> np.ndarray:
    """Nearest-rank quantiles of ``samples`` at every percentile of ``grid``."""
    arr = np.sort(np.asarray(samples, dtype=float))
    n = arr.size
    if n == 0:
        raise EmptySamples("cannot take a quantile of an empty sample")
    idx = [nearest_rank(p, n) - 1 for p in grid]
    return arr[idx]


def _betacf(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float, one_minus_x: float | None = None) -> float:
    """Regularized incomplete beta function I_x(a, b).

    ``one_minus_x`` may be passed when ``1 - x`` is known more accurately than
    the subtraction would give.
    """
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a > 0 and b > 0")
    if one_minus_x is None:
        one_minus_x = 1.0 - x
    if x <= 0.0:
        return 0.0
    if one_minus_x <= 0.0:
        return 1.0
    log_x = math.log(x) if x < 0.5 else math.log1p(-one_minus_x)
    log_1mx = math.log1p(-x) if x < 0.5 else math.log(one_minus_x)
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * log_x + b * log_1mx)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, one_minus_x) / b


def student_t_sf(t: float, dof: float) -> float:
    """Upper tail P(T > t) of Student's t with ``dof`` degrees of freedom."""
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    t2 = t * t
    x = dof / (dof + t2)
    tail = 0.5 * betainc(dof / 2.0, 0.5, x, t2 / (dof + t2))
    return tail if t > 0 else 1.0 - tail


def student_t_cdf(t: float, dof: float) -> float:
    return 1.0 - student_t_sf(t, dof)


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    dof: float
    p_value: float
    decision: str

    @property
    def rejected(self) -> bool:
        return self.decision == REJECT


def _moments(x: Sequence[float]):
    arr = np.asarray(x, dtype=float)
    n = arr.size
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {n}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples must be finite")
    return n, float(arr.mean()), float(arr.var(ddof=1))


def welch_from_moments(
    na: int, ma: float, va: float, nb: int, mb: float, vb: float,
    alpha: float = 0.05, alternative: str = TWO_SIDED,
) -> TTestResult:
    """Welch's unequal-variance t-test from summary statistics."""
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    if se2 <= 0.0:
        dof = float(na + nb - 2)
        if ma == mb:
            return TTestResult(0.0, dof, 1.0, FAIL_TO_REJECT)
        t = math.copysign(math.inf, ma - mb)
    else:
        t = (ma - mb) / math.sqrt(se2)
        denom = (sa * sa / (na - 1) if sa else 0.0) + (sb * sb / (nb - 1) if sb else 0.0)
        dof = se2 * se2 / denom
    if alternative == TWO_SIDED:
        p = min(1.0, 2.0 * student_t_sf(abs(t), dof))
    elif alternative == A_LESS_THAN_B:
        p = student_t_cdf(t, dof)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    p = min(max(p, 0.0), 1.0)
    return TTestResult(t, dof, p, REJECT if p < alpha else FAIL_TO_REJECT)


def welch_t_test(a: Sequence[float], b: Sequence[float], alpha: float = 0.05,
                 alternative: str = TWO_SIDED) -> TTestResult:
    """Welch's t-test of mean(a) against mean(b).

    ``alternative="a_less_than_b"`` is the one-sided test whose alternative
    hypothesis is mean(a) < mean(b).
    """
    na, ma, va = _moments(a)
    nb, mb, vb = _moments(b)
    return welch_from_moments(na, ma, va, nb, mb, vb, alpha, alternative)
