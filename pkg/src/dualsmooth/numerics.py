"""Statistical primitives: Gaussian CDF and quantile, Clopper-Pearson lower
bounds and the exact two-sided binomial test.

The quantile is refined against :func:`std_normal_cdf` so that
``cdf(quantile(p)) == p`` to well below 1e-10 on every platform, and the
Clopper-Pearson bound is a root of the exact binomial upper tail rather than
a Beta-quantile call.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erfc as _erfc_array
from scipy.special import gammaln

__all__ = [
    "UnboundedQuantileError",
    "std_normal_cdf",
    "std_normal_quantile",
    "binomial_upper_tail",
    "clopper_pearson_lower",
    "binomial_pvalue_two_sided",
]

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


class UnboundedQuantileError(ValueError):
    """Raised when the Gaussian quantile of 0 or 1 is requested."""

    def __init__(self, p: float):
        self.p = p
        bound = "-inf" if p <= 0 else "+inf"
        super().__init__(f"quantile of p={p!r} is unbounded ({bound})")


def std_normal_cdf(z):
    """Standard normal CDF, for a scalar or an array.

    Uses the complementary error function so both tails keep full relative
    precision. Non-finite input raises ``ValueError``.
    """
    if np.ndim(z) == 0:
        z = float(z)
        if not math.isfinite(z):
            raise ValueError(f"std_normal_cdf needs a finite argument, got {z!r}")
        return 0.5 * math.erfc(-z / _SQRT2)
    arr = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("std_normal_cdf needs finite arguments")
    return 0.5 * _erfc_array(-arr / _SQRT2)


# Rational approximation coefficients (Acklam), relative error ~1e-9.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _initial_quantile(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        return num / den
    q = p - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def _lower_quantile(p: float) -> float:
    # p in (0, 0.5]; Halley steps against the implemented CDF.
    x = _initial_quantile(p)
    for _ in range(8):
        err = std_normal_cdf(x) - p
        u = err * _SQRT2PI * math.exp(0.5 * x * x)
        step = u / (1.0 + 0.5 * x * u)
        x -= step
        if abs(step) <= 1e-15 * max(1.0, abs(x)):
            break
    return x


def std_normal_quantile(p: float) -> float:
    """Inverse of :func:`std_normal_cdf` on the open interval (0, 1).

    Raises :class:`UnboundedQuantileError` for p equal to 0 or 1, and
    ``ValueError`` outside [0, 1].
    """
    p = float(p)
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"probability must lie in [0, 1], got {p!r}")
    if p == 0.0 or p == 1.0:
        raise UnboundedQuantileError(p)
    if p == 0.5:
        return 0.0
    if p > 0.5:
        # 1 - p is exact for p in [0.5, 1]
        return -_lower_quantile(1.0 - p)
    return _lower_quantile(p)


def _log_upper_tail(k: np.ndarray, n: int, p: np.ndarray):
    """log P(X >= k) and log P(X = k) for X ~ Bin(n, p), vectorised over k, p.

    Terms beyond ``k + W`` (W about forty standard deviations) are dropped;
    below the bound the tail decays at least geometrically from j = k, so the
    truncation is far below double precision.
    """
    width = int(40.0 * math.sqrt(0.25 * n) + 50)
    j_lo = int(k.min())
    j_hi = min(n, int(max(k.max(), math.ceil(n * float(p.max())))) + width)
    j = np.arange(j_lo, j_hi + 1, dtype=float)
    log_choose = gammaln(n + 1.0) - gammaln(j + 1.0) - gammaln(n - j + 1.0)
    lp = np.log(p)[:, None]
    lq = np.log1p(-p)[:, None]
    terms = log_choose[None, :] + j[None, :] * lp + (n - j)[None, :] * lq
    terms = np.where(j[None, :] >= k[:, None], terms, -np.inf)
    top = terms.max(axis=1, keepdims=True)
    log_tail = top[:, 0] + np.log(np.exp(terms - top).sum(axis=1))
    log_pmf_k = terms[np.arange(len(k)), (k - j_lo).astype(int)]
    return log_tail, log_pmf_k


def binomial_upper_tail(k: int, n: int, p: float) -> float:
    """P(X >= k) for X ~ Binomial(n, p)."""
    if k <= 0:
        return 1.0
    if k > n:
        return 0.0
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    log_tail, _ = _log_upper_tail(np.array([k]), n, np.array([float(p)]))
    return float(min(1.0, math.exp(log_tail[0])))


def _check_counts(successes, trials, alpha):
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    k = np.asarray(successes)
    if np.any(k < 0) or np.any(k > trials):
        raise ValueError("successes must lie in [0, trials]")


def _solve_lower(k: np.ndarray, n: int, alpha: float) -> np.ndarray:
    """Root of P(X >= k | p) = alpha for 0 < k < n, by safeguarded Newton on
    the log tail inside a shrinking bisection bracket."""
    m = len(k)
    kf = k.astype(float)
    lo = np.zeros(m)
    hi = np.ones(m)
    log_alpha = math.log(alpha)
    # start from the point estimate, which is always a valid bracket probe
    p = np.clip(kf / n, 1e-300, 1 - 1e-16)
    active = np.ones(m, dtype=bool)
    for _ in range(200):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pk = p[idx]
        log_tail, log_pmf = _log_upper_tail(k[idx], n, pk)
        f = log_tail - log_alpha
        below = f < 0
        lo[idx] = np.where(below, pk, lo[idx])
        hi[idx] = np.where(below, hi[idx], pk)
        # d/dp log P(X >= k) = (k / p) * P(X = k) / P(X >= k)
        slope = np.exp(log_pmf - log_tail) * kf[idx] / pk
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = pk - f / slope
        mid = 0.5 * (lo[idx] + hi[idx])
        ok = np.isfinite(newton) & (newton > lo[idx]) & (newton < hi[idx])
        nxt = np.where(ok, newton, mid)
        done = (hi[idx] - lo[idx] <= 4e-16 * np.maximum(hi[idx], 1e-300)) | (
            np.abs(nxt - pk) <= 1e-15 * pk
        ) | (f == 0)
        p[idx] = np.where(done, pk, nxt)
        active[idx[done]] = False
    return p


def clopper_pearson_lower(successes, trials: int, alpha: float):
    """Exact one-sided (1 - alpha) lower confidence bound on a binomial rate.

    ``successes`` may be an integer or an integer array (all sharing
    ``trials``). Zero successes gives 0, all successes gives
    ``alpha ** (1 / trials)``; otherwise the bound is the p at which
    observing ``successes`` or more has probability exactly ``alpha``.
    """
    _check_counts(successes, trials, alpha)
    scalar = np.ndim(successes) == 0
    k = np.atleast_1d(np.asarray(successes, dtype=np.int64))
    out = np.empty(k.shape, dtype=float)
    out[k == 0] = 0.0
    out[k == trials] = alpha ** (1.0 / trials)
    inner = (k > 0) & (k < trials)
    if np.any(inner):
        out[inner] = _solve_lower(k[inner], int(trials), float(alpha))
    return float(out[0]) if scalar else out


def binomial_pvalue_two_sided(k: int, n: int, q: float) -> float:
    """Exact two-sided binomial test p-value.

    Sums the probabilities of all outcomes no more likely than ``k`` under
    Binomial(n, q), with a small relative slack for float ties.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, n], got {k}")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    if q == 0.0:
        return 1.0 if k == 0 else 0.0
    if q == 1.0:
        return 1.0 if k == n else 0.0
    j = np.arange(n + 1, dtype=float)
    log_pmf = (gammaln(n + 1.0) - gammaln(j + 1.0) - gammaln(n - j + 1.0)
               + j * math.log(q) + (n - j) * math.log1p(-q))
    threshold = log_pmf[k] + math.log1p(1e-7)
    sel = log_pmf[log_pmf <= threshold]
    top = sel.max()
    return float(min(1.0, math.exp(top) * np.exp(sel - top).sum()))
