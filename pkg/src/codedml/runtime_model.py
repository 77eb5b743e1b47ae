"""Runtime models for uncoded, repetition-coded and MDS-coded jobs.

A job run on one machine takes ``T0 ~ F`` (the mother distribution). Split
into ``l`` subtasks, each subtask takes ``T0 / l``, i.e. has CDF ``F(l t)``.
Uncoded jobs use ``l = n``; coded jobs split into ``k`` systematic subtasks
and use ``l = k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .codes import DecodableFamily
from .errors import InvalidParameter, UnsupportedDistribution


# --------------------------------------------------------------------------
# mother distributions


@dataclass(frozen=True)
class ShiftedExponential:
    """``F(t) = 1 - exp(-mu (t - 1))`` for ``t >= 1``; ``mu`` is the straggling parameter."""

    mu: float = 1.0

    def __post_init__(self):
        if not self.mu > 0:
            raise InvalidParameter("straggling parameter mu must be positive")

    @property
    def support_start(self) -> float:
        return 1.0

    @property
    def mean(self) -> float:
        return 1.0 + 1.0 / self.mu

    def cdf(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.where(t >= 1.0, -np.expm1(-self.mu * np.maximum(t - 1.0, 0.0)), 0.0)

    def pdf(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.where(t >= 1.0, self.mu * np.exp(-self.mu * np.maximum(t - 1.0, 0.0)), 0.0)

    def sample(self, rng: np.random.Generator, size=None):
        return 1.0 + rng.exponential(1.0 / self.mu, size)


class Empirical:
    """Distribution of measured positive runtimes.

    The quantile function interpolates linearly between order statistics,
    placing the ``j``-th smallest of ``m`` samples at level ``(j+1)/m``;
    levels below ``1/m`` return the minimum. The CDF is its exact inverse.
    """

    def __init__(self, samples):
        x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
        if x.size == 0:
            raise InvalidParameter("empirical distribution needs at least one sample")
        if not np.all(np.isfinite(x)) or x[0] <= 0:
            raise InvalidParameter("runtime samples must be finite and positive")
        self.samples = x
        self.samples.setflags(write=False)
        self._levels = np.arange(1, x.size + 1) / x.size

    def __repr__(self):
        return f"Empirical(m={self.samples.size}, mean={self.mean:.4g})"

    @property
    def support_start(self) -> float:
        return float(self.samples[0])

    @property
    def mean(self) -> float:
        return float(self.samples.mean())

    def quantile(self, u):
        return np.interp(u, self._levels, self.samples)

    def cdf(self, t):
        t = np.asarray(t, dtype=np.float64)
        x, m = self.samples, self.samples.size
        j = np.searchsorted(x, t, side="right")  # samples <= t
        inner = (j > 0) & (j < m)
        jj = np.clip(j, 1, m - 1) if m > 1 else np.ones_like(j)
        if m > 1:
            lo, hi = x[jj - 1], x[jj]
            frac = (t - lo) / np.where(hi > lo, hi - lo, 1.0)
            mid = (jj + frac) / m
        else:
            mid = np.zeros_like(t)
        return np.where(j >= m, 1.0, np.where(inner, mid, 0.0))

    def sample(self, rng: np.random.Generator, size=None):
        return self.quantile(rng.random(size))


MotherDistribution = ShiftedExponential | Empirical


def sample_subtask_runtime(dist: MotherDistribution, scale: int, rng: np.random.Generator, size=None):
    """Draw subtask runtimes ``T0 / scale`` (CDF ``F(scale * t)``)."""
    if scale < 1:
        raise InvalidParameter("scale must be at least 1")
    return dist.sample(rng, size) / scale


# --------------------------------------------------------------------------
# schemes


@dataclass(frozen=True)
class SchemeSpec(DecodableFamily):
    """A scheme with its subtask scale: ``l = n`` uncoded, ``l = k`` coded."""

    @classmethod
    def uncoded(cls, n: int) -> "SchemeSpec":
        return cls("uncoded", n, n)

    @classmethod
    def repetition(cls, n: int, k: int) -> "SchemeSpec":
        return cls("repetition", n, k)

    @classmethod
    def mds(cls, n: int, k: int) -> "SchemeSpec":
        return cls("mds", n, k)

    @property
    def scale(self) -> int:
        return self.n if self.scheme == "uncoded" else self.k


def storage_overhead(spec: SchemeSpec) -> float:
    """Extra storage per worker relative to the uncoded ``1/n`` share: ``n/k - 1``."""
    return spec.n / spec.k - 1.0


# --------------------------------------------------------------------------
# regularized incomplete beta


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta, modified Lentz evaluation."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def _betainc_scalar(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def betainc_reg(a: float, b: float, x):
    """Regularized incomplete beta ``I_x(a, b)``, elementwise over ``x``."""
    if not (a > 0 and b > 0):
        raise InvalidParameter("betainc_reg needs a, b > 0")
    x = np.asarray(x, dtype=np.float64)
    out = np.array([_betainc_scalar(a, b, float(v)) for v in x.ravel()])
    return out.reshape(x.shape) if x.ndim else float(out[0])


# --------------------------------------------------------------------------
# overall runtime


def cdf_overall(t, dist: MotherDistribution, spec: SchemeSpec):
    """CDF of the job completion time under ``spec``.

    uncoded: ``F(nt)^n``; repetition: ``[1 - (1 - F(kt))^(n/k)]^k``;
    MDS: ``I_{F(kt)}(k, n-k+1)``, the CDF of the k-th of n order statistics.
    """
    t = np.asarray(t, dtype=np.float64)
    n, k = spec.n, spec.k
    if spec.scheme == "uncoded":
        return dist.cdf(n * t) ** n
    Fk = dist.cdf(k * t)
    if spec.scheme == "repetition":
        return (1.0 - (1.0 - Fk) ** (n // k)) ** k
    return betainc_reg(k, n - k + 1, Fk)


@lru_cache(maxsize=4096)
def harmonic(m: int) -> float:
    """``H_m = sum_{i=1}^m 1/i`` (exact float sum, ``H_0 = 0``)."""
    if m < 0:
        raise InvalidParameter("harmonic number of a negative integer")
    return math.fsum(1.0 / i for i in range(1, m + 1))


def _require_shifted_exp(dist) -> ShiftedExponential:
    if not isinstance(dist, ShiftedExponential):
        raise UnsupportedDistribution("closed-form runtimes exist only for the shifted-exponential model")
    return dist


def expected_runtime(dist: ShiftedExponential, spec: SchemeSpec) -> float:
    """Exact mean completion time with harmonic numbers."""
    mu = _require_shifted_exp(dist).mu
    n, k = spec.n, spec.k
    if spec.scheme == "uncoded":
        return (1.0 + harmonic(n) / mu) / n
    if spec.scheme == "repetition":
        return (1.0 + k / (n * mu) * harmonic(k)) / k
    return (1.0 + (harmonic(n) - harmonic(n - k)) / mu) / k


def expected_runtime_asymptotic(dist: ShiftedExponential, spec: SchemeSpec) -> float:
    """Large-n approximation with ``H_m ~ log m``."""
    mu = _require_shifted_exp(dist).mu
    n, k = spec.n, spec.k
    if spec.scheme == "uncoded":
        return (1.0 + math.log(n) / mu) / n
    if spec.scheme == "repetition":
        return (1.0 + k / (n * mu) * math.log(k)) / k
    if k == n:
        raise InvalidParameter("asymptotic MDS form needs k < n")
    return (1.0 + math.log(n / (n - k)) / mu) / k


# --------------------------------------------------------------------------
# Lambert W, lower branch

_INV_E = math.exp(-1.0)


def lambert_w_m1(x: float) -> float:
    """Solve ``t e^t = x`` for ``t <= -1``, with ``-1/e <= x < 0``."""
    x = float(x)
    if not (-_INV_E * (1 + 1e-15) <= x < 0.0):
        raise InvalidParameter(f"lower Lambert W is real only on [-1/e, 0), got {x}")
    gap = 1.0 + math.e * x
    if gap <= 2e-16:
        return -1.0
    if gap < 0.25:
        # series about the branch point
        p = -math.sqrt(2.0 * gap)
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3
    else:
        L1 = math.log(-x)
        w = L1 - math.log(-L1)
    for _ in range(50):
        ew = math.exp(w)
        f = w * ew - x
        w1 = w + 1.0
        if w1 == 0.0:
            break
        step = f / (ew * w1 - (w + 2.0) * f / (2.0 * w1))
        w_new = w - step
        if w_new > -1.0:
            w_new = -1.0
        if abs(w_new - w) <= 4e-16 * abs(w_new):
            w = w_new
            break
        w = w_new
    if abs(w * math.exp(w) - x) <= 1e-12 * abs(x) and w <= -1.0:
        return w
    return _lambert_w_m1_bisect(x)


def _lambert_w_m1_bisect(x: float) -> float:
    # t e^t falls monotonically from 0 to -1/e on (-inf, -1]
    lo = min(-700.0, 2.0 * math.log(-x))
    hi = -1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * math.exp(mid) < x:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-16 * abs(mid):
            break
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------
# optimal designs


@dataclass(frozen=True)
class DesignResult:
    scheme: str
    n: int
    mu: float
    k_star: int
    expected_runtime: float
    alpha_star: float | None = None
    gamma_star: float | None = None

    def as_dict(self) -> dict:
        d = {
            "scheme": self.scheme,
            "n": self.n,
            "mu": self.mu,
            "k_star": self.k_star,
            "expected_runtime": self.expected_runtime,
            "storage_overhead": self.n / self.k_star - 1.0,
        }
        if self.alpha_star is not None:
            d["alpha_star"] = self.alpha_star
            d["gamma_star"] = self.gamma_star
            d["storage_overhead_asymptotic"] = 1.0 / self.alpha_star - 1.0
        return d


def mds_design_constants(mu: float) -> tuple[float, float]:
    """``(alpha*, gamma*)``: optimal ``k/n`` and ``n * E[T]`` as ``n`` grows."""
    if not mu > 0:
        raise InvalidParameter("mu must be positive")
    w = lambert_w_m1(-math.exp(-mu - 1.0))
    return 1.0 + 1.0 / w, -w / mu


def optimal_k_mds(n: int, mu: float) -> DesignResult:
    """Runtime-optimal MDS dimension for ``n`` workers under ``ShiftedExponential(mu)``.

    The continuous optimum ``alpha* n`` is rounded down and up; the candidate
    with the smaller exact expected runtime wins (ties go to the larger k).
    """
    if n < 2:
        raise InvalidParameter("need at least two workers")
    alpha, gamma = mds_design_constants(mu)
    dist = ShiftedExponential(mu)
    candidates = {min(max(c, 1), n - 1) for c in (math.floor(alpha * n), math.ceil(alpha * n))}
    k_star = min(candidates, key=lambda k: (expected_runtime(dist, SchemeSpec.mds(n, k)), -k))
    return DesignResult("mds", n, mu, k_star, expected_runtime(dist, SchemeSpec.mds(n, k_star)), alpha, gamma)


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def optimal_k_repetition(n: int, mu: float) -> DesignResult:
    """Runtime-optimal repetition dimension.

    ``mu >= 1`` never replicates (``k = n``). Otherwise every divisor of ``n``
    is scored with the exact expected runtime; ties go to the larger k.
    """
    if n < 1 or not mu > 0:
        raise InvalidParameter("need n >= 1 and mu > 0")
    dist = ShiftedExponential(mu)
    if mu >= 1:
        k_star = n
    else:
        k_star = min(divisors(n), key=lambda k: (expected_runtime(dist, SchemeSpec.repetition(n, k)), -k))
    return DesignResult("repetition", n, mu, k_star, expected_runtime(dist, SchemeSpec.repetition(n, k_star)))


def optimal_design(scheme: str, n: int, mu: float) -> DesignResult:
    if scheme == "mds":
        return optimal_k_mds(n, mu)
    if scheme == "repetition":
        return optimal_k_repetition(n, mu)
    if scheme == "uncoded":
        dist = ShiftedExponential(mu)
        return DesignResult("uncoded", n, mu, n, expected_runtime(dist, SchemeSpec.uncoded(n)))
    raise InvalidParameter(f"unknown scheme {scheme!r}")
