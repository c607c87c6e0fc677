"""
Numeric foundations: special functions, the beta-binomial family, the Sn
robust scale estimator, and distances between discrete distributions.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Union

import numpy as np
from scipy import special, stats

from rarevar.utils.error_handling import validation_error
from rarevar.utils.kernels import betabinom_log_tails
from rarevar.utils.rng import AUXILIARY_STREAM, block_generator

logger = logging.getLogger(__name__)

ArrayLike = Union[float, int, np.ndarray]

# Probit clamp for p-values
PROBIT_EPS = 1e-12

SN_CONSISTENCY = 1.1926
# Small-sample correction factors for Sn, n = 2..9
SN_SMALL_SAMPLE = {2: 0.743, 3: 1.851, 4: 0.954, 5: 1.351, 6: 0.993, 7: 1.198, 8: 1.005, 9: 1.131}


def _scalar_or_array(values: np.ndarray, like) -> ArrayLike:
    return float(values) if np.ndim(like) == 0 else values


# --- Special functions ---

def log_gamma(z: ArrayLike) -> ArrayLike:
    """
    Natural log of the gamma function for z > 0.

    Args:
        z: Positive scalar or array

    Returns:
        ln Γ(z), same shape as the input
    """
    arr = np.asarray(z, dtype=float)
    if not np.all(arr > 0):
        raise validation_error(
            "log_gamma requires z > 0",
            error_code="parameter_out_of_range",
            invalid_fields={"z": "Must be strictly positive"},
        )
    return _scalar_or_array(special.gammaln(arr), z)


def logit(p: ArrayLike) -> ArrayLike:
    return special.logit(p)


def expit(x: ArrayLike) -> ArrayLike:
    return special.expit(x)


def probit(p: ArrayLike, eps: float = PROBIT_EPS) -> ArrayLike:
    """Normal quantile of p after clamping to [eps, 1 - eps]."""
    return special.ndtri(np.clip(p, eps, 1.0 - eps))


def norm_cdf(z: ArrayLike) -> ArrayLike:
    return special.ndtr(z)


def logit_beta_moments(alpha: ArrayLike, beta: ArrayLike) -> dict:
    """
    Exact mean, variance, skewness and excess kurtosis of logit(p) for
    p ~ Beta(alpha, beta), from the polygamma cumulants of log-Beta variates.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    k1 = special.digamma(alpha) - special.digamma(beta)
    k2 = special.polygamma(1, alpha) + special.polygamma(1, beta)
    k3 = special.polygamma(2, alpha) - special.polygamma(2, beta)
    k4 = special.polygamma(3, alpha) + special.polygamma(3, beta)
    return {
        "mean": k1,
        "variance": k2,
        "skewness": k3 / k2 ** 1.5,
        "excess_kurtosis": k4 / k2 ** 2,
    }


@lru_cache(maxsize=64)
def median_variance_factor(m: int, draws: int = 1 << 18) -> float:
    """
    Variance of the sample median of m independent standard normals.

    Exact for m <= 2, otherwise a seeded Monte Carlo estimate.
    """
    if m < 1:
        raise validation_error("median of an empty sample", invalid_fields={"m": "Must be >= 1"})
    if m == 1:
        return 1.0
    if m == 2:
        return 0.5
    rng = block_generator(20240101, AUXILIARY_STREAM, m)
    medians = np.median(rng.standard_normal((draws, m)), axis=1)
    return float(np.var(medians))


def _stirling_remainder(z: np.ndarray) -> np.ndarray:
    """ln Γ(z) - ((z - 1/2) ln z - z + ln(2π)/2), accurate for z >= 10."""
    inv = 1.0 / z
    inv2 = inv * inv
    return inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))


def log_rising(a: ArrayLike, k: ArrayLike) -> np.ndarray:
    """
    ln Γ(a + k) - ln Γ(a) for a > 0, k >= 0.

    Large shapes (a ~ 1e8 when σ is tiny) would lose every digit to
    cancellation in the plain gammaln difference, so a >= 10 goes through
    the Stirling form with the shared terms removed analytically.
    """
    a, k = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(k, dtype=float))
    out = np.empty(a.shape)
    big = a >= 10.0
    ab, kb = a[big], k[big]
    out[big] = ((ab - 0.5) * np.log1p(kb / ab) + kb * np.log(ab + kb) - kb
                + _stirling_remainder(ab + kb) - _stirling_remainder(ab))
    out[~big] = special.gammaln(a[~big] + k[~big]) - special.gammaln(a[~big])
    return out


def betabinom_logpmf(k, n, alpha, beta) -> np.ndarray:
    """Vectorized beta-binomial log pmf, stable for very large shapes."""
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    log_choose = special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)
    return (log_choose + log_rising(alpha, k) + log_rising(beta, n - k)
            - log_rising(np.asarray(alpha) + np.asarray(beta), n))


# --- Beta-binomial family ---

@dataclass(frozen=True)
class DiscreteTails:
    """
    The four tail probabilities of a discrete law at observed values.

    cdf_left = P(X < x), cdf = P(X <= x), sf = P(X > x), sf_left = P(X >= x).
    The survival pair is computed directly, never as 1 - cdf, so upper tails
    keep full relative precision.
    """
    cdf_left: np.ndarray
    cdf: np.ndarray
    sf: np.ndarray
    sf_left: np.ndarray

    def interval(self, side: str = "lower"):
        """Endpoints [lo, hi] of the p-value interval for the given tail."""
        if side == "lower":
            return self.cdf_left, self.cdf
        if side == "upper":
            return self.sf, self.sf_left
        raise validation_error(f"Unknown tail side '{side}'", invalid_fields={"side": "Must be lower or upper"})

    def select(self, index) -> "DiscreteTails":
        return DiscreteTails(self.cdf_left[index], self.cdf[index], self.sf[index], self.sf_left[index])


def betabinom_tails(k, n, alpha, beta) -> DiscreteTails:
    """Vectorized tail probabilities of BetaBinomial(n, alpha, beta) at k."""
    k, n, alpha, beta = np.broadcast_arrays(
        np.asarray(k, dtype=np.int64), np.asarray(n, dtype=np.int64),
        np.asarray(alpha, dtype=float), np.asarray(beta, dtype=float),
    )
    shape = k.shape
    if np.any(k < 0) or np.any(k > n):
        raise validation_error("count outside the support 0..n", error_code="parameter_out_of_range",
                               invalid_fields={"k": "Must satisfy 0 <= k <= n"})
    log_lo, log_up = betabinom_log_tails(
        np.ascontiguousarray(k.ravel()), np.ascontiguousarray(n.ravel()),
        np.ascontiguousarray(alpha.ravel()), np.ascontiguousarray(beta.ravel()),
    )
    log_total = np.logaddexp(np.logaddexp(0.0, log_lo), log_up)
    tails = DiscreteTails(
        cdf_left=np.exp(log_lo - log_total),
        cdf=np.exp(np.logaddexp(log_lo, 0.0) - log_total),
        sf=np.exp(log_up - log_total),
        sf_left=np.exp(np.logaddexp(log_up, 0.0) - log_total),
    )
    return DiscreteTails(*(getattr(tails, f).reshape(shape) for f in ("cdf_left", "cdf", "sf", "sf_left")))


@dataclass(frozen=True)
class BetaBinomial:
    n: int
    alpha: float
    beta: float

    def __post_init__(self):
        errors = {}
        if int(self.n) != self.n or self.n < 0:
            errors["n"] = "Must be a nonnegative integer"
        if not self.alpha > 0:
            errors["alpha"] = "Must be > 0"
        if not self.beta > 0:
            errors["beta"] = "Must be > 0"
        if errors:
            raise validation_error("Invalid beta-binomial parameters", "parameter_out_of_range", errors)

    @property
    def mean(self) -> float:
        return self.n * self.alpha / (self.alpha + self.beta)

    def _check(self, k) -> np.ndarray:
        arr = np.asarray(k)
        if np.any(arr < 0) or np.any(arr > self.n):
            raise validation_error(
                f"k outside the support 0..{self.n}",
                error_code="parameter_out_of_range",
                invalid_fields={"k": f"Must satisfy 0 <= k <= {self.n}"},
            )
        return arr

    def logpmf(self, k: ArrayLike) -> ArrayLike:
        k_arr = self._check(k).astype(float)
        n = float(self.n)
        value = (special.gammaln(n + 1) - special.gammaln(k_arr + 1) - special.gammaln(n - k_arr + 1)
                 + special.betaln(k_arr + self.alpha, n - k_arr + self.beta)
                 - special.betaln(self.alpha, self.beta))
        return _scalar_or_array(value, k)

    def pmf(self, k: ArrayLike) -> ArrayLike:
        return _scalar_or_array(np.exp(self.logpmf(k)), k)

    def tails(self, k: ArrayLike) -> DiscreteTails:
        k_arr = self._check(k)
        return betabinom_tails(k_arr, self.n, self.alpha, self.beta)

    def cdf(self, k: ArrayLike) -> ArrayLike:
        return _scalar_or_array(self.tails(k).cdf, k)

    def cdf_left(self, k: ArrayLike) -> ArrayLike:
        return _scalar_or_array(self.tails(k).cdf_left, k)

    def sf(self, k: ArrayLike) -> ArrayLike:
        return _scalar_or_array(self.tails(k).sf, k)

    def ppf(self, q: float) -> int:
        """Smallest k with cdf(k) >= q."""
        logpmf = self.logpmf(np.arange(self.n + 1))
        cdf = np.cumsum(np.exp(logpmf - logpmf.max()))
        cdf /= cdf[-1]
        return int(min(np.searchsorted(cdf, q, side="left"), self.n))


def betabinom_pmf(d: BetaBinomial, k: ArrayLike) -> ArrayLike:
    return d.pmf(k)


def betabinom_cdf(d: BetaBinomial, k: ArrayLike) -> ArrayLike:
    return d.cdf(k)


# --- Robust scale ---

def _high_median_distances(x: np.ndarray) -> np.ndarray:
    """
    For sorted x, the high median over j of |x_i - x_j| for every i.

    The (n//2 + 1) nearest neighbours of x_i (itself included) form a
    contiguous window, so the answer is the smallest window radius. The
    window start is found by a vectorized bisection, O(n log n) overall.
    """
    n = x.size
    k = n // 2 + 1
    i = np.arange(n)
    lo = np.maximum(0, i - k + 1)
    hi = np.minimum(i, n - k)
    left, right = lo.copy(), hi.copy()
    while np.any(left < right):
        active = left < right
        mid = (left + right) // 2
        reaches = (x[mid + k - 1] - x) >= (x - x[mid])
        right = np.where(active & reaches, mid, right)
        left = np.where(active & ~reaches, mid + 1, left)
    radius = np.maximum(x - x[left], x[left + k - 1] - x)
    prev = np.maximum(left - 1, lo)
    radius_prev = np.maximum(x - x[prev], x[prev + k - 1] - x)
    return np.where(left > lo, np.minimum(radius, radius_prev), radius)


def sn_scale(values) -> float:
    """
    Rousseeuw-Croux Sn scale estimator.

    Sn = c_n * 1.1926 * lomed_i himed_j |v_i - v_j|, consistent for the
    standard deviation under normality.

    Args:
        values: At least two finite values

    Returns:
        Nonnegative scale estimate
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise validation_error(
            "sn_scale needs at least 2 values",
            error_code="insufficient_data",
            invalid_fields={"values": f"Got {v.size} value(s)"},
        )
    if not np.all(np.isfinite(v)):
        raise validation_error("sn_scale needs finite values", invalid_fields={"values": "Contains NaN or inf"})
    n = v.size
    inner = _high_median_distances(np.sort(v))
    rank = (n + 1) // 2 - 1
    lomed = np.partition(inner, rank)[rank]
    if n <= 9:
        factor = SN_SMALL_SAMPLE[n]
    elif n % 2 == 1:
        factor = n / (n - 0.9)
    else:
        factor = 1.0
    return float(SN_CONSISTENCY * factor * lomed)


# --- Discrete distributions and distances ---

@dataclass(eq=False)
class DiscreteDist:
    """
    A law on a finite integer support.

    Countable laws are truncated; the mass cut off above the support is kept
    in truncated_mass rather than renormalized away.
    """
    support: np.ndarray
    pmf: np.ndarray
    truncated_mass: float = 0.0
    label: str = field(default="", compare=False)

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.int64)
        self.pmf = np.asarray(self.pmf, dtype=float)
        if self.support.shape != self.pmf.shape or self.support.ndim != 1:
            raise validation_error("support and pmf must be 1-d arrays of equal length")
        if np.any(np.diff(self.support) <= 0):
            raise validation_error("support must be strictly increasing")
        if np.any(self.pmf < 0) or self.truncated_mass < 0:
            raise validation_error("pmf values must be nonnegative")
        total = float(self.pmf.sum()) + self.truncated_mass
        if abs(total - 1.0) > 1e-10:
            raise validation_error(
                f"pmf sums to {total}, not 1",
                invalid_fields={"pmf": "Mass plus truncated mass must equal 1 within 1e-10"},
            )

    # Constructors

    @classmethod
    def from_scipy(cls, frozen, upper: Optional[int] = None, tail: float = 1e-12, label: str = "") -> "DiscreteDist":
        lower = int(max(frozen.support()[0], 0))
        if upper is None:
            top = frozen.support()[1]
            upper = int(top) if np.isfinite(top) else int(frozen.isf(tail))
        support = np.arange(lower, upper + 1)
        return cls(support, frozen.pmf(support), float(frozen.sf(upper)), label=label)

    @classmethod
    def poisson(cls, lam: float, upper: Optional[int] = None) -> "DiscreteDist":
        return cls.from_scipy(stats.poisson(lam), upper=upper, label=f"poisson:{lam:g}")

    @classmethod
    def binomial(cls, n: int, p: float) -> "DiscreteDist":
        return cls.from_scipy(stats.binom(n, p), label=f"binomial:{n}:{p:g}")

    def on_support(self, support: np.ndarray) -> np.ndarray:
        """pmf values aligned to another (super)set of support points."""
        out = np.zeros(len(support))
        idx = np.searchsorted(support, self.support)
        out[idx] = self.pmf
        return out

    # Distribution functions

    def tails(self, x) -> DiscreteTails:
        x = np.asarray(x)
        cum = np.concatenate([[0.0], np.cumsum(self.pmf)])
        above = np.concatenate([np.cumsum(self.pmf[::-1])[::-1], [0.0]]) + self.truncated_mass
        left = np.searchsorted(self.support, x, side="left")
        right = np.searchsorted(self.support, x, side="right")
        return DiscreteTails(cdf_left=cum[left], cdf=cum[right], sf=above[right], sf_left=above[left])

    def cdf(self, x) -> np.ndarray:
        return self.tails(x).cdf

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        probs = self.pmf / self.pmf.sum()
        return rng.choice(self.support, size=size, p=probs)


def _aligned(p: DiscreteDist, q: DiscreteDist):
    support = np.union1d(p.support, q.support)
    return support, p.on_support(support), q.on_support(support)


def kl_divergence(p: DiscreteDist, q: DiscreteDist) -> float:
    """
    Kullback-Leibler divergence KL(p || q) = sum p log(p / q).

    Truncated tails count as one extra cell. Mass of p where q has none gives
    +inf rather than an error.
    """
    _, pv, qv = _aligned(p, q)
    pv = np.append(pv, p.truncated_mass)
    qv = np.append(qv, q.truncated_mass)
    mask = pv > 0
    if np.any(qv[mask] == 0):
        return float("inf")
    return float(np.sum(special.xlogy(pv[mask], pv[mask]) - special.xlogy(pv[mask], qv[mask])))


def kolmogorov_distance(p: DiscreteDist, q: DiscreteDist) -> float:
    """sup_x |P(X <= x) - Q(X <= x)|."""
    _, pv, qv = _aligned(p, q)
    return float(np.max(np.abs(np.cumsum(pv) - np.cumsum(qv))))
