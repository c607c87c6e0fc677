"""
Local false discovery rates for discrete test statistics.

The statistic of each observation is turned into a randomized p-value
r = F-(x) + U (F(x) - F-(x)), which is exactly uniform when the discrete null
F is right. Null misfit is repaired by an empirical null on the probit scale,
the marginal density of the corrected values is estimated by Lindsey's
method, and fdr = min(1, 1 / f_marg(midpoint of the corrected interval)).
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import integrate, special

from rarevar.utils.error_handling import numeric_error, validation_error
from rarevar.utils.rng import AUXILIARY_STREAM, block_generator, counter_uniforms
from rarevar.utils.statfun import (
    PROBIT_EPS,
    DiscreteDist,
    DiscreteTails,
    betabinom_tails,
    kl_divergence,
    kolmogorov_distance,
    norm_cdf,
    probit,
    sn_scale,
)

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1

PVALUE_MODES = ("randomized", "mid_p")

FDR_TABLE_COLUMNS = ["id", "r", "r_tilde", "interval_lo", "interval_hi", "f_marg", "fdr", "p_conventional"]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# --- Null CDF handles ---

class NullCdf(ABC):
    """
    A batch of discrete null laws, one per observation.

    Element i answers F_i(x_i) and F_i-(x_i) for its own observation only;
    all implementations are pure and safe to evaluate in parallel.
    """

    @abstractmethod
    def __len__(self) -> int:
        ...

    @abstractmethod
    def tails(self, x) -> DiscreteTails:
        ...

    def cdf(self, x) -> np.ndarray:
        return self.tails(x).cdf

    def cdf_left(self, x) -> np.ndarray:
        return self.tails(x).cdf_left


class BetaBinomialNulls(NullCdf):
    """Independent BetaBinomial(n_i, alpha_i, beta_i) nulls."""

    def __init__(self, n, alpha, beta):
        self.n = np.asarray(n, dtype=np.int64)
        self.alpha = np.asarray(alpha, dtype=float)
        self.beta = np.asarray(beta, dtype=float)
        if not (self.n.shape == self.alpha.shape == self.beta.shape):
            raise validation_error("n, alpha and beta must have the same shape")

    def __len__(self) -> int:
        return self.n.size

    def tails(self, x) -> DiscreteTails:
        return betabinom_tails(x, self.n, self.alpha, self.beta)


class MixtureBetaBinomialNulls(NullCdf):
    """
    Per-observation finite mixtures of beta-binomials sharing component
    weights: alpha and beta have shape (observations, components).
    """

    def __init__(self, n, alpha, beta, weights):
        self.n = np.asarray(n, dtype=np.int64)
        self.alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
        self.beta = np.atleast_2d(np.asarray(beta, dtype=float))
        self.weights = np.asarray(weights, dtype=float)
        if self.alpha.shape != self.beta.shape or self.alpha.shape != (self.n.size, self.weights.size):
            raise validation_error("mixture shapes must be (observations, components)")

    def __len__(self) -> int:
        return self.n.size

    def tails(self, x) -> DiscreteTails:
        x = np.asarray(x, dtype=np.int64)
        comp = betabinom_tails(x[:, None], self.n[:, None], self.alpha, self.beta)
        w = self.weights
        return DiscreteTails(comp.cdf_left @ w, comp.cdf @ w, comp.sf @ w, comp.sf_left @ w)


class SharedNull(NullCdf):
    """The same law for every observation."""

    def __init__(self, dist: DiscreteDist, count: int):
        self.dist = dist
        self.count = int(count)

    def __len__(self) -> int:
        return self.count

    def tails(self, x) -> DiscreteTails:
        return self.dist.tails(x)


# --- Randomized p-values ---

@dataclass
class RandomizedPValues:
    """
    Randomized (or mid-p) values with the intervals they were drawn from.

    lower/upper are the p-value interval endpoints for the chosen tail, u the
    uniform used per observation (0.5 in mid_p mode).
    """
    r: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    u: np.ndarray
    mode: str
    rng_seed: int
    side: str = "lower"

    def __len__(self) -> int:
        return self.r.size

    @property
    def conventional(self) -> np.ndarray:
        """The unrandomized p-value P(X <= x) (or P(X >= x) for the upper tail)."""
        return self.upper

    def subset(self, index) -> "RandomizedPValues":
        return RandomizedPValues(self.r[index], self.lower[index], self.upper[index], self.u[index],
                                 self.mode, self.rng_seed, self.side)


def randomized_pvalues(
    x,
    nulls: NullCdf,
    mode: str = "randomized",
    seed: int = 0,
    side: str = "lower",
    ids=None,
) -> RandomizedPValues:
    """
    Randomized p-values for discrete observations.

    Args:
        x: Observed counts, one per null
        nulls: Per-observation null laws
        mode: 'randomized' draws U per observation, 'mid_p' uses U = 1/2
        seed: Seed of the counter-based stream
        side: 'lower' uses [F-(x), F(x)], 'upper' uses [1 - F(x), 1 - F-(x)]
        ids: Stream index per observation (defaults to 0..n-1); results for an
             observation depend only on (seed, id)

    Returns:
        RandomizedPValues
    """
    if mode not in PVALUE_MODES:
        raise validation_error(f"Unknown p-value mode '{mode}'", invalid_fields={"mode": "Must be randomized or mid_p"})
    x = np.asarray(x, dtype=np.int64)
    if x.size != len(nulls):
        raise validation_error("one null per observation is required")
    lower, upper = nulls.tails(x).interval(side)
    if ids is None:
        ids = np.arange(x.size, dtype=np.int64)
    if mode == "randomized":
        u = counter_uniforms(seed, ids)
    else:
        u = np.full(x.size, 0.5)
    r = lower + u * (upper - lower)
    return RandomizedPValues(r=r, lower=lower, upper=upper, u=u, mode=mode, rng_seed=int(seed), side=side)


# --- Empirical null ---

@dataclass(frozen=True)
class EmpiricalNull:
    """
    Location-scale correction of the null on the probit scale.

    H(p) = Phi((probit(p) - location) / scale) maps null p-values to their
    corrected values; H(0) = 0 and H(1) = 1 exactly.
    """
    location: float = 0.0
    scale: float = 1.0
    count: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise validation_error("empirical null scale must be positive", invalid_fields={"scale": str(self.scale)})

    @property
    def is_identity(self) -> bool:
        return self.location == 0.0 and self.scale == 1.0

    def correct(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if self.is_identity:
            return p
        out = norm_cdf((probit(p) - self.location) / self.scale)
        out = np.where(p <= 0.0, 0.0, out)
        return np.where(p >= 1.0, 1.0, out)

    def to_dict(self) -> Dict[str, Any]:
        return {"location": self.location, "scale": self.scale, "count": self.count}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EmpiricalNull":
        return cls(float(data["location"]), float(data["scale"]), int(data.get("count", 0)))


def fit_empirical_null(r, min_values: int = 100) -> EmpiricalNull:
    """
    Median and Sn scale of probit(r).

    Args:
        r: Randomized p-values (array or RandomizedPValues)
        min_values: Minimum number of values accepted

    Returns:
        EmpiricalNull
    """
    values = r.r if isinstance(r, RandomizedPValues) else np.asarray(r, dtype=float)
    if values.size < min_values:
        raise validation_error(
            f"Empirical null needs at least {min_values} values, got {values.size}",
            error_code="insufficient_data",
            invalid_fields={"r": f"Fewer than {min_values} values"},
        )
    z = probit(values)
    location = float(np.median(z))
    scale = sn_scale(z)
    if not scale > 0:
        raise numeric_error(
            "Empirical null scale is zero: the p-values are (nearly) constant",
            error_code="degenerate_input",
        )
    logger.debug(f"Empirical null fitted on {values.size} values: location={location:.4f}, scale={scale:.4f}")
    return EmpiricalNull(location, scale, int(values.size))


@dataclass
class CorrectedIntervals:
    lower: np.ndarray
    upper: np.ndarray
    r_tilde: np.ndarray


def correct_pvalues(
    pvalues: RandomizedPValues,
    enull: Union[None, EmpiricalNull, Mapping[Any, EmpiricalNull]] = None,
    groups=None,
) -> CorrectedIntervals:
    """
    Map intervals through the empirical null and redraw with the same U.

    enull may be a single correction or one per group label (groups gives
    the label of every observation); missing groups are left uncorrected.
    """
    lower = pvalues.lower.copy()
    upper = pvalues.upper.copy()
    if isinstance(enull, EmpiricalNull):
        lower, upper = enull.correct(lower), enull.correct(upper)
    elif enull:
        labels = np.asarray(groups)
        for label, correction in enull.items():
            mask = labels == label
            lower[mask] = correction.correct(lower[mask])
            upper[mask] = correction.correct(upper[mask])
    r_tilde = lower + pvalues.u * (upper - lower)
    return CorrectedIntervals(lower, upper, r_tilde)


# --- Marginal density (Lindsey's method) ---

def natural_spline_basis(z, knots) -> np.ndarray:
    """
    Natural cubic spline basis without intercept, len(knots) - 1 columns.

    Truncated-power construction: linear beyond the boundary knots. Inputs
    are rescaled to the knot span for conditioning.
    """
    knots = np.asarray(knots, dtype=float)
    span = knots[-1] - knots[0]
    u = (np.asarray(z, dtype=float) - knots[0]) / span
    kn = (knots - knots[0]) / span

    def d(k):
        return (np.maximum(u - kn[k], 0.0) ** 3 - np.maximum(u - kn[-1], 0.0) ** 3) / (kn[-1] - kn[k])

    last = d(len(kn) - 2)
    columns = [u] + [d(k) - last for k in range(len(kn) - 2)]
    return np.column_stack(columns)


def _design(z, knots) -> np.ndarray:
    basis = natural_spline_basis(z, knots)
    return np.column_stack([np.ones(basis.shape[0]), basis])


def _poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    return float(2.0 * np.sum(special.xlogy(y, y) - special.xlogy(y, mu) - (y - mu)))


@dataclass
class MarginalDensity:
    """
    Log-spline density of p-values, fitted on the probit scale.

    log g(z) = B(z) . coefficients - log_normalizer is the density of
    z = probit(r); the density of r is f(r) = g(z) / phi(z).
    """
    knots: np.ndarray
    coefficients: np.ndarray
    log_normalizer: float
    df: int
    bins: int
    iterations: int = 0
    deviance: float = float("nan")

    def log_density_probit(self, z) -> np.ndarray:
        return _design(np.atleast_1d(z), self.knots) @ self.coefficients - self.log_normalizer

    def density(self, r) -> np.ndarray:
        """Marginal density f(r) on (0, 1); values are clamped like the fit."""
        z = probit(np.atleast_1d(np.asarray(r, dtype=float)))
        log_phi = -0.5 * z * z - _LOG_SQRT_2PI
        return np.exp(np.minimum(self.log_density_probit(z) - log_phi, 700.0))

    def grid(self, points: int = 512) -> pd.DataFrame:
        r = (np.arange(points) + 0.5) / points
        return pd.DataFrame({"r": r, "f_marg": self.density(r)})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "knots": [float(v) for v in self.knots],
            "coefficients": [float(v) for v in self.coefficients],
            "log_normalizer": float(self.log_normalizer),
            "df": int(self.df),
            "bins": int(self.bins),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MarginalDensity":
        return cls(
            knots=np.asarray(data["knots"], dtype=float),
            coefficients=np.asarray(data["coefficients"], dtype=float),
            log_normalizer=float(data["log_normalizer"]),
            df=int(data["df"]),
            bins=int(data["bins"]),
        )


def fit_marginal_density(
    r,
    df: int = 7,
    bins: int = 120,
    max_iterations: int = 50,
    tolerance: float = 1e-8,
    min_values: int = 200,
) -> MarginalDensity:
    """
    Lindsey's method on the probit scale.

    The probit values are binned into equal bins over their range, the bin
    counts are fitted by Poisson regression on a natural cubic spline basis
    (df degrees of freedom, knots equally spaced over the bin centers) using
    iteratively reweighted least squares, and the fitted log intensity is
    normalized over the probit clamp domain.

    Args:
        r: p-values in [0, 1]
        df: Spline degrees of freedom, 3..15
        bins: Number of histogram bins
        max_iterations: IRLS iteration cap
        tolerance: Relative deviance change that counts as converged
        min_values: Minimum number of values accepted

    Returns:
        MarginalDensity
    """
    errors = {}
    if not (isinstance(df, (int, np.integer)) and 3 <= df <= 15):
        errors["df"] = "Must be an integer in [3, 15]"
    if bins < df + 2:
        errors["bins"] = f"Must be at least df + 2 = {df + 2}"
    if errors:
        raise validation_error("Invalid marginal density settings", "parameter_out_of_range", errors)

    values = np.asarray(r, dtype=float).ravel()
    if values.size < min_values:
        raise validation_error(
            f"Marginal density needs at least {min_values} values, got {values.size}",
            error_code="insufficient_data",
            invalid_fields={"r": f"Fewer than {min_values} values"},
        )

    z = probit(values)
    lo, hi = float(z.min()), float(z.max())
    if hi - lo < 1e-9:
        raise numeric_error("All p-values coincide; no density can be fitted", error_code="degenerate_input")
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(z, bins=edges)
    y = counts.astype(float)
    centers = 0.5 * (edges[:-1] + edges[1:])
    knots = np.quantile(centers, np.linspace(0.0, 1.0, df + 1))
    X = _design(centers, knots)

    # IRLS for the log-linear Poisson model
    mu = y + 0.5
    eta = np.log(mu)
    deviance_old = _poisson_deviance(y, mu)
    converged = False
    iteration = 0
    coefficients = None
    for iteration in range(1, max_iterations + 1):
        working = eta + (y - mu) / mu
        sqrt_w = np.sqrt(mu)
        proposal, *_ = np.linalg.lstsq(X * sqrt_w[:, None], working * sqrt_w, rcond=None)
        eta = np.minimum(X @ proposal, 700.0)
        mu = np.exp(eta)
        deviance = _poisson_deviance(y, mu)
        # step halving when the deviance goes up
        halvings = 0
        while coefficients is not None and deviance > deviance_old * (1.0 + 1e-12) and halvings < 30:
            proposal = 0.5 * (proposal + coefficients)
            eta = np.minimum(X @ proposal, 700.0)
            mu = np.exp(eta)
            deviance = _poisson_deviance(y, mu)
            halvings += 1
        coefficients = proposal
        logger.debug(f"IRLS iteration {iteration}: deviance={deviance:.10g}")
        if abs(deviance - deviance_old) / (abs(deviance) + 0.1) < tolerance:
            converged = True
            break
        deviance_old = deviance
    if not converged:
        raise numeric_error(
            f"Marginal density fit did not converge in {max_iterations} iterations",
            error_code="non_convergence",
            related_options=["marginal_df", "marginal_bins", "max_iterations"],
        )

    # Normalize over the probit clamp domain
    z_grid = np.linspace(probit(0.0), probit(1.0), 20001)
    log_g = _design(z_grid, knots) @ coefficients
    shift = float(log_g.max())
    mass = integrate.trapezoid(np.exp(log_g - shift), z_grid)
    log_normalizer = shift + math.log(mass)

    logger.debug(f"Marginal density: df={df}, bins={bins}, iterations={iteration}, deviance={deviance:.4f}")
    return MarginalDensity(knots, coefficients, log_normalizer, int(df), int(bins), iteration, deviance)


# --- Local fdr ---

@dataclass
class FdrTable:
    """Per-observation p-values, corrected intervals, marginal density and fdr."""
    ids: List[str]
    r: np.ndarray
    r_tilde: np.ndarray
    interval_lo: np.ndarray
    interval_hi: np.ndarray
    f_marg: np.ndarray
    fdr: np.ndarray
    p_conventional: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.p_conventional is None:
            self.p_conventional = np.full(len(self.ids), np.nan)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def empty(cls) -> "FdrTable":
        none = np.empty(0)
        return cls([], none, none.copy(), none.copy(), none.copy(), none.copy(), none.copy(), none.copy())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "id": list(self.ids),
            "r": self.r,
            "r_tilde": self.r_tilde,
            "interval_lo": self.interval_lo,
            "interval_hi": self.interval_hi,
            "f_marg": self.f_marg,
            "fdr": self.fdr,
            "p_conventional": self.p_conventional,
        }, columns=FDR_TABLE_COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "FdrTable":
        missing = [c for c in FDR_TABLE_COLUMNS[:-1] if c not in frame.columns]
        if missing:
            raise validation_error(
                f"fdr table is missing columns: {', '.join(missing)}",
                error_code="invalid_model_document",
            )
        conventional = frame["p_conventional"].to_numpy(float) if "p_conventional" in frame else None
        return cls(
            ids=frame["id"].astype(str).tolist(),
            r=frame["r"].to_numpy(float),
            r_tilde=frame["r_tilde"].to_numpy(float),
            interval_lo=frame["interval_lo"].to_numpy(float),
            interval_hi=frame["interval_hi"].to_numpy(float),
            f_marg=frame["f_marg"].to_numpy(float),
            fdr=frame["fdr"].to_numpy(float),
            p_conventional=conventional,
        )


def local_fdr(
    pvalues: RandomizedPValues,
    enull: Union[None, EmpiricalNull, Mapping[Any, EmpiricalNull]],
    marg: MarginalDensity,
    ids: Optional[Sequence[str]] = None,
    groups=None,
) -> FdrTable:
    """
    fdr = min(1, (b - a) / (f_marg((a + b) / 2) (b - a))) = min(1, 1 / f_marg(midpoint))
    over the corrected interval [a, b]. The ratio keeps its limit when the
    interval collapses in floating point; zero marginal density gives fdr = 1.

    Args:
        pvalues: Randomized p-values of the observations
        enull: None, one empirical null, or one per group
        marg: Marginal density fitted on the corrected values
        ids: Observation labels (defaults to their indices)
        groups: Group label per observation when enull is a mapping

    Returns:
        FdrTable
    """
    corrected = correct_pvalues(pvalues, enull, groups)
    a, b = corrected.lower, corrected.upper
    midpoint = 0.5 * (a + b)
    f_marg = marg.density(midpoint)
    with np.errstate(divide="ignore"):
        fdr = np.where(f_marg > 0, np.minimum(1.0, 1.0 / f_marg), 1.0)
    if ids is None:
        ids = [str(i) for i in range(len(pvalues))]
    return FdrTable(
        ids=list(ids),
        r=pvalues.r,
        r_tilde=corrected.r_tilde,
        interval_lo=a,
        interval_hi=b,
        f_marg=f_marg,
        fdr=fdr,
        p_conventional=pvalues.conventional,
    )


# --- Model document ---

def fdr_model_document(
    marg: MarginalDensity,
    enull: Union[None, EmpiricalNull, Mapping[Any, EmpiricalNull]] = None,
) -> Dict[str, Any]:
    """JSON-ready description of a fitted empirical null and marginal density."""
    if isinstance(enull, EmpiricalNull):
        nulls = {"all": enull.to_dict()}
    elif enull:
        nulls = {str(k): v.to_dict() for k, v in enull.items()}
    else:
        nulls = {}
    return {"format_version": MODEL_FORMAT_VERSION, "empirical_null": nulls, "marginal": marg.to_dict()}


# --- Theorem checks ---

@dataclass
class TheoremReport:
    """
    Both sides of the uniformity identities for an assumed null F and a true
    law G, with H the law of the randomized p-value:
    KL(H || Unif) = KL(G || F), KL(Unif || H) = KL(F || G),
    sup |H - Unif| = sup |F - G|.
    """
    kl_fg: float
    kl_gf: float
    kolmogorov: float
    kl_h_unif: float
    kl_unif_h: float
    kolmogorov_h: float
    knots: np.ndarray = field(repr=False, default=None)
    law: np.ndarray = field(repr=False, default=None)

    def pairs(self) -> List[tuple]:
        return [
            ("kl_h_unif_vs_kl_gf", self.kl_h_unif, self.kl_gf),
            ("kl_unif_h_vs_kl_fg", self.kl_unif_h, self.kl_fg),
            ("kolmogorov_h_vs_kolmogorov_fg", self.kolmogorov_h, self.kolmogorov),
        ]

    @property
    def max_deviation(self) -> float:
        worst = 0.0
        for _, lhs, rhs in self.pairs():
            if math.isinf(lhs) and math.isinf(rhs):
                continue
            worst = max(worst, abs(lhs - rhs))
        return worst


def _segment_kl(mass: np.ndarray, width: np.ndarray) -> float:
    """Integral of h log h over segments where h = mass / width."""
    keep = mass > 0
    if np.any(width[keep] == 0):
        return float("inf")
    return float(np.sum(mass[keep] * np.log(mass[keep] / width[keep])))


def verify_theorem(f: DiscreteDist, g: DiscreteDist) -> TheoremReport:
    """
    Law of the randomized p-value when the null F is assumed but G is true.

    H is piecewise linear with knots F(x); on [F-(x), F(x)] its density is
    P_G(x) / P_F(x). Truncated tails form one final segment. The left-hand
    sides are integrals over H's segments; the right-hand sides come from
    the pmfs through kl_divergence and kolmogorov_distance.
    """
    support = np.union1d(f.support, g.support)
    width = np.append(f.on_support(support), f.truncated_mass)
    mass = np.append(g.on_support(support), g.truncated_mass)
    knots = np.concatenate([[0.0], np.cumsum(width)])
    law = np.concatenate([[0.0], np.cumsum(mass)])

    kl_h_unif = _segment_kl(mass, width)
    kl_unif_h = _segment_kl(width, mass)
    kolmogorov_h = float(np.max(np.abs(law - knots)))

    return TheoremReport(
        kl_fg=kl_divergence(f, g),
        kl_gf=kl_divergence(g, f),
        kolmogorov=kolmogorov_distance(f, g),
        kl_h_unif=kl_h_unif,
        kl_unif_h=kl_unif_h,
        kolmogorov_h=kolmogorov_h,
        knots=knots,
        law=law,
    )


def random_pair(rng: np.random.Generator, max_support: int = 20):
    """Two random laws on a common finite support."""
    size = int(rng.integers(2, max_support + 1))
    support = np.arange(size)
    f = DiscreteDist(support, rng.dirichlet(np.ones(size)))
    g = DiscreteDist(support, rng.dirichlet(np.ones(size)))
    return f, g


def theorem_suite(pairs: int = 50, seed: int = 0, max_support: int = 20) -> List[TheoremReport]:
    rng = block_generator(seed, AUXILIARY_STREAM, 0)
    reports = []
    for _ in range(pairs):
        f, g = random_pair(rng, max_support)
        reports.append(verify_theorem(f, g))
    return reports
