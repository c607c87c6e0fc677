"""
Hierarchical sequencing-error model.

Unmatched design:
    logit p_ij ~ Normal(logit mu_i + delta_j, sigma_j^2),  x_ij ~ Binomial(N_ij, p_ij)
Matched design adds the tumor layer:
    logit q_ij ~ Normal(logit p_ij + eta_j, tau_j^2),      y_ij ~ Binomial(M_ij, q_ij)

The logit-normal mixing law is replaced by Beta(1/(sigma^2 (1-mu)), 1/(sigma^2 mu)),
which makes every null a beta-binomial (or a finite mixture of them).
"""
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize, special

from rarevar.models.discrete_fdr import BetaBinomialNulls, MixtureBetaBinomialNulls, MODEL_FORMAT_VERSION
from rarevar.models.pileup import MatchedPileup, PileupMatrix, RegionMap
from rarevar.utils.error_handling import numeric_error, validation_error
from rarevar.utils.statfun import betabinom_logpmf, expit, logit, median_variance_factor
from rarevar.utils.validation import validate_model_document

logger = logging.getLogger(__name__)

SIGMA_BOUNDS = (1e-4, 3.0)
SIGMA_XATOL = 1e-5
BOUNDARY_MARGIN = 1e-3
MIN_DELTA_POSITIONS = 50
MIN_REGION_POSITIONS = 10
LOW_DEPTH_INFORMATION = 10.0
RATE_CLIP = 1e-12

HOM_REF, HET, HOM_ALT = 0, 1, 2
GENOTYPE_LABELS = ("hom_ref", "het", "hom_alt")


# --- Observed logit rates ---

def logit_observed_rates(m: PileupMatrix, pseudocount: float = 0.5) -> np.ndarray:
    """logit((x + c) / (N + 2c)) per cell, NaN where N = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = (m.x + pseudocount) / (m.n + 2.0 * pseudocount)
        return np.where(m.n > 0, logit(rates), np.nan)


def _nanmedian(values: np.ndarray, axis: int) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmedian(values, axis=axis)


def _cell_center(mu: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """logit mu + delta as a (positions, samples) array; mu may be per cell."""
    mu = np.asarray(mu, dtype=float)
    base = logit(mu) if mu.ndim == 2 else logit(mu)[:, None]
    return base + np.asarray(delta, dtype=float)[None, :]


def _binomial_logit_variance(n: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Delta-method sampling variance of logit(x/N): 1 / (N p (1 - p))."""
    p = expit(center)
    with np.errstate(divide="ignore"):
        return 1.0 / (n * p * (1.0 - p))


# --- Parameter containers ---

@dataclass(eq=False)
class GenotypeAssignment:
    """
    Germline genotypes at candidate positions.

    genotypes and posteriors are indexed by (candidate, sample); genotype_mu
    holds the per-genotype rates (hom-ref, het, hom-alt) of each candidate.
    """
    candidates: np.ndarray
    genotypes: np.ndarray
    posteriors: np.ndarray
    genotype_mu: np.ndarray
    inflated: np.ndarray
    weights: np.ndarray
    inflation: float = 1.5

    def full_genotypes(self, n_positions: int, n_samples: int) -> np.ndarray:
        out = np.zeros((n_positions, n_samples), dtype=np.int64)
        out[self.candidates] = self.genotypes
        return out

    def inflated_positions(self, n_positions: int) -> np.ndarray:
        out = np.zeros(n_positions, dtype=bool)
        out[self.candidates] = self.inflated
        return out

    def counts(self) -> Dict[str, int]:
        return {label: int(np.sum(self.genotypes == g)) for g, label in enumerate(GENOTYPE_LABELS)}


@dataclass(eq=False)
class SigmaFit:
    """Per-sample sigma with the per-region fits and any method flags."""
    sigma: np.ndarray
    region_sigma: Optional[np.ndarray] = None
    regions: Optional[np.ndarray] = None
    methods: List[str] = field(default_factory=list)
    flags: Dict[str, List[str]] = field(default_factory=dict)


@dataclass(eq=False)
class ErrorModelParams:
    """
    Fitted mu_i, delta_j, sigma_j of the unmatched hierarchy.

    mu is NaN at positions that could not be estimated. mu_se is the
    logit-scale standard error of the reference consensus, used when the
    model scores samples that did not take part in the fit.
    """
    contigs: np.ndarray
    coords: np.ndarray
    samples: List[str]
    mu: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    mu_se: Optional[np.ndarray] = None
    region_ids: Optional[np.ndarray] = None
    region_sigma: Optional[np.ndarray] = None
    genotypes: Optional[GenotypeAssignment] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.contigs = np.asarray(self.contigs, dtype=object)
        self.coords = np.asarray(self.coords, dtype=np.int64)
        self.samples = list(self.samples)
        self.mu = np.asarray(self.mu, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.mu_se is None:
            self.mu_se = np.zeros(self.mu.shape)
        self.mu_se = np.asarray(self.mu_se, dtype=float)

        errors = {}
        finite = self.mu[np.isfinite(self.mu)]
        if np.any((finite <= 0) | (finite >= 1)):
            errors["mu"] = "Must lie in (0, 1)"
        if not np.all(self.sigma > 0):
            errors["sigma"] = "Must be > 0"
        if self.delta.shape != (len(self.samples),) or self.sigma.shape != (len(self.samples),):
            errors["samples"] = "delta and sigma need one value per sample"
        if self.mu.shape != self.coords.shape:
            errors["mu"] = "Need one rate per position"
        if errors:
            raise validation_error("Invalid error model parameters", "parameter_out_of_range", errors)

    @property
    def n_positions(self) -> int:
        return self.coords.size

    @property
    def estimable(self) -> np.ndarray:
        return np.isfinite(self.mu)

    def matches(self, m: PileupMatrix) -> bool:
        return (self.n_positions == m.n_positions and np.array_equal(self.coords, m.coords)
                and list(self.contigs) == list(m.contigs))

    def cell_logit_rate(self, i, j) -> np.ndarray:
        """logit of the null rate at cells (i, j), genotype-aware."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        mu = self.mu[i]
        if self.genotypes is not None:
            codes = self.genotypes.full_genotypes(self.n_positions, len(self.samples))[i, j]
            per_genotype = np.repeat(self.mu[:, None], 3, axis=1)
            per_genotype[self.genotypes.candidates] = self.genotypes.genotype_mu
            mu = per_genotype[i, codes]
        return logit(mu) + self.delta[j]

    def cell_sigma(self, i, j, consensus_error: bool = False) -> np.ndarray:
        """sigma_j, inflated at ambiguously genotyped positions, plus the consensus SE if asked."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        sigma = self.sigma[j].astype(float)
        if self.genotypes is not None:
            inflated = self.genotypes.inflated_positions(self.n_positions)[i]
            sigma = np.where(inflated, sigma * self.genotypes.inflation, sigma)
        if consensus_error:
            sigma = np.sqrt(sigma ** 2 + self.mu_se[i] ** 2)
        return sigma

    def for_samples(self, names: Sequence[str], delta, sigma) -> "ErrorModelParams":
        """The same positional fit carried over to other samples (genotype calls dropped)."""
        genotypes = None
        if self.genotypes is not None:
            genotypes = replace(self.genotypes,
                                genotypes=np.zeros((self.genotypes.candidates.size, len(names)), dtype=np.int64),
                                posteriors=np.zeros((self.genotypes.candidates.size, len(names), 3)))
        return ErrorModelParams(
            self.contigs, self.coords, list(names), self.mu, delta, sigma, self.mu_se,
            self.region_ids, None, genotypes, dict(self.metadata),
        )

    # Serialization

    def to_document(self) -> Dict[str, Any]:
        def nullable(values):
            return [None if not np.isfinite(v) else float(v) for v in values]

        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "design": "unmatched",
            "positions": {
                "contig": [str(c) for c in self.contigs],
                "pos": [int(p) for p in self.coords],
                "mu": nullable(self.mu),
                "mu_se": nullable(self.mu_se),
            },
            "samples": {
                "id": list(self.samples),
                "delta": [float(v) for v in self.delta],
                "sigma": [float(v) for v in self.sigma],
            },
            "metadata": dict(self.metadata),
        }
        if self.region_ids is not None:
            doc["positions"]["region_id"] = [int(r) for r in self.region_ids]
        if self.region_sigma is not None:
            doc["samples"]["region_sigma"] = [nullable(row) for row in self.region_sigma]
        if self.genotypes is not None:
            g = self.genotypes
            doc["genotypes"] = {
                "index": [int(i) for i in g.candidates],
                "calls": g.genotypes.astype(int).tolist(),
                "mu": g.genotype_mu.astype(float).tolist(),
                "inflated": [bool(v) for v in g.inflated],
                "inflation": float(g.inflation),
            }
        return doc

    @classmethod
    def from_document(cls, doc: Dict[str, Any]) -> "ErrorModelParams":
        is_valid, errors = validate_model_document(doc)
        if not is_valid:
            raise validation_error("Invalid model document", "invalid_model_document", errors)

        def floats(values):
            return np.array([np.nan if v is None else v for v in values], dtype=float)

        positions, samples = doc["positions"], doc["samples"]
        genotypes = None
        if "genotypes" in doc:
            g = doc["genotypes"]
            calls = np.asarray(g["calls"], dtype=np.int64).reshape(len(g["index"]), len(samples["id"]))
            genotypes = GenotypeAssignment(
                candidates=np.asarray(g["index"], dtype=np.int64),
                genotypes=calls,
                posteriors=np.eye(3)[calls],
                genotype_mu=np.asarray(g["mu"], dtype=float).reshape(-1, 3),
                inflated=np.asarray(g["inflated"], dtype=bool),
                weights=np.full(3, 1.0 / 3.0),
                inflation=float(g["inflation"]),
            )
        region_sigma = None
        if "region_sigma" in samples:
            region_sigma = np.array([floats(row) for row in samples["region_sigma"]])
        return cls(
            contigs=positions["contig"],
            coords=positions["pos"],
            samples=samples["id"],
            mu=floats(positions["mu"]),
            delta=samples["delta"],
            sigma=samples["sigma"],
            mu_se=floats(positions["mu_se"]),
            region_ids=np.asarray(positions["region_id"]) if "region_id" in positions else None,
            region_sigma=region_sigma,
            genotypes=genotypes,
            metadata=dict(doc.get("metadata", {})),
        )


@dataclass(eq=False)
class MatchedModelParams:
    """Normal-tissue fit plus the tumor layer (eta_j, tau_j)."""
    base: ErrorModelParams
    eta: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        S = len(self.base.samples)
        if self.eta.shape != (S,) or self.tau.shape != (S,):
            raise validation_error("eta and tau need one value per sample", error_code="unpaired_samples")
        if not np.all(self.tau > 0):
            raise validation_error("tau must be > 0", "parameter_out_of_range", {"tau": "Must be > 0"})

    @property
    def samples(self) -> List[str]:
        return self.base.samples

    def to_document(self) -> Dict[str, Any]:
        doc = self.base.to_document()
        doc["design"] = "matched"
        doc["samples"]["eta"] = [float(v) for v in self.eta]
        doc["samples"]["tau"] = [float(v) for v in self.tau]
        return doc

    @classmethod
    def from_document(cls, doc: Dict[str, Any]) -> "MatchedModelParams":
        base = ErrorModelParams.from_document(doc)
        if doc["design"] != "matched":
            raise validation_error("Model document is not a matched model", "invalid_model_document",
                                   {"design": "Expected 'matched'"})
        return cls(base, doc["samples"]["eta"], doc["samples"]["tau"])


def load_model_document(doc: Dict[str, Any]) -> Union[ErrorModelParams, MatchedModelParams]:
    if doc.get("design") == "matched":
        return MatchedModelParams.from_document(doc)
    return ErrorModelParams.from_document(doc)


# --- Beta approximation ---

def beta_approx(mu, sigma) -> Tuple[Any, Any]:
    """
    Beta shapes whose logit has mean ~ logit mu and variance ~ sigma^2.

    Args:
        mu: Rate in (0, 1)
        sigma: Logit-scale SD, > 0

    Returns:
        (alpha, beta) = (1 / (sigma^2 (1 - mu)), 1 / (sigma^2 mu))
    """
    mu_arr = np.asarray(mu, dtype=float)
    sigma_arr = np.asarray(sigma, dtype=float)
    errors = {}
    if np.any((mu_arr <= 0) | (mu_arr >= 1)) or not np.all(np.isfinite(mu_arr)):
        errors["mu"] = "Must lie strictly inside (0, 1)"
    if np.any(sigma_arr <= 0) or not np.all(np.isfinite(sigma_arr)):
        errors["sigma"] = "Must be > 0"
    if errors:
        raise validation_error("Invalid Beta approximation inputs", "parameter_out_of_range", errors)
    variance = sigma_arr ** 2
    alpha = 1.0 / (variance * (1.0 - mu_arr))
    beta = 1.0 / (variance * mu_arr)
    if np.ndim(mu) == 0 and np.ndim(sigma) == 0:
        return float(alpha), float(beta)
    return alpha, beta


def beta_approx_moments(mu, sigma, corrected: bool = True) -> Dict[str, Any]:
    """
    Leading-order moments of logit p under beta_approx(mu, sigma).

    With corrected=False the skewness and kurtosis use the higher powers
    sigma (mu^3 - (1-mu)^3) and 2 sigma^2 (mu^4 + (1-mu)^4), which only agree
    with the expansion when mu is near 0.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if corrected:
        skewness = sigma * (mu ** 2 - (1.0 - mu) ** 2)
        kurtosis = 2.0 * sigma ** 2 * (mu ** 3 + (1.0 - mu) ** 3)
    else:
        skewness = sigma * (mu ** 3 - (1.0 - mu) ** 3)
        kurtosis = 2.0 * sigma ** 2 * (mu ** 4 + (1.0 - mu) ** 4)
    return {"mean": logit(mu), "variance": sigma ** 2, "skewness": skewness, "excess_kurtosis": kurtosis}


# --- Estimators ---

def estimate_mu(reference: PileupMatrix, pseudocount: float = 0.5, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-position consensus rate from the reference samples.

    mu_i = expit(median_j logit((x_ij + c) / (N_ij + 2c))) over samples with
    N > 0 (and mask true when given). Positions without a usable sample are
    NaN, the un-estimable flag.
    """
    z = logit_observed_rates(reference, pseudocount)
    if mask is not None:
        z = np.where(mask, z, np.nan)
    mu = expit(_nanmedian(z, axis=1))
    flagged = int(np.sum(~np.isfinite(mu)))
    if flagged:
        logger.info(f"{flagged} of {mu.size} positions have no usable reference sample")
    return mu


def estimate_delta(
    m: PileupMatrix,
    mu: np.ndarray,
    pseudocount: float = 0.5,
    min_positions: int = MIN_DELTA_POSITIONS,
    mask: Optional[np.ndarray] = None,
    strict: bool = True,
) -> np.ndarray:
    """
    Per-sample logit shift: median over positions of logit rate - logit mu.

    Args:
        m: Count matrix
        mu: Per-position rates, or per-cell rates of the same shape as m
        pseudocount: Added before the logit
        min_positions: Usable positions required per sample
        mask: Optional cells to use
        strict: Raise when a sample is short of positions; otherwise that
                sample gets delta = 0 with a warning

    Returns:
        delta, one value per sample
    """
    z = logit_observed_rates(m, pseudocount)
    mu = np.asarray(mu, dtype=float)
    base = logit(mu) if mu.ndim == 2 else logit(mu)[:, None]
    residual = z - base
    if mask is not None:
        residual = np.where(mask, residual, np.nan)
    usable = np.isfinite(residual)
    delta = np.zeros(m.n_samples)
    for j in range(m.n_samples):
        count = int(usable[:, j].sum())
        if count < min_positions:
            if strict:
                raise validation_error(
                    f"Sample '{m.samples[j]}' has {count} usable positions; {min_positions} are needed for delta",
                    error_code="insufficient_data",
                    invalid_fields={"positions": f"Fewer than {min_positions} usable positions"},
                )
            logger.warning(f"Sample '{m.samples[j]}' has {count} usable positions; delta set to 0")
            continue
        delta[j] = float(np.median(residual[usable[:, j], j]))
    return delta


def _sigma_negloglik(sigma: float, x, n, center, extra) -> float:
    s2 = sigma * sigma + extra
    p = expit(center)
    alpha = 1.0 / (s2 * (1.0 - p))
    beta = 1.0 / (s2 * p)
    return -float(np.sum(betabinom_logpmf(x, n, alpha, beta)))


def _sigma_mle(x, n, center, extra, label: str) -> float:
    result = optimize.minimize_scalar(
        _sigma_negloglik, bounds=SIGMA_BOUNDS, method="bounded",
        args=(x, n, center, extra), options={"xatol": SIGMA_XATOL},
    )
    if result.x > SIGMA_BOUNDS[1] - BOUNDARY_MARGIN:
        raise numeric_error(
            f"sigma search for {label} hit the upper bound {SIGMA_BOUNDS[1]}",
            error_code="not_bracketed",
            recovery_hint="Check the sample for contamination or a mislabelled reference",
        )
    logger.debug(f"sigma mle for {label}: {result.x:.5f} ({result.nfev} evaluations)")
    return float(result.x)


def _sigma_moments(z, n, center, extra) -> Tuple[float, List[str]]:
    flags = []
    residual = z - center
    bv = _binomial_logit_variance(n, center)
    p = expit(center)
    if np.median(n * p * (1.0 - p)) < LOW_DEPTH_INFORMATION:
        flags.append("low_depth")
    variance = float(np.mean(residual ** 2) - np.mean(bv) - np.mean(extra))
    if variance <= 0:
        flags.append("moments_negative")
        return float("nan"), flags
    return float(np.sqrt(variance)), flags


def estimate_sigma(
    m: PileupMatrix,
    mu: np.ndarray,
    delta: np.ndarray,
    method: str = "mle",
    regions: Optional[RegionMap] = None,
    quantile: float = 0.9,
    pseudocount: float = 0.5,
    mask: Optional[np.ndarray] = None,
    extra_variance: Optional[np.ndarray] = None,
) -> SigmaFit:
    """
    Per-sample logit-scale noise SD.

    moments matches mean squared logit residuals to 1/(N p (1-p)) + sigma^2;
    a nonpositive estimate is flagged and the sample falls back to mle.
    mle maximizes the beta-binomial likelihood over sigma on [1e-4, 3].
    With regions, sigma is fitted per (sample, region) and the configured
    quantile across regions is reported.

    Args:
        m: Count matrix
        mu: Per-position rates, or per-cell rates of m's shape
        delta: Per-sample shifts
        method: 'moments' or 'mle'
        regions: Optional region partition of the positions
        quantile: Quantile of region-wise sigmas reported, in [0.5, 1)
        pseudocount: Added before logits in the moments method
        mask: Optional cells to use
        extra_variance: Optional per-cell variance already explained (for
                        example the error of a leave-one-out consensus)

    Returns:
        SigmaFit
    """
    if method not in ("moments", "mle"):
        raise validation_error(f"Unknown sigma method '{method}'", invalid_fields={"method": "Must be moments or mle"})
    if not 0.5 <= quantile < 1:
        raise validation_error("Region quantile out of range", "parameter_out_of_range",
                               {"quantile": "Must be in [0.5, 1)"})

    center = _cell_center(mu, delta)
    z = logit_observed_rates(m, pseudocount)
    extra = np.zeros(center.shape) if extra_variance is None else np.asarray(extra_variance, dtype=float)
    usable = (m.n > 0) & np.isfinite(center) & np.isfinite(extra)
    if mask is not None:
        usable &= mask

    if regions is not None:
        if len(regions) != m.n_positions:
            raise validation_error("Region map does not match the positions", error_code="missing_region")
        region_labels = regions.regions
        groups = [regions.region_ids == r for r in region_labels]
    else:
        region_labels = None
        groups = [np.ones(m.n_positions, dtype=bool)]

    fit_sigma = np.full((m.n_samples, len(groups)), np.nan)
    methods, flags = [], {}
    for j, sample in enumerate(m.samples):
        used = method
        for g, in_group in enumerate(groups):
            cells = usable[:, j] & in_group
            minimum = MIN_REGION_POSITIONS if regions is not None else 2
            if cells.sum() < minimum:
                continue
            label = sample if regions is None else f"{sample} region {region_labels[g]}"
            args = (m.x[cells, j], m.n[cells, j], center[cells, j], extra[cells, j])
            if method == "moments":
                value, cell_flags = _sigma_moments(z[cells, j], args[1], args[2], args[3])
                if cell_flags:
                    flags.setdefault(sample, [])
                    flags[sample].extend(f for f in cell_flags if f not in flags[sample])
                if not np.isfinite(value):
                    logger.warning(f"Method-of-moments variance for {label} is negative; using mle")
                    used = "mle"
                    value = _sigma_mle(*args, label)
            else:
                value = _sigma_mle(*args, label)
            fit_sigma[j, g] = value
        methods.append(used)

    if regions is None:
        sigma = fit_sigma[:, 0]
    else:
        sigma = np.array([np.quantile(row[np.isfinite(row)], quantile) if np.isfinite(row).any() else np.nan
                          for row in fit_sigma])
    missing = [m.samples[j] for j in np.flatnonzero(~np.isfinite(sigma))]
    if missing:
        raise validation_error(
            f"Too few usable positions to estimate sigma for: {', '.join(missing)}",
            error_code="insufficient_data",
        )
    return SigmaFit(
        sigma=sigma,
        region_sigma=fit_sigma if regions is not None else None,
        regions=region_labels,
        methods=methods,
        flags=flags,
    )


# --- Genotyping ---

def default_candidates(m: PileupMatrix, min_depth: int = 20) -> np.ndarray:
    """Positions where some sample looks heterozygous or homozygous-alternate."""
    rates = m.error_rates()
    deep = m.n >= min_depth
    with np.errstate(invalid="ignore"):
        looks_variant = deep & (((rates >= 0.2) & (rates <= 0.8)) | (rates >= 0.95))
    return np.flatnonzero(looks_variant.any(axis=1))


def genotype_positions(
    m: PileupMatrix,
    candidates=None,
    mu: Optional[np.ndarray] = None,
    inflation: float = 1.5,
    pseudocount: float = 0.5,
    max_iterations: int = 100,
    tolerance: float = 1e-8,
) -> GenotypeAssignment:
    """
    Three-component binomial mixture with fixed centers {mu_i, 1/2, 1 - mu_i}.

    Mixture weights are shared across candidates and fitted by EM; each
    (candidate, sample) is assigned its maximum-posterior genotype. Per
    genotype rates are re-estimated from the assigned samples (components
    with fewer than two samples keep their center) and candidates showing
    more than one genotype are flagged for sigma inflation.
    """
    if candidates is None:
        candidates = default_candidates(m)
    candidates = np.asarray(candidates)
    if candidates.dtype == bool:
        candidates = np.flatnonzero(candidates)
    candidates = candidates.astype(np.int64)
    K, S = candidates.size, m.n_samples

    rates = m.error_rates()
    if mu is None:
        low = np.where(rates < 0.2, rates, np.nan)
        baseline = _nanmedian(np.where(low > 0, low, np.nan), axis=1)
        fallback = _nanmedian(baseline, axis=0) if np.isfinite(baseline).any() else 1e-3
        mu = np.where(np.isfinite(baseline), baseline, fallback)
    base_mu = np.clip(np.asarray(mu, dtype=float)[candidates], 1e-6, 0.1)
    base_mu = np.where(np.isfinite(base_mu), base_mu, 1e-3)

    x = m.x[candidates].astype(float)
    n = m.n[candidates].astype(float)
    centers = np.stack([base_mu, np.full(K, 0.5), 1.0 - base_mu], axis=1)
    loglik = (x[:, :, None] * np.log(centers)[:, None, :]
              + (n - x)[:, :, None] * np.log1p(-centers)[:, None, :])

    weights = np.array([0.9, 0.08, 0.02])
    posteriors = np.zeros((K, S, 3))
    for iteration in range(max_iterations):
        log_post = loglik + np.log(weights)[None, None, :]
        log_post -= special.logsumexp(log_post, axis=2, keepdims=True)
        posteriors = np.exp(log_post)
        if K == 0:
            break
        updated = posteriors.reshape(-1, 3).mean(axis=0)
        updated = np.maximum(updated, 1e-6)
        updated /= updated.sum()
        if np.max(np.abs(updated - weights)) < tolerance:
            weights = updated
            break
        weights = updated

    genotypes = np.argmax(posteriors, axis=2) if K else np.zeros((0, S), dtype=np.int64)
    covered = n > 0
    genotypes = np.where(covered, genotypes, HOM_REF)

    z = (x + pseudocount) / (n + 2.0 * pseudocount)
    genotype_mu = centers.copy()
    for g in range(3):
        assigned = (genotypes == g) & covered
        enough = assigned.sum(axis=1) >= 2
        if enough.any():
            logits = np.where(assigned, logit(np.clip(z, RATE_CLIP, 1 - RATE_CLIP)), np.nan)
            genotype_mu[enough, g] = expit(_nanmedian(logits[enough], axis=1))

    observed = np.array([len(set(genotypes[k][covered[k]].tolist())) for k in range(K)], dtype=np.int64)
    inflated = observed > 1
    logger.info(
        f"Genotyped {K} candidate positions: {int(np.sum(genotypes == HET))} het, "
        f"{int(np.sum(genotypes == HOM_ALT))} hom-alt calls, {int(inflated.sum())} positions inflated"
    )
    return GenotypeAssignment(
        candidates=candidates,
        genotypes=genotypes.astype(np.int64),
        posteriors=posteriors,
        genotype_mu=genotype_mu,
        inflated=inflated,
        weights=weights,
        inflation=float(inflation),
    )


# --- Null laws ---

def null_cdf_unmatched(params: ErrorModelParams, i, j, depth, consensus_error: bool = False) -> BetaBinomialNulls:
    """
    Beta-binomial nulls for cells (i, j) at the given depths.

    The shapes come from beta_approx(expit(logit mu_i + delta_j), sigma_j).
    """
    i = np.atleast_1d(np.asarray(i, dtype=np.int64))
    j = np.broadcast_to(np.asarray(j, dtype=np.int64), i.shape)
    depth = np.broadcast_to(np.asarray(depth, dtype=np.int64), i.shape)
    if not np.all(params.estimable[i]):
        bad = params.contigs[i[~params.estimable[i]][0]], params.coords[i[~params.estimable[i]][0]]
        raise validation_error(f"position {bad[0]}:{bad[1]} has no estimated error rate",
                               error_code="insufficient_data")
    rate = np.clip(expit(params.cell_logit_rate(i, j)), RATE_CLIP, 1 - RATE_CLIP)
    alpha, beta = beta_approx(rate, params.cell_sigma(i, j, consensus_error))
    return BetaBinomialNulls(depth, np.atleast_1d(alpha), np.atleast_1d(beta))


def _gauss_legendre(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    t, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (t + 1.0), 0.5 * w


def _matched_components(params: MatchedModelParams, i, j, x, n, nodes: int):
    """Tumor-rate components: (alpha, beta) per (cell, node) and node weights."""
    base = params.base
    prior_rate = np.clip(expit(base.cell_logit_rate(i, j)), RATE_CLIP, 1 - RATE_CLIP)
    sigma = base.cell_sigma(i, j)
    a0, b0 = beta_approx(prior_rate, sigma)
    a0, b0 = np.atleast_1d(a0), np.atleast_1d(b0)

    u, w = _gauss_legendre(nodes)
    p = special.betaincinv((a0 + x)[:, None], (b0 + n - x)[:, None], u[None, :])
    p = np.clip(p, RATE_CLIP, 1 - RATE_CLIP)
    tumor_center = logit(p) + params.eta[j][:, None]
    tau = np.broadcast_to(params.tau[j][:, None], tumor_center.shape)

    # N = 0 carries no information about p: use the unconditional tumor law
    empty = n == 0
    if np.any(empty):
        unconditional = logit(prior_rate[empty]) + params.eta[j[empty]]
        tumor_center[empty] = unconditional[:, None]
        tau = tau.copy()
        tau[empty] = np.sqrt(sigma[empty] ** 2 + params.tau[j[empty]] ** 2)[:, None]

    q = np.clip(expit(tumor_center), RATE_CLIP, 1 - RATE_CLIP)
    alpha, beta = beta_approx(q, tau)
    return alpha, beta, w


def null_cdf_matched(params: MatchedModelParams, i, j, x, n, tumor_depth, nodes: int = 32) -> MixtureBetaBinomialNulls:
    """
    Conditional null of the tumor count y given the normal observation.

    The Beta prior on p is updated by x of N (conjugate), integrated with
    Gauss-Legendre nodes in posterior quantile space, and each node carries
    the tumor layer logit q ~ Normal(logit p + eta_j, tau_j^2) through the
    Beta approximation. N = 0 falls back to the unconditional tumor law.
    """
    i = np.atleast_1d(np.asarray(i, dtype=np.int64))
    j = np.broadcast_to(np.asarray(j, dtype=np.int64), i.shape)
    x = np.broadcast_to(np.asarray(x, dtype=np.int64), i.shape)
    n = np.broadcast_to(np.asarray(n, dtype=np.int64), i.shape)
    tumor_depth = np.broadcast_to(np.asarray(tumor_depth, dtype=np.int64), i.shape)
    if not np.all(params.base.estimable[i]):
        raise validation_error("null requested at a position without an estimated error rate",
                               error_code="insufficient_data")
    alpha, beta, w = _matched_components(params, i, j, x, n, nodes)
    return MixtureBetaBinomialNulls(tumor_depth, alpha, beta, w)


# --- Fitting ---

def _consensus_variance(
    reference: PileupMatrix, mu_cells: np.ndarray, delta: np.ndarray, sigma: np.ndarray, usable: np.ndarray,
    leave_out: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    kappa(m) * mean_k(sigma_k^2 + 1/(N p (1 - p))) over the usable samples
    that form a median consensus, optionally leaving one sample out.
    Returns the variance and the number of contributing samples per position.
    """
    center = _cell_center(mu_cells, delta)
    total = sigma[None, :] ** 2 + np.where(usable, _binomial_logit_variance(reference.n, center), 0.0)
    keep = usable.copy()
    if leave_out is not None:
        keep[:, leave_out] = False
    count = keep.sum(axis=1)
    mean = np.where(count > 0, np.where(keep, total, 0.0).sum(axis=1) / np.maximum(count, 1), np.nan)
    kappa = np.array([median_variance_factor(int(c)) if c > 0 else np.nan for c in range(reference.n_samples + 1)])
    return kappa[count] * mean, count


def fit_error_model(
    reference: PileupMatrix,
    method: str = "mle",
    regions: Optional[RegionMap] = None,
    quantile: float = 0.9,
    pseudocount: float = 0.5,
    genotyping: str = "auto",
    inflation: float = 1.5,
    calibration_rounds: int = 3,
    min_positions: int = MIN_DELTA_POSITIONS,
) -> ErrorModelParams:
    """
    Fit mu, delta and sigma on reference samples.

    Genotypes come first when enabled; delta and sigma then use hom-ref
    cells only. With two or more reference samples sigma_j is calibrated
    against the consensus of the other samples, whose own error enters as
    known extra variance; the rounds alternate sigma and that variance.

    Args:
        reference: Reference count matrix
        method: 'mle' or 'moments'
        regions: Optional region partition for sigma pooling
        quantile: Region quantile reported as sigma_j
        pseudocount: Logit pseudocount
        genotyping: 'on', 'off' or 'auto' (on when candidates exist)
        inflation: Sigma factor at ambiguously genotyped positions
        calibration_rounds: Alternations of sigma and consensus variance
        min_positions: Usable positions required for delta

    Returns:
        ErrorModelParams
    """
    if reference.n_samples < 1 or reference.n_positions == 0:
        raise validation_error("Reference set is empty", error_code="insufficient_data",
                               invalid_fields={"reference": "Need at least one sample and one position"})
    if genotyping not in ("on", "off", "auto"):
        raise validation_error(f"Unknown genotyping mode '{genotyping}'",
                               invalid_fields={"genotyping": "Must be on, off or auto"})
    logger.info(f"Fitting error model on {reference.n_positions} positions x {reference.n_samples} "
                f"reference samples (method={method})")

    assignment = None
    homref = np.ones(reference.x.shape, dtype=bool)
    if genotyping != "off":
        candidates = regions.candidates if regions is not None and regions.candidates is not None else None
        candidates = default_candidates(reference) if candidates is None else np.flatnonzero(candidates)
        if genotyping == "on" or candidates.size:
            assignment = genotype_positions(reference, candidates, inflation=inflation, pseudocount=pseudocount)
            homref[assignment.candidates] = assignment.genotypes == HOM_REF

    usable = (reference.n > 0) & homref
    mu = estimate_mu(reference, pseudocount, mask=homref)
    if assignment is not None:
        # variant-only candidates keep their hom-ref center
        fill = ~np.isfinite(mu[assignment.candidates])
        mu[assignment.candidates[fill]] = assignment.genotype_mu[fill, HOM_REF]
    estimable = np.isfinite(mu)
    usable &= estimable[:, None]

    S = reference.n_samples
    if S == 1:
        logger.warning("Only one reference sample: sigma absorbs the consensus error of that sample")
        delta = estimate_delta(reference, mu, pseudocount, min_positions, mask=usable)
        fit = estimate_sigma(reference, mu, delta, method, regions, quantile, pseudocount, mask=usable)
        sigma = fit.sigma
    else:
        z = logit_observed_rates(reference, pseudocount)
        z = np.where(usable, z, np.nan)
        mu_loo = np.full(reference.x.shape, np.nan)
        for j in range(S):
            others = np.delete(z, j, axis=1)
            mu_loo[:, j] = expit(_nanmedian(others, axis=1))
        loo_usable = usable & np.isfinite(mu_loo)
        delta = estimate_delta(reference, np.where(loo_usable, mu_loo, 0.5), pseudocount, min_positions,
                               mask=loo_usable)
        sigma = np.zeros(S)
        fit = None
        for round_ in range(max(1, calibration_rounds)):
            extra = np.full(reference.x.shape, np.nan)
            for j in range(S):
                variance, _ = _consensus_variance(reference, mu_loo[:, [j] * S], delta, sigma, usable, leave_out=j)
                extra[:, j] = variance
            fit = estimate_sigma(reference, np.where(loo_usable, mu_loo, 0.5), delta, method, regions, quantile,
                                 pseudocount, mask=loo_usable, extra_variance=extra)
            logger.debug(f"Calibration round {round_ + 1}: sigma={np.round(fit.sigma, 5).tolist()}")
            sigma = fit.sigma

    mu_cells = np.repeat(np.where(estimable, mu, 0.5)[:, None], S, axis=1)
    consensus_var, _ = _consensus_variance(reference, mu_cells, delta, sigma, usable)
    mu_se = np.sqrt(np.where(estimable, consensus_var, np.nan))

    metadata = {
        "method": method,
        "methods_used": fit.methods,
        "flags": fit.flags,
        "pseudocount": pseudocount,
        "quantile": quantile,
        "genotyping": genotyping,
        "reference_samples": list(reference.samples),
    }
    params = ErrorModelParams(
        contigs=reference.contigs,
        coords=reference.coords,
        samples=reference.samples,
        mu=mu,
        delta=delta,
        sigma=sigma,
        mu_se=mu_se,
        region_ids=regions.region_ids if regions is not None else None,
        region_sigma=fit.region_sigma,
        genotypes=assignment,
        metadata=metadata,
    )
    logger.info(
        f"Error model: {int(estimable.sum())} estimable positions, "
        f"delta={np.round(delta, 4).tolist()}, sigma={np.round(sigma, 4).tolist()}"
    )
    return params


def calibrate_samples(
    params: ErrorModelParams,
    m: PileupMatrix,
    pseudocount: float = 0.5,
    min_positions: int = MIN_DELTA_POSITIONS,
) -> ErrorModelParams:
    """
    Carry a reference fit over to new samples.

    delta_j is re-estimated on each new sample against the consensus; sigma_j
    is the median reference sigma, since the new samples may hold the very
    mutations being searched for. Samples without enough usable positions
    get delta = 0 with a warning.
    """
    if not params.matches(m):
        raise validation_error("Model positions differ from the data positions", error_code="position_sets_differ")
    usable = (m.n > 0) & params.estimable[:, None]
    delta = estimate_delta(m, np.where(params.estimable, params.mu, 0.5), pseudocount, min_positions,
                           mask=usable, strict=False)
    sigma = np.full(m.n_samples, float(np.median(params.sigma)))
    return params.for_samples(m.samples, delta, sigma)


def _tau_moments(dz: np.ndarray, bv: np.ndarray) -> float:
    variance = float(np.mean(dz ** 2) - np.mean(bv))
    return float(np.sqrt(variance)) if variance > 0 else float("nan")


def _tau_negloglik(tau: float, params: MatchedModelParams, i, j, x, n, y, M, nodes: int) -> float:
    trial = MatchedModelParams(params.base, params.eta, np.full(params.tau.shape, tau))
    alpha, beta, w = _matched_components(trial, i, j, x, n, nodes)
    logpmf = betabinom_logpmf(y[:, None], M[:, None], alpha, beta)
    return -float(np.sum(special.logsumexp(logpmf, axis=1, b=w[None, :])))


def fit_matched_model(
    data: MatchedPileup,
    method: str = "mle",
    regions: Optional[RegionMap] = None,
    quantile: float = 0.9,
    pseudocount: float = 0.5,
    genotyping: str = "auto",
    inflation: float = 1.5,
    nodes: int = 32,
    min_positions: int = MIN_DELTA_POSITIONS,
) -> MatchedModelParams:
    """
    Fit the normal hierarchy on all normal samples as mutual references,
    then eta_j (median logit tumor-minus-normal difference over hom-ref
    cells) and tau_j (moments, falling back to the conditional likelihood).
    """
    base = fit_error_model(data.normal, method, regions, quantile, pseudocount, genotyping, inflation,
                           min_positions=min_positions)
    normal, tumor = data.normal, data.tumor
    homref = np.ones(normal.x.shape, dtype=bool)
    if base.genotypes is not None:
        homref[base.genotypes.candidates] = base.genotypes.genotypes == HOM_REF
    usable = (normal.n > 0) & (tumor.n > 0) & homref & base.estimable[:, None]

    zn = logit_observed_rates(normal, pseudocount)
    zt = logit_observed_rates(tumor, pseudocount)
    S = normal.n_samples
    eta = np.zeros(S)
    tau = np.zeros(S)
    for j in range(S):
        cells = usable[:, j]
        if cells.sum() < min_positions:
            raise validation_error(
                f"Sample '{normal.samples[j]}' has {int(cells.sum())} usable normal/tumor positions",
                error_code="insufficient_data",
            )
        diff = zt[cells, j] - zn[cells, j]
        eta[j] = float(np.median(diff))
        center = logit(base.mu[cells]) + base.delta[j]
        bv = (_binomial_logit_variance(normal.n[cells, j], center)
              + _binomial_logit_variance(tumor.n[cells, j], center + eta[j]))
        value = _tau_moments(diff - eta[j], bv) if method == "moments" else float("nan")
        if method == "moments" and not np.isfinite(value):
            logger.warning(f"Method-of-moments tau for '{normal.samples[j]}' is negative; using mle")
        if not np.isfinite(value):
            idx = np.flatnonzero(cells)
            provisional = MatchedModelParams(base, eta, np.ones(S))
            args = (provisional, idx, np.full(idx.size, j), normal.x[idx, j], normal.n[idx, j],
                    tumor.x[idx, j], tumor.n[idx, j], nodes)
            result = optimize.minimize_scalar(_tau_negloglik, bounds=SIGMA_BOUNDS, method="bounded",
                                              args=args, options={"xatol": SIGMA_XATOL})
            if result.x > SIGMA_BOUNDS[1] - BOUNDARY_MARGIN:
                raise numeric_error(f"tau search for '{normal.samples[j]}' hit the upper bound",
                                    error_code="not_bracketed")
            value = float(result.x)
        tau[j] = value
    logger.info(f"Tumor layer: eta={np.round(eta, 4).tolist()}, tau={np.round(tau, 4).tolist()}")
    params = MatchedModelParams(base, eta, tau)
    params.base.metadata["design"] = "matched"
    return params
