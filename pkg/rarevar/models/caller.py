"""
Detection pipelines.

Unmatched (reference + clinical samples): upper-tail randomized p-values
against the reference error model, an optional empirical null, a pooled
marginal density and local fdr; a call is fdr <= threshold.

Matched (normal/tumor pairs): p-values of the tumor count under its
conditional null given the normal count, read two-sided through the
marginal density, a per-sample empirical null, and the effect filter
delta_hat = (1 - fdr) (y/M - x/N); a call needs both thresholds.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import special, stats

from rarevar.models.discrete_fdr import (
    EmpiricalNull,
    FdrTable,
    MarginalDensity,
    correct_pvalues,
    fit_empirical_null,
    fit_marginal_density,
    local_fdr,
    randomized_pvalues,
)
from rarevar.models.error_model import (
    ErrorModelParams,
    MatchedModelParams,
    calibrate_samples,
    fit_error_model,
    fit_matched_model,
    null_cdf_matched,
    null_cdf_unmatched,
)
from rarevar.models.pileup import MatchedPileup, PileupMatrix, RegionMap
from rarevar.models.simgen import TruthTable
from rarevar.utils.error_handling import input_error, numeric_error, validation_error
from rarevar.utils.statfun import expit, probit
from rarevar.utils.validation import validate_pipeline_config

logger = logging.getLogger(__name__)

CALL_COLUMNS = ["contig", "pos", "sample", "x", "n", "y", "m", "rate_normal", "rate_tumor",
                "r", "r_tilde", "fdr", "delta_hat", "called", "reasons"]

REASON_ZERO_DEPTH = "zero_depth"
REASON_UNESTIMABLE = "unestimable_position"
REASON_BELOW_NULL = "below_null"
REASON_FDR = "fdr_above_threshold"
REASON_DELTA = "delta_below_threshold"
REASON_PASS = "pass"


# --- Configuration ---

@dataclass
class PipelineConfig:
    fdr_threshold: float = 0.1
    fdr_threshold_strict: float = 0.01
    delta_threshold: float = 0.25
    pvalue_mode: str = "randomized"
    seed: int = 0
    marginal_df: int = 7
    marginal_bins: int = 120
    empirical_null: str = "auto"
    region_quantile: float = 0.9
    sigma_method: str = "mle"
    pseudocount: float = 0.5
    quadrature_nodes: int = 32
    genotyping: str = "auto"
    genotype_inflation: float = 1.5
    delta_formula: str = "posterior"
    min_empirical_null: int = 100
    min_marginal: int = 200
    max_iterations: int = 50
    tolerance: float = 1e-8
    diagnostics_bins: int = 50

    def __post_init__(self):
        is_valid, errors = validate_pipeline_config(self.to_dict())
        if not is_valid:
            raise validation_error("Invalid pipeline configuration", "invalid_config", errors)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise validation_error(
                "Unknown configuration keys",
                "invalid_config",
                {key: "Not a configuration option" for key in unknown},
            )
        return cls(**dict(data))

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:12]

    def use_empirical_null(self, design: str) -> bool:
        if self.empirical_null == "auto":
            return design == "matched"
        return self.empirical_null == "on"


# --- Records ---

@dataclass
class CallRecord:
    contig: str
    pos: int
    sample: str
    x: int
    n: int
    y: Optional[int]
    m: Optional[int]
    rate_normal: float
    rate_tumor: Optional[float]
    r: float
    r_tilde: float
    fdr: float
    delta_hat: float
    called: bool
    reasons: List[str] = field(default_factory=list)

    def key(self) -> Tuple[str, int, str]:
        return (self.contig, self.pos, self.sample)


@dataclass
class Diagnostics:
    histogram: pd.DataFrame
    qq: pd.DataFrame
    summary: Dict[str, float]


@dataclass(eq=False)
class PipelineResult:
    design: str
    records: List[CallRecord]
    table: FdrTable
    diagnostics: Diagnostics
    params: Union[ErrorModelParams, MatchedModelParams]
    empirical_nulls: Dict[str, EmpiricalNull]
    marginal: Optional[MarginalDensity]
    config: PipelineConfig

    @property
    def calls(self) -> List[CallRecord]:
        return [r for r in self.records if r.called]

    def records_frame(self) -> pd.DataFrame:
        rows = []
        for rec in self.records:
            row = asdict(rec)
            row["reasons"] = ";".join(rec.reasons)
            rows.append(row)
        return pd.DataFrame(rows, columns=CALL_COLUMNS)


# --- Decisions ---

def decide(fdr: float, delta_hat: float, cfg: PipelineConfig, matched: bool) -> bool:
    return bool(fdr <= cfg.fdr_threshold and (not matched or abs(delta_hat) >= cfg.delta_threshold))


def check_decisions(records: Sequence[CallRecord], cfg: PipelineConfig, matched: bool) -> None:
    """Every record's called flag must equal the threshold rule."""
    for rec in records:
        if rec.called != decide(rec.fdr, rec.delta_hat, cfg, matched):
            raise numeric_error(
                f"Decision flag disagrees with thresholds at {rec.contig}:{rec.pos} sample {rec.sample}",
                error_code="decision_inconsistency",
            )
        if matched and rec.m and rec.n and abs(rec.delta_hat) > abs(rec.y / rec.m - rec.x / rec.n) + 1e-12:
            raise numeric_error(
                f"|delta_hat| exceeds the rate difference at {rec.contig}:{rec.pos} sample {rec.sample}",
                error_code="decision_inconsistency",
            )


def _reasons(fdr: float, delta_hat: float, cfg: PipelineConfig, matched: bool) -> List[str]:
    reasons = []
    if fdr > cfg.fdr_threshold:
        reasons.append(REASON_FDR)
    if matched and abs(delta_hat) < cfg.delta_threshold:
        reasons.append(REASON_DELTA)
    return reasons or [REASON_PASS]


# --- Shared scoring ---

def _fit_empirical_nulls(pvalues, groups: np.ndarray, names: Sequence[str], cfg: PipelineConfig
                         ) -> Dict[int, EmpiricalNull]:
    nulls = {}
    for j, name in enumerate(names):
        mask = groups == j
        if mask.sum() < cfg.min_empirical_null:
            logger.warning(f"Sample '{name}' has {int(mask.sum())} scored cells; "
                           f"empirical null needs {cfg.min_empirical_null}, left uncorrected")
            continue
        nulls[j] = fit_empirical_null(pvalues.r[mask], cfg.min_empirical_null)
        logger.info(f"Empirical null for '{name}': location={nulls[j].location:.4f}, scale={nulls[j].scale:.4f}")
    return nulls


def _score(pvalues, groups, names, labels, cfg: PipelineConfig, empirical: bool):
    enulls = _fit_empirical_nulls(pvalues, groups, names, cfg) if empirical else {}
    corrected = correct_pvalues(pvalues, enulls, groups)
    marg = fit_marginal_density(corrected.r_tilde, cfg.marginal_df, cfg.marginal_bins, cfg.max_iterations,
                                cfg.tolerance, cfg.min_marginal)
    table = local_fdr(pvalues, enulls, marg, ids=labels, groups=groups)
    return enulls, marg, table


def _cell_labels(m: PileupMatrix, i: np.ndarray, j: np.ndarray) -> List[str]:
    return [f"{m.contigs[a]}:{m.coords[a]}:{m.samples[b]}" for a, b in zip(i.tolist(), j.tolist())]


# --- Pipelines ---

def call_unmatched(
    reference: Optional[PileupMatrix],
    clinical: PileupMatrix,
    cfg: Optional[PipelineConfig] = None,
    params: Optional[ErrorModelParams] = None,
    regions: Optional[RegionMap] = None,
) -> PipelineResult:
    """
    Score clinical samples against an error model fitted on reference samples.

    Args:
        reference: Reference matrix (used for fitting; may be None when params is given)
        clinical: Samples to call, on the same positions
        cfg: Pipeline configuration
        params: Previously fitted reference model
        regions: Optional region partition for sigma pooling

    Returns:
        PipelineResult with one record per (position, clinical sample)
    """
    cfg = cfg or PipelineConfig()
    if reference is not None and not reference.same_positions(clinical):
        raise input_error("position sets differ between reference and clinical data", error_code="position_sets_differ")
    if params is None:
        if reference is None:
            raise validation_error("Unmatched calling needs reference samples or a fitted model",
                                   invalid_fields={"reference": "Provide reference data or params"})
        params = fit_error_model(reference, cfg.sigma_method, regions, cfg.region_quantile, cfg.pseudocount,
                                 cfg.genotyping, cfg.genotype_inflation)
    elif not params.matches(clinical):
        raise validation_error("Model positions differ from the clinical positions", error_code="position_sets_differ")

    model = calibrate_samples(params, clinical, cfg.pseudocount)
    S = clinical.n_samples
    scored = (clinical.n > 0) & model.estimable[:, None]
    i, j = np.nonzero(scored)
    logger.info(f"Scoring {i.size} of {clinical.x.size} clinical cells")
    if i.size == 0:
        logger.warning("No clinical cell has both depth and an estimated error rate; nothing is scored")
        enulls, marg, table = {}, None, FdrTable.empty()
    else:
        nulls = null_cdf_unmatched(model, i, j, clinical.n[i, j], consensus_error=True)
        pvalues = randomized_pvalues(clinical.x[i, j], nulls, cfg.pvalue_mode, cfg.seed, side="upper",
                                     ids=i * S + j)
        enulls, marg, table = _score(pvalues, j, clinical.samples, _cell_labels(clinical, i, j), cfg,
                                     cfg.use_empirical_null("unmatched"))

    # rates below the null are never mutations in this design
    below = 0.5 * (table.interval_lo + table.interval_hi) >= 0.5
    table.fdr = np.where(below, 1.0, table.fdr)

    lookup = {(a, b): k for k, (a, b) in enumerate(zip(i.tolist(), j.tolist()))}
    records = []
    rates = clinical.error_rates()
    null_rates = expit(model.cell_logit_rate(np.repeat(np.arange(clinical.n_positions), S),
                                             np.tile(np.arange(S), clinical.n_positions))).reshape(-1, S)
    for a in range(clinical.n_positions):
        for b in range(S):
            k = lookup.get((a, b))
            base = dict(contig=str(clinical.contigs[a]), pos=int(clinical.coords[a]), sample=clinical.samples[b],
                        x=int(clinical.x[a, b]), n=int(clinical.n[a, b]), y=None, m=None,
                        rate_normal=float(rates[a, b]), rate_tumor=None)
            if k is None:
                reason = REASON_ZERO_DEPTH if clinical.n[a, b] == 0 else REASON_UNESTIMABLE
                records.append(CallRecord(**base, r=float("nan"), r_tilde=float("nan"), fdr=1.0, delta_hat=0.0,
                                          called=False, reasons=[reason]))
                continue
            fdr = float(table.fdr[k])
            excess = rates[a, b] - null_rates[a, b] if np.isfinite(null_rates[a, b]) else 0.0
            delta_hat = _delta_hat(fdr, excess, cfg)
            called = decide(fdr, delta_hat, cfg, matched=False)
            reasons = [REASON_BELOW_NULL] if below[k] else _reasons(fdr, delta_hat, cfg, matched=False)
            records.append(CallRecord(**base, r=float(table.r[k]), r_tilde=float(table.r_tilde[k]), fdr=fdr,
                                      delta_hat=delta_hat, called=called, reasons=reasons))

    check_decisions(records, cfg, matched=False)
    result = PipelineResult(
        design="unmatched",
        records=records,
        table=table,
        diagnostics=_pipeline_diagnostics(table, cfg.diagnostics_bins),
        params=model,
        empirical_nulls={clinical.samples[k]: v for k, v in enulls.items()},
        marginal=marg,
        config=cfg,
    )
    logger.info(f"Unmatched calling: {len(result.calls)} calls at fdr <= {cfg.fdr_threshold}")
    return result


def _delta_hat(fdr: float, difference: float, cfg: PipelineConfig) -> float:
    weight = fdr if cfg.delta_formula == "literal" else 1.0 - fdr
    return float(weight * difference)


def call_matched(
    data: MatchedPileup,
    cfg: Optional[PipelineConfig] = None,
    params: Optional[MatchedModelParams] = None,
    regions: Optional[RegionMap] = None,
) -> PipelineResult:
    """
    Score each tumor against its conditional null given the paired normal.

    p-values come from the lower tail of y's conditional law; gains sit
    near 1 and losses near 0, and the marginal density picks up both.
    """
    cfg = cfg or PipelineConfig()
    if params is None:
        params = fit_matched_model(data, cfg.sigma_method, regions, cfg.region_quantile, cfg.pseudocount,
                                   cfg.genotyping, cfg.genotype_inflation, cfg.quadrature_nodes)
    else:
        if not params.base.matches(data.normal):
            raise validation_error("Model positions differ from the data positions", error_code="position_sets_differ")
        if params.samples != data.samples:
            raise validation_error("Model samples differ from the data samples", error_code="unpaired_samples")

    normal, tumor = data.normal, data.tumor
    S = normal.n_samples
    scored = (tumor.n > 0) & params.base.estimable[:, None]
    i, j = np.nonzero(scored)
    logger.info(f"Scoring {i.size} of {tumor.x.size} tumor cells")
    if i.size == 0:
        logger.warning("No tumor cell has both depth and an estimated error rate; nothing is scored")
        enulls, marg, table = {}, None, FdrTable.empty()
    else:
        nulls = null_cdf_matched(params, i, j, normal.x[i, j], normal.n[i, j], tumor.n[i, j],
                                 cfg.quadrature_nodes)
        pvalues = randomized_pvalues(tumor.x[i, j], nulls, cfg.pvalue_mode, cfg.seed, side="lower",
                                     ids=i * S + j)
        enulls, marg, table = _score(pvalues, j, data.samples, _cell_labels(tumor, i, j), cfg,
                                     cfg.use_empirical_null("matched"))

    lookup = {(a, b): k for k, (a, b) in enumerate(zip(i.tolist(), j.tolist()))}
    normal_rates = normal.error_rates()
    tumor_rates = tumor.error_rates()
    prior_rates = expit(params.base.cell_logit_rate(np.repeat(np.arange(normal.n_positions), S),
                                                    np.tile(np.arange(S), normal.n_positions))).reshape(-1, S)
    records = []
    for a in range(normal.n_positions):
        for b in range(S):
            k = lookup.get((a, b))
            base = dict(contig=str(normal.contigs[a]), pos=int(normal.coords[a]), sample=data.samples[b],
                        x=int(normal.x[a, b]), n=int(normal.n[a, b]), y=int(tumor.x[a, b]), m=int(tumor.n[a, b]),
                        rate_normal=float(normal_rates[a, b]), rate_tumor=float(tumor_rates[a, b]))
            if k is None:
                reason = REASON_ZERO_DEPTH if tumor.n[a, b] == 0 else REASON_UNESTIMABLE
                records.append(CallRecord(**base, r=float("nan"), r_tilde=float("nan"), fdr=1.0, delta_hat=0.0,
                                          called=False, reasons=[reason]))
                continue
            fdr = float(table.fdr[k])
            reference_rate = normal_rates[a, b] if normal.n[a, b] > 0 else prior_rates[a, b]
            delta_hat = _delta_hat(fdr, tumor_rates[a, b] - reference_rate, cfg)
            called = decide(fdr, delta_hat, cfg, matched=True)
            records.append(CallRecord(**base, r=float(table.r[k]), r_tilde=float(table.r_tilde[k]), fdr=fdr,
                                      delta_hat=delta_hat, called=called,
                                      reasons=_reasons(fdr, delta_hat, cfg, matched=True)))

    check_decisions(records, cfg, matched=True)
    result = PipelineResult(
        design="matched",
        records=records,
        table=table,
        diagnostics=_pipeline_diagnostics(table, cfg.diagnostics_bins),
        params=params,
        empirical_nulls={data.samples[k]: v for k, v in enulls.items()},
        marginal=marg,
        config=cfg,
    )
    logger.info(f"Matched calling: {len(result.calls)} calls at fdr <= {cfg.fdr_threshold}, "
                f"|delta_hat| >= {cfg.delta_threshold}")
    return result


# --- Diagnostics ---

def _qq_slope(theoretical: np.ndarray, sample: np.ndarray, probs: np.ndarray) -> float:
    central = (probs >= 0.25) & (probs <= 0.75)
    if central.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(theoretical[central], sample[central], 1)
    return float(slope)


def diagnostics(table: FdrTable, bins: int = 50, qq_points: int = 1000) -> Diagnostics:
    """
    Histogram counts of r, r_tilde and the conventional p-values, probit QQ
    pairs, and summary statistics (KS against uniform, central QQ slope).
    """
    if len(table) == 0:
        raise validation_error("Diagnostics need a nonempty table", error_code="insufficient_data")
    if bins < 1:
        raise validation_error("bins must be positive", "parameter_out_of_range", {"bins": "Must be >= 1"})

    edges = np.linspace(0.0, 1.0, bins + 1)
    conventional = table.p_conventional[np.isfinite(table.p_conventional)]
    histogram = pd.DataFrame({
        "bin_lo": edges[:-1],
        "bin_hi": edges[1:],
        "count_r": np.histogram(table.r, bins=edges)[0],
        "count_r_tilde": np.histogram(table.r_tilde, bins=edges)[0],
        "count_p_conventional": np.histogram(conventional, bins=edges)[0],
    })

    k = min(qq_points, len(table))
    probs = (np.arange(k) + 0.5) / k
    theoretical = special.ndtri(probs)
    z_r = np.quantile(probit(table.r), probs)
    z_r_tilde = np.quantile(probit(table.r_tilde), probs)
    qq = pd.DataFrame({"probability": probs, "theoretical": theoretical, "z_r": z_r, "z_r_tilde": z_r_tilde})

    ks_r = stats.kstest(table.r, "uniform")
    ks_r_tilde = stats.kstest(table.r_tilde, "uniform")
    summary = {
        "n": int(len(table)),
        "ks_r": float(ks_r.statistic),
        "ks_r_pvalue": float(ks_r.pvalue),
        "ks_r_tilde": float(ks_r_tilde.statistic),
        "ks_r_tilde_pvalue": float(ks_r_tilde.pvalue),
        "qq_slope_r": _qq_slope(theoretical, z_r, probs),
        "qq_slope_r_tilde": _qq_slope(theoretical, z_r_tilde, probs),
    }
    return Diagnostics(histogram=histogram, qq=qq, summary=summary)


def _pipeline_diagnostics(table: FdrTable, bins: int) -> Diagnostics:
    if len(table):
        return diagnostics(table, bins)
    edges = np.linspace(0.0, 1.0, bins + 1)
    zeros = np.zeros(bins, dtype=int)
    histogram = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count_r": zeros,
                              "count_r_tilde": zeros, "count_p_conventional": zeros})
    qq = pd.DataFrame(columns=["probability", "theoretical", "z_r", "z_r_tilde"])
    nan = float("nan")
    summary = {"n": 0, "ks_r": nan, "ks_r_pvalue": nan, "ks_r_tilde": nan, "ks_r_tilde_pvalue": nan,
               "qq_slope_r": nan, "qq_slope_r_tilde": nan}
    return Diagnostics(histogram=histogram, qq=qq, summary=summary)


# --- Evaluation against truth ---

def summarize_calls(
    records: Sequence[CallRecord],
    truth: TruthTable,
    thresholds: Sequence[float] = (0.1, 0.01),
    delta_threshold: Optional[float] = None,
) -> pd.DataFrame:
    """
    True and false positives at each fdr threshold.

    With delta_threshold, a record also needs |delta_hat| >= delta_threshold.
    """
    planted = truth.keys()
    rows = []
    for t in thresholds:
        hits = {rec.key() for rec in records
                if rec.fdr <= t and (delta_threshold is None or abs(rec.delta_hat) >= delta_threshold)}
        tp = len(hits & planted)
        fp = len(hits - planted)
        rows.append({
            "fdr_threshold": t,
            "planted": len(planted),
            "true_positives": tp,
            "false_positives": fp,
            "power": tp / len(planted) if planted else float("nan"),
            "false_positive_proportion": fp / len(hits) if hits else 0.0,
        })
    return pd.DataFrame(rows)


def format_summary(summary: pd.DataFrame) -> str:
    parts = []
    for row in summary.itertuples(index=False):
        parts.append(f"fdr<={row.fdr_threshold:g}: TP {row.true_positives}/{row.planted} FP {row.false_positives}")
    return "; ".join(parts)
