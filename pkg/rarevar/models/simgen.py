"""
Generative simulator for the hierarchical error model, with planted
mutations and germline variants, plus the exact two-group fdr oracle.

Every random quantity is drawn from a counter-based stream addressed by
(seed, stream, position block), so a scenario and seed fix the data.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Set, Tuple, Union

import numpy as np
import pandas as pd

from rarevar.models.pileup import BASES, MatchedPileup, PileupMatrix
from rarevar.utils.error_handling import input_error, validation_error
from rarevar.utils.rng import (
    AUXILIARY_STREAM,
    BLOCK_SIZE,
    COUNT_X_STREAM,
    COUNT_Y_STREAM,
    DEPTH_STREAM,
    LATENT_P_STREAM,
    LATENT_Q_STREAM,
    RATE_STREAM,
    block_generator,
    iter_blocks,
)
from rarevar.utils.statfun import DiscreteDist, expit, logit
from rarevar.utils.validation import validate_scenario

logger = logging.getLogger(__name__)

TRUTH_COLUMNS = ["contig", "pos", "sample", "prevalence"]
MAX_ORACLE_SUPPORT = 200


# --- Scenario ---

@dataclass
class DepthLaw:
    """Depth distribution: constant, log-uniform, or a quantile table interpolated on the log scale."""
    law: str = "constant"
    value: float = 1000.0
    low: float = 1.0
    high: float = 1.0
    table: List[List[float]] = field(default_factory=list)

    def quantile(self, u: np.ndarray) -> np.ndarray:
        if self.law == "constant":
            depth = np.full(u.shape, float(self.value))
        elif self.law == "log_uniform":
            depth = np.exp(np.log(self.low) + u * (np.log(self.high) - np.log(self.low)))
        else:
            qs = np.array([row[0] for row in self.table], dtype=float)
            log_depths = np.log(np.array([row[1] for row in self.table], dtype=float))
            depth = np.exp(np.interp(u, qs, log_depths))
        return np.maximum(np.rint(depth), 1).astype(np.int64)

    @property
    def median(self) -> float:
        return float(self.quantile(np.array([0.5]))[0])

    def to_dict(self) -> Dict[str, Any]:
        if self.law == "constant":
            return {"law": "constant", "value": self.value}
        if self.law == "log_uniform":
            return {"law": "log_uniform", "low": self.low, "high": self.high}
        return {"law": "quantiles", "table": [list(row) for row in self.table]}


@dataclass
class PlantedMutation:
    positions: List[int]
    samples: List[int]
    prevalence: float


@dataclass
class GermlineVariant:
    positions: List[int]
    samples: List[int]
    genotype: str = "het"


@dataclass
class SimScenario:
    """
    Everything the simulator needs. Per-sample parameters hold one value
    per sample; planted and germline entries use position and sample indices.
    """
    design: str
    positions: int
    samples: int
    depth: DepthLaw
    mu_low: float
    mu_high: float
    delta: List[float]
    sigma: List[float]
    eta: List[float]
    tau: List[float]
    reference_samples: int = 0
    tumor_depth: Optional[DepthLaw] = None
    planted: List[PlantedMutation] = field(default_factory=list)
    germline: List[GermlineVariant] = field(default_factory=list)
    contig: str = "chr1"
    name: str = "custom"
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SimScenario":
        is_valid, errors = validate_scenario(data)
        if not is_valid:
            raise validation_error("Invalid simulation scenario", "invalid_scenario", errors)
        S = data["samples"]

        def per_sample(key, default):
            value = data.get(key, default)
            return [float(v) for v in value] if isinstance(value, list) else [float(value)] * S

        return cls(
            design=data["design"],
            positions=int(data["positions"]),
            samples=S,
            depth=DepthLaw(**data["depth"]),
            mu_low=float(data["mu"]["low"]),
            mu_high=float(data["mu"]["high"]),
            delta=per_sample("delta", 0.0),
            sigma=per_sample("sigma", 0.0),
            eta=per_sample("eta", 0.0),
            tau=per_sample("tau", 0.0),
            reference_samples=int(data.get("reference_samples", 0)),
            tumor_depth=DepthLaw(**data["tumor_depth"]) if "tumor_depth" in data else None,
            planted=[PlantedMutation(**p) for p in data.get("planted", [])],
            germline=[GermlineVariant(**g) for g in data.get("germline", [])],
            contig=data.get("contig", "chr1"),
            name=data.get("name", "custom"),
            seed=int(data.get("seed", 0)),
        )

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "name": self.name,
            "design": self.design,
            "contig": self.contig,
            "positions": self.positions,
            "samples": self.samples,
            "reference_samples": self.reference_samples,
            "depth": self.depth.to_dict(),
            "mu": {"low": self.mu_low, "high": self.mu_high},
            "delta": list(self.delta),
            "sigma": list(self.sigma),
            "eta": list(self.eta),
            "tau": list(self.tau),
            "planted": [asdict(p) for p in self.planted],
            "germline": [asdict(g) for g in self.germline],
            "seed": self.seed,
        }
        if self.tumor_depth is not None:
            data["tumor_depth"] = self.tumor_depth.to_dict()
        return data

    def with_seed(self, seed: int) -> "SimScenario":
        return SimScenario.from_dict({**self.to_dict(), "seed": int(seed)})

    @property
    def sample_names(self) -> List[str]:
        if self.design == "matched":
            return [f"pair{j + 1}" for j in range(self.samples)]
        ref = [f"ref{j + 1}" for j in range(self.reference_samples)]
        return ref + [f"clin{j + 1}" for j in range(self.samples - self.reference_samples)]


# --- Presets ---

VIRUS_DEPTHS = [[0.0, 2.0e5], [0.025, 271192], [0.5, 775681], [0.975, 1689977], [1.0, 2.2e6]]
TUMOR_DEPTHS = [[0.0, 1], [0.05, 20], [0.25, 80], [0.5, 171], [0.75, 350], [0.95, 1200],
                [0.999, 20000], [1.0, 1.0e5]]

PRESETS: Dict[str, Dict[str, Any]] = {
    "virus": {
        "name": "virus",
        "design": "unmatched",
        "contig": "virus",
        "positions": 281,
        "samples": 6,
        "reference_samples": 3,
        "depth": {"law": "quantiles", "table": VIRUS_DEPTHS},
        "mu": {"low": 1e-4, "high": 4e-4},
        "delta": 0.0,
        "sigma": 0.29,
        "planted": [{
            "positions": [int(round(v)) for v in np.linspace(10, 270, 14)],
            "samples": [3, 4, 5],
            "prevalence": 0.001,
        }],
        "seed": 0,
    },
    "tumor-small": {
        "name": "tumor-small",
        "design": "matched",
        "contig": "chr1",
        "positions": 2000,
        "samples": 4,
        "depth": {"law": "quantiles", "table": TUMOR_DEPTHS},
        "mu": {"low": 5e-4, "high": 5e-3},
        "delta": 0.0,
        "sigma": 0.3,
        "eta": 0.1,
        "tau": 0.2,
        "planted": [
            {"positions": [50 + 97 * k + j for k in range(20)], "samples": [j], "prevalence": 0.3}
            for j in range(4)
        ],
        "germline": [
            {"positions": [5, 505, 1005, 1510], "samples": [0, 1], "genotype": "het"},
            {"positions": [777], "samples": [2], "genotype": "hom_alt"},
        ],
        "seed": 0,
    },
}


def preset(name: str, seed: Optional[int] = None) -> SimScenario:
    if name not in PRESETS:
        raise validation_error(
            f"Unknown preset '{name}'",
            error_code="unknown_preset",
            invalid_fields={"preset": f"Available presets: {', '.join(sorted(PRESETS))}"},
        )
    data = dict(PRESETS[name])
    if seed is not None:
        data["seed"] = int(seed)
    return SimScenario.from_dict(data)


def load_scenario(path: str) -> SimScenario:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise input_error(f"Scenario file not found: {path}", path=path, error_code="file_not_found")
    except json.JSONDecodeError as exc:
        raise input_error(f"Invalid scenario JSON: {exc.msg}", path=path, line_number=exc.lineno)
    return SimScenario.from_dict(data)


# --- Truth ---

@dataclass
class TruthTable:
    """Planted (position, sample) pairs with their prevalence; all else is null."""
    contigs: List[str] = field(default_factory=list)
    coords: List[int] = field(default_factory=list)
    samples: List[str] = field(default_factory=list)
    prevalence: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.coords)

    def keys(self) -> Set[Tuple[str, int, str]]:
        return set(zip(self.contigs, self.coords, self.samples))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"contig": self.contigs, "pos": self.coords, "sample": self.samples,
                             "prevalence": self.prevalence}, columns=TRUTH_COLUMNS)

    def write(self, path: str, header: Optional[str] = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            if header:
                handle.write(header.rstrip("\n") + "\n")
            self.to_frame().to_csv(handle, index=False)

    @classmethod
    def load(cls, path: str) -> "TruthTable":
        try:
            frame = pd.read_csv(path, dtype={"contig": str, "sample": str}, comment="#")
        except FileNotFoundError:
            raise input_error(f"Truth file not found: {path}", path=path, error_code="file_not_found")
        missing = [c for c in TRUTH_COLUMNS if c not in frame.columns]
        if missing:
            raise input_error(f"Truth table is missing columns: {', '.join(missing)}", path=path, line_number=1)
        return cls(frame["contig"].tolist(), [int(v) for v in frame["pos"]], frame["sample"].tolist(),
                   [float(v) for v in frame["prevalence"]])


# --- Simulation ---

@dataclass
class Simulation:
    """Simulated counts with their truth and the latent parameters drawn."""
    data: Union[PileupMatrix, MatchedPileup]
    truth: TruthTable
    scenario: SimScenario
    mu: np.ndarray

    def split_reference(self) -> Tuple[PileupMatrix, PileupMatrix]:
        """(reference, clinical) matrices of an unmatched simulation."""
        if isinstance(self.data, MatchedPileup):
            raise validation_error("Matched simulations have no reference split", error_code="invalid_scenario")
        names = self.scenario.sample_names
        k = self.scenario.reference_samples
        return self.data.select_samples(names[:k]), self.data.select_samples(names[k:])


def _prevalence_matrix(s: SimScenario) -> np.ndarray:
    prevalence = np.zeros((s.positions, s.samples))
    for entry in s.planted:
        for i in entry.positions:
            prevalence[i, entry.samples] = entry.prevalence
    return prevalence


def _germline_matrix(s: SimScenario) -> np.ndarray:
    genotype = np.zeros((s.positions, s.samples), dtype=np.int64)
    for entry in s.germline:
        code = 1 if entry.genotype == "het" else 2
        for i in entry.positions:
            genotype[i, entry.samples] = code
    return genotype


def simulate(s: SimScenario) -> Simulation:
    """
    Draw counts from the hierarchy.

    logit p_ij ~ Normal(logit c_ij + delta_j, sigma_j^2) with c_ij = mu_i at
    hom-ref cells, 1/2 at het and 1 - mu_i at hom-alt cells; a planted
    mutation at prevalence pi turns the rate into pi + (1 - pi) p_ij; counts
    are Binomial(N_ij, rate). The matched design adds
    logit q_ij ~ Normal(logit p_ij + eta_j, tau_j^2) for the tumor, where the
    planted mutations live.
    """
    P, S = s.positions, s.samples
    delta = np.asarray(s.delta)
    sigma = np.asarray(s.sigma)
    eta = np.asarray(s.eta)
    tau = np.asarray(s.tau)
    prevalence = _prevalence_matrix(s)
    genotype = _germline_matrix(s)
    tumor_depth = s.tumor_depth or s.depth
    matched = s.design == "matched"

    mu = np.empty(P)
    refs = np.empty(P, dtype=object)
    n = np.empty((P, S), dtype=np.int64)
    x = np.empty((P, S), dtype=np.int64)
    m = np.empty((P, S), dtype=np.int64)
    y = np.empty((P, S), dtype=np.int64)

    for block, start, stop in iter_blocks(P, BLOCK_SIZE):
        rows = stop - start
        u = block_generator(s.seed, RATE_STREAM, block).random(rows)
        mu[start:stop] = np.exp(np.log(s.mu_low) + u * (np.log(s.mu_high) - np.log(s.mu_low)))
        refs[start:stop] = np.asarray(BASES, dtype=object)[
            block_generator(s.seed, AUXILIARY_STREAM, block).integers(0, 4, rows)]

        depth_u = block_generator(s.seed, DEPTH_STREAM, block).random((rows, 2 * S))
        n[start:stop] = s.depth.quantile(depth_u[:, :S])
        m[start:stop] = tumor_depth.quantile(depth_u[:, S:])

        center = np.repeat(mu[start:stop, None], S, axis=1)
        g = genotype[start:stop]
        center = np.where(g == 1, 0.5, np.where(g == 2, 1.0 - center, center))
        z = block_generator(s.seed, LATENT_P_STREAM, block).standard_normal((rows, S))
        p = expit(logit(center) + delta + sigma * z)

        rate_x = p if matched else prevalence[start:stop] + (1.0 - prevalence[start:stop]) * p
        x[start:stop] = block_generator(s.seed, COUNT_X_STREAM, block).binomial(n[start:stop], rate_x)

        if matched:
            zq = block_generator(s.seed, LATENT_Q_STREAM, block).standard_normal((rows, S))
            q = expit(logit(p) + eta + tau * zq)
            rate_y = prevalence[start:stop] + (1.0 - prevalence[start:stop]) * q
            y[start:stop] = block_generator(s.seed, COUNT_Y_STREAM, block).binomial(m[start:stop], rate_y)

    names = s.sample_names
    contigs = np.full(P, s.contig, dtype=object)
    coords = np.arange(1, P + 1, dtype=np.int64)
    normal = PileupMatrix(contigs, coords, names, x, n, refs)
    data = MatchedPileup(normal, PileupMatrix(contigs, coords, names, y, m, refs)) if matched else normal

    truth = TruthTable()
    for i, j in zip(*np.nonzero(prevalence)):
        truth.contigs.append(s.contig)
        truth.coords.append(int(coords[i]))
        truth.samples.append(names[j])
        truth.prevalence.append(float(prevalence[i, j]))
    logger.info(f"Simulated scenario '{s.name}' (seed {s.seed}): {P} positions x {S} samples, "
                f"{len(truth)} planted mutations")
    return Simulation(data=data, truth=truth, scenario=s, mu=mu)


# --- Exact oracle ---

def exact_fdr_oracle(null: DiscreteDist, alternative: DiscreteDist, null_weight: float) -> pd.DataFrame:
    """
    Exact two-group local fdr by enumeration.

    fdr(x) = w P_F(x) / (w P_F(x) + (1 - w) P_A(x)); NaN where both laws
    put zero mass on x.

    Args:
        null: Null law F
        alternative: Alternative law A
        null_weight: Prior null probability w in [0, 1]

    Returns:
        DataFrame with columns x, p_null, p_alt, fdr
    """
    if not 0 <= null_weight <= 1:
        raise validation_error("null_weight must be in [0, 1]", "parameter_out_of_range",
                               {"null_weight": "Must be in [0, 1]"})
    support = np.union1d(null.support, alternative.support)
    if support.size > MAX_ORACLE_SUPPORT:
        raise validation_error(f"Oracle support has {support.size} points; at most {MAX_ORACLE_SUPPORT} allowed",
                               "parameter_out_of_range")
    p_null = null.on_support(support)
    p_alt = alternative.on_support(support)
    numerator = null_weight * p_null
    denominator = numerator + (1.0 - null_weight) * p_alt
    with np.errstate(invalid="ignore", divide="ignore"):
        fdr = np.where(denominator > 0, numerator / denominator, np.nan)
    return pd.DataFrame({"x": support, "p_null": p_null, "p_alt": p_alt, "fdr": fdr})


def sample_two_group(
    null: DiscreteDist, alternative: DiscreteDist, null_weight: float, size: int, seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Observations from the two-group model and their null/non-null labels."""
    rng = block_generator(seed, AUXILIARY_STREAM, 1)
    is_null = rng.random(size) < null_weight
    values = np.where(is_null, null.sample(rng, size), alternative.sample(rng, size))
    return values, is_null
