"""Count matrices for unmatched and matched (normal/tumor) designs."""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from rarevar.utils.error_handling import input_error, validation_error

logger = logging.getLogger(__name__)

BASES = ("A", "C", "G", "T")


@dataclass(frozen=True, eq=False)
class PileupMatrix:
    """
    Nonreference counts x and depths n indexed by (position, sample).

    Positions are unique and sorted by (contig, coordinate). Zero-depth
    cells stay in the matrix; their observed rate is undefined (NaN).
    """
    contigs: np.ndarray
    coords: np.ndarray
    samples: List[str]
    x: np.ndarray
    n: np.ndarray
    reference_base: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "contigs", np.asarray(self.contigs, dtype=object))
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=np.int64))
        object.__setattr__(self, "samples", list(self.samples))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.int64).reshape(len(self.coords), -1))
        object.__setattr__(self, "n", np.asarray(self.n, dtype=np.int64).reshape(len(self.coords), -1))
        object.__setattr__(self, "reference_base", np.asarray(self.reference_base, dtype=object))
        self._validate()

    def _validate(self):
        P, S = len(self.coords), len(self.samples)
        if self.x.shape != (P, S) or self.n.shape != (P, S):
            raise validation_error(
                f"count matrices must be positions x samples = {P} x {S}",
                error_code="inconsistent_samples",
            )
        if len(self.contigs) != P or len(self.reference_base) != P:
            raise validation_error("position annotations must have one entry per position")
        if len(set(self.samples)) != S:
            raise validation_error("sample identifiers must be unique", error_code="inconsistent_samples")
        if np.any(self.n < 0) or np.any(self.x < 0):
            raise validation_error("counts and depths must be nonnegative", error_code="count_exceeds_depth")
        bad = np.argwhere(self.x > self.n)
        if bad.size:
            i, j = bad[0]
            raise validation_error(
                f"count exceeds depth at {self.position_id(i)} sample {self.samples[j]}",
                error_code="count_exceeds_depth",
            )
        invalid_bases = set(self.reference_base.tolist()) - set(BASES)
        if invalid_bases:
            raise validation_error(
                f"reference bases must be one of {','.join(BASES)}",
                invalid_fields={"ref": ", ".join(sorted(map(str, invalid_bases)))},
            )
        keys = list(zip(self.contigs.tolist(), self.coords.tolist()))
        for a, b in zip(keys, keys[1:]):
            if a == b:
                raise validation_error(f"duplicate position {a[0]}:{a[1]}", error_code="duplicate_position")
            if a > b:
                raise validation_error(f"positions not sorted at {b[0]}:{b[1]}", error_code="unsorted_positions")

    @property
    def n_positions(self) -> int:
        return len(self.coords)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def position_id(self, i: int) -> str:
        return f"{self.contigs[i]}:{self.coords[i]}"

    @property
    def position_ids(self) -> List[str]:
        return [f"{c}:{p}" for c, p in zip(self.contigs, self.coords)]

    def same_positions(self, other: "PileupMatrix") -> bool:
        return (self.n_positions == other.n_positions
                and np.array_equal(self.coords, other.coords)
                and list(self.contigs) == list(other.contigs))

    def error_rates(self) -> np.ndarray:
        """x / n with NaN where n = 0."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.n > 0, self.x / np.maximum(self.n, 1), np.nan)

    def select_samples(self, names: Sequence[str]) -> "PileupMatrix":
        missing = [s for s in names if s not in self.samples]
        if missing:
            raise validation_error(f"unknown samples: {', '.join(missing)}", error_code="inconsistent_samples")
        idx = [self.samples.index(s) for s in names]
        return PileupMatrix(self.contigs, self.coords, list(names), self.x[:, idx], self.n[:, idx],
                            self.reference_base)


def observed_error_rate(m: PileupMatrix, i: int, j: int) -> float:
    """Observed error rate x/N at (i, j); NaN marks zero depth."""
    depth = int(m.n[i, j])
    if depth == 0:
        return math.nan
    return int(m.x[i, j]) / depth


@dataclass(frozen=True, eq=False)
class MatchedPileup:
    """Normal and tumor matrices over identical positions and paired samples."""
    normal: PileupMatrix
    tumor: PileupMatrix

    def __post_init__(self):
        if not self.normal.same_positions(self.tumor):
            raise input_error("position sets differ between normal and tumor", error_code="position_sets_differ")
        if self.normal.samples != self.tumor.samples:
            raise validation_error(
                "normal and tumor samples must be paired in the same order",
                error_code="unpaired_samples",
                invalid_fields={"samples": f"{self.normal.samples} vs {self.tumor.samples}"},
            )

    @property
    def samples(self) -> List[str]:
        return self.normal.samples

    @classmethod
    def from_control(cls, matrix: PileupMatrix, sample: Optional[str] = None) -> "MatchedPileup":
        """One sample sequenced 'twice': the same counts as normal and tumor."""
        chosen = matrix.select_samples([sample or matrix.samples[0]])
        return cls(chosen, chosen)


@dataclass(frozen=True, eq=False)
class RegionMap:
    """Region label per position, plus optional genotype-candidate flags."""
    region_ids: np.ndarray
    candidates: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "region_ids", np.asarray(self.region_ids, dtype=np.int64))
        if self.candidates is not None:
            object.__setattr__(self, "candidates", np.asarray(self.candidates, dtype=bool))
            if self.candidates.shape != self.region_ids.shape:
                raise validation_error("candidate flags must have one entry per position")

    def __len__(self) -> int:
        return self.region_ids.size

    @property
    def regions(self) -> np.ndarray:
        return np.unique(self.region_ids)
