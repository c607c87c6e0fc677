import logging
import os
import re
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from rarevar.models.pileup import MatchedPileup, PileupMatrix, RegionMap
from rarevar.utils.error_handling import input_error

logger = logging.getLogger(__name__)

POSITION_COLUMNS = ["contig", "pos", "ref"]
UNMATCHED_PREFIXES = ("x", "n")
MATCHED_PREFIXES = ("xn", "nn", "xt", "nt")
DEFAULT_CHUNKSIZE = 100_000

_PANDAS_LINE = re.compile(r"line (\d+)")


# --- Utility Functions ---

def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        raise input_error(f"Input file not found: {path}", path=path, error_code="file_not_found")


def _count_comment_lines(path: str) -> int:
    """Number of leading '#' lines (provenance headers) before the column header."""
    count = 0
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            count += 1
    return count


def _sample_columns(columns: List[str], prefixes: Tuple[str, ...], path: str) -> List[str]:
    """
    Check the count columns and return sample names in order of appearance.

    Every sample must carry exactly one column for each prefix.
    """
    if columns[:3] != POSITION_COLUMNS:
        raise input_error(
            f"Header must start with {' '.join(POSITION_COLUMNS)}, got {' '.join(columns[:3])}",
            path=path, line_number=1, error_code="inconsistent_samples",
        )
    pattern = re.compile(r"^(" + "|".join(prefixes) + r")_(.+)$")
    seen: Dict[str, set] = {}
    order: List[str] = []
    for column in columns[3:]:
        match = pattern.match(column)
        if not match:
            raise input_error(f"Unexpected column '{column}'", path=path, line_number=1,
                              error_code="inconsistent_samples")
        prefix, sample = match.groups()
        if sample not in seen:
            seen[sample] = set()
            order.append(sample)
        if prefix in seen[sample]:
            raise input_error(f"Duplicate column '{column}'", path=path, line_number=1,
                              error_code="inconsistent_samples")
        seen[sample].add(prefix)
    incomplete = [s for s in order if seen[s] != set(prefixes)]
    if incomplete or not order:
        raise input_error(
            "inconsistent sample columns: every sample needs "
            + ", ".join(f"{p}_<sample>" for p in prefixes)
            + (f" (incomplete: {', '.join(incomplete)})" if incomplete else ""),
            path=path, line_number=1, error_code="inconsistent_samples",
        )
    return order


def _integer_block(frame: pd.DataFrame, columns: List[str], first_line: int, path: str) -> np.ndarray:
    """Parse count columns as nonnegative integers, reporting the first bad line."""
    block = frame[columns].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = np.isnan(block) | (block < 0) | (block != np.floor(block))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise input_error(
            f"malformed line: column '{columns[col]}' must be a nonnegative integer, "
            f"got '{frame[columns[col]].iloc[row]}'",
            path=path, line_number=first_line + int(row),
        )
    return block.astype(np.int64)


def _check_order(contigs: np.ndarray, coords: np.ndarray, first_line: int, path: str) -> None:
    previous = None
    for k, key in enumerate(zip(contigs.tolist(), coords.tolist())):
        if previous is not None:
            if key == previous:
                raise input_error(f"duplicate position {key[0]}:{key[1]}", path=path,
                                  line_number=first_line + k, error_code="duplicate_position")
            if key < previous:
                raise input_error(f"positions not sorted at {key[0]}:{key[1]}", path=path,
                                  line_number=first_line + k, error_code="unsorted_positions")
        previous = key


def _read_table(path: str, prefixes: Tuple[str, ...], chunksize: int):
    _require_file(path)
    skip = _count_comment_lines(path)
    header_line = skip + 1
    try:
        reader = pd.read_csv(path, sep="\t", dtype=str, skiprows=skip, chunksize=chunksize,
                             skip_blank_lines=False, keep_default_na=False)
        contigs, coords, refs, counts = [], [], [], []
        samples = None
        offset = 0
        for chunk in reader:
            if samples is None:
                samples = _sample_columns(list(chunk.columns), prefixes, path)
                count_columns = [f"{p}_{s}" for s in samples for p in prefixes]
            first_line = header_line + 1 + offset
            if (chunk["contig"] == "").any():
                row = int(np.argmax((chunk["contig"] == "").to_numpy()))
                raise input_error("malformed line: empty contig", path=path, line_number=first_line + row)
            pos = _integer_block(chunk, ["pos"], first_line, path)[:, 0]
            values = _integer_block(chunk, count_columns, first_line, path)
            contigs.append(chunk["contig"].to_numpy(dtype=object))
            coords.append(pos)
            refs.append(chunk["ref"].str.upper().to_numpy(dtype=object))
            counts.append(values)
            offset += len(chunk)
    except pd.errors.EmptyDataError:
        raise input_error("File has no header line", path=path, line_number=1)
    except pd.errors.ParserError as exc:
        match = _PANDAS_LINE.search(str(exc))
        line = int(match.group(1)) + skip if match else None
        raise input_error(f"malformed line: {exc}", path=path, line_number=line)

    if samples is None:
        with open(path, "r", encoding="utf-8") as handle:
            for _ in range(skip):
                handle.readline()
            header = handle.readline().rstrip("\n").split("\t")
        samples = _sample_columns(header, prefixes, path)
        count_columns = [f"{p}_{s}" for s in samples for p in prefixes]
        contigs, coords, refs = [np.empty(0, dtype=object)], [np.empty(0, dtype=np.int64)], [np.empty(0, dtype=object)]
        counts = [np.empty((0, len(count_columns)), dtype=np.int64)]

    contigs = np.concatenate(contigs)
    coords = np.concatenate(coords)
    refs = np.concatenate(refs)
    counts = np.concatenate(counts)
    _check_order(contigs, coords, header_line + 1, path)
    logger.info(f"Loaded {len(coords)} positions x {len(samples)} samples from {path}")
    return contigs, coords, refs, samples, counts, header_line + 1


def _check_depths(x: np.ndarray, n: np.ndarray, first_line: int, path: str) -> None:
    bad = np.argwhere(x > n)
    if bad.size:
        row = int(bad[0][0])
        raise input_error(
            f"count exceeds depth ({int(x[tuple(bad[0])])} > {int(n[tuple(bad[0])])})",
            path=path, line_number=first_line + row, error_code="count_exceeds_depth",
        )


def _check_bases(refs: np.ndarray, first_line: int, path: str) -> None:
    bad = ~np.isin(refs, ["A", "C", "G", "T"])
    if bad.any():
        row = int(np.argmax(bad))
        raise input_error(f"malformed line: reference base '{refs[row]}' is not one of A,C,G,T",
                          path=path, line_number=first_line + row)


# --- Loading ---

def load_pileup(path: str, format: str = "unmatched",
                chunksize: int = DEFAULT_CHUNKSIZE) -> Union[PileupMatrix, MatchedPileup]:
    """
    Load a pileup TSV in one streaming pass.

    Args:
        path: Path to the TSV file
        format: 'unmatched' (x_<s>, n_<s>) or 'matched' (xn_, nn_, xt_, nt_)
        chunksize: Rows parsed per batch

    Returns:
        PileupMatrix for unmatched files, MatchedPileup for matched files
    """
    if format not in ("unmatched", "matched"):
        raise input_error(f"Unknown pileup format '{format}'", path=path, error_code="inconsistent_samples")
    prefixes = UNMATCHED_PREFIXES if format == "unmatched" else MATCHED_PREFIXES
    contigs, coords, refs, samples, counts, first_line = _read_table(path, prefixes, chunksize)
    _check_bases(refs, first_line, path)
    k = len(prefixes)
    blocks = {p: counts[:, i::k] for i, p in enumerate(prefixes)}

    if format == "unmatched":
        _check_depths(blocks["x"], blocks["n"], first_line, path)
        return PileupMatrix(contigs, coords, samples, blocks["x"], blocks["n"], refs)

    _check_depths(blocks["xn"], blocks["nn"], first_line, path)
    _check_depths(blocks["xt"], blocks["nt"], first_line, path)
    normal = PileupMatrix(contigs, coords, samples, blocks["xn"], blocks["nn"], refs)
    tumor = PileupMatrix(contigs, coords, samples, blocks["xt"], blocks["nt"], refs)
    return MatchedPileup(normal, tumor)


def load_matched(normal_path: str, tumor_path: str, chunksize: int = DEFAULT_CHUNKSIZE) -> MatchedPileup:
    """Pair two unmatched files as normal and tumor."""
    normal = load_pileup(normal_path, "unmatched", chunksize)
    tumor = load_pileup(tumor_path, "unmatched", chunksize)
    if not normal.same_positions(tumor):
        raise input_error("position sets differ between normal and tumor files",
                          path=tumor_path, error_code="position_sets_differ")
    return MatchedPileup(normal, tumor)


def load_region_map(path: str, matrix: PileupMatrix) -> RegionMap:
    """
    Load a `contig pos region_id [candidate]` TSV aligned to a matrix.

    Every matrix position must map to exactly one region.
    """
    _require_file(path)
    skip = _count_comment_lines(path)
    frame = pd.read_csv(path, sep="\t", dtype=str, skiprows=skip, keep_default_na=False)
    required = ["contig", "pos", "region_id"]
    if list(frame.columns[:3]) != required:
        raise input_error(f"Region map header must start with {' '.join(required)}", path=path,
                          line_number=skip + 1, error_code="inconsistent_samples")
    first_line = skip + 2
    pos = _integer_block(frame, ["pos"], first_line, path)[:, 0]
    region = _integer_block(frame, ["region_id"], first_line, path)[:, 0]
    candidate = None
    if "candidate" in frame.columns:
        candidate = _integer_block(frame, ["candidate"], first_line, path)[:, 0] > 0

    lookup: Dict[Tuple[str, int], int] = {}
    for k, key in enumerate(zip(frame["contig"].tolist(), pos.tolist())):
        if key in lookup:
            raise input_error(f"position {key[0]}:{key[1]} mapped to more than one region", path=path,
                              line_number=first_line + k, error_code="duplicate_position")
        lookup[key] = k

    rows = []
    for contig, coord in zip(matrix.contigs.tolist(), matrix.coords.tolist()):
        k = lookup.get((contig, coord))
        if k is None:
            raise input_error(f"position {contig}:{coord} has no region", path=path, error_code="missing_region")
        rows.append(k)
    rows = np.asarray(rows, dtype=np.int64)
    return RegionMap(region[rows], None if candidate is None else candidate[rows])


# --- Writing ---

def pileup_frame(data: Union[PileupMatrix, MatchedPileup]) -> pd.DataFrame:
    matrix = data.normal if isinstance(data, MatchedPileup) else data
    columns = {"contig": matrix.contigs, "pos": matrix.coords, "ref": matrix.reference_base}
    for j, sample in enumerate(matrix.samples):
        if isinstance(data, MatchedPileup):
            columns[f"xn_{sample}"] = data.normal.x[:, j]
            columns[f"nn_{sample}"] = data.normal.n[:, j]
            columns[f"xt_{sample}"] = data.tumor.x[:, j]
            columns[f"nt_{sample}"] = data.tumor.n[:, j]
        else:
            columns[f"x_{sample}"] = matrix.x[:, j]
            columns[f"n_{sample}"] = matrix.n[:, j]
    return pd.DataFrame(columns)


def write_pileup(data: Union[PileupMatrix, MatchedPileup], path: str, header: Optional[str] = None) -> None:
    """Write a matrix in the pileup TSV schema (optionally after a '#' header line)."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        if header:
            handle.write(header.rstrip("\n") + "\n")
        pileup_frame(data).to_csv(handle, sep="\t", index=False)


def write_region_map(regions: RegionMap, matrix: PileupMatrix, path: str) -> None:
    frame = pd.DataFrame({"contig": matrix.contigs, "pos": matrix.coords, "region_id": regions.region_ids})
    if regions.candidates is not None:
        frame["candidate"] = regions.candidates.astype(int)
    frame.to_csv(path, sep="\t", index=False)
