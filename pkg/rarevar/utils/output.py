import json
import os
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd


def success_report(data: Dict[str, Any]) -> Dict[str, Any]:
    """
    Format a successful command result

    Args:
        data: Dictionary with result data

    Returns:
        Dictionary with success field, printed by the CLI as JSON
    """
    return {"success": True, **data}


def provenance_header(version: str, manifest_digest: str, config_fingerprint: str, seed: int) -> str:
    """Comment line written at the top of every emitted table."""
    return f"# rarevar {version} manifest={manifest_digest} config={config_fingerprint} seed={seed}"


def write_csv(frame: pd.DataFrame, path: str, header: Optional[str] = None) -> str:
    """
    Write a table as CSV, optionally preceded by a '#' header line.

    Floats use repr precision so that identical inputs give identical bytes.
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        if header:
            handle.write(header.rstrip("\n") + "\n")
        frame.to_csv(handle, index=False, float_format="%.17g")
    return path


def read_csv(path: str) -> pd.DataFrame:
    """Read a table written by write_csv (header comments are skipped)."""
    return pd.read_csv(path, comment="#")


def _json_default(value: Any):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_json(document: Dict[str, Any]) -> str:
    return json.dumps(document, indent=2, sort_keys=True, default=_json_default)


def write_json(document: Dict[str, Any], path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(to_json(document) + "\n")
    return path
