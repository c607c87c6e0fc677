import json
from typing import Any, Dict, Optional, Tuple

from jsonschema import Draft7Validator

from rarevar.utils.error_handling import input_error

# --- JSON schemas ---

PIPELINE_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "fdr_threshold": {"type": "number"},
        "fdr_threshold_strict": {"type": "number"},
        "delta_threshold": {"type": "number"},
        "pvalue_mode": {"enum": ["randomized", "mid_p"]},
        "seed": {"type": "integer", "minimum": 0},
        "marginal_df": {"type": "integer"},
        "marginal_bins": {"type": "integer"},
        "empirical_null": {"enum": ["on", "off", "auto"]},
        "region_quantile": {"type": "number"},
        "sigma_method": {"enum": ["moments", "mle"]},
        "pseudocount": {"type": "number"},
        "quadrature_nodes": {"type": "integer"},
        "genotyping": {"enum": ["on", "off", "auto"]},
        "genotype_inflation": {"type": "number"},
        "delta_formula": {"enum": ["posterior", "literal"]},
        "min_empirical_null": {"type": "integer"},
        "min_marginal": {"type": "integer"},
        "max_iterations": {"type": "integer"},
        "tolerance": {"type": "number"},
        "diagnostics_bins": {"type": "integer"},
    },
    "additionalProperties": False,
}

_LAW = {
    "type": "object",
    "required": ["law"],
    "properties": {
        "law": {"enum": ["constant", "log_uniform", "quantiles"]},
        "value": {"type": "number"},
        "low": {"type": "number"},
        "high": {"type": "number"},
        "table": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            "minItems": 2,
        },
    },
}

_PER_SAMPLE = {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}}]}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["design", "positions", "samples", "depth", "mu"],
    "properties": {
        "name": {"type": "string"},
        "design": {"enum": ["unmatched", "matched"]},
        "contig": {"type": "string"},
        "positions": {"type": "integer", "minimum": 1},
        "samples": {"type": "integer", "minimum": 1},
        "reference_samples": {"type": "integer", "minimum": 0},
        "depth": _LAW,
        "tumor_depth": _LAW,
        "mu": {
            "type": "object",
            "required": ["low", "high"],
            "properties": {"low": {"type": "number"}, "high": {"type": "number"}},
        },
        "delta": _PER_SAMPLE,
        "sigma": _PER_SAMPLE,
        "eta": _PER_SAMPLE,
        "tau": _PER_SAMPLE,
        "planted": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["positions", "samples", "prevalence"],
                "properties": {
                    "positions": {"type": "array", "items": {"type": "integer"}},
                    "samples": {"type": "array", "items": {"type": "integer"}},
                    "prevalence": {"type": "number"},
                },
            },
        },
        "germline": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["positions", "samples", "genotype"],
                "properties": {
                    "positions": {"type": "array", "items": {"type": "integer"}},
                    "samples": {"type": "array", "items": {"type": "integer"}},
                    "genotype": {"enum": ["het", "hom_alt"]},
                },
            },
        },
        "seed": {"type": "integer", "minimum": 0},
    },
}

_NUMBER_OR_NULL = {"type": ["number", "null"]}

MODEL_DOCUMENT_SCHEMA = {
    "type": "object",
    "required": ["format_version", "design", "positions", "samples", "metadata"],
    "properties": {
        "format_version": {"const": 1},
        "design": {"enum": ["unmatched", "matched"]},
        "positions": {
            "type": "object",
            "required": ["contig", "pos", "mu", "mu_se"],
            "properties": {
                "contig": {"type": "array", "items": {"type": "string"}},
                "pos": {"type": "array", "items": {"type": "integer"}},
                "mu": {"type": "array", "items": _NUMBER_OR_NULL},
                "mu_se": {"type": "array", "items": _NUMBER_OR_NULL},
                "region_id": {"type": "array", "items": {"type": "integer"}},
            },
        },
        "samples": {
            "type": "object",
            "required": ["id", "delta", "sigma"],
            "properties": {
                "id": {"type": "array", "items": {"type": "string"}},
                "delta": {"type": "array", "items": {"type": "number"}},
                "sigma": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "eta": {"type": "array", "items": {"type": "number"}},
                "tau": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "region_sigma": {"type": "array", "items": {"type": "array", "items": _NUMBER_OR_NULL}},
            },
        },
        "genotypes": {
            "type": "object",
            "required": ["index", "calls", "mu", "inflated", "inflation"],
            "properties": {
                "index": {"type": "array", "items": {"type": "integer"}},
                "calls": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
                "mu": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                "inflated": {"type": "array", "items": {"type": "boolean"}},
                "inflation": {"type": "number"},
            },
        },
        "metadata": {"type": "object"},
    },
}


def _schema_errors(data: Any, schema: Dict[str, Any]) -> Dict[str, str]:
    """Flatten jsonschema errors to a field -> message mapping."""
    errors = {}
    for error in sorted(Draft7Validator(schema).iter_errors(data), key=lambda e: list(e.path)):
        field = ".".join(str(p) for p in error.path) or "document"
        errors.setdefault(field, error.message)
    return errors


# --- Validators ---

def validate_pipeline_config(data: Dict[str, Any]) -> Tuple[bool, Optional[Dict[str, str]]]:
    """
    Validate pipeline configuration values

    Args:
        data: Dictionary of configuration values

    Returns:
        Tuple of (is_valid, errors_dict)
        errors_dict is None if validation passes, otherwise contains field -> error message mapping
    """
    errors = _schema_errors(data, PIPELINE_CONFIG_SCHEMA)
    if errors:
        return False, errors

    for key in ("fdr_threshold", "fdr_threshold_strict", "delta_threshold"):
        if key in data and not 0 < data[key] <= 1:
            errors[key] = "Must be in (0, 1]"

    if "marginal_df" in data and not 3 <= data["marginal_df"] <= 15:
        errors["marginal_df"] = "Must be an integer in [3, 15]"

    if "marginal_bins" in data and data["marginal_bins"] < data.get("marginal_df", 7) + 2:
        errors["marginal_bins"] = "Must be at least marginal_df + 2"

    if "region_quantile" in data and not 0.5 <= data["region_quantile"] < 1:
        errors["region_quantile"] = "Must be in [0.5, 1)"

    if "pseudocount" in data and not data["pseudocount"] > 0:
        errors["pseudocount"] = "Must be positive"

    if "quadrature_nodes" in data and not 2 <= data["quadrature_nodes"] <= 256:
        errors["quadrature_nodes"] = "Must be an integer in [2, 256]"

    if "genotype_inflation" in data and not data["genotype_inflation"] >= 1:
        errors["genotype_inflation"] = "Must be at least 1"

    for key in ("min_empirical_null", "min_marginal", "max_iterations", "diagnostics_bins"):
        if key in data and data[key] < 1:
            errors[key] = "Must be a positive integer"

    if "tolerance" in data and not 0 < data["tolerance"] < 1:
        errors["tolerance"] = "Must be in (0, 1)"

    return len(errors) == 0, errors if errors else None


def validate_scenario(data: Dict[str, Any]) -> Tuple[bool, Optional[Dict[str, str]]]:
    """
    Validate a simulation scenario

    Args:
        data: Dictionary with scenario fields

    Returns:
        Tuple of (is_valid, errors_dict)
    """
    if not data:
        return False, {"scenario": "Scenario cannot be empty"}

    errors = _schema_errors(data, SCENARIO_SCHEMA)
    if errors:
        return False, errors

    P, S = data["positions"], data["samples"]

    mu = data["mu"]
    if not 0 < mu["low"] <= mu["high"] < 1:
        errors["mu"] = "Need 0 < low <= high < 1"

    for key in ("depth", "tumor_depth"):
        if key not in data:
            continue
        law = data[key]
        if law["law"] == "constant" and not law.get("value", 0) >= 1:
            errors[key] = "Constant depth needs value >= 1"
        elif law["law"] == "log_uniform" and not 1 <= law.get("low", 0) <= law.get("high", 0):
            errors[key] = "Log-uniform depth needs 1 <= low <= high"
        elif law["law"] == "quantiles":
            table = law.get("table", [])
            qs = [row[0] for row in table]
            depths = [row[1] for row in table]
            if not table or qs[0] != 0 or qs[-1] != 1 or any(b <= a for a, b in zip(qs, qs[1:])):
                errors[key] = "Quantile table must increase from 0 to 1"
            elif any(d < 1 for d in depths) or any(b < a for a, b in zip(depths, depths[1:])):
                errors[key] = "Quantile depths must be >= 1 and nondecreasing"

    for key in ("delta", "sigma", "eta", "tau"):
        value = data.get(key)
        if isinstance(value, list) and len(value) != S:
            errors[key] = f"Must be a number or a list of {S} values"
        elif key in ("sigma", "tau") and value is not None:
            values = value if isinstance(value, list) else [value]
            if any(v < 0 for v in values):
                errors[key] = "Variance parameters must be >= 0"

    if data["design"] == "unmatched" and data.get("reference_samples", 0) > S:
        errors["reference_samples"] = "Cannot exceed the number of samples"

    for block in ("planted", "germline"):
        for k, entry in enumerate(data.get(block, [])):
            if any(not 0 <= i < P for i in entry["positions"]):
                errors[f"{block}.{k}.positions"] = f"Position indices must be in [0, {P})"
            if any(not 0 <= j < S for j in entry["samples"]):
                errors[f"{block}.{k}.samples"] = f"Sample indices must be in [0, {S})"
            if block == "planted" and not 0 < entry["prevalence"] <= 1:
                errors[f"{block}.{k}.prevalence"] = "Must be in (0, 1]"

    return len(errors) == 0, errors if errors else None


def validate_model_document(doc: Dict[str, Any]) -> Tuple[bool, Optional[Dict[str, str]]]:
    """
    Validate a fitted error model document

    Args:
        doc: Parsed model JSON

    Returns:
        Tuple of (is_valid, errors_dict)
    """
    errors = _schema_errors(doc, MODEL_DOCUMENT_SCHEMA)
    if errors:
        return False, errors

    positions, samples = doc["positions"], doc["samples"]
    P = len(positions["pos"])
    for key in ("contig", "mu", "mu_se", "region_id"):
        if key in positions and len(positions[key]) != P:
            errors[f"positions.{key}"] = f"Must have {P} entries"

    S = len(samples["id"])
    for key in ("delta", "sigma", "eta", "tau", "region_sigma"):
        if key in samples and len(samples[key]) != S:
            errors[f"samples.{key}"] = f"Must have {S} entries"

    if doc["design"] == "matched" and ("eta" not in samples or "tau" not in samples):
        errors["samples"] = "Matched models need eta and tau"

    for value in positions["mu"]:
        if value is not None and not 0 < value < 1:
            errors["positions.mu"] = "Rates must be in (0, 1)"
            break

    return len(errors) == 0, errors if errors else None


def load_json_document(path: str) -> Dict[str, Any]:
    """Read a JSON file, raising an input error that names the path."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError:
        raise input_error(f"Input file not found: {path}", path=path, error_code="file_not_found")
    except json.JSONDecodeError as exc:
        raise input_error(f"Invalid JSON: {exc.msg}", path=path, line_number=exc.lineno)
