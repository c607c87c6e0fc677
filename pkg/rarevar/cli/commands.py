import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import click
import numpy as np
from scipy import stats

from rarevar import __version__, create_config
from rarevar.cli.manifest import RunManifest
from rarevar.models.caller import (
    PipelineConfig,
    call_matched,
    call_unmatched,
    diagnostics,
    format_summary,
    summarize_calls,
)
from rarevar.models.discrete_fdr import FdrTable, fdr_model_document, theorem_suite
from rarevar.models.discrete_fdr import verify_theorem as check_identities
from rarevar.models.error_model import (
    ErrorModelParams,
    MatchedModelParams,
    fit_error_model,
    fit_matched_model,
    load_model_document,
)
from rarevar.models.pileup import MatchedPileup
from rarevar.models.simgen import TruthTable, load_scenario, preset
from rarevar.models.simgen import simulate as draw_simulation
from rarevar.utils.error_handling import numeric_error, validation_error
from rarevar.utils.output import provenance_header, read_csv, success_report, to_json, write_csv, write_json
from rarevar.utils.pileup_parser import load_matched, load_pileup, load_region_map, write_pileup
from rarevar.utils.statfun import DiscreteDist
from rarevar.utils.validation import load_json_document

logger = logging.getLogger(__name__)

SEED_ENVVAR = "RAREVAR_SEED"
POISSON_TAIL = 1e-12


# --- Shared helpers ---

def _echo(report: Dict[str, Any]) -> None:
    click.echo(to_json(success_report(report)))


def _header(manifest: RunManifest, cfg: Optional[PipelineConfig]) -> str:
    fingerprint = cfg.fingerprint() if cfg is not None else "-"
    seed = manifest.seed if manifest.seed is not None else "-"
    return provenance_header(__version__, manifest.digest, fingerprint, seed)


def _load_design(ref: Optional[str], matched: Optional[str], normal: Optional[str], tumor: Optional[str]):
    """Resolve the input flags of `fit` to ('unmatched', matrix) or ('matched', MatchedPileup)."""
    chosen = [name for name, value in (("--ref", ref), ("--matched", matched), ("--normal/--tumor", normal or tumor))
              if value]
    if len(chosen) != 1:
        raise validation_error(
            "Provide exactly one input: --ref, --matched or --normal with --tumor",
            invalid_fields={"inputs": f"Got {', '.join(chosen) or 'none'}"},
        )
    if ref:
        return "unmatched", load_pileup(ref, "unmatched")
    if matched:
        return "matched", load_pileup(matched, "matched")
    if not (normal and tumor):
        raise validation_error("--normal and --tumor must be given together",
                               invalid_fields={"tumor" if normal else "normal": "Missing"})
    return "matched", load_matched(normal, tumor)


def _regions(path: Optional[str], data):
    if not path:
        return None
    matrix = data.normal if isinstance(data, MatchedPileup) else data
    return load_region_map(path, matrix)


# --- fit ---

@click.command()
@click.option("--ref", type=click.Path(dir_okay=False), help="Reference pileup TSV (unmatched design)")
@click.option("--matched", type=click.Path(dir_okay=False), help="Matched pileup TSV (xn_/nn_/xt_/nt_ columns)")
@click.option("--normal", type=click.Path(dir_okay=False), help="Normal pileup TSV, paired with --tumor")
@click.option("--tumor", type=click.Path(dir_okay=False), help="Tumor pileup TSV, paired with --normal")
@click.option("--method", type=click.Choice(["mle", "moments"]), default=None, help="Sigma estimator")
@click.option("--regions", type=click.Path(dir_okay=False), help="Region map TSV for sigma pooling")
@click.option("--quantile", type=float, default=None, help="Region quantile reported as sigma")
@click.option("--pseudocount", type=float, default=None, help="Logit pseudocount")
@click.option("--genotyping", type=click.Choice(["auto", "on", "off"]), default=None)
@click.option("--config", "config_file", type=click.Path(dir_okay=False), help="JSON pipeline configuration")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Model JSON to write")
def fit(ref, matched, normal, tumor, method, regions, quantile, pseudocount, genotyping, config_file, out):
    """Fit the reference error model and write it as JSON."""
    cfg = create_config(config_file, {
        "sigma_method": method,
        "region_quantile": quantile,
        "pseudocount": pseudocount,
        "genotyping": genotyping,
    })
    manifest = RunManifest(command="fit", config=cfg.to_dict(), seed=cfg.seed)
    for role, path in (("ref", ref), ("matched", matched), ("normal", normal), ("tumor", tumor),
                       ("regions", regions), ("config", config_file)):
        manifest.add_input(role, path)

    with manifest.stage("load"):
        design, data = _load_design(ref, matched, normal, tumor)
        region_map = _regions(regions, data)

    with manifest.stage("fit"):
        if design == "matched":
            params = fit_matched_model(data, cfg.sigma_method, region_map, cfg.region_quantile, cfg.pseudocount,
                                       cfg.genotyping, cfg.genotype_inflation, cfg.quadrature_nodes)
        else:
            params = fit_error_model(data, cfg.sigma_method, region_map, cfg.region_quantile, cfg.pseudocount,
                                     cfg.genotyping, cfg.genotype_inflation)
    samples = params.samples

    doc = params.to_document()
    doc["metadata"]["provenance"] = {"manifest": manifest.digest, "config": cfg.fingerprint(),
                                     "version": __version__}
    write_json(doc, out)
    manifest.outputs.append(out)
    manifest_path = os.path.splitext(out)[0] + ".manifest.json"
    manifest.write(manifest_path)

    base = params.base if isinstance(params, MatchedModelParams) else params
    logger.info(f"Wrote {design} model for {len(samples)} samples to {out}")
    _echo({
        "design": design,
        "model": out,
        "manifest": manifest_path,
        "digest": manifest.digest,
        "samples": samples,
        "sigma": [float(v) for v in base.sigma],
        "estimable_positions": int(base.estimable.sum()),
    })


# --- call ---

def _load_call_inputs(ref, clinical, matched, normal, tumor):
    if clinical:
        if matched or normal or tumor:
            raise validation_error("--clinical cannot be combined with matched inputs",
                                   invalid_fields={"clinical": "Unmatched input"})
        reference = load_pileup(ref, "unmatched") if ref else None
        return "unmatched", reference, load_pileup(clinical, "unmatched")
    if ref:
        raise validation_error("--ref needs --clinical", invalid_fields={"clinical": "Missing"})
    design, data = _load_design(None, matched, normal, tumor)
    return design, None, data


def _load_model(path: Optional[str], design: str):
    if not path:
        return None
    params = load_model_document(load_json_document(path))
    expected = MatchedModelParams if design == "matched" else ErrorModelParams
    if not isinstance(params, expected):
        raise validation_error(f"Model in {path} does not fit the {design} design",
                               error_code="invalid_model_document",
                               invalid_fields={"design": f"Expected a {design} model"})
    return params


@click.command()
@click.option("--ref", type=click.Path(dir_okay=False), help="Reference pileup TSV (unmatched design)")
@click.option("--clinical", type=click.Path(dir_okay=False), help="Clinical pileup TSV (unmatched design)")
@click.option("--matched", type=click.Path(dir_okay=False), help="Matched pileup TSV")
@click.option("--normal", type=click.Path(dir_okay=False), help="Normal pileup TSV, paired with --tumor")
@click.option("--tumor", type=click.Path(dir_okay=False), help="Tumor pileup TSV, paired with --normal")
@click.option("--model", type=click.Path(dir_okay=False), help="Model JSON written by `fit`")
@click.option("--regions", type=click.Path(dir_okay=False), help="Region map TSV for sigma pooling")
@click.option("--config", "config_file", type=click.Path(dir_okay=False), help="JSON pipeline configuration")
@click.option("--fdr", "fdr_threshold", type=float, default=None, help="Local fdr threshold")
@click.option("--delta", "delta_threshold", type=float, default=None, help="|delta_hat| threshold (matched)")
@click.option("--mode", type=click.Choice(["randomized", "mid_p"]), default=None, help="p-value mode")
@click.option("--seed", type=int, default=None, envvar=SEED_ENVVAR, help="Seed of the randomized p-values")
@click.option("--empirical-null", type=click.Choice(["on", "off", "auto"]), default=None)
@click.option("--df", "marginal_df", type=int, default=None, help="Spline degrees of freedom")
@click.option("--bins", "marginal_bins", type=int, default=None, help="Histogram bins of the marginal fit")
@click.option("--truth", type=click.Path(dir_okay=False), help="Truth CSV; adds a detection summary")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="Directory for the outputs")
def call(ref, clinical, matched, normal, tumor, model, regions, config_file, fdr_threshold, delta_threshold, mode,
         seed, empirical_null, marginal_df, marginal_bins, truth, out_dir):
    """Score every (position, sample) cell and write calls plus diagnostics."""
    cfg = create_config(config_file, {
        "fdr_threshold": fdr_threshold,
        "delta_threshold": delta_threshold,
        "pvalue_mode": mode,
        "seed": seed,
        "empirical_null": empirical_null,
        "marginal_df": marginal_df,
        "marginal_bins": marginal_bins,
    })
    manifest = RunManifest(command="call", config=cfg.to_dict(), seed=cfg.seed)
    for role, path in (("ref", ref), ("clinical", clinical), ("matched", matched), ("normal", normal),
                       ("tumor", tumor), ("model", model), ("regions", regions), ("config", config_file),
                       ("truth", truth)):
        manifest.add_input(role, path)

    with manifest.stage("load"):
        design, reference, data = _load_call_inputs(ref, clinical, matched, normal, tumor)
        params = _load_model(model, design)
        if design == "unmatched" and reference is None and params is None:
            raise validation_error("Unmatched calling needs --ref or --model",
                                   invalid_fields={"ref": "Missing", "model": "Missing"})
        region_map = _regions(regions, reference if reference is not None else data)
        truth_table = TruthTable.load(truth) if truth else None

    with manifest.stage("call"):
        if design == "matched":
            result = call_matched(data, cfg, params, region_map)
        else:
            result = call_unmatched(reference, data, cfg, params, region_map)

    header = _header(manifest, cfg)
    paths = {name: os.path.join(out_dir, name) for name in
             ("calls.csv", "fdr_table.csv", "histogram.csv", "qq.csv", "marginal.csv", "model.json",
              "manifest.json")}
    write_csv(result.records_frame(), paths["calls.csv"], header)
    write_csv(result.table.to_frame(), paths["fdr_table.csv"], header)
    write_csv(result.diagnostics.histogram, paths["histogram.csv"], header)
    write_csv(result.diagnostics.qq, paths["qq.csv"], header)
    doc = result.params.to_document()
    if result.marginal is not None:
        write_csv(result.marginal.grid(), paths["marginal.csv"], header)
        doc["fdr"] = fdr_model_document(result.marginal, result.empirical_nulls)
    else:
        del paths["marginal.csv"]
    doc["metadata"]["provenance"] = {"manifest": manifest.digest, "config": cfg.fingerprint(),
                                     "version": __version__}
    write_json(doc, paths["model.json"])

    report = {
        "design": design,
        "records": len(result.records),
        "calls": len(result.calls),
        "digest": manifest.digest,
        "diagnostics": result.diagnostics.summary,
    }
    if truth_table is not None:
        matched_design = design == "matched"
        summary = summarize_calls(result.records, truth_table,
                                  thresholds=(cfg.fdr_threshold, cfg.fdr_threshold_strict),
                                  delta_threshold=cfg.delta_threshold if matched_design else None)
        paths["summary.csv"] = os.path.join(out_dir, "summary.csv")
        write_csv(summary, paths["summary.csv"], header)
        report["summary"] = format_summary(summary)
        report["detection"] = summary.to_dict(orient="records")
        logger.info(report["summary"])

    manifest.outputs.extend(path for name, path in paths.items() if name != "manifest.json")
    manifest.write(paths["manifest.json"])
    report["outputs"] = sorted(paths)
    _echo(report)


# --- simulate ---

@click.command("simulate")
@click.option("--preset", "preset_name", help="Built-in scenario: virus or tumor-small")
@click.option("--scenario", type=click.Path(dir_okay=False), help="Scenario JSON file")
@click.option("--seed", type=int, default=None, envvar=SEED_ENVVAR, help="Overrides the scenario seed")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="Directory for the outputs")
def simulate(preset_name, scenario, seed, out_dir):
    """Draw a pileup and its truth table from a scenario."""
    if bool(preset_name) == bool(scenario):
        raise validation_error("Provide exactly one of --preset or --scenario",
                               invalid_fields={"scenario": "Choose a preset or a file"})
    s = preset(preset_name, seed) if preset_name else load_scenario(scenario)
    if seed is not None and scenario:
        s = s.with_seed(seed)

    manifest = RunManifest(command="simulate", config=s.to_dict(), seed=s.seed)
    manifest.add_input("scenario", scenario)
    with manifest.stage("simulate"):
        sim = draw_simulation(s)

    header = _header(manifest, None)
    os.makedirs(out_dir, exist_ok=True)
    written: List[str] = []

    def pileup_out(name, data):
        path = os.path.join(out_dir, name)
        write_pileup(data, path, header)
        written.append(path)

    if s.design == "matched":
        pileup_out("matched.tsv", sim.data)
    else:
        pileup_out("pileup.tsv", sim.data)
        if 0 < s.reference_samples < s.samples:
            reference, clinical = sim.split_reference()
            pileup_out("reference.tsv", reference)
            pileup_out("clinical.tsv", clinical)

    truth_path = os.path.join(out_dir, "truth.csv")
    sim.truth.write(truth_path, header)
    scenario_path = write_json(s.to_dict(), os.path.join(out_dir, "scenario.json"))
    written.extend([truth_path, scenario_path])
    manifest.outputs.extend(written)
    manifest.write(os.path.join(out_dir, "manifest.json"))

    matrix = sim.data.normal if isinstance(sim.data, MatchedPileup) else sim.data
    logger.info(f"Simulated {matrix.n_positions} positions x {matrix.n_samples} samples ({s.name})")
    _echo({
        "scenario": s.name,
        "design": s.design,
        "positions": matrix.n_positions,
        "samples": matrix.samples,
        "planted": len(sim.truth),
        "median_depth": float(np.median(matrix.n)),
        "digest": manifest.digest,
        "outputs": sorted(os.path.basename(p) for p in written) + ["manifest.json"],
    })


# --- diagnose ---

@click.command()
@click.option("--table", required=True, type=click.Path(dir_okay=False), help="fdr_table.csv written by `call`")
@click.option("--bins", type=int, default=50, show_default=True, help="Histogram bins")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="Directory for the outputs")
def diagnose(table, bins, out_dir):
    """Histogram and probit QQ series for an existing fdr table."""
    manifest = RunManifest(command="diagnose", config={"bins": bins}, seed=None)
    manifest.add_input("table", table)
    with manifest.stage("diagnose"):
        diag = diagnostics(FdrTable.from_frame(read_csv(table)), bins)

    header = _header(manifest, None)
    histogram_path = write_csv(diag.histogram, os.path.join(out_dir, "histogram.csv"), header)
    qq_path = write_csv(diag.qq, os.path.join(out_dir, "qq.csv"), header)
    manifest.outputs.extend([histogram_path, qq_path])
    manifest.write(os.path.join(out_dir, "manifest.json"))
    _echo({"summary": diag.summary, "digest": manifest.digest,
           "outputs": ["histogram.csv", "manifest.json", "qq.csv"]})


# --- verify-theorem ---

def _poisson_upper(rate: float) -> int:
    return int(stats.poisson(rate).isf(POISSON_TAIL))


def parse_law(spec: str, poisson_upper: Optional[int] = None) -> DiscreteDist:
    """
    Parse 'poisson:<rate>', 'binomial:<n>:<p>' or 'pmf:<p0>,<p1>,...'.

    Poisson laws are truncated at poisson_upper (or their own 1e-12 tail).
    """
    kind, _, rest = spec.partition(":")
    try:
        if kind == "poisson":
            rate = float(rest)
            if rate <= 0:
                raise ValueError(rest)
            return DiscreteDist.poisson(rate, upper=poisson_upper or _poisson_upper(rate))
        if kind == "binomial":
            n, p = rest.split(":")
            return DiscreteDist.binomial(int(n), float(p))
        if kind == "pmf":
            probs = [float(v) for v in rest.split(",")]
            return DiscreteDist(np.arange(len(probs)), probs, label=spec)
    except ValueError:
        pass
    raise validation_error(
        f"Cannot parse law '{spec}'",
        invalid_fields={"pair": "Use poisson:<rate>, binomial:<n>:<p> or pmf:<p0>,<p1>,..."},
    )


def parse_pair(f_spec: str, g_spec: str) -> Tuple[DiscreteDist, DiscreteDist]:
    """Two laws; Poisson members share one truncation point."""
    rates = []
    for spec in (f_spec, g_spec):
        kind, _, rest = spec.partition(":")
        if kind == "poisson":
            try:
                rates.append(float(rest))
            except ValueError:
                pass
    upper = max((_poisson_upper(r) for r in rates if r > 0), default=None)
    return parse_law(f_spec, upper), parse_law(g_spec, upper)


def _report_row(report) -> Dict[str, Any]:
    row = {name: {"lhs": lhs, "rhs": rhs} for name, lhs, rhs in report.pairs()}
    row["max_deviation"] = report.max_deviation
    return row


@click.command("verify-theorem")
@click.option("--pairs", type=int, default=50, show_default=True, help="Random pairs in the suite")
@click.option("--seed", type=int, default=0, envvar=SEED_ENVVAR, show_default=True)
@click.option("--max-support", type=int, default=20, show_default=True, help="Largest random support")
@click.option("--pair", nargs=2, type=str, default=None, help="Check one pair F G instead of the suite")
@click.option("--tolerance", type=float, default=1e-9, show_default=True, help="Largest allowed |LHS - RHS|")
def verify_theorem(pairs, seed, max_support, pair, tolerance):
    """Check the uniformity identities of randomized p-values."""
    if pairs < 1 or max_support < 2:
        raise validation_error("--pairs must be >= 1 and --max-support >= 2", "parameter_out_of_range",
                               {"pairs": f"Got {pairs}", "max_support": f"Got {max_support}"})
    if pair:
        f, g = parse_pair(*pair)
        reports = [check_identities(f, g)]
    else:
        reports = theorem_suite(pairs, seed, max_support)

    rows = [_report_row(r) for r in reports]
    worst = max(r.max_deviation for r in reports)
    if worst > tolerance:
        raise numeric_error(
            f"Identity deviation {worst:.3e} exceeds tolerance {tolerance:.1e}",
            error_code="identity_violation",
            recovery_hint="Check the law specifications for support points impossible under F",
        )

    report: Dict[str, Any] = {"pairs": len(reports), "max_deviation": worst}
    if pair:
        first = reports[0]
        report.update(rows[0])
        report["summary"] = (f"KL(F||G)={first.kl_fg:.4f} KL(G||F)={first.kl_gf:.4f} "
                             f"Kolmogorov={first.kolmogorov:.4f}")
    else:
        report["seed"] = seed
    _echo(report)

