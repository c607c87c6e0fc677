import json

import numpy as np
import pytest
from click.testing import CliRunner

from rarevar.models.pileup import PileupMatrix
from rarevar.models.simgen import SimScenario, preset, simulate


def make_matrix(x, n, samples=None, contig="chr1", start=1, ref="A"):
    """Small PileupMatrix from nested lists of counts and depths."""
    x = np.asarray(x, dtype=np.int64)
    n = np.asarray(n, dtype=np.int64)
    if x.ndim == 1:
        x, n = x[:, None], n[:, None]
    P, S = x.shape
    samples = samples or [f"s{j + 1}" for j in range(S)]
    return PileupMatrix(
        contigs=[contig] * P,
        coords=np.arange(start, start + P),
        samples=samples,
        x=x,
        n=n,
        reference_base=[ref] * P,
    )


SMALL_UNMATCHED = {
    "name": "small-unmatched",
    "design": "unmatched",
    "positions": 300,
    "samples": 4,
    "reference_samples": 2,
    "depth": {"law": "constant", "value": 20000},
    "mu": {"low": 1e-3, "high": 3e-3},
    "sigma": 0.2,
    "planted": [{"positions": [20, 80, 140, 200, 260], "samples": [2, 3], "prevalence": 0.03}],
    "seed": 3,
}

SMALL_MATCHED = {
    "name": "small-matched",
    "design": "matched",
    "positions": 400,
    "samples": 2,
    "depth": {"law": "constant", "value": 400},
    "tumor_depth": {"law": "constant", "value": 400},
    "mu": {"low": 2e-3, "high": 6e-3},
    "sigma": 0.3,
    "eta": 0.0,
    "tau": 0.2,
    "planted": [{"positions": [10, 60, 110, 160, 210, 260, 310, 360], "samples": [0, 1], "prevalence": 0.4}],
    "seed": 5,
}


@pytest.fixture
def runner():
    """A CLI runner keeping stdout (JSON reports) apart from stderr (logs, errors)."""
    try:
        return CliRunner(mix_stderr=False)
    except TypeError:
        return CliRunner()


@pytest.fixture
def small_unmatched():
    return simulate(SimScenario.from_dict(SMALL_UNMATCHED))


@pytest.fixture
def small_matched():
    return simulate(SimScenario.from_dict(SMALL_MATCHED))


@pytest.fixture(scope="session")
def virus_simulation():
    return simulate(preset("virus", seed=0))


@pytest.fixture(scope="session")
def tumor_simulation():
    return simulate(preset("tumor-small", seed=0))


@pytest.fixture
def scenario_file(tmp_path):
    """Write a scenario dict to JSON and return its path."""
    def _write(data, name="scenario.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)
    return _write


@pytest.fixture
def write_text(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return _write
