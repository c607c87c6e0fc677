import json
import unittest

import numpy as np
import pytest

from rarevar.models.pileup import MatchedPileup, PileupMatrix
from rarevar.models.simgen import (
    PRESETS,
    DepthLaw,
    SimScenario,
    TruthTable,
    exact_fdr_oracle,
    load_scenario,
    preset,
    sample_two_group,
    simulate,
)
from rarevar.tests.conftest import SMALL_UNMATCHED
from rarevar.utils.error_handling import InputError, ValidationError
from rarevar.utils.statfun import DiscreteDist

pytestmark = pytest.mark.simulation


def scenario(**overrides):
    data = {
        "design": "unmatched",
        "positions": 50,
        "samples": 2,
        "depth": {"law": "constant", "value": 10000},
        "mu": {"low": 1e-3, "high": 1e-3},
        "sigma": 0.0,
    }
    data.update(overrides)
    return SimScenario.from_dict(data)


class TestPresets(unittest.TestCase):

    def test_virus_layout(self):
        sim = simulate(preset("virus", seed=0))
        self.assertIsInstance(sim.data, PileupMatrix)
        self.assertEqual(sim.data.x.shape, (281, 6))
        self.assertEqual(sim.data.samples, ["ref1", "ref2", "ref3", "clin1", "clin2", "clin3"])
        self.assertEqual(len(sim.truth), 42)
        self.assertEqual(set(sim.truth.samples), {"clin1", "clin2", "clin3"})
        self.assertEqual(sim.scenario.sigma, [0.29] * 6)

    def test_tumor_small_layout(self):
        s = preset("tumor-small")
        self.assertEqual(s.depth.median, 171)
        sim = simulate(s)
        self.assertIsInstance(sim.data, MatchedPileup)
        self.assertEqual(sim.data.samples, ["pair1", "pair2", "pair3", "pair4"])
        self.assertEqual(len(sim.truth), 80)

    def test_seed_override(self):
        self.assertEqual(preset("virus", seed=12).seed, 12)
        self.assertEqual(PRESETS["virus"]["seed"], 0)

    def test_unknown_preset(self):
        with self.assertRaises(ValidationError) as ctx:
            preset("bacteria")
        self.assertEqual(ctx.exception.code_name, "unknown_preset")
        self.assertIn("virus", ctx.exception.invalid_fields["preset"])
        self.assertIn("tumor-small", ctx.exception.invalid_fields["preset"])


class TestDeterminism(unittest.TestCase):

    def test_same_seed_same_data(self):
        a = simulate(SimScenario.from_dict(SMALL_UNMATCHED))
        b = simulate(SimScenario.from_dict(SMALL_UNMATCHED))
        np.testing.assert_array_equal(a.data.x, b.data.x)
        np.testing.assert_array_equal(a.mu, b.mu)

    def test_other_seed_other_data(self):
        s = SimScenario.from_dict(SMALL_UNMATCHED)
        a = simulate(s)
        b = simulate(s.with_seed(s.seed + 1))
        self.assertFalse(np.array_equal(a.data.x, b.data.x))

    def test_blocks_do_not_depend_on_length(self):
        short = simulate(scenario(positions=4096, sigma=0.3))
        long = simulate(scenario(positions=5000, sigma=0.3))
        np.testing.assert_array_equal(short.data.x, long.data.x[:4096])
        np.testing.assert_array_equal(short.data.n, long.data.n[:4096])


class TestHierarchy(unittest.TestCase):

    def test_no_overdispersion_gives_binomial_counts(self):
        sim = simulate(scenario(positions=2000, sigma=0.0))
        rates = sim.data.x / sim.data.n
        self.assertAlmostEqual(float(rates.mean()), 1e-3, delta=1e-4)
        # binomial variance of x/n
        self.assertAlmostEqual(float(rates.var()), 1e-3 * (1 - 1e-3) / 10000, delta=2e-8)

    def test_planted_mutations_raise_the_rate(self):
        sim = simulate(scenario(planted=[{"positions": [3, 7], "samples": [1], "prevalence": 0.3}]))
        rates = sim.data.x / sim.data.n
        self.assertTrue(np.all(rates[[3, 7], 1] > 0.25))
        self.assertTrue(np.all(rates[[3, 7], 0] < 0.01))
        self.assertEqual(sorted(sim.truth.coords), [4, 8])

    def test_germline_genotypes(self):
        sim = simulate(scenario(germline=[
            {"positions": [1], "samples": [0], "genotype": "het"},
            {"positions": [2], "samples": [1], "genotype": "hom_alt"},
        ]))
        rates = sim.data.x / sim.data.n
        self.assertAlmostEqual(float(rates[1, 0]), 0.5, delta=0.05)
        self.assertGreater(float(rates[2, 1]), 0.99)
        self.assertEqual(len(sim.truth), 0)

    def test_matched_mutations_live_in_the_tumor(self):
        sim = simulate(scenario(
            design="matched", eta=0.0, tau=0.1,
            planted=[{"positions": [5], "samples": [0], "prevalence": 0.4}],
        ))
        normal = sim.data.normal.x / sim.data.normal.n
        tumor = sim.data.tumor.x / sim.data.tumor.n
        self.assertLess(float(normal[5, 0]), 0.01)
        self.assertGreater(float(tumor[5, 0]), 0.35)

    def test_split_reference(self):
        sim = simulate(scenario(samples=3, reference_samples=1))
        reference, clinical = sim.split_reference()
        self.assertEqual(reference.samples, ["ref1"])
        self.assertEqual(clinical.samples, ["clin1", "clin2"])
        matched = simulate(scenario(design="matched"))
        with self.assertRaises(ValidationError):
            matched.split_reference()


class TestScenarioValidation(unittest.TestCase):

    def assert_invalid(self, field, **overrides):
        with self.assertRaises(ValidationError) as ctx:
            scenario(**overrides)
        self.assertEqual(ctx.exception.code_name, "invalid_scenario")
        self.assertIn(field, ctx.exception.invalid_fields)

    def test_positions_must_be_positive(self):
        self.assert_invalid("positions", positions=0)

    def test_mu_range(self):
        self.assert_invalid("mu", mu={"low": 0.2, "high": 0.1})

    def test_per_sample_list_length(self):
        self.assert_invalid("sigma", sigma=[0.1, 0.2, 0.3])

    def test_negative_sigma(self):
        self.assert_invalid("sigma", sigma=-0.1)

    def test_planted_index_out_of_range(self):
        self.assert_invalid("planted.0.positions", planted=[{"positions": [50], "samples": [0], "prevalence": 0.1}])

    def test_prevalence_range(self):
        self.assert_invalid("planted.0.prevalence", planted=[{"positions": [1], "samples": [0], "prevalence": 0.0}])

    def test_quantile_table_must_span_zero_to_one(self):
        self.assert_invalid("depth", depth={"law": "quantiles", "table": [[0.1, 10], [1.0, 20]]})

    def test_round_trip_through_dict(self):
        s = scenario(planted=[{"positions": [1], "samples": [0], "prevalence": 0.2}], name="rt")
        self.assertEqual(SimScenario.from_dict(s.to_dict()), s)


def test_log_uniform_depths_stay_in_range():
    law = DepthLaw(law="log_uniform", low=100, high=10000)
    depths = law.quantile(np.linspace(0, 1, 11))
    assert depths[0] == 100
    assert depths[-1] == 10000
    assert law.median == 1000


def test_load_scenario(scenario_file):
    path = scenario_file(SMALL_UNMATCHED)
    s = load_scenario(path)
    assert s.name == "small-unmatched"
    assert s.reference_samples == 2


def test_load_scenario_errors(tmp_path, write_text):
    with pytest.raises(InputError) as excinfo:
        load_scenario(str(tmp_path / "missing.json"))
    assert excinfo.value.code_name == "file_not_found"
    path = write_text("broken.json", '{\n  "design": "matched",\n  oops\n}')
    with pytest.raises(InputError) as excinfo:
        load_scenario(path)
    assert excinfo.value.line_number == 3


def test_truth_table_with_provenance_header(tmp_path, small_unmatched):
    path = str(tmp_path / "truth.csv")
    small_unmatched.truth.write(path, header="# rarevar seed=3")
    with open(path) as handle:
        assert handle.readline().startswith("#")
    loaded = TruthTable.load(path)
    assert loaded.keys() == small_unmatched.truth.keys()
    assert len(loaded) == 10


class TestOracle(unittest.TestCase):

    def setUp(self):
        self.null = DiscreteDist.binomial(40, 0.3)
        self.alt = DiscreteDist.binomial(40, 0.55)

    def test_all_null_prior(self):
        table = exact_fdr_oracle(self.null, self.alt, 1.0)
        np.testing.assert_array_equal(table["fdr"], 1.0)

    def test_identical_laws_give_the_prior(self):
        table = exact_fdr_oracle(self.null, self.null, 0.95)
        np.testing.assert_allclose(table["fdr"], 0.95)

    def test_hand_computed_values(self):
        f = DiscreteDist([0, 1], [0.5, 0.5])
        a = DiscreteDist([0, 1], [0.1, 0.9])
        table = exact_fdr_oracle(f, a, 0.5)
        np.testing.assert_allclose(table["fdr"], [0.25 / 0.30, 0.25 / 0.70])

    def test_undefined_where_both_laws_vanish(self):
        f = DiscreteDist([0, 1, 2], [0.5, 0.0, 0.5])
        a = DiscreteDist([0, 2], [0.5, 0.5])
        table = exact_fdr_oracle(f, a, 0.5)
        self.assertTrue(np.isnan(table["fdr"].iloc[1]))

    def test_fdr_decreases_toward_the_alternative(self):
        table = exact_fdr_oracle(self.null, self.alt, 0.95)
        self.assertTrue(np.all(np.diff(table["fdr"].to_numpy()) < 0))

    def test_invalid_weight(self):
        with self.assertRaises(ValidationError):
            exact_fdr_oracle(self.null, self.alt, 1.5)

    def test_support_cap(self):
        with self.assertRaises(ValidationError):
            exact_fdr_oracle(DiscreteDist.binomial(300, 0.5), self.alt, 0.5)

    def test_two_group_sample(self):
        values, is_null = sample_two_group(self.null, self.alt, 0.95, 20000, seed=1)
        self.assertAlmostEqual(float(is_null.mean()), 0.95, delta=0.01)
        again, _ = sample_two_group(self.null, self.alt, 0.95, 20000, seed=1)
        np.testing.assert_array_equal(values, again)
        self.assertGreater(values[~is_null].mean(), values[is_null].mean())


def test_scenario_json_is_serializable(small_matched):
    json.dumps(small_matched.scenario.to_dict())
