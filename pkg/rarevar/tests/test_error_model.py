import unittest

import numpy as np
import pytest
from scipy import stats

from rarevar.models.error_model import (
    HET,
    HOM_ALT,
    HOM_REF,
    ErrorModelParams,
    MatchedModelParams,
    beta_approx,
    beta_approx_moments,
    calibrate_samples,
    estimate_delta,
    estimate_mu,
    estimate_sigma,
    fit_error_model,
    fit_matched_model,
    genotype_positions,
    load_model_document,
    null_cdf_matched,
    null_cdf_unmatched,
)
from rarevar.models.pileup import RegionMap
from rarevar.models.simgen import SimScenario, simulate
from rarevar.tests.conftest import make_matrix
from rarevar.utils.error_handling import ValidationError
from rarevar.utils.statfun import BetaBinomial, expit, logit, logit_beta_moments

pytestmark = pytest.mark.model


def simulated(**overrides):
    data = {
        "design": "unmatched",
        "positions": 2000,
        "samples": 3,
        "reference_samples": 3,
        "depth": {"law": "constant", "value": 100000},
        "mu": {"low": 1e-3, "high": 3e-3},
        "sigma": 0.25,
        "seed": 21,
    }
    data.update(overrides)
    return simulate(SimScenario.from_dict(data))


def simple_params(mu=(0.01,), sigma=(0.2,), delta=(0.0,), samples=("s1",), **kwargs):
    P = len(mu)
    return ErrorModelParams(["chr1"] * P, np.arange(1, P + 1), list(samples), list(mu), list(delta),
                            list(sigma), **kwargs)


class TestBetaApproximation(unittest.TestCase):

    def test_symmetric_shapes(self):
        alpha, beta = beta_approx(0.5, 0.1)
        self.assertAlmostEqual(alpha, 200.0, places=9)
        self.assertAlmostEqual(beta, 200.0, places=9)

    def test_small_rate(self):
        alpha, beta = beta_approx(0.01, 0.3)
        self.assertAlmostEqual(alpha, 11.2233, places=3)
        self.assertAlmostEqual(beta, 1111.11, places=1)

    def test_vectorized(self):
        alpha, beta = beta_approx(np.array([0.01, 0.5]), 0.1)
        np.testing.assert_allclose(alpha, [1 / (0.01 * 0.99), 200.0])
        np.testing.assert_allclose(beta, [1 / (0.01 * 0.01), 200.0])

    def test_invalid_inputs(self):
        for mu, sigma in ((0.0, 0.1), (1.0, 0.1), (0.01, 0.0), (np.nan, 0.1)):
            with self.assertRaises(ValidationError):
                beta_approx(mu, sigma)

    def test_logit_moments_match_small_sigma(self):
        alpha, beta = beta_approx(0.005, 0.15)
        exact = logit_beta_moments(alpha, beta)
        approx = beta_approx_moments(0.005, 0.15)
        self.assertAlmostEqual(float(exact["variance"]), 0.15 ** 2, delta=0.002)
        self.assertAlmostEqual(float(exact["mean"]), float(approx["mean"]), delta=0.02)
        self.assertAlmostEqual(float(exact["skewness"]), float(approx["skewness"]), delta=0.05)

    def test_moment_grid(self):
        for mu in (1e-3, 1e-2, 0.1):
            for sigma in (0.1, 0.3):
                alpha, beta = beta_approx(mu, sigma)
                exact = {k: float(v) for k, v in logit_beta_moments(alpha, beta).items()}
                corrected = beta_approx_moments(mu, sigma)
                raw = beta_approx_moments(mu, sigma, corrected=False)
                where = f"mu={mu} sigma={sigma}"
                self.assertLess(abs(exact["mean"] / float(logit(mu)) - 1.0), 0.02, msg=where)
                self.assertLess(abs(exact["variance"] / sigma ** 2 - 1.0), 0.05, msg=where)
                self.assertLess(abs(exact["skewness"] / float(corrected["skewness"]) - 1.0), 0.05, msg=where)
                if mu <= 0.01:
                    self.assertLess(abs(exact["skewness"] / float(raw["skewness"]) - 1.0), 0.05, msg=where)

    def test_uncorrected_moments_agree_near_zero(self):
        corrected = beta_approx_moments(1e-4, 0.2)
        raw = beta_approx_moments(1e-4, 0.2, corrected=False)
        self.assertAlmostEqual(float(corrected["skewness"]), float(raw["skewness"]), places=4)
        self.assertNotAlmostEqual(
            float(beta_approx_moments(0.3, 0.2)["skewness"]),
            float(beta_approx_moments(0.3, 0.2, corrected=False)["skewness"]),
            places=3,
        )


class TestEstimators(unittest.TestCase):

    def test_consensus_rate(self):
        m = make_matrix([[10, 10, 10]], [[1000, 1000, 1000]])
        self.assertAlmostEqual(float(estimate_mu(m)[0]), 10.5 / 1001, places=12)

    def test_zero_depth_position_is_unestimable(self):
        m = make_matrix([[0, 0], [3, 4]], [[0, 0], [100, 100]])
        mu = estimate_mu(m)
        self.assertTrue(np.isnan(mu[0]))
        self.assertTrue(np.isfinite(mu[1]))

    def test_delta_recovers_sample_shift(self):
        sim = simulated(positions=500, samples=2, reference_samples=2, sigma=0.0,
                        mu={"low": 1e-2, "high": 1e-2}, delta=[0.0, 0.5])
        delta = estimate_delta(sim.data, np.full(500, 1e-2))
        self.assertAlmostEqual(delta[0], 0.0, delta=0.02)
        self.assertAlmostEqual(delta[1], 0.5, delta=0.02)

    def test_delta_follows_a_shift_of_the_rates(self):
        sim = simulated(positions=400, samples=2, reference_samples=2, sigma=0.2)
        base = estimate_delta(sim.data, sim.mu)
        for b in (0.7, -1.3):
            shifted = expit(logit(sim.mu) - b)
            np.testing.assert_allclose(estimate_delta(sim.data, shifted), base + b, atol=1e-9)

    def test_delta_needs_enough_positions(self):
        m = make_matrix(np.zeros((10, 1)), np.full((10, 1), 100))
        with self.assertRaises(ValidationError) as ctx:
            estimate_delta(m, np.full(10, 1e-3))
        self.assertEqual(ctx.exception.code_name, "insufficient_data")
        np.testing.assert_array_equal(estimate_delta(m, np.full(10, 1e-3), strict=False), [0.0])

    def test_sigma_recovered_by_both_methods(self):
        sim = simulated(samples=1, reference_samples=1, sigma=0.3, delta=0.0)
        for method in ("moments", "mle"):
            fit = estimate_sigma(sim.data, sim.mu, np.zeros(1), method=method)
            self.assertAlmostEqual(fit.sigma[0], 0.3, delta=0.03, msg=method)
            self.assertEqual(fit.methods, [method])

    def test_no_overdispersion_gives_tiny_sigma(self):
        sim = simulated(positions=1000, samples=1, reference_samples=1, sigma=0.0,
                        depth={"law": "constant", "value": 1000000})
        fit = estimate_sigma(sim.data, sim.mu, np.zeros(1), method="mle")
        self.assertLessEqual(fit.sigma[0], 0.02)

    def test_negative_moments_fall_back_to_mle(self):
        m = make_matrix(np.full((100, 1), 10), np.full((100, 1), 1000))
        fit = estimate_sigma(m, np.full(100, 10.5 / 1001), np.zeros(1), method="moments")
        self.assertEqual(fit.methods, ["mle"])
        self.assertIn("moments_negative", fit.flags["s1"])
        self.assertLess(fit.sigma[0], 0.05)

    def test_region_quantile(self):
        sim = simulated(positions=400, samples=1, reference_samples=1)
        regions = RegionMap(np.repeat([1, 2, 3, 4], 100))
        fit = estimate_sigma(sim.data, sim.mu, np.zeros(1), method="moments", regions=regions, quantile=0.75)
        self.assertEqual(fit.region_sigma.shape, (1, 4))
        self.assertAlmostEqual(fit.sigma[0], float(np.quantile(fit.region_sigma[0], 0.75)), places=12)
        np.testing.assert_array_equal(fit.regions, [1, 2, 3, 4])

    def test_region_map_must_match(self):
        sim = simulated(positions=100, samples=1, reference_samples=1)
        with self.assertRaises(ValidationError):
            estimate_sigma(sim.data, sim.mu, np.zeros(1), regions=RegionMap(np.ones(99)))

    def test_invalid_settings(self):
        sim = simulated(positions=100, samples=1, reference_samples=1)
        with self.assertRaises(ValidationError):
            estimate_sigma(sim.data, sim.mu, np.zeros(1), method="bayes")
        with self.assertRaises(ValidationError):
            estimate_sigma(sim.data, sim.mu, np.zeros(1), quantile=0.2)


class TestFitErrorModel(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.sim = simulated()
        cls.params = fit_error_model(cls.sim.data)

    def test_parameters_are_recovered(self):
        np.testing.assert_allclose(self.params.sigma, 0.25, atol=0.05)
        np.testing.assert_allclose(self.params.delta, 0.0, atol=0.05)
        self.assertTrue(np.all(self.params.estimable))
        relative = np.abs(self.params.mu / self.sim.mu - 1.0)
        self.assertLess(float(np.median(relative)), 0.25)

    def test_consensus_standard_error(self):
        self.assertTrue(np.all(self.params.mu_se > 0))
        self.assertTrue(np.all(self.params.mu_se < self.params.sigma.max()))

    def test_metadata(self):
        self.assertEqual(self.params.metadata["reference_samples"], ["ref1", "ref2", "ref3"])
        self.assertIsNone(self.params.genotypes)

    def test_document_round_trip(self):
        doc = self.params.to_document()
        restored = load_model_document(doc)
        self.assertIsInstance(restored, ErrorModelParams)
        np.testing.assert_allclose(restored.mu, self.params.mu)
        np.testing.assert_allclose(restored.sigma, self.params.sigma)

    def test_calibrate_new_samples(self):
        clinical = simulated(samples=2, reference_samples=0, delta=[0.0, 0.4]).data
        calibrated = calibrate_samples(self.params, clinical)
        self.assertEqual(calibrated.samples, ["clin1", "clin2"])
        self.assertAlmostEqual(calibrated.delta[1] - calibrated.delta[0], 0.4, delta=0.05)
        np.testing.assert_allclose(calibrated.sigma, np.median(self.params.sigma))

    def test_calibrate_rejects_other_positions(self):
        other = simulated(positions=100, samples=1, reference_samples=0).data
        with self.assertRaises(ValidationError):
            calibrate_samples(self.params, other)


def test_genotype_mixture_calls():
    x = [[500, 505, 1, 2, 1, 0],
         [1, 0, 999, 1, 2, 1],
         [498, 502, 510, 495, 500, 505]]
    m = make_matrix(x, np.full((3, 6), 1000))
    assignment = genotype_positions(m, candidates=[0, 1, 2])
    np.testing.assert_array_equal(assignment.genotypes[0], [HET, HET, HOM_REF, HOM_REF, HOM_REF, HOM_REF])
    np.testing.assert_array_equal(assignment.genotypes[1], [HOM_REF, HOM_REF, HOM_ALT, HOM_REF, HOM_REF, HOM_REF])
    np.testing.assert_array_equal(assignment.genotypes[2], [HET] * 6)
    np.testing.assert_array_equal(assignment.inflated, [True, True, False])
    assert assignment.genotype_mu[2, HET] == pytest.approx(0.5, abs=0.01)
    assert assignment.counts() == {"hom_ref": 9, "het": 8, "hom_alt": 1}


def test_fit_with_germline_variants():
    sim = simulated(positions=500, samples=4, reference_samples=4, depth={"law": "constant", "value": 5000},
                    germline=[{"positions": [10, 20], "samples": [0, 1], "genotype": "het"}])
    params = fit_error_model(sim.data, genotyping="auto")
    g = params.genotypes
    assert g is not None
    full = g.full_genotypes(500, 4)
    np.testing.assert_array_equal(full[[10, 20]][:, :2], HET)
    assert g.inflated_positions(500)[[10, 20]].all()
    assert params.mu[10] < 0.01
    sigma = params.cell_sigma([10, 30], [0, 0])
    assert sigma[0] == pytest.approx(params.sigma[0] * g.inflation)
    assert sigma[1] == pytest.approx(params.sigma[0])


class TestNullLaws(unittest.TestCase):

    def test_unmatched_null_is_beta_binomial(self):
        params = simple_params(mu=(0.01, 0.02), delta=(0.1,))
        nulls = null_cdf_unmatched(params, [1], [0], [500])
        rate = 1.0 / (1.0 + np.exp(-(logit(0.02) + 0.1)))
        alpha, beta = beta_approx(rate, 0.2)
        expected = BetaBinomial(500, alpha, beta).cdf(12)
        self.assertAlmostEqual(float(nulls.cdf(np.array([12]))[0]), expected, places=10)

    def test_consensus_error_widens_the_null(self):
        params = simple_params(mu_se=[0.3])
        self.assertAlmostEqual(float(params.cell_sigma([0], [0], consensus_error=True)[0]),
                               np.sqrt(0.2 ** 2 + 0.3 ** 2))
        plain = null_cdf_unmatched(params, [0], [0], [10000])
        wide = null_cdf_unmatched(params, [0], [0], [10000], consensus_error=True)
        self.assertGreater(float(wide.tails(np.array([200])).sf[0]), float(plain.tails(np.array([200])).sf[0]))

    def test_unestimable_position(self):
        params = simple_params(mu=(np.nan, 0.01))
        with self.assertRaises(ValidationError):
            null_cdf_unmatched(params, [0], [0], [100])

    def test_matched_null_approaches_binomial(self):
        base = simple_params(sigma=(1e-3,))
        params = MatchedModelParams(base, [0.0], [1e-3])
        nulls = null_cdf_matched(params, [0, 0, 0], [0, 0, 0], [10000] * 3, [1000000] * 3, [1000] * 3)
        y = np.array([5, 10, 15])
        np.testing.assert_allclose(nulls.cdf(y), stats.binom.cdf(y, 1000, 10000 / 1000000), atol=0.01)

    def test_matched_null_follows_the_normal_count(self):
        params = MatchedModelParams(simple_params(), [0.0], [0.2])
        low = null_cdf_matched(params, [0], [0], [2], [1000], [1000])
        high = null_cdf_matched(params, [0], [0], [30], [1000], [1000])
        y = np.array([15])
        self.assertGreater(float(low.cdf(y)[0]), float(high.cdf(y)[0]))

    def test_matched_null_centers_on_the_normal_rate(self):
        params = MatchedModelParams(simple_params(), [0.0], [0.2])
        y = np.arange(61)
        nulls = null_cdf_matched(params, np.zeros(y.size), 0, 10, 1000, 1000)
        median = int(y[np.argmax(nulls.cdf(y) >= 0.5)])
        self.assertLessEqual(abs(median - 10), 2 * np.sqrt(1000 * 0.01 * 0.99))

    def test_matched_null_mirrors_under_complement(self):
        y = np.array([0, 4, 8, 10, 12, 16, 25, 40])
        low = null_cdf_matched(MatchedModelParams(simple_params(mu=(0.01,)), [0.0], [0.2]),
                               np.zeros(y.size), 0, 10, 1000, 1000)
        high = null_cdf_matched(MatchedModelParams(simple_params(mu=(0.99,)), [0.0], [0.2]),
                                np.zeros(y.size), 0, 990, 1000, 1000)
        np.testing.assert_allclose(low.cdf(y), high.tails(1000 - y).sf_left, atol=1e-8)

    def test_zero_normal_depth_uses_unconditional_law(self):
        params = MatchedModelParams(simple_params(), [0.1], [0.2])
        nulls = null_cdf_matched(params, [0], [0], [0], [0], [800])
        rate = 1.0 / (1.0 + np.exp(-(logit(0.01) + 0.1)))
        alpha, beta = beta_approx(rate, np.sqrt(0.2 ** 2 + 0.2 ** 2))
        y = np.array([3, 8, 20])
        expected = [BetaBinomial(800, alpha, beta).cdf(v) for v in y]
        np.testing.assert_allclose(nulls.cdf(y), expected, rtol=1e-9)

    def test_matched_document_round_trip(self):
        params = MatchedModelParams(simple_params(), [0.1], [0.2])
        restored = load_model_document(params.to_document())
        self.assertIsInstance(restored, MatchedModelParams)
        np.testing.assert_allclose(restored.tau, [0.2])

    def test_invalid_document(self):
        doc = simple_params().to_document()
        doc["samples"]["sigma"] = [-1.0]
        with self.assertRaises(ValidationError) as ctx:
            load_model_document(doc)
        self.assertEqual(ctx.exception.code_name, "invalid_model_document")

    def test_invalid_parameters(self):
        with self.assertRaises(ValidationError):
            simple_params(mu=(1.5,))
        with self.assertRaises(ValidationError):
            MatchedModelParams(simple_params(), [0.0], [0.0])


@pytest.mark.slow
def test_matched_fit_recovers_tumor_layer():
    sim = simulate(SimScenario.from_dict({
        "design": "matched",
        "positions": 1000,
        "samples": 2,
        "depth": {"law": "constant", "value": 20000},
        "mu": {"low": 1e-3, "high": 3e-3},
        "sigma": 0.2,
        "eta": 0.3,
        "tau": 0.25,
        "seed": 8,
    }))
    params = fit_matched_model(sim.data)
    np.testing.assert_allclose(params.eta, 0.3, atol=0.05)
    np.testing.assert_allclose(params.tau, 0.25, atol=0.07)
    assert params.base.metadata["design"] == "matched"


@pytest.mark.slow
def test_sigma_mle_error_shrinks_with_positions():
    errors = []
    for positions in (100, 300, 1000):
        fits = [
            estimate_sigma(sim.data, sim.mu, np.zeros(1), method="mle").sigma[0]
            for sim in (simulated(positions=positions, samples=1, reference_samples=1, sigma=0.2, seed=rep)
                        for rep in range(50))
        ]
        errors.append(float(np.median(np.abs(np.asarray(fits) - 0.2))))
    assert errors[0] > errors[1] > errors[2]
