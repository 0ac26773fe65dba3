"""Calibration tests: chi-square quantiles against reference values, the
credible-region predicate at its analytic boundary, bootstrap coverage
behaviour on a conjugate Gaussian toy, and the importance-reweighting
machinery against fresh chains.
"""

import numpy as np
import pytest
from scipy import stats

from nsmbayes.calibrate import (
    CalibConfig,
    EssCollapseError,
    beta_update,
    bootstrap_coverage,
    calibrate_conjugate,
    calibrate_mcmc_is,
    chi2_quantile,
    credible_region_contains,
    effective_sample_size,
    is_weights,
    trace_from_csv,
    trace_to_csv,
    weighted_quantile,
)
from nsmbayes.nsm_loss import (ConjRows, conj_coefficient_rows,
                               conj_coefficients, per_point_terms)
from nsmbayes.posterior import (GaussianPosterior, GaussianPrior, nsm_sample,
                                theta_hat_closed_form)
from nsmbayes.rng import substream
from nsmbayes.sampler import SliceConfig
from nsmbayes.surrogates import ExpFamEbm
from nsmbayes.weights import ConstantWeight, ImqWeight


def gaussian_toy(seed=0, n=60):
    """Linear-feature EBM on 1-D Gaussian data: fully conjugate."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1))
    model = ExpFamEbm(x_dim=1, theta_dim=2, hidden_width=8, seed=17,
                      t_hidden=[])
    weight = ImqWeight.from_data(x, method="median-mad")
    prior = GaussianPrior(np.zeros(2), 4.0 * np.eye(2))
    return x, model, weight, prior


class TestChi2Quantile:
    def test_reference_value(self):
        assert abs(chi2_quantile(0.95, 1) - 3.8415) < 2e-4

    def test_matches_scipy_across_dims(self):
        for df in (1, 2, 3, 4, 6):
            for p in (0.5, 0.9, 0.95, 0.99):
                assert np.isclose(chi2_quantile(p, df),
                                  stats.chi2.ppf(p, df), rtol=1e-9)

    def test_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            chi2_quantile(1.0, 2)


class TestCredibleRegion:
    def test_centre_always_contained(self):
        post = GaussianPosterior(np.array([1.0, -2.0]), np.eye(2), 1.0, 10)
        for alpha in (0.01, 0.05, 0.5, 0.99):
            assert credible_region_contains(post, post.mean, alpha)

    def test_one_dim_boundary(self):
        post = GaussianPosterior(np.zeros(1), np.eye(1), 1.0, 10)
        edge = np.sqrt(3.8415)
        assert credible_region_contains(post, np.array([edge - 1e-3]), 0.05)
        assert not credible_region_contains(post, np.array([edge + 1e-3]),
                                            0.05)

    def test_shrunk_covariance_excludes_everything_else(self):
        post = GaussianPosterior(np.zeros(2), 1e-6 * np.eye(2), 1.0, 10)
        assert not credible_region_contains(post, np.array([0.01, 0.0]), 0.05)
        assert credible_region_contains(post, np.zeros(2), 0.05)

    def test_singular_covariance_raises(self):
        post = GaussianPosterior(np.zeros(2), np.ones((2, 2)), 1.0, 10)
        with pytest.raises(np.linalg.LinAlgError):
            credible_region_contains(post, np.zeros(2), 0.05)


class TestBetaUpdate:
    def test_fixed_point_at_nominal_coverage(self):
        assert beta_update(0.7, 1.0 - 0.05, 3, 0.05, 0.007) == 0.7

    def test_clamp(self):
        assert beta_update(0.0071, 0.0, 1, 0.05, 0.007) == 0.007

    def test_direction(self):
        assert beta_update(1.0, 1.0, 1, 0.05, 0.01) > 1.0
        assert beta_update(1.0, 0.0, 1, 0.05, 0.01) < 1.0


class TestCoefficientRows:
    def test_rows_mean_matches_coefficients(self):
        x, model, weight, _ = gaussian_toy()
        rows = conj_coefficient_rows(x, model, weight)
        mean = rows.mean()
        ref = conj_coefficients(x, model, weight)
        assert np.allclose(mean.a, ref.a, atol=1e-12)
        assert np.allclose(mean.b, ref.b, atol=1e-12)
        assert np.isclose(mean.c, ref.c, atol=1e-12)

    def test_counts_match_repeated_dataset(self):
        x, model, weight, _ = gaussian_toy(n=8)
        counts = np.array([2, 0, 1, 3, 0, 1, 0, 1])
        rows = conj_coefficient_rows(x, model, weight)
        boot = rows.with_counts(counts)
        repeated = np.repeat(x, counts, axis=0)
        ref = conj_coefficients(repeated, model, weight)
        assert np.allclose(boot.a, ref.a, atol=1e-10)
        assert np.allclose(boot.b, ref.b, atol=1e-10)
        assert np.isclose(boot.c, ref.c, atol=1e-10)
        assert boot.n == 8


class TestConjugateCalibration:
    def test_coverage_non_increasing_in_beta(self):
        x, model, weight, prior = gaussian_toy()
        rows = conj_coefficient_rows(x, model, weight)
        theta_hat = theta_hat_closed_form(rows.mean())
        cfg = CalibConfig(beta0=1.0, seed=0)
        coverages = [
            bootstrap_coverage(rows, theta_hat, prior, beta, cfg, f"grid{i}")
            for i, beta in enumerate(np.logspace(-2, 2, 7))
        ]
        assert coverages[0] > coverages[-1]
        inversions = sum(late > early for early, late
                         in zip(coverages, coverages[1:]))
        assert inversions <= 1

    def test_final_coverage_near_nominal_majority_of_seeds(self):
        hits = 0
        for seed in range(5):
            x, model, weight, prior = gaussian_toy(seed=seed)
            cfg = CalibConfig(beta0=1.0, seed=seed)
            beta, trace = calibrate_conjugate(x, model, weight, prior, cfg)
            assert beta >= cfg.clamp
            assert len(trace) == cfg.n_steps + 1
            hits += abs(trace[-1][2] - 0.95) <= 0.05
        assert hits >= 4

    def test_all_degenerate_raises(self):
        n, k = 5, 2
        a = np.tile(np.diag([1e14, 0.0]), (n, 1, 1))
        rows = ConjRows(a=a, b=np.zeros((n, k)), c=np.zeros(n))
        prior = GaussianPrior(np.zeros(k), np.eye(k))
        cfg = CalibConfig(beta0=1.0, n_bootstrap=3)
        with pytest.raises(RuntimeError, match="degenerate"):
            bootstrap_coverage(rows, np.zeros(k), prior, 1.0, cfg, 0)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="alpha"):
            CalibConfig(beta0=1.0, alpha=1.0)
        with pytest.raises(ValueError, match="beta0"):
            CalibConfig(beta0=0.0)
        with pytest.raises(ValueError, match=">= 1"):
            CalibConfig(beta0=1.0, n_steps=0)
        assert CalibConfig(beta0=2.0).clamp == 0.02


class TestImportanceWeights:
    def test_identity_reweighting_is_uniform(self):
        l_cache = np.random.default_rng(0).gamma(2.0, size=(50, 8))
        w = is_weights(l_cache, np.ones(8), 0.4, 0.4)
        assert np.allclose(w, 1.0 / 50, atol=1e-15)
        assert effective_sample_size(w) == pytest.approx(50.0)

    def test_ess_bounded_by_draws(self):
        rng = np.random.default_rng(1)
        w = rng.gamma(1.0, size=200)
        assert effective_sample_size(w) < 200.0
        assert effective_sample_size(np.full(200, 0.3)) == pytest.approx(200.0)

    def test_weighted_quantile_basics(self):
        values = np.array([3.0, 1.0, 4.0, 2.0])
        w = np.full(4, 0.25)
        assert weighted_quantile(values, w, 0.5) == 2.0
        assert weighted_quantile(values, w, 1.0) == 4.0

    def test_weighted_quantile_scale_invariant(self):
        rng = np.random.default_rng(2)
        values = rng.standard_normal(100) ** 2
        w = rng.gamma(1.0, size=100)
        tau = weighted_quantile(values, w, 0.95)
        assert weighted_quantile(values, 17.3 * w, 0.95) == tau


@pytest.mark.filterwarnings("ignore:slice wider than:RuntimeWarning")
class TestMcmcCalibration:
    def toy(self, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((30, 1))
        model = ExpFamEbm(x_dim=1, theta_dim=1, hidden_width=8, seed=23)
        weight = ConstantWeight()
        prior = GaussianPrior(np.zeros(1), 4.0 * np.eye(1))
        return x, model, weight, prior

    def test_reweighted_mean_matches_fresh_chain(self):
        x, model, weight, prior = self.toy()
        cfg = SliceConfig(widths=np.array([1.0]), warmup=200)
        beta_curr, beta_trial = 0.3, 0.6
        base = nsm_sample(prior, x, model, weight, beta_curr, 1500,
                          substream(0, "is", "base"), cfg=cfg)
        l_cache = np.stack([per_point_terms(th, x, model, weight)
                            for th in base])
        w = is_weights(l_cache, np.ones(30), beta_trial, beta_curr)
        is_mean = float(w @ base[:, 0])
        is_se = float(np.sqrt(w @ (base[:, 0] - is_mean) ** 2
                              / effective_sample_size(w)))

        fresh = nsm_sample(prior, x, model, weight, beta_trial, 1500,
                           substream(0, "is", "fresh"), cfg=cfg)
        per = fresh.shape[0] // 20
        batch_means = fresh[: per * 20, 0].reshape(20, per).mean(axis=1)
        fresh_se = batch_means.std(ddof=1) / np.sqrt(20)
        gap = abs(is_mean - fresh[:, 0].mean())
        assert gap < 4.0 * (is_se + fresh_se)

    def test_runs_end_to_end(self):
        x, model, weight, prior = self.toy()
        cfg = CalibConfig(beta0=0.5, n_bootstrap=25, n_steps=3, m_draws=300,
                          seed=1)
        sampler_cfg = SliceConfig(widths=np.array([1.0]), warmup=100)
        beta, trace = calibrate_mcmc_is(x, model, weight, prior, cfg,
                                        sampler_cfg=sampler_cfg)
        assert beta >= cfg.clamp
        assert len(trace) == cfg.n_steps + 1
        for _, _, coverage, ess in trace:
            assert 0.0 <= coverage <= 1.0
            assert 0.0 < ess <= 1.0

    def test_ess_collapse_aborts_with_trace(self):
        x, model, weight, prior = self.toy()
        x[0, 0] = 8.0
        cfg = CalibConfig(beta0=0.5, n_bootstrap=10, n_steps=3, m_draws=200,
                          ess_floor=0.999, seed=2)
        sampler_cfg = SliceConfig(widths=np.array([1.0]), warmup=100)
        with pytest.raises(EssCollapseError) as err:
            calibrate_mcmc_is(x, model, weight, prior, cfg,
                              sampler_cfg=sampler_cfg)
        assert len(err.value.trace) >= 1


class TestTraceIo:
    def test_round_trip(self, tmp_path):
        trace = [(0, 1.0, 0.97, float("nan")), (1, 1.2, 0.95, 0.8)]
        path = tmp_path / "trace.csv"
        trace_to_csv(trace, path)
        loaded = trace_from_csv(path)
        assert loaded[1] == (1, 1.2, 0.95, 0.8)
        assert loaded[0][0] == 0 and np.isnan(loaded[0][3])
