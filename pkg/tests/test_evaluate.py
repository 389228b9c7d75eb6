"""Prediction metrics, latent alignment, orthogonalization, noise correlations."""

import numpy as np
import pytest

from conftest import make_gp_dataset
from vlgp.evaluate import (
    PredictionSet,
    canonical_correlations,
    lono_predict,
    noise_corr_empirical,
    noise_corr_from_model,
    noise_corr_power,
    null_and_saturated_loglik,
    orthogonalize_latents,
    pll,
    predictive_r2,
    pseudo_r2,
    rank_correlation,
    rectified_rate_from_gaussian,
    subspace_angle,
)
from vlgp.exceptions import ValidationError
from vlgp.inference import FitConfig, fit, infer_posterior, make_prior, newton_beta
from vlgp.model import LatentPosterior, ModelParams, SpikeData


def _pred(counts, rates, baseline=None):
    counts = [np.asarray(c, dtype=float) for c in counts]
    rates = [np.asarray(r, dtype=float) for r in rates]
    if baseline is None:
        baseline = float(sum(c.sum() for c in counts) / sum(c.size for c in counts))
    return PredictionSet(rates=rates, counts=counts, baseline=baseline)


class TestPll:
    def test_zero_when_model_equals_baseline(self):
        y = np.array([[1.0], [0.0], [2.0], [1.0]])
        pred = _pred([y], [np.full_like(y, y.mean())])
        assert pll(pred) == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed_value(self):
        y = np.array([[1.0], [0.0]])
        tiny = 1e-8
        pred = _pred([y], [np.array([[1.0], [tiny]])], baseline=0.5)
        expected = ((np.log(1.0) - 1.0 - tiny) - (np.log(0.5) - 1.0)) / np.log(2.0)
        assert pll(pred) == pytest.approx(expected, rel=1e-10)

    def test_rebinned_rates_stay_defined(self):
        y_fine = np.array([[1.0], [0.0], [0.0], [1.0]])
        lam_fine = np.full_like(y_fine, 0.5)
        coarse = _pred(
            [y_fine.reshape(2, 2).sum(axis=1, keepdims=True)],
            [lam_fine.reshape(2, 2).sum(axis=1, keepdims=True)],
        )
        assert np.isfinite(pll(coarse))

    def test_zero_spikes_is_an_error(self):
        with pytest.raises(ValidationError):
            pll(_pred([np.zeros((4, 1))], [np.full((4, 1), 0.3)], baseline=0.3))

    def test_invariant_to_neuron_relabeling_and_trial_order(self, rng):
        y = [rng.poisson(0.5, size=(30, 4)).astype(float) for _ in range(3)]
        lam = [np.abs(rng.normal(0.5, 0.1, size=(30, 4))) + 0.05 for _ in range(3)]
        base = pll(_pred(y, lam))
        perm = rng.permutation(4)
        shuffled = pll(_pred([t[:, perm] for t in y][::-1], [t[:, perm] for t in lam][::-1]))
        assert shuffled == pytest.approx(base, rel=1e-12)


class TestRectifier:
    def test_saturates_to_identity(self):
        assert rectified_rate_from_gaussian(1.0) == pytest.approx(1.0, rel=1e-6)

    def test_negative_input_is_tiny_but_positive(self):
        value = rectified_rate_from_gaussian(-1.0)
        assert 0 < value < 1e-100

    def test_zero_input(self):
        assert rectified_rate_from_gaussian(0.0) == pytest.approx(np.log(2) / 500, rel=1e-12)


class TestPredictiveR2:
    def test_perfect_prediction(self, rng):
        y = rng.poisson(1.0, 50).astype(float)
        assert predictive_r2(y, y) == pytest.approx(1.0)

    def test_mean_prediction_is_zero(self, rng):
        y = rng.poisson(1.0, 50).astype(float)
        assert predictive_r2(y, np.full_like(y, y.mean())) == pytest.approx(0.0, abs=1e-12)

    def test_can_go_negative(self):
        y = np.array([0.0, 1.0, 0.0, 1.0])
        pred = np.array([2.0, -1.0, 2.0, -1.0])  # anti-correlated
        assert predictive_r2(y, pred) < 0


class TestRankCorrelation:
    def test_identity(self, rng):
        x = rng.standard_normal((200, 2))
        assert rank_correlation(x, x) == pytest.approx(1.0)

    def test_monotone_map_is_perfect(self, rng):
        x = rng.standard_normal((300, 1))
        assert rank_correlation(x, x**3) == pytest.approx(1.0)

    def test_independent_noise_is_near_zero(self, rng):
        x = rng.standard_normal((1000, 1))
        noise = rng.standard_normal((1000, 1))
        assert rank_correlation(x, noise) <= 0.05

    def test_invariant_to_invertible_linear_maps(self, rng):
        truth = np.cumsum(rng.standard_normal((400, 2)), axis=0)
        inferred = truth + 0.3 * rng.standard_normal((400, 2))
        base = rank_correlation(truth, inferred)
        for _ in range(5):
            m = rng.standard_normal((2, 2))
            while abs(np.linalg.det(m)) < 0.1:
                m = rng.standard_normal((2, 2))
            assert abs(rank_correlation(truth, inferred @ m) - base) <= 1e-6


class TestPseudoR2:
    def test_endpoints_and_midpoint(self):
        assert pseudo_r2(-50.0, -100.0, -50.0) == pytest.approx(1.0)
        assert pseudo_r2(-100.0, -100.0, -50.0) == pytest.approx(0.0)
        assert pseudo_r2(-75.0, -100.0, -50.0) == pytest.approx(0.5)

    def test_range(self, rng):
        for _ in range(20):
            ll_null = -100 - 10 * rng.random()
            ll_sat = ll_null + 50 * rng.random() + 1
            ll_model = ll_null + (ll_sat - ll_null) * rng.random()
            value = pseudo_r2(ll_model, ll_null, ll_sat)
            assert 0.0 <= value <= 1.0

    def test_baseline_logliks(self, rng):
        counts = [rng.poisson(0.4, size=(60, 5)).astype(float) for _ in range(4)]
        ll_null, ll_sat = null_and_saturated_loglik(counts)
        assert ll_sat >= ll_null


class TestOrthogonalize:
    def test_orthogonal_input_unchanged_up_to_sign(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((100, 2)))
        mu = q * np.array([3.0, 1.0])
        out = orthogonalize_latents([mu])
        assert np.allclose(np.abs(out["rotation"]), np.eye(2), atol=1e-10)
        assert np.allclose(np.abs(out["mu"][0]), np.abs(mu), atol=1e-10)

    def test_rank_one_concentrates_power(self, rng):
        base = rng.standard_normal(80)
        mu = np.column_stack([base, 2 * base])
        out = orthogonalize_latents([mu])
        assert out["singular_values"][1] <= 1e-10
        assert np.allclose(out["mu"][0][:, 1], 0.0, atol=1e-9)

    def test_rates_invariant_under_paired_rotation(self, rng):
        mus = [rng.standard_normal((60, 3)) for _ in range(2)]
        loading = rng.standard_normal((10, 3))
        out = orthogonalize_latents(mus, loading=loading)
        for mu, mu_rot in zip(mus, out["mu"]):
            assert np.allclose(mu_rot @ out["loading"].T, mu @ loading.T, rtol=1e-10)

    def test_output_columns_orthogonal(self, rng):
        # orthogonality holds for the decomposed basis (the trial average);
        # single trials share its rotation
        mus = [rng.standard_normal((70, 3)) + np.arange(3) for _ in range(3)]
        out = orthogonalize_latents(mus)
        gram = out["basis"].T @ out["basis"]
        off = gram - np.diag(np.diag(gram))
        assert np.max(np.abs(off)) <= 1e-10 * np.max(np.diag(gram))
        # unequal lengths: the basis is the concatenation itself
        ragged = [rng.standard_normal((40, 2)), rng.standard_normal((55, 2))]
        out2 = orthogonalize_latents(ragged)
        stacked = np.concatenate(out2["mu"])
        gram2 = stacked.T @ stacked
        off2 = gram2 - np.diag(np.diag(gram2))
        assert np.max(np.abs(off2)) <= 1e-10 * np.max(np.diag(gram2))

    def test_ordered_by_singular_value(self, rng):
        mus = [rng.standard_normal((90, 4)) * np.array([0.1, 3.0, 1.0, 0.5])]
        out = orthogonalize_latents(mus)
        svals = out["singular_values"]
        assert np.all(np.diff(svals) <= 0)


class TestNoiseCorrPower:
    def test_exact_match(self, rng):
        c = rng.standard_normal((5, 5))
        c = c + c.T
        np.fill_diagonal(c, 0.0)
        assert noise_corr_power(c, c) == pytest.approx(1.0)

    def test_zero_model(self, rng):
        c = rng.standard_normal((5, 5))
        c = c + c.T
        np.fill_diagonal(c, 0.0)
        assert noise_corr_power(np.zeros_like(c), c) == pytest.approx(0.0)

    def test_anti_correlated_model(self, rng):
        c = rng.standard_normal((5, 5))
        c = c + c.T
        np.fill_diagonal(c, 0.0)
        assert noise_corr_power(-c, c) == pytest.approx(-1.0)


class TestNoiseCorrFromModel:
    def _latent_free_fit(self, data):
        params = ModelParams(
            alpha=np.zeros((data.n_neurons, 1)),
            beta=np.log(np.maximum(
                np.concatenate(data.trials).mean(axis=0), 1e-3
            ))[:, None],
        )
        posterior = LatentPosterior(
            mu=[np.zeros((data.n_bins(m), 1)) for m in range(data.n_trials)],
            w=[np.zeros((data.n_bins(m), 1)) for m in range(data.n_trials)],
            v=[np.zeros((data.n_bins(m), 1)) for m in range(data.n_trials)],
        )
        return params, posterior

    def test_latent_free_model_has_no_correlations(self):
        data, _ = make_gp_dataset(
            n_neurons=8, n_trials=4, n_bins=500, bias_mean=np.log(0.3), seed=31
        )
        params, posterior = self._latent_free_fit(data)
        corr = noise_corr_from_model(params, posterior, data, n_sims=25, bin_group=50, seed=0)
        n_samples = 4 * 25 * (500 // 50)
        off = corr[~np.eye(8, dtype=bool)]
        assert np.mean(np.abs(off)) <= 2.0 / np.sqrt(n_samples)

    def test_deterministic(self):
        data, _ = make_gp_dataset(n_neurons=5, n_trials=2, n_bins=200, seed=32)
        params, posterior = self._latent_free_fit(data)
        a = noise_corr_from_model(params, posterior, data, n_sims=5, seed=3)
        b = noise_corr_from_model(params, posterior, data, n_sims=5, seed=3)
        assert np.array_equal(a, b)

    def test_zero_diagonal_and_symmetry(self):
        data, _ = make_gp_dataset(n_neurons=6, n_trials=3, n_bins=300, seed=33)
        corr = noise_corr_empirical(data, bin_group=50)
        assert np.all(np.diag(corr) == 0.0)
        assert np.allclose(corr, corr.T)


class TestSubspaceAngle:
    def test_identical_spans(self, rng):
        basis = rng.standard_normal((10, 2))
        assert subspace_angle(basis, basis @ rng.standard_normal((2, 2))) <= 1e-8

    def test_orthogonal_spans(self):
        a = np.zeros((4, 1))
        b = np.zeros((4, 1))
        a[0, 0] = 1.0
        b[1, 0] = 1.0
        assert subspace_angle(a, b) == pytest.approx(np.pi / 2)

    def test_same_plane_in_two_dims(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = np.array([[1.0, 1.0 / np.sqrt(2)], [0.0, 1.0 / np.sqrt(2)]])
        assert subspace_angle(a, b) <= 1e-10


class TestLono:
    @pytest.fixture(scope="class")
    def fitted(self):
        data, truth = make_gp_dataset(
            n_neurons=12, n_trials=4, n_bins=150, bias_mean=np.log(0.3), seed=34
        )
        train = SpikeData(data.trials[:3], history_order=data.history_order)
        test = SpikeData(data.trials[3:], history_order=data.history_order)
        config = FitConfig(
            n_latents=2, sigma2=1.0, omega=0.01, hyper_every=0, max_iter=30, tol=1e-5
        )
        params, _, prior, _ = fit(train, config)
        return train, test, params, prior, config

    def test_model_matched_pll_positive(self, fitted):
        _, test, params, prior, config = fitted
        pred = lono_predict(test, params, prior, config)
        assert pll(pred) > 0.0

    def test_masked_neuron_cannot_influence_posterior(self, fitted):
        _, test, params, prior, config = fitted
        mask = np.ones(12, dtype=bool)
        mask[5] = False
        base = infer_posterior(test, params, prior, config, neuron_mask=mask)
        shuffled_trials = [y.copy() for y in test.trials]
        rng = np.random.default_rng(0)
        shuffled_trials[0][:, 5] = rng.permutation(shuffled_trials[0][:, 5])
        shuffled = SpikeData(shuffled_trials, history_order=test.history_order)
        redo = infer_posterior(shuffled, params, prior, config, neuron_mask=mask)
        for m in range(test.n_trials):
            assert np.array_equal(base.mu[m], redo.mu[m])
            assert np.array_equal(base.v[m], redo.v[m])

    def test_latent_free_model_reduces_to_glm_prediction(self):
        data, _ = make_gp_dataset(
            n_neurons=6, n_trials=2, n_bins=200, history_filter=(-2.0,),
            bias_mean=np.log(0.2), seed=35,
        )
        # a pure history GLM: alpha pinned to zero, beta fit by Newton
        params = ModelParams(alpha=np.zeros((6, 1)), beta=np.zeros((6, 2)))
        posterior = LatentPosterior(
            mu=[np.zeros((200, 1)) for _ in range(2)],
            w=[np.zeros((200, 1)) for _ in range(2)],
            v=[np.zeros((200, 1)) for _ in range(2)],
        )
        for _ in range(12):
            for n in range(6):
                newton_beta(n, data, posterior, params)
        config = FitConfig(n_latents=1, sigma2=1.0, omega=0.01, hyper_every=0, max_iter=10)
        prior = make_prior(config)
        pred = lono_predict(data, params, prior, config)
        for m in range(2):
            h = data.history(m)
            for n in range(6):
                glm_rate = np.exp(h[:, n, :] @ params.beta[n])
                # posterior variance adds a tiny α²V term; α = 0 kills it
                assert np.allclose(pred.rates[m][:, n], glm_rate, rtol=1e-10)

    def test_prediction_set_validation(self):
        with pytest.raises(ValidationError):
            PredictionSet(rates=[np.ones((3, 1))], counts=[np.ones((4, 1))], baseline=1.0)
        with pytest.raises(ValidationError):
            PredictionSet(rates=[np.zeros((3, 1))], counts=[np.ones((3, 1))], baseline=1.0)


class TestCanonicalCorrelations:
    def test_identical_spaces(self, rng):
        x = rng.standard_normal((100, 3))
        ccs = canonical_correlations(x, x @ rng.standard_normal((3, 3)))
        assert np.allclose(ccs, 1.0, atol=1e-10)

    def test_independent_spaces(self, rng):
        x = rng.standard_normal((2000, 2))
        y = rng.standard_normal((2000, 2))
        assert canonical_correlations(x, y).max() <= 0.12
