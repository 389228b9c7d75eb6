"""Evaluation metrics: leave-one-neuron-out prediction, PLL, R², rank
correlation, pseudo-R², latent orthogonalization, noise correlations."""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import subspace_angles, svd
from scipy.stats import spearmanr

from . import model
from .exceptions import ValidationError
from .inference import infer_posterior

LOG2 = float(np.log(2.0))


@dataclass
class PredictionSet:
    """Held-out rate predictions aligned with realized counts.

    ``rates`` mirrors the trial structure of ``counts``; entry (t, n) of a
    trial is the prediction for neuron n from a posterior inferred without
    it.  ``baseline`` is the population mean rate per bin and ``linear``
    holds the raw linear predictors (log-rate without the variance term).
    """

    rates: list
    counts: list
    baseline: float
    linear: list = None

    def __post_init__(self):
        if len(self.rates) != len(self.counts):
            raise ValidationError("rates and counts must align per trial")
        for lam, y in zip(self.rates, self.counts):
            if lam.shape != y.shape:
                raise ValidationError("rate/count shape mismatch")
            if np.any(lam <= 0):
                raise ValidationError("predicted rates must be positive")


def lono_predict(test_data, params, prior, config):
    """Leave-one-neuron-out predictions on held-out trials.

    For each neuron of each test trial the posterior is inferred from the
    remaining neurons (frozen weights), and the left-out neuron's rate is
    predicted from that posterior, its own weights, and its realized spike
    history.
    """
    n_neurons = test_data.n_neurons
    if test_data.history_order != params.history_order:
        test_data = model.SpikeData(
            test_data.trials, test_data.bin_width, params.history_order
        )
    rates = [np.empty_like(y, dtype=float) for y in test_data.trials]
    linear = [np.empty_like(y, dtype=float) for y in test_data.trials]
    for n in range(n_neurons):
        mask = np.ones(n_neurons, dtype=bool)
        mask[n] = False
        posterior = infer_posterior(test_data, params, prior, config, neuron_mask=mask)
        for m in range(test_data.n_trials):
            h_n = test_data.history(m)[:, n, :]
            rates[m][:, n] = model.expected_rate(
                posterior.mu[m],
                posterior.v[m],
                params.alpha[n],
                params.beta[n],
                h_n,
                cap=config.cap,
            )
            linear[m][:, n] = h_n @ params.beta[n] + posterior.mu[m] @ params.alpha[n]
    baseline = float(
        sum(y.sum() for y in test_data.trials)
        / sum(y.size for y in test_data.trials)
    )
    return PredictionSet(
        rates=rates, counts=list(test_data.trials), baseline=baseline, linear=linear
    )


def pll(pred):
    """Predictive log-likelihood in bits per spike against the mean-rate baseline."""
    n_spikes = sum(float(y.sum()) for y in pred.counts)
    if n_spikes <= 0:
        raise ValidationError("PLL undefined: no spikes in the prediction set")
    ybar = pred.baseline
    model_ll = sum(model.pp_loglik(y, lam) for y, lam in zip(pred.counts, pred.rates))
    null_ll = sum(
        float(np.sum(y * np.log(ybar) - ybar)) for y in pred.counts
    )
    return (model_ll - null_ll) / (n_spikes * LOG2)


def rectified_rate_from_gaussian(eta, a=500.0):
    """Soft-rectifier link log(1 + exp(a η))/a for scoring Gaussian predictions.

    Strictly positive for any η, so the PLL stays defined.
    """
    return np.logaddexp(0.0, a * np.asarray(eta, dtype=float)) / a


def predictive_r2(y, eta_linear):
    """Coefficient of determination of raw linear predictions on held-out counts."""
    y = np.asarray(y, dtype=float).ravel()
    eta = np.asarray(eta_linear, dtype=float).ravel()
    if y.shape != eta.shape:
        raise ValidationError("shape mismatch between counts and predictions")
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0:
        raise ValidationError("R² undefined: constant observations")
    return 1.0 - float(np.sum((y - eta) ** 2)) / sst


def _standardize(x):
    x = np.asarray(x, dtype=float)
    centered = x - x.mean(axis=0)
    std = centered.std(axis=0)
    live = std > 0
    out = centered.copy()
    out[:, live] /= std[live]
    return out, live


def rank_correlation(true_x, inferred_mu):
    """Mean |Spearman ρ| between true latents and linearly aligned inferred ones.

    Both sides are standardized; the inferred latents (plus an intercept)
    are mapped onto each true dimension by least squares, absorbing the
    affine non-identifiability, before ranking.  Degenerate (constant) true
    dimensions are excluded.
    """
    true_x, live = _standardize(true_x)
    inferred_mu, _ = _standardize(inferred_mu)
    if not live.any():
        raise ValidationError("all true latent dimensions are constant")
    design = np.column_stack([np.ones(inferred_mu.shape[0]), inferred_mu])
    coef, *_ = np.linalg.lstsq(design, true_x[:, live], rcond=None)
    aligned = design @ coef
    rhos = []
    for j in range(aligned.shape[1]):
        rho = spearmanr(true_x[:, live][:, j], aligned[:, j]).statistic
        rhos.append(abs(rho))
    return float(np.mean(rhos))


def pseudo_r2(ll_model, ll_null, ll_saturated):
    """Likelihood-ratio goodness of fit: 1 − (LL_sat − LL_model)/(LL_sat − LL_null)."""
    denom = ll_saturated - ll_null
    if denom <= 0:
        raise ValidationError("saturated log-likelihood must exceed the null's")
    return 1.0 - (ll_saturated - ll_model) / denom


def _safe_pp_loglik(y, lam):
    # Σ y log λ − λ with 0·log 0 = 0 (saturated models predict 0 where y = 0)
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam[y > 0] <= 0):
        raise ValidationError("zero rate at a bin with spikes")
    out = -lam.sum()
    pos = y > 0
    out += float(np.sum(y[pos] * np.log(lam[pos])))
    return out


def null_and_saturated_loglik(counts):
    """Baseline log-likelihoods for pseudo-R² on repeat trials.

    The null model is a single population-mean rate; the saturated model
    sets each (bin, neuron) rate to its empirical mean across trials (all
    trials are treated as repeats of one condition).
    """
    stack = np.stack([np.asarray(y, dtype=float) for y in counts])
    ybar = float(stack.mean())
    if ybar <= 0:
        raise ValidationError("no spikes: baselines undefined")
    per_bin = stack.mean(axis=0)
    ll_null = sum(_safe_pp_loglik(y, np.full_like(y, ybar, dtype=float)) for y in stack)
    ll_sat = sum(_safe_pp_loglik(y, per_bin) for y in stack)
    return ll_null, ll_sat


def orthogonalize_latents(mus, loading=None):
    """Rotate latents to orthogonal dimensions ordered by captured power.

    The rotation comes from the SVD of the trial-averaged latent matrix
    (plain concatenation when trial lengths differ) and is applied to every
    single-trial latent; the inverse rotation applied to the loading keeps
    the fitted rates unchanged.

    Returns
    -------
    dict with ``mu`` (rotated per-trial latents), ``singular_values``,
    ``rotation`` and, when a loading was given, ``loading`` rotated to match.
    """
    mus = [np.asarray(mu, dtype=float) for mu in mus]
    lengths = {mu.shape[0] for mu in mus}
    if len(lengths) == 1 and len(mus) > 1:
        basis = np.mean(np.stack(mus), axis=0)
    else:
        basis = np.concatenate(mus, axis=0)
    _, svals, vt = svd(basis, full_matrices=False)
    rotation = vt.T
    out = {
        "mu": [mu @ rotation for mu in mus],
        "singular_values": svals,
        "rotation": rotation,
        "basis": basis @ rotation,
    }
    if loading is not None:
        out["loading"] = np.asarray(loading, dtype=float) @ rotation
    return out


def noise_corr_power(c_model, c_true):
    """Relative Frobenius agreement 1 − ‖C_model − C_true‖_F / ‖C_true‖_F."""
    c_model = np.asarray(c_model, dtype=float)
    c_true = np.asarray(c_true, dtype=float)
    if c_model.shape != c_true.shape:
        raise ValidationError("correlation matrices must share a shape")
    denom = float(np.linalg.norm(c_true))
    if denom == 0:
        raise ValidationError("reference correlation matrix is zero")
    return 1.0 - float(np.linalg.norm(c_model - c_true)) / denom


def _rebin(y, bin_group):
    n_keep = (y.shape[0] // bin_group) * bin_group
    if n_keep == 0:
        raise ValidationError("bin_group longer than the trial")
    return y[:n_keep].reshape(-1, bin_group, y.shape[1]).sum(axis=1)


def _noise_correlations(trial_stack, bin_group):
    """Zero-diagonal pairwise correlations of mean-subtracted rebinned counts."""
    binned = np.stack([_rebin(y, bin_group) for y in trial_stack])
    binned -= binned.mean(axis=0, keepdims=True)
    samples = binned.reshape(-1, binned.shape[-1])
    sd = samples.std(axis=0)
    sd[sd == 0] = 1.0
    corr = (samples / sd).T @ (samples / sd) / samples.shape[0]
    np.fill_diagonal(corr, 0.0)
    return corr


def noise_corr_empirical(data, bin_group=50):
    """Noise-correlation matrix of observed counts (trials treated as repeats)."""
    return _noise_correlations([np.asarray(y, float) for y in data.trials], bin_group)


def noise_corr_from_model(params, posterior, data, n_sims=50, bin_group=50, seed=0):
    """Noise correlations of counts simulated from the fitted per-bin rates.

    Each trial's fitted rate is Poisson-sampled ``n_sims`` times; every
    replicate counts as a repeat trial when the per-condition mean is
    subtracted.  Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    replicates = []
    for m in range(data.n_trials):
        hb = model.history_predictor(data.history(m), params.beta)
        lam, _ = model.firing_rates(posterior.mu[m], posterior.v[m], params.alpha, hb)
        for _ in range(n_sims):
            replicates.append(rng.poisson(lam).astype(float))
    return _noise_correlations(replicates, bin_group)


def subspace_angle(true_loadings, est_loadings):
    """Largest principal angle (radians) between the two column spans."""
    angles = subspace_angles(
        np.asarray(true_loadings, dtype=float), np.asarray(est_loadings, dtype=float)
    )
    return float(np.max(angles)) if angles.size else 0.0


def canonical_correlations(x, y):
    """Canonical correlations between the column spaces of two series."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    qx, _ = np.linalg.qr(x - x.mean(axis=0))
    qy, _ = np.linalg.qr(y - y.mean(axis=0))
    return np.linalg.svd(qx.T @ qy, compute_uv=False)
