"""Initialization: factor analysis for loadings/latents, OLS for history weights."""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from . import model
from .exceptions import ValidationError


@dataclass
class FAResult:
    """Factor-analysis output on per-neuron-centered data.

    ``latent_mean`` is the posterior mean E[x|y] over the concatenated rows
    that were passed in; callers split it back into trials.
    """

    loading: np.ndarray
    latent_mean: np.ndarray
    noise_var: np.ndarray
    converged: bool
    loglik_trace: list


def factor_analysis(y, n_factors, max_iter=100, tol=1e-6):
    """EM for the factor-analysis model y ≈ Λx + ε with diagonal noise.

    Parameters
    ----------
    y : ndarray, shape (n_samples, n_features)
        Concatenated observations; centered per feature internally.
    n_factors : int
        Latent dimension L; must be < n_features.
    max_iter : int
        EM iteration cap; on non-convergence the best iterate is returned
        with ``converged=False``.
    tol : float
        Stop when the per-sample log-likelihood improves by less than this.

    The log-likelihood trace is non-decreasing (EM property).  Loadings are
    initialized from PCA of the sample covariance.
    """
    y = np.asarray(y, dtype=float)
    n_samples, n_features = y.shape
    if not 1 <= n_factors < n_features:
        raise ValidationError(f"need 1 ≤ n_factors < {n_features}, got {n_factors}")
    if n_samples < 2:
        raise ValidationError("need at least two samples")

    yc = y - y.mean(axis=0)
    cov = (yc.T @ yc) / n_samples
    var_floor = 1e-8 * max(np.trace(cov) / n_features, 1e-12)

    # PCA init with the usual noise-floor subtraction: the discarded
    # eigenvalues estimate the isotropic noise, so structureless data starts
    # (and stays) at near-zero loadings instead of on a Heywood ridge.
    evals, evecs = eigh(cov)
    order = np.argsort(evals)[::-1]
    top, rest = order[:n_factors], order[n_factors:]
    noise_floor = float(np.mean(evals[rest]))
    loading = evecs[:, top] * np.sqrt(np.clip(evals[top] - noise_floor, var_floor, None))
    psi = np.clip(np.diag(cov) - np.sum(loading**2, axis=1), var_floor, None)

    loglik_trace = []
    const = n_features * np.log(2.0 * np.pi)
    converged = False
    projector = None
    for _ in range(max_iter):
        # E-step in the low-rank form: M = I + ΛᵀΨ⁻¹Λ
        lam_psi = loading / psi[:, None]
        m_mat = np.eye(n_factors) + loading.T @ lam_psi
        m_inv = np.linalg.inv(m_mat)
        projector = m_inv @ lam_psi.T  # E[x|y] = projector @ y_centered

        # log|Φ| and tr(Φ⁻¹S) via the determinant lemma / Woodbury
        logdet = float(np.linalg.slogdet(m_mat)[1] + np.sum(np.log(psi)))
        phi_inv_cov = cov / psi[:, None] - lam_psi @ (projector @ cov)
        loglik = -0.5 * n_samples * (const + logdet + float(np.trace(phi_inv_cov)))
        if loglik_trace and loglik - loglik_trace[-1] < tol * n_samples:
            loglik_trace.append(loglik)
            converged = True
            break
        loglik_trace.append(loglik)

        # M-step
        cov_proj = cov @ projector.T  # S βᵀ, (N, L)
        second_moment = m_inv + projector @ cov_proj
        loading = np.linalg.solve(second_moment.T, cov_proj.T).T
        psi = np.clip(np.diag(cov) - np.sum(loading * cov_proj, axis=1), var_floor, None)

    latent_mean = yc @ projector.T
    return FAResult(
        loading=loading,
        latent_mean=latent_mean,
        noise_var=psi,
        converged=converged,
        loglik_trace=loglik_trace,
    )


def init_history_weights(data, ridge=1e-6):
    """Per-neuron least squares of counts on the history design (bias included).

    Rank-deficient designs (e.g. a neuron that never spikes, zeroing its lag
    columns) fall back to ridge regression with the given penalty; those
    neurons are returned in ``flagged``.
    """
    n_lags = 1 + data.history_order
    h_all = np.concatenate([data.history(m) for m in range(data.n_trials)], axis=0)
    y_all = np.concatenate(data.trials, axis=0)
    beta = np.zeros((data.n_neurons, n_lags))
    flagged = []
    for n in range(data.n_neurons):
        h_n = h_all[:, n, :]
        sol, _, rank, _ = np.linalg.lstsq(h_n, y_all[:, n], rcond=None)
        if rank < n_lags:
            gram = h_n.T @ h_n + ridge * np.eye(n_lags)
            sol = np.linalg.solve(gram, h_n.T @ y_all[:, n])
            flagged.append(n)
        beta[n] = sol
    return beta, flagged


def initialize(data, n_latents, prior, fa_max_iter=100, fa_tol=1e-6):
    """Algorithm start: FA for (α, μ), OLS for β, posterior at the prior.

    The FA loading columns are max-norm normalized with the compensating
    scale applied to the latents, and each trial's latent means are
    zero-centered, matching the constraint convention used during fitting.
    """
    y_all = np.concatenate(data.trials, axis=0)
    fa = factor_analysis(y_all, n_latents, max_iter=fa_max_iter, tol=fa_tol)

    alpha = fa.loading.copy()
    latents = fa.latent_mean.copy()
    scale = np.max(np.abs(alpha), axis=0)
    keep = scale > 0
    alpha[:, keep] /= scale[keep]
    latents[:, keep] *= scale[keep]

    beta, _ = init_history_weights(data)
    params = model.ModelParams(alpha=alpha, beta=beta)

    posterior = model.zero_posterior(data, n_latents, prior)
    offset = 0
    for m in range(data.n_trials):
        n_bins = data.n_bins(m)
        mu = latents[offset : offset + n_bins]
        posterior.mu[m] = mu - mu.mean(axis=0)
        offset += n_bins
    return params, posterior, fa
