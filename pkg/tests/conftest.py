"""Shared builders and dense oracles for the test suite.

The dense helpers deliberately avoid the package's low-rank identities: they
work from explicit T×T matrices in numerically benign formulations
(Σ = (I + KW)⁻¹K instead of inverting an ill-conditioned K directly).
"""

import numpy as np
import pytest

from vlgp.kernels import KernelSpec, cov_matrix
from vlgp.model import SpikeData
from vlgp.simulate import SimSpec, simulate_dataset


def make_gp_dataset(
    n_neurons=20,
    n_trials=3,
    n_bins=200,
    n_latents=2,
    sigma2=1.0,
    omega=0.01,
    bias_mean=np.log(0.2),
    bias_std=0.0,
    history_filter=(),
    seed=0,
):
    spec = SimSpec(
        latent_kind="gp",
        n_neurons=n_neurons,
        n_trials=n_trials,
        n_bins=n_bins,
        latent_dim=n_latents,
        kernel=KernelSpec(sigma2, omega),
        history_filter=history_filter,
        bias_mean=bias_mean,
        bias_std=bias_std,
        seed=seed,
    )
    return simulate_dataset(spec)


def dense_sigma(k, w):
    """Σ = (K⁻¹ + diag(w))⁻¹ evaluated as (I + K diag(w))⁻¹ K."""
    n = k.shape[0]
    sig = np.linalg.solve(np.eye(n) + k * w[None, :], k)
    return 0.5 * (sig + sig.T)


def dense_trace_logdet(k, w):
    """tr(K⁻¹Σ) and logdet(K⁻¹Σ) through the well-conditioned (I + KW) form."""
    n = k.shape[0]
    m = np.eye(n) + k * w[None, :]
    trace = float(np.trace(np.linalg.inv(m)))
    logdet = -float(np.linalg.slogdet(m)[1])
    return trace, logdet


def dense_kl(k, mu, w, quad=None):
    """½[μᵀK⁻¹μ + tr(K⁻¹Σ) − logdet(K⁻¹Σ) − T] with an optional exact quad."""
    if quad is None:
        quad = float(mu @ np.linalg.solve(k, mu))
    trace, logdet = dense_trace_logdet(k, w)
    return 0.5 * (quad + trace - logdet - k.shape[0])


def smooth_mu(n_bins, spec, v_scale=0.05, seed=0, n_latents=1):
    """Latent means of the form K v: smooth, concentrated on large eigenpairs."""
    rng = np.random.default_rng(seed)
    k = cov_matrix(n_bins, spec, include_jitter=False)
    return k @ rng.normal(scale=v_scale, size=(n_bins, n_latents))


def single_trial_data(y, history_order=0, bin_width=0.001):
    return SpikeData(trials=[np.asarray(y, dtype=float)], history_order=history_order, bin_width=bin_width)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260809)
