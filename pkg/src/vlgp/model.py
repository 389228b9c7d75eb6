"""Generative model: history design, conditional intensity, likelihood, ELBO.

Each neuron's spike count is Poisson with log-rate αᵀx_t + βᵀh_{t,n}, where
x is the shared latent process and h the neuron's own recent spike history
(one leading 1 for the bias).  Trials carry independent GP priors on each
latent dimension; parameters are shared across trials.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .exceptions import ValidationError

# Exponents are clamped here before exponentiation; transient overshoots with
# random initialization would otherwise overflow.
EXP_CAP = 30.0


def build_history(trial, order):
    """Spike-history design tensor for one trial.

    Parameters
    ----------
    trial : ndarray, shape (T, N)
        Spike counts.
    order : int
        Number of history lags p.

    Returns
    -------
    ndarray, shape (T, N, 1 + p)
        Row (t, n) is ``[1, y[t-p, n], ..., y[t-1, n]]`` (oldest lag first);
        lags reaching before the trial start are zero.
    """
    if order < 0:
        raise ValidationError(f"history order must be ≥ 0, got {order}")
    trial = np.asarray(trial, dtype=float)
    n_bins, n_neurons = trial.shape
    h = np.zeros((n_bins, n_neurons, 1 + order))
    h[:, :, 0] = 1.0
    for k in range(1, order + 1):
        lag = order - k + 1  # column k holds y[t - lag]
        if lag < n_bins:
            h[lag:, :, k] = trial[: n_bins - lag]
    return h


@dataclass
class SpikeData:
    """Trial-structured spike counts plus history metadata.

    ``trials`` is a list of (T, N) non-negative count matrices; T may differ
    between trials but N may not.  ``bin_width`` is in seconds and is
    metadata only (the model works in bin units).
    """

    trials: list
    bin_width: float = 0.001
    history_order: int = 0
    _histories: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.trials:
            raise ValidationError("need at least one trial")
        if self.history_order < 0:
            raise ValidationError("history_order must be ≥ 0")
        trials = []
        n_neurons = None
        for i, y in enumerate(self.trials):
            y = np.asarray(y, dtype=float)
            if y.ndim != 2:
                raise ValidationError(f"trial {i} is not a matrix")
            if not np.all(np.isfinite(y)) or np.any(y < 0):
                raise ValidationError(f"trial {i} has negative or non-finite counts")
            if n_neurons is None:
                n_neurons = y.shape[1]
            elif y.shape[1] != n_neurons:
                raise ValidationError(
                    f"trial {i} has {y.shape[1]} neurons, expected {n_neurons}"
                )
            trials.append(y)
        self.trials = trials

    @property
    def n_trials(self):
        return len(self.trials)

    @property
    def n_neurons(self):
        return self.trials[0].shape[1]

    def n_bins(self, m):
        return self.trials[m].shape[0]

    @property
    def total_bins(self):
        return sum(y.shape[0] for y in self.trials)

    def history(self, m):
        """History design tensor of trial ``m`` (built lazily, cached)."""
        if self._histories is None:
            self._histories = [None] * self.n_trials
        if self._histories[m] is None:
            self._histories[m] = build_history(self.trials[m], self.history_order)
        return self._histories[m]

    def subset_neurons(self, keep):
        """Data restricted to the neuron indices in ``keep`` (copies counts)."""
        keep = np.asarray(keep, dtype=int)
        return SpikeData(
            trials=[y[:, keep].copy() for y in self.trials],
            bin_width=self.bin_width,
            history_order=self.history_order,
        )


@dataclass
class ModelParams:
    """Per-neuron latent loadings (N×L) and bias+history weights (N×(1+p))."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        if self.alpha.ndim != 2 or self.beta.ndim != 2:
            raise ValidationError("alpha and beta must be matrices")
        if self.alpha.shape[0] != self.beta.shape[0]:
            raise ValidationError("alpha and beta disagree on the number of neurons")
        if not np.all(np.isfinite(self.alpha)) or not np.all(np.isfinite(self.beta)):
            raise ValidationError("parameters must be finite")

    @property
    def n_neurons(self):
        return self.alpha.shape[0]

    @property
    def n_latents(self):
        return self.alpha.shape[1]

    @property
    def history_order(self):
        return self.beta.shape[1] - 1

    def copy(self):
        return ModelParams(self.alpha.copy(), self.beta.copy())


@dataclass
class LatentPosterior:
    """Per-trial posterior means, precision contributions, and variances.

    ``mu``, ``w`` and ``v`` are lists of (T, L) arrays.  ``w`` holds the
    diagonal of W_l = Σ_n λ α² (the compact representation of Σ); ``v`` the
    posterior variances diag(Σ_l) consistent with ``w`` through the low-rank
    identities.
    """

    mu: list
    w: list
    v: list

    def __post_init__(self):
        for name in ("mu", "w", "v"):
            arrays = [np.asarray(a, dtype=float) for a in getattr(self, name)]
            setattr(self, name, arrays)
        if not (len(self.mu) == len(self.w) == len(self.v)):
            raise ValidationError("mu, w, v must have one entry per trial")
        for m, (mu, w, v) in enumerate(zip(self.mu, self.w, self.v)):
            if not (mu.shape == w.shape == v.shape):
                raise ValidationError(f"trial {m}: mu, w, v shapes disagree")
            if np.any(w < 0):
                raise ValidationError(f"trial {m}: W must be non-negative")
            if np.any(v < 0):
                # V = 0 is the plug-in limit; the algorithm itself keeps V > 0
                raise ValidationError(f"trial {m}: V must be non-negative")

    @property
    def n_trials(self):
        return len(self.mu)

    @property
    def n_latents(self):
        return self.mu[0].shape[1]

    def copy(self):
        return LatentPosterior(
            [a.copy() for a in self.mu],
            [a.copy() for a in self.w],
            [a.copy() for a in self.v],
        )


def zero_posterior(data, n_latents, prior):
    """Posterior at the prior: μ = 0, W = 0, V = diag(GGᵀ)."""
    mu, w, v = [], [], []
    for m in range(data.n_trials):
        n_bins = data.n_bins(m)
        mu.append(np.zeros((n_bins, n_latents)))
        w.append(np.zeros((n_bins, n_latents)))
        v.append(
            np.column_stack(
                [
                    kernels.posterior_variance(np.zeros(n_bins), prior.factor(l, n_bins))
                    for l in range(n_latents)
                ]
            )
        )
    return LatentPosterior(mu=mu, w=w, v=v)


def expected_rate(mu_t, v_t, alpha_n, beta_n, h_tn, cap=EXP_CAP):
    """Expected firing rate under the variational posterior.

    λ = exp(βᵀh + αᵀμ + ½ Σ_l α_l² V_l), with the exponent clamped at
    ``cap``.  Accepts 1-D slices (scalar result) or stacked 2-D inputs.
    """
    mu_t = np.asarray(mu_t, dtype=float)
    v_t = np.asarray(v_t, dtype=float)
    alpha_n = np.asarray(alpha_n, dtype=float)
    beta_n = np.asarray(beta_n, dtype=float)
    h_tn = np.asarray(h_tn, dtype=float)
    exponent = h_tn @ beta_n + mu_t @ alpha_n + 0.5 * (v_t @ (alpha_n**2))
    out = np.exp(np.minimum(exponent, cap))
    return float(out) if np.ndim(out) == 0 else out


def history_predictor(h, beta):
    """βᵀh for every bin/neuron of one trial: (T, N, 1+p) × (N, 1+p) → (T, N)."""
    return np.einsum("tnj,nj->tn", h, beta)


def firing_rates(mu, v, alpha, hb, cap=EXP_CAP):
    """Full (T, N) expected-rate matrix for one trial.

    Returns the rates and the number of clamped exponents.
    """
    exponent = hb + mu @ alpha.T + 0.5 * (v @ (alpha**2).T)
    n_clamped = int(np.count_nonzero(exponent > cap))
    return np.exp(np.minimum(exponent, cap)), n_clamped


def pp_loglik(y, lam):
    """Point-process log-likelihood Σ y log λ − λ.

    Errors on non-positive rates; shapes must match.
    """
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if y.shape != lam.shape:
        raise ValidationError(f"shape mismatch: counts {y.shape} vs rates {lam.shape}")
    if np.any(lam <= 0):
        raise ValidationError("rates must be positive")
    return float(np.sum(y * np.log(lam) - lam))


def gp_kl(mu_l, w_l, factor, ridge):
    """KL-style prior term ½[μᵀK⁻¹μ + tr(K⁻¹Σ) − logdet(K⁻¹Σ) − T] for one latent.

    All K-dependent pieces go through the low-rank factor; μᵀK⁻¹μ uses the
    factored least-squares solve with a ridge on out-of-range components.
    """
    quad = factor.inv_quad(mu_l, ridge)
    trace, logdet = kernels.posterior_trace_logdet(w_l, factor)
    return 0.5 * (quad + trace - logdet - factor.n_bins)


def trial_data_term(y, eta, lam):
    """Σ y·η − λ over one trial, with η the linear predictor (no variance term)."""
    return float(np.sum(y * eta - lam))


def elbo(data, params, posterior, prior, cap=EXP_CAP):
    """Evidence lower bound of the full dataset.

    Point-process terms sum over trials, bins, and neurons; the prior terms
    use the low-rank identities per latent and per trial (fixed trial order,
    reproducible reduction).
    """
    total = 0.0
    for m in range(data.n_trials):
        y = data.trials[m]
        hb = history_predictor(data.history(m), params.beta)
        eta = hb + posterior.mu[m] @ params.alpha.T
        lam, _ = firing_rates(posterior.mu[m], posterior.v[m], params.alpha, hb, cap)
        total += trial_data_term(y, eta, lam)
        for l in range(posterior.n_latents):
            factor = prior.factor(l, data.n_bins(m))
            total -= gp_kl(posterior.mu[m][:, l], posterior.w[m][:, l], factor, prior.ridge(l))
    return total
