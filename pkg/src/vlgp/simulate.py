"""Synthetic data generators: GP / Lorenz / linear-dynamical latents and spikes."""

import logging
from dataclasses import dataclass

import numpy as np

from . import model
from .exceptions import NumericalError, ValidationError
from .kernels import KernelSpec, cov_matrix

logger = logging.getLogger("vlgp")

# Suppressive self-history filter, ordered most-recent lag first.
DEFAULT_HISTORY_FILTER = (-10.0, -10.0, -3.0, -3.0, -3.0, -3.0, -2.0, -2.0, -1.0, -1.0)

LORENZ_SIGMA = 10.0
LORENZ_RHO = 28.0
LORENZ_BETA = 2.667


def sample_gp_latent(n_bins, n_latents, spec, seed):
    """Draw each latent column from N(0, K) via a jittered dense Cholesky.

    Deterministic given the seed; the jitter escalates tenfold (up to
    1e-2·σ²) if the factorization fails.
    """
    rng = np.random.default_rng(seed)
    k = cov_matrix(n_bins, spec, include_jitter=False)
    jitter = max(spec.jitter, 1e-10 * spec.sigma2)
    chol = None
    while jitter <= 1e-2 * spec.sigma2:
        try:
            chol = np.linalg.cholesky(k + jitter * np.eye(n_bins))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
    if chol is None:
        raise NumericalError("dense Cholesky failed despite jitter escalation")
    z = rng.standard_normal((n_bins, n_latents))
    return chol @ z


def lorenz_deriv(state):
    """Right-hand side of the chaotic three-variable flow."""
    x, y, z = state
    return np.array(
        [
            LORENZ_SIGMA * (y - x),
            x * (LORENZ_RHO - z) - y,
            x * y - LORENZ_BETA * z,
        ]
    )


def lorenz_trajectory(n_bins, dt=0.0015, x0=None, seed=None, transient=500, standardize=True):
    """Fourth-order Runge–Kutta integration of the chaotic flow.

    ``x0`` defaults to a random point near the attractor, N((1,1,28), I),
    drawn from ``seed``.  A ``transient``-step burn-in is discarded.  Output
    is standardized per dimension (zero mean, unit variance) unless disabled.
    """
    if dt <= 0:
        raise ValidationError("dt must be positive")
    if x0 is None:
        rng = np.random.default_rng(seed)
        x0 = rng.normal(loc=(1.0, 1.0, 28.0), scale=1.0)
    state = np.asarray(x0, dtype=float)
    out = np.empty((n_bins, 3))
    for i in range(transient + n_bins):
        k1 = lorenz_deriv(state)
        k2 = lorenz_deriv(state + 0.5 * dt * k1)
        k3 = lorenz_deriv(state + 0.5 * dt * k2)
        k4 = lorenz_deriv(state + dt * k3)
        state = state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if i >= transient:
            out[i - transient] = state
    if standardize:
        out = out - out.mean(axis=0)
        out /= out.std(axis=0)
    return out


@dataclass
class LDSParams:
    """Linear-dynamical latent with softplus-Poisson observations.

    x_0 ~ N(mu0, Q0), x_{t+1} | x_t ~ N(A x_t + b, Q),
    y ~ Poisson(softplus(C x + d)).
    """

    A: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    mu0: np.ndarray
    Q0: np.ndarray
    C: np.ndarray = None
    d: np.ndarray = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float)
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        self.Q0 = np.atleast_2d(np.asarray(self.Q0, dtype=float))
        if self.C is not None:
            self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
            self.d = np.atleast_1d(np.asarray(self.d, dtype=float))

    @property
    def n_latents(self):
        return self.A.shape[0]


def _psd_factor(q, what):
    evals, evecs = np.linalg.eigh(np.atleast_2d(q))
    if np.min(evals) < -1e-10 * max(np.max(np.abs(evals)), 1.0):
        raise ValidationError(f"{what} is not positive semidefinite")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def lds_trajectory(params, n_bins, seed):
    """Sample the Gaussian linear recursion; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    n_latents = params.n_latents
    if np.max(np.abs(np.linalg.eigvals(params.A))) > 1.0 + 1e-12:
        logger.warning("spectral radius of A exceeds 1; the recursion may diverge")
    f0 = _psd_factor(params.Q0, "Q0")
    fq = _psd_factor(params.Q, "Q")
    b = params.b
    if b.ndim == 1:
        b = np.broadcast_to(b, (n_bins, n_latents))
    x = np.empty((n_bins, n_latents))
    x[0] = params.mu0 + f0 @ rng.standard_normal(n_latents)
    for t in range(n_bins - 1):
        x[t + 1] = params.A @ x[t] + b[t] + fq @ rng.standard_normal(n_latents)
    return x


def generate_spikes_pp(x, loading, bias, hist_filter=DEFAULT_HISTORY_FILTER, seed=0, cap=model.EXP_CAP):
    """History-dependent Poisson counts from latent trajectories.

    ``hist_filter`` is ordered most-recent lag first; internally it is
    reversed onto the oldest-first history layout.  Generation is sequential
    in time because the history depends on realized spikes.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    loading = np.atleast_2d(np.asarray(loading, dtype=float))
    bias = np.atleast_1d(np.asarray(bias, dtype=float))
    filt = np.asarray(hist_filter, dtype=float)
    order = filt.size
    n_bins = x.shape[0]
    n_neurons = loading.shape[0]

    base = x @ loading.T + bias[None, :]
    counts = np.zeros((n_bins, n_neurons))
    n_clamped = 0
    for t in range(n_bins):
        exponent = base[t].copy()
        for j in range(1, min(order, t) + 1):
            exponent += filt[j - 1] * counts[t - j]
        n_clamped += int(np.count_nonzero(exponent > cap))
        counts[t] = rng.poisson(np.exp(np.minimum(exponent, cap)))
    if n_clamped:
        logger.warning("%d rate exponents clamped during spike generation", n_clamped)
    return counts.astype(int)


def generate_spikes_lds_poisson(x, c, d, seed):
    """Poisson counts with softplus rates log(1 + exp(cᵀx + d))."""
    rng = np.random.default_rng(seed)
    eta = np.asarray(x, dtype=float) @ np.atleast_2d(c).T + np.atleast_1d(d)[None, :]
    return rng.poisson(np.logaddexp(0.0, eta)).astype(int)


def random_lds(n_latents, n_neurons, seed, spectral_radius=0.95, obs_bias=-4.0):
    """A stable random rotation-like system with softplus-Poisson readout.

    The transition is a random orthogonal matrix scaled to the requested
    spectral radius and the innovation variance is chosen so the stationary
    latent variance is about one per dimension.
    """
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n_latents, n_latents)))
    a = spectral_radius * q
    innovation = (1.0 - spectral_radius**2) * np.eye(n_latents)
    c = rng.standard_normal((n_neurons, n_latents)) / np.sqrt(n_latents)
    d = np.full(n_neurons, obs_bias) + 0.3 * rng.standard_normal(n_neurons)
    return LDSParams(
        A=a,
        b=np.zeros(n_latents),
        Q=innovation,
        mu0=np.zeros(n_latents),
        Q0=np.eye(n_latents),
        C=c,
        d=d,
    )


@dataclass
class SimSpec:
    """Full description of one synthetic dataset."""

    latent_kind: str = "gp"  # gp | lorenz | lds
    n_neurons: int = 50
    n_trials: int = 10
    n_bins: int = 1000
    latent_dim: int = 2
    bin_width: float = 0.001
    seed: int = 0
    kernel: KernelSpec = None
    lorenz_dt: float = 0.0015
    history_filter: tuple = DEFAULT_HISTORY_FILTER
    bias_mean: float = float(np.log(0.02))
    bias_std: float = 0.0
    lds: LDSParams = None

    def __post_init__(self):
        if self.latent_kind not in ("gp", "lorenz", "lds"):
            raise ValidationError(f"unknown latent_kind {self.latent_kind!r}")
        if self.latent_kind == "gp" and self.kernel is None:
            self.kernel = KernelSpec(1.0, 0.01)
        if self.latent_kind == "lorenz":
            self.latent_dim = 3
        if self.latent_kind == "lds":
            if self.lds is None:
                raise ValidationError("lds latent_kind needs LDSParams")
            if self.lds.C is None:
                raise ValidationError("lds simulation needs observation C and d")
            self.latent_dim = self.lds.n_latents
        if self.history_filter is None:
            self.history_filter = ()
        self.history_filter = tuple(float(f) for f in self.history_filter)

    @property
    def history_order(self):
        return 0 if self.latent_kind == "lds" else len(self.history_filter)


def simulate_dataset(spec):
    """Generate (SpikeData, truth) for a SimSpec; deterministic given its seed.

    ``truth`` carries the per-trial latents and the generative parameters.
    Per-trial seeds derive from the root seed mixed with the trial index.
    """
    root = np.random.SeedSequence(spec.seed)
    param_rng = np.random.default_rng(root.spawn(1)[0])

    truth = {"kind": spec.latent_kind, "seed": spec.seed}
    if spec.latent_kind != "lds":
        loading = param_rng.standard_normal((spec.n_neurons, spec.latent_dim))
        scale = np.max(np.abs(loading), axis=0)
        loading /= scale[None, :]
        bias = param_rng.normal(spec.bias_mean, spec.bias_std, spec.n_neurons)
        truth["loading"] = loading
        truth["bias"] = bias
        truth["history_filter"] = np.asarray(spec.history_filter)

    trial_seeds = root.spawn(spec.n_trials)
    trials = []
    latents = []
    multi_spike = 0
    for m in range(spec.n_trials):
        latent_seed, spike_seed = trial_seeds[m].spawn(2)
        if spec.latent_kind == "gp":
            x = sample_gp_latent(spec.n_bins, spec.latent_dim, spec.kernel, latent_seed)
        elif spec.latent_kind == "lorenz":
            x = lorenz_trajectory(spec.n_bins, dt=spec.lorenz_dt, seed=latent_seed)
        else:
            x = lds_trajectory(spec.lds, spec.n_bins, latent_seed)
        latents.append(x)
        if spec.latent_kind == "lds":
            y = generate_spikes_lds_poisson(x, spec.lds.C, spec.lds.d, spike_seed)
        else:
            y = generate_spikes_pp(
                x, loading, bias, spec.history_filter, seed=spike_seed
            )
        multi_spike += int(np.count_nonzero(y > 1))
        trials.append(y)

    truth["latents"] = latents
    truth["multi_spike_bins"] = multi_spike
    data = model.SpikeData(
        trials=trials, bin_width=spec.bin_width, history_order=spec.history_order
    )
    return data, truth
