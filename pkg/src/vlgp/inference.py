"""Coordinate-ascent variational inference.

One outer iteration runs Newton updates of the posterior means (per latent,
per trial), Newton updates of the loading and history weights (per neuron),
the constraint step, the closed-form W/V refresh, and periodically a
hyperparameter step on random temporal subsamples.  Every move is accepted
only if it does not decrease its slice of the evidence lower bound, so the
recorded ELBO trace is non-decreasing by construction.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import model
from .exceptions import NonFiniteUpdateError, NumericalError, ValidationError
from .kernels import (
    GPPrior,
    KernelSpec,
    RIDGE_SCALE,
    cov_matrix,
    kernel_log_grads,
    posterior_inv_factor,
    posterior_variance,
)

logger = logging.getLogger("vlgp")

HYPER_LOG_BOUNDS = (
    (np.log(1e-6), np.log(1e4)),  # log sigma2
    (np.log(1e-8), np.log(10.0)),  # log omega
)


@dataclass
class FitConfig:
    """Knobs of the fitting loop.

    ``history_order`` of None defers to the dataset's own order.  The
    initial hyperparameters ``sigma2``/``omega`` may be scalars (shared start
    for every latent) or per-latent sequences; ``hyper_every = 0`` disables
    hyperparameter learning.
    """

    n_latents: int
    history_order: int = None
    sigma2: float = 1.0
    omega: float = 1e-4
    tol: float = 1e-4
    max_iter: int = 50
    hyper_every: int = 5
    subsample_len: int = 100
    n_subsamples: int = 20
    step_halving_max: int = 10
    seed: int = 0
    cap: float = model.EXP_CAP
    ichol_tol_scale: float = 1e-8
    max_rank: int = 100

    def __post_init__(self):
        if self.n_latents < 1:
            raise ValidationError("n_latents must be ≥ 1")
        if self.tol <= 0:
            raise ValidationError("tol must be positive")
        if self.hyper_every < 0:
            raise ValidationError("hyper_every must be ≥ 0 (0 disables)")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be ≥ 1")


@dataclass
class FitReport:
    """Diagnostics of one fitting session."""

    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    hyper_trace: list = field(default_factory=list)
    clamp_count: int = 0
    wall_time: list = field(default_factory=list)
    rank_corr_trace: list = field(default_factory=list)
    step_fallbacks: int = 0
    notes: list = field(default_factory=list)


def make_prior(config):
    """GPPrior at the config's initial hyperparameters."""
    sigma2 = np.broadcast_to(np.asarray(config.sigma2, dtype=float), (config.n_latents,))
    omega = np.broadcast_to(np.asarray(config.omega, dtype=float), (config.n_latents,))
    specs = [KernelSpec(float(s), float(o)) for s, o in zip(sigma2, omega)]
    return GPPrior(specs, tol_scale=config.ichol_tol_scale, max_rank=config.max_rank)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteUpdateError(f"non-finite {what}")


def newton_mu(l, data, params, posterior, prior, cap=model.EXP_CAP, step_halving_max=10):
    """One damped Newton update of μ_l on every trial (mutates the posterior).

    The step is Σ∇ evaluated through the factored identities; on a decrease
    of the trial's ELBO slice the step is halved, falling back to no change
    after ``step_halving_max`` halvings.
    """
    alpha_l = params.alpha[:, l]
    halvings = 0
    fallbacks = 0
    for m in range(data.n_trials):
        y = data.trials[m]
        factor = prior.factor(l, data.n_bins(m))
        ridge = prior.ridge(l)
        G = factor.G
        mu_l = posterior.mu[m][:, l]
        w_l = posterior.w[m][:, l]

        hb = model.history_predictor(data.history(m), params.beta)
        eta = hb + posterior.mu[m] @ params.alpha.T
        boost = 0.5 * (posterior.v[m] @ (params.alpha**2).T)
        lam = np.exp(np.minimum(eta + boost, cap))

        resid_l = (y - lam) @ alpha_l
        u = G @ (G.T @ resid_l) - mu_l
        _, cf = posterior_inv_factor(w_l, factor)
        delta = u - G @ cho_solve(cf, G.T @ (w_l * u))
        _check_finite(delta, f"μ update (latent {l}, trial {m})")

        obj_old = model.trial_data_term(y, eta, lam) - 0.5 * factor.inv_quad(mu_l, ridge)
        scale = 1.0
        accepted = False
        for _ in range(step_halving_max + 1):
            mu_try = mu_l + scale * delta
            eta_try = eta + np.outer(scale * delta, alpha_l)
            lam_try = np.exp(np.minimum(eta_try + boost, cap))
            obj_try = model.trial_data_term(y, eta_try, lam_try) - 0.5 * factor.inv_quad(
                mu_try, ridge
            )
            if np.isfinite(obj_try) and obj_try >= obj_old:
                posterior.mu[m][:, l] = mu_try
                accepted = True
                break
            halvings += 1
            scale *= 0.5
        if not accepted:
            fallbacks += 1
    return {"halvings": halvings, "fallbacks": fallbacks}


def update_w_and_v(data, params, posterior, prior, cap=model.EXP_CAP):
    """Closed-form refresh W = λ αᵀ² and V = diag(Σ) (mutates the posterior)."""
    n_clamped = 0
    for m in range(data.n_trials):
        hb = model.history_predictor(data.history(m), params.beta)
        lam, nc = model.firing_rates(posterior.mu[m], posterior.v[m], params.alpha, hb, cap)
        n_clamped += nc
        posterior.w[m] = lam @ params.alpha**2
        for l in range(posterior.n_latents):
            factor = prior.factor(l, data.n_bins(m))
            posterior.v[m][:, l] = posterior_variance(posterior.w[m][:, l], factor)
    return n_clamped


def _neuron_series(data, posterior, n):
    """Concatenated per-neuron views used by the weight updates."""
    mu = np.concatenate([mu for mu in posterior.mu], axis=0)
    v = np.concatenate([v for v in posterior.v], axis=0)
    y_n = np.concatenate([y[:, n] for y in data.trials])
    h_n = np.concatenate([data.history(m)[:, n, :] for m in range(data.n_trials)], axis=0)
    return mu, v, y_n, h_n


def _weight_objective(y_n, eta_n, extra_n, cap):
    lam = np.exp(np.minimum(eta_n + extra_n, cap))
    return float(np.sum(y_n * eta_n - lam)), lam


def newton_alpha(n, data, posterior, params, cap=model.EXP_CAP, step_halving_max=10):
    """One damped Newton update of the loading row α_n (mutates params)."""
    mu, v, y_n, h_n = _neuron_series(data, posterior, n)
    hb_n = h_n @ params.beta[n]
    alpha_n = params.alpha[n]

    obj_old, lam = _weight_objective(y_n, mu @ alpha_n + hb_n, 0.5 * (v @ alpha_n**2), cap)
    grad = mu.T @ (y_n - lam) - (v.T @ lam) * alpha_n
    shifted = mu + v * alpha_n[None, :]
    neg_hess = shifted.T @ (lam[:, None] * shifted)
    neg_hess[np.diag_indices_from(neg_hess)] += v.T @ lam
    try:
        delta = cho_solve(cho_factor(neg_hess, lower=True), grad)
    except LinAlgError:
        delta = np.linalg.lstsq(neg_hess, grad, rcond=None)[0]
    _check_finite(delta, f"α update (neuron {n})")

    halvings = 0
    scale = 1.0
    for _ in range(step_halving_max + 1):
        alpha_try = alpha_n + scale * delta
        obj_try, _ = _weight_objective(
            y_n, mu @ alpha_try + hb_n, 0.5 * (v @ alpha_try**2), cap
        )
        if np.isfinite(obj_try) and obj_try >= obj_old:
            params.alpha[n] = alpha_try
            return {"halvings": halvings, "fallbacks": 0}
        halvings += 1
        scale *= 0.5
    return {"halvings": halvings, "fallbacks": 1}


def newton_beta(n, data, posterior, params, cap=model.EXP_CAP, step_halving_max=10):
    """One damped Newton update of the bias/history row β_n (mutates params).

    A singular Hessian (e.g. a neuron that never spikes zeroes its history
    columns) falls back to updating the bias alone.
    """
    mu, v, y_n, h_n = _neuron_series(data, posterior, n)
    alpha_n = params.alpha[n]
    lin = mu @ alpha_n
    extra = 0.5 * (v @ alpha_n**2)

    obj_old, lam = _weight_objective(y_n, lin + h_n @ params.beta[n], extra, cap)
    grad = h_n.T @ (y_n - lam)
    neg_hess = h_n.T @ (lam[:, None] * h_n)
    bias_only = False
    try:
        delta = cho_solve(cho_factor(neg_hess, lower=True), grad)
    except LinAlgError:
        bias_only = True
        delta = np.zeros_like(grad)
        delta[0] = grad[0] / neg_hess[0, 0]  # Σλ > 0 always
    _check_finite(delta, f"β update (neuron {n})")

    halvings = 0
    scale = 1.0
    for _ in range(step_halving_max + 1):
        beta_try = params.beta[n] + scale * delta
        obj_try, _ = _weight_objective(y_n, lin + h_n @ beta_try, extra, cap)
        if np.isfinite(obj_try) and obj_try >= obj_old:
            params.beta[n] = beta_try
            return {"halvings": halvings, "fallbacks": 0, "bias_only": bias_only}
        halvings += 1
        scale *= 0.5
    return {"halvings": halvings, "fallbacks": 1, "bias_only": bias_only}


def constrain(params, posterior):
    """Zero-center μ per trial and max-norm-normalize the loading columns.

    The centering is compensated through the bias (pooled mean over trials)
    and the normalization through the latents (μ scaled by s, V by s², W by
    1/s²), keeping the predicted rates invariant.  Zero-norm columns are
    left unchanged and flagged.
    """
    n_total = sum(mu.shape[0] for mu in posterior.mu)
    pooled = np.zeros(params.n_latents)
    for mu in posterior.mu:
        center = mu.mean(axis=0)
        pooled += center * (mu.shape[0] / n_total)
        mu -= center
    params.beta[:, 0] += params.alpha @ pooled

    scale = np.max(np.abs(params.alpha), axis=0)
    zero_cols = np.flatnonzero(scale == 0)
    live = scale > 0
    params.alpha[:, live] /= scale[live]
    for mu, w, v in zip(posterior.mu, posterior.w, posterior.v):
        mu[:, live] *= scale[live]
        v[:, live] *= scale[live] ** 2
        w[:, live] /= scale[live] ** 2
    return {"zero_norm_columns": list(zero_cols), "scale": scale, "mean_shift": pooled}


def _gauge_scale_kl(c, quads, bs, lengths):
    """Total prior term along the scale gauge at multiplier ``c``."""
    total = 0.0
    for quad, b, n in zip(quads, bs, lengths):
        b_scaled = b / (c * c)
        try:
            cf = cho_factor(np.eye(b.shape[0]) + b_scaled, lower=True)
        except LinAlgError:
            return np.inf
        logdet = -2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        s = cho_solve(cf, b_scaled)
        trace = n - np.trace(b_scaled) + float(np.sum(b_scaled * s.T))
        total += 0.5 * (c * c * quad + trace - logdet - n)
    return total


def gauge_rescale(data, params, posterior, prior):
    """Exact ELBO ascent along the rate-invariant redundancies per latent.

    Two degenerate directions couple the posterior means to the weights: a
    uniform mean shift traded against the bias, and a scale traded against
    the loading (α_l/c, c·μ_l, c²·V_l, W_l/c²).  Both leave every predicted
    rate unchanged, so only the prior terms move; the shift has a
    closed-form optimum and the scale is found by a refined grid search
    that includes the no-op.  Without this, coordinate ascent crawls along
    these nearly flat valleys indefinitely.
    """
    scales = np.ones(params.n_latents)
    for l in range(params.n_latents):
        ridge = prior.ridge(l)

        # optimal uniform mean shift, compensated exactly through the bias
        shift_num = 0.0
        shift_den = 0.0
        for m in range(data.n_trials):
            factor = prior.factor(l, data.n_bins(m))
            ones = np.ones(data.n_bins(m))
            kinv_one = factor.inv_apply(ones, ridge)
            shift_num += float(kinv_one @ posterior.mu[m][:, l])
            shift_den += float(kinv_one @ ones)
        if shift_den > 0 and np.isfinite(shift_num):
            shift = shift_num / shift_den
            for m in range(data.n_trials):
                posterior.mu[m][:, l] -= shift
            params.beta[:, 0] += params.alpha[:, l] * shift

        # scale line search on a coarse-to-fine multiplicative grid
        quads = []
        bs = []
        lengths = []
        for m in range(data.n_trials):
            factor = prior.factor(l, data.n_bins(m))
            quads.append(factor.inv_quad(posterior.mu[m][:, l], ridge))
            G = factor.G
            bs.append(G.T @ (posterior.w[m][:, l][:, None] * G))
            lengths.append(data.n_bins(m))
        best_c = 1.0
        best_val = _gauge_scale_kl(1.0, quads, bs, lengths)
        half_width = np.log(2.0)
        for _ in range(3):
            for c in np.exp(np.linspace(-half_width, half_width, 9)) * best_c:
                val = _gauge_scale_kl(c, quads, bs, lengths)
                if val < best_val:
                    best_val, best_c = val, c
            half_width /= 4.0
        if best_c != 1.0:
            scales[l] = best_c
            params.alpha[:, l] /= best_c
            for m in range(data.n_trials):
                posterior.mu[m][:, l] *= best_c
                posterior.v[m][:, l] *= best_c**2
                posterior.w[m][:, l] /= best_c**2
    return scales


# ---------------------------------------------------------------------------
# hyperparameters
# ---------------------------------------------------------------------------


def draw_windows(data, posterior, l, rng, subsample_len, n_subsamples):
    """Random contiguous (μ, W) windows of one latent, drawn uniformly over trials."""
    windows = []
    for _ in range(n_subsamples):
        m = int(rng.integers(data.n_trials))
        n_bins = data.n_bins(m)
        length = min(subsample_len, n_bins)
        start = int(rng.integers(n_bins - length + 1))
        windows.append(
            (
                posterior.mu[m][start : start + length, l].copy(),
                posterior.w[m][start : start + length, l].copy(),
            )
        )
    return windows




def hyper_objective_grad(log_theta, windows, jitter):
    """Windowed prior objective and its gradient in (log σ², log ω).

    Each window contributes −½[μᵀK⁻¹μ + tr(K⁻¹Σ) − logdet(K⁻¹Σ) − T] with
    Σ = (K⁻¹ + W)⁻¹ reconstructed from the stored W at the candidate
    hyperparameters, evaluated through M = I + WK (no inversion of K beyond
    the μ solve).  The μ quadratic contributes the tr(K⁻¹μμᵀK⁻¹ ∂K) piece of
    the kernel gradient; the W terms route through M.  Returns (−inf, zeros)
    when K at these hyperparameters is not positive definite.
    """
    sigma2, omega = np.exp(log_theta)
    spec = KernelSpec(float(sigma2), float(omega), jitter=0.0)
    cache = {}
    total_f = 0.0
    total_g = np.zeros(2)
    for mu_w, w_w in windows:
        n = mu_w.size
        if n not in cache:
            k = cov_matrix(n, spec, include_jitter=False)
            k[np.diag_indices(n)] += jitter
            try:
                cf = cho_factor(k, lower=True)
            except LinAlgError:
                return -np.inf, np.zeros(2)
            cache[n] = (k, cf, kernel_log_grads(n, spec))
        k, cf, (dk_ds, dk_dw) = cache[n]
        a = cho_solve(cf, mu_w)
        m = np.eye(n) + w_w[:, None] * k
        sign, logdet_m = np.linalg.slogdet(m)
        if sign <= 0:
            return -np.inf, np.zeros(2)
        m_inv = np.linalg.inv(m)
        total_f += -0.5 * (float(mu_w @ a) + float(np.trace(m_inv)) + logdet_m - n)
        shrink = m_inv @ m_inv - m_inv
        for j, dk in enumerate((dk_ds, dk_dw)):
            w_dk = w_w[:, None] * dk
            total_g[j] += 0.5 * (float(a @ dk @ a) + float(np.sum(shrink.T * w_dk)))
    n_win = len(windows)
    return total_f / n_win, total_g / n_win


def update_hyper(spec, windows, max_outer=10, jitter=None):
    """Hyperparameter ascent on the windowed objective.

    Backtracked gradient ascent in (log σ², log ω), taken one coordinate at
    a time with separately adapted steps (the two coordinates have very
    different curvatures, and alternating 1-D moves avoid the zigzag of a
    joint step).  Moves are capped at 3 log-units so a single call can still
    traverse orders of magnitude in the timescale when the windows support
    it.

    Returns the updated KernelSpec and the number of accepted steps.
    """
    if not windows:
        return spec, 0
    if jitter is None:
        jitter = RIDGE_SCALE * spec.sigma2

    lo = np.array([b[0] for b in HYPER_LOG_BOUNDS])
    hi = np.array([b[1] for b in HYPER_LOG_BOUNDS])
    theta = np.clip(
        np.log([spec.sigma2, spec.omega if spec.omega > 0 else 1e-8]), lo, hi
    )
    f_cur, grad = hyper_objective_grad(theta, windows, jitter)
    if not np.isfinite(f_cur):
        return spec, 0
    steps = [0.5, 1.0]
    accepted = 0
    for _ in range(max_outer):
        moved = False
        for j in (1, 0):  # timescale first, magnitude second
            for _ in range(12):
                move = steps[j] * grad[j]
                move = float(np.clip(move, -3.0, 3.0))
                if abs(move) < 1e-8:
                    break
                cand = theta.copy()
                cand[j] = float(np.clip(theta[j] + move, lo[j], hi[j]))
                if cand[j] == theta[j]:
                    break
                f_cand, g_cand = hyper_objective_grad(cand, windows, jitter)
                if np.isfinite(f_cand) and f_cand > f_cur:
                    theta, f_cur, grad = cand, f_cand, g_cand
                    steps[j] *= 1.6
                    accepted += 1
                    moved = True
                    break
                steps[j] *= 0.5
        if not moved:
            break
    sigma2, omega = np.exp(theta)
    return KernelSpec(float(sigma2), float(omega)), accepted


# ---------------------------------------------------------------------------
# gradient helpers (diagnostics and finite-difference suites)
# ---------------------------------------------------------------------------


def elbo_grad_mu(l, data, params, posterior, prior, cap=model.EXP_CAP):
    """∇_{μ_l} of the ELBO as implemented, one array per trial."""
    grads = []
    for m in range(data.n_trials):
        y = data.trials[m]
        hb = model.history_predictor(data.history(m), params.beta)
        lam, _ = model.firing_rates(posterior.mu[m], posterior.v[m], params.alpha, hb, cap)
        factor = prior.factor(l, data.n_bins(m))
        grads.append(
            (y - lam) @ params.alpha[:, l]
            - factor.inv_apply(posterior.mu[m][:, l], prior.ridge(l))
        )
    return grads


def elbo_grad_alpha(n, data, posterior, params, cap=model.EXP_CAP):
    """∇_{α_n} of the ELBO at fixed posterior."""
    mu, v, y_n, h_n = _neuron_series(data, posterior, n)
    alpha_n = params.alpha[n]
    _, lam = _weight_objective(y_n, mu @ alpha_n + h_n @ params.beta[n], 0.5 * (v @ alpha_n**2), cap)
    return mu.T @ (y_n - lam) - (v.T @ lam) * alpha_n


def elbo_grad_beta(n, data, posterior, params, cap=model.EXP_CAP):
    """∇_{β_n} of the ELBO at fixed posterior."""
    mu, v, y_n, h_n = _neuron_series(data, posterior, n)
    alpha_n = params.alpha[n]
    _, lam = _weight_objective(y_n, mu @ alpha_n + h_n @ params.beta[n], 0.5 * (v @ alpha_n**2), cap)
    return h_n.T @ (y_n - lam)


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


def solve_w_and_v(data, params, posterior, prior, cap=model.EXP_CAP, inner_tol=1e-8, max_inner=25):
    """Iterate the closed-form refresh at fixed μ until W is self-consistent.

    The posterior-covariance subproblem is concave with its unique optimum
    at W = λ(V) αᵀ², so the fixed point of the refresh is the argmax over Σ
    given everything else.
    """
    clamps = 0
    for _ in range(max_inner):
        v_old = [v.copy() for v in posterior.v]
        clamps += update_w_and_v(data, params, posterior, prior, cap)
        change = max(
            float(np.max(np.abs(v - vo))) for v, vo in zip(posterior.v, v_old)
        )
        if change < inner_tol:
            break
    return clamps


def _snapshot(params, posterior):
    return (
        params.alpha.copy(),
        params.beta.copy(),
        [mu.copy() for mu in posterior.mu],
        [w.copy() for w in posterior.w],
        [v.copy() for v in posterior.v],
    )


def _restore(params, posterior, state):
    params.alpha[...], params.beta[...] = state[0], state[1]
    for m in range(len(state[2])):
        posterior.mu[m] = state[2][m].copy()
        posterior.w[m] = state[3][m].copy()
        posterior.v[m] = state[4][m].copy()


def _constrain_and_refresh(data, params, posterior, prior, config, report, elbo_base):
    """Constraint + gauge step followed by the covariance solve, guarded.

    Rescaling μ against the loading leaves the rates invariant but takes
    (W, V) off the consistency manifold, so candidate states are compared
    only after their covariance re-solve.  Candidate A keeps the current
    orientation; candidate B applies the constraint and the gauge searches.
    The better valid state wins; monotonicity falls back to the incoming
    state if the inner solve ever misbehaves.
    """
    state0 = _snapshot(params, posterior)

    clamps_a = solve_w_and_v(data, params, posterior, prior, config.cap)
    elbo_a = model.elbo(data, params, posterior, prior, config.cap)
    if not (np.isfinite(elbo_a) and elbo_a >= elbo_base):
        _restore(params, posterior, state0)
        elbo_a = elbo_base
        report.step_fallbacks += 1
    state_a = _snapshot(params, posterior)

    _restore(params, posterior, state0)
    flags = constrain(params, posterior)
    if flags["zero_norm_columns"]:
        report.notes.append(f"zero-norm loading columns {flags['zero_norm_columns']}")
    gauge_rescale(data, params, posterior, prior)
    clamps_b = solve_w_and_v(data, params, posterior, prior, config.cap)
    elbo_b = model.elbo(data, params, posterior, prior, config.cap)

    if np.isfinite(elbo_b) and elbo_b >= elbo_a:
        report.clamp_count += clamps_b
        return elbo_b
    _restore(params, posterior, state_a)
    report.clamp_count += clamps_a
    return elbo_a


def _hyper_step(data, params, posterior, prior, config, rng, report, relax_iters=4):
    """Per-latent hyperparameter update, judged on the full ELBO.

    A proposed kernel changes which posteriors are plausible, so the
    candidate is given a short E-step relaxation (μ and W/V at fixed
    weights) under the new prior before the ELBO comparison; without it an
    over-smooth initialization can never escape.  Rejected proposals restore
    the previous prior and posterior.  Returns the ELBO of the final state.
    """
    current = [(prior.spec(l).sigma2, prior.spec(l).omega) for l in range(prior.n_latents)]
    elbo_before = model.elbo(data, params, posterior, prior, config.cap)
    for l in range(prior.n_latents):
        windows = draw_windows(
            data, posterior, l, rng, config.subsample_len, config.n_subsamples
        )
        new_spec, accepted = update_hyper(prior.spec(l), windows)
        if accepted == 0:
            continue
        old_spec = prior.spec(l)
        state = _snapshot(params, posterior)
        prior.set_spec(l, new_spec)
        for _ in range(relax_iters):
            for ll in range(prior.n_latents):
                newton_mu(
                    ll, data, params, posterior, prior, config.cap, config.step_halving_max
                )
            solve_w_and_v(data, params, posterior, prior, config.cap)
        elbo_after = model.elbo(data, params, posterior, prior, config.cap)
        if np.isfinite(elbo_after) and elbo_after >= elbo_before:
            elbo_before = elbo_after
            current[l] = (new_spec.sigma2, new_spec.omega)
        else:
            prior.set_spec(l, old_spec)
            _restore(params, posterior, state)
            report.notes.append(f"hyper step rejected for latent {l} (ELBO would drop)")
    report.hyper_trace.append(current)
    return elbo_before


def _max_change(old, new):
    return max(float(np.max(np.abs(o - n))) if o.size else 0.0 for o, n in zip(old, new))


def fit(data, config, true_latents=None):
    """Fit the model (Algorithm: init, then coordinate-ascent Newton loop).

    Parameters
    ----------
    data : SpikeData
    config : FitConfig
    true_latents : list of ndarray, optional
        Ground-truth latents per trial; when given, the Spearman rank
        correlation of the posterior mean is recorded per iteration.

    Returns
    -------
    (ModelParams, LatentPosterior, GPPrior, FitReport)
    """
    if config.history_order is not None and config.history_order != data.history_order:
        data = model.SpikeData(data.trials, data.bin_width, config.history_order)
    if config.n_latents >= data.n_neurons:
        raise ValidationError("n_latents must be smaller than the number of neurons")

    from . import initialization  # deferred: initialization imports model only

    rng = np.random.default_rng(config.seed)
    prior = make_prior(config)
    report = FitReport()

    t0 = time.perf_counter()
    params, posterior, _ = initialization.initialize(data, config.n_latents, prior)
    report.clamp_count += solve_w_and_v(data, params, posterior, prior, config.cap)

    def record_rank_corr():
        if true_latents is not None:
            from .evaluate import rank_correlation

            truth = np.concatenate([np.asarray(x, dtype=float) for x in true_latents])
            inferred = np.concatenate(posterior.mu)
            report.rank_corr_trace.append(rank_correlation(truth, inferred))

    for it in range(1, config.max_iter + 1):
        iter_start = time.perf_counter()
        mu_old = [mu.copy() for mu in posterior.mu]
        alpha_old = params.alpha.copy()
        beta_old = params.beta.copy()

        for l in range(config.n_latents):
            info = newton_mu(
                l, data, params, posterior, prior, config.cap, config.step_halving_max
            )
            report.step_fallbacks += info["fallbacks"]
        for n in range(data.n_neurons):
            info = newton_alpha(
                n, data, posterior, params, config.cap, config.step_halving_max
            )
            report.step_fallbacks += info["fallbacks"]
            info = newton_beta(
                n, data, posterior, params, config.cap, config.step_halving_max
            )
            report.step_fallbacks += info["fallbacks"]

        elbo_base = model.elbo(data, params, posterior, prior, config.cap)
        elbo_now = _constrain_and_refresh(
            data, params, posterior, prior, config, report, elbo_base
        )

        if config.hyper_every and it % config.hyper_every == 0:
            elbo_now = _hyper_step(data, params, posterior, prior, config, rng, report)

        report.elbo_trace.append(elbo_now)
        report.wall_time.append(time.perf_counter() - iter_start)
        record_rank_corr()
        report.iterations = it

        delta = max(
            _max_change(mu_old, posterior.mu),
            float(np.max(np.abs(alpha_old - params.alpha))),
            float(np.max(np.abs(beta_old - params.beta))),
        )
        logger.debug(
            "iter %d: elbo=%.6f, change=%.3e, elapsed=%.2fs",
            it,
            elbo_now,
            delta,
            time.perf_counter() - t0,
        )
        if delta < config.tol:
            report.converged = True
            break

    return params, posterior, prior, report


def infer_posterior(test_data, params, prior, config, neuron_mask=None):
    """Posterior over the latents at frozen weights and hyperparameters.

    ``neuron_mask`` is a boolean keep-array; excluded neurons do not enter
    the inference in any way (their counts cannot influence the posterior).
    Runs μ updates and W/V refreshes to convergence.
    """
    if test_data.history_order != params.history_order:
        test_data = model.SpikeData(
            test_data.trials, test_data.bin_width, params.history_order
        )
    if neuron_mask is not None:
        neuron_mask = np.asarray(neuron_mask, dtype=bool)
        if neuron_mask.size != test_data.n_neurons:
            raise ValidationError("neuron_mask length must match the neuron count")
        if not neuron_mask.any():
            raise ValidationError("neuron_mask excludes every neuron")
        keep = np.flatnonzero(neuron_mask)
        test_data = test_data.subset_neurons(keep)
        params = model.ModelParams(params.alpha[keep], params.beta[keep])

    posterior = model.zero_posterior(test_data, params.n_latents, prior)
    solve_w_and_v(test_data, params, posterior, prior, config.cap)
    for _ in range(config.max_iter):
        mu_old = [mu.copy() for mu in posterior.mu]
        for l in range(params.n_latents):
            newton_mu(
                l, test_data, params, posterior, prior, config.cap, config.step_halving_max
            )
        solve_w_and_v(test_data, params, posterior, prior, config.cap)
        if _max_change(mu_old, posterior.mu) < config.tol:
            break
    return posterior
