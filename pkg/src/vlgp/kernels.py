"""Squared-exponential GP prior: kernel evaluation, low-rank factors, gradients.

Time is measured in integer bin units throughout, so ``omega`` is an inverse
squared timescale per bin^2 and the bin width in seconds is metadata only.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .exceptions import IndefiniteKernelError, NumericalError, ValidationError

# Diagonal regularizer relative to the prior variance.  The low-rank path
# never inverts K directly; this scale is used wherever a dense K must be
# inverted and as the ridge on out-of-range components of the factored solve.
RIDGE_SCALE = 1e-7

DEFAULT_ICHOL_TOL_SCALE = 1e-8
DEFAULT_MAX_RANK = 100


@dataclass(frozen=True)
class KernelSpec:
    """Hyperparameters of a squared-exponential covariance on the bin grid.

    Parameters
    ----------
    sigma2 : float
        Prior variance (magnitude of the latent process).
    omega : float
        Inverse squared timescale, per bin^2.  ``omega = 0`` degenerates to a
        constant kernel.
    jitter : float, optional
        Small value added to the diagonal for numerical stability.  Defaults
        to ``RIDGE_SCALE * sigma2``; pass 0 to disable.
    """

    sigma2: float
    omega: float
    jitter: float = None

    def __post_init__(self):
        if not np.isfinite(self.sigma2) or self.sigma2 <= 0:
            raise ValidationError(f"sigma2 must be positive, got {self.sigma2}")
        if not np.isfinite(self.omega) or self.omega < 0:
            raise ValidationError(f"omega must be non-negative, got {self.omega}")
        if self.jitter is None:
            object.__setattr__(self, "jitter", RIDGE_SCALE * self.sigma2)
        if self.jitter < 0:
            raise ValidationError(f"jitter must be non-negative, got {self.jitter}")


def sq_exp_cov(t, s, spec):
    """Covariance between bins ``t`` and ``s``: sigma2 * exp(-omega (t-s)^2).

    The spec's jitter is added iff ``t == s``.
    """
    value = spec.sigma2 * np.exp(-spec.omega * float(t - s) ** 2)
    if t == s:
        value += spec.jitter
    return float(value)


def _sq_dists(n_bins):
    t = np.arange(n_bins, dtype=float)
    d = t[:, None] - t[None, :]
    return d * d


def cov_matrix(n_bins, spec, include_jitter=True):
    """Dense covariance matrix over ``n_bins`` regularly spaced bins."""
    k = spec.sigma2 * np.exp(-spec.omega * _sq_dists(n_bins))
    if include_jitter and spec.jitter > 0:
        k[np.diag_indices(n_bins)] += spec.jitter
    return k


def kernel_log_grads(n_bins, spec):
    """Derivatives of the dense kernel w.r.t. log sigma2 and log omega.

    Returns
    -------
    (ndarray, ndarray)
        ``dK/dlog(sigma2)`` (the jitter-free kernel itself) and
        ``dK/dlog(omega) = -omega * D ∘ K`` with D the squared-distance matrix.
    """
    d = _sq_dists(n_bins)
    k0 = spec.sigma2 * np.exp(-spec.omega * d)
    return k0, -spec.omega * d * k0


@dataclass
class CholFactor:
    """Low-rank factor G with K ≈ G Gᵀ from pivoted incomplete Cholesky."""

    G: np.ndarray
    rank: int
    residual_trace: float
    _q: np.ndarray = field(default=None, repr=False, compare=False)
    _r: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def n_bins(self):
        return self.G.shape[0]

    def _qr(self):
        # thin QR of G, cached; used by the factored prior solves
        if self._q is None:
            self._q, self._r = np.linalg.qr(self.G)
        return self._q, self._r

    def inv_quad(self, x, ridge):
        """Quadratic form xᵀK⁻¹x through the factor.

        Solves the least-squares system G z ≈ x and returns zᵀz plus a ridge
        penalty ``‖Gz − x‖²/ridge`` on the component of ``x`` outside the
        span of G, matching what a jittered dense inverse would charge.
        """
        q, r = self._qr()
        qx = q.T @ x
        z = solve_triangular(r, qx)
        resid = x - q @ qx
        return float(z @ z + (resid @ resid) / ridge)

    def inv_apply(self, x, ridge):
        """Apply the same regularized inverse to ``x`` (gradient of inv_quad / 2)."""
        q, r = self._qr()
        qx = q.T @ x
        z = solve_triangular(r, qx)
        back = solve_triangular(r, z, trans=1)
        return q @ back + (x - q @ qx) / ridge


def _pivoted_ichol(diag, column, tol, max_rank, neg_tol):
    """Greedy diagonal-pivoted incomplete Cholesky with lazy column evaluation.

    ``column(j)`` returns the j-th column of the target matrix.  Stops at the
    smallest rank whose residual trace is ≤ tol, at ``max_rank``, or when the
    residual diagonal is exhausted.
    """
    n = diag.size
    G = np.zeros((n, max_rank))
    d = diag.astype(float).copy()
    rank = 0
    residual = float(np.clip(d, 0.0, None).sum())
    for i in range(max_rank + 1):
        low = float(d.min())
        if low < -neg_tol:
            raise IndefiniteKernelError(
                f"residual diagonal reached {low:.3e}, below -{neg_tol:.3e}: "
                "kernel evaluation is not positive semidefinite"
            )
        if residual <= tol or i == max_rank:
            break
        j = int(np.argmax(d))
        pivot = d[j]
        if pivot <= 0:
            break
        root = np.sqrt(pivot)
        g = (column(j) - G[:, :i] @ G[j, :i]) / root
        g[j] = root
        G[:, i] = g
        d -= g * g
        d[j] = 0.0
        rank = i + 1
        residual = float(np.clip(d, 0.0, None).sum())
    return G[:, :rank].copy(), rank, residual


def incomplete_cholesky(n_bins, spec, tol=None, max_rank=None):
    """Low-rank factor of the squared-exponential kernel without building K.

    Parameters
    ----------
    n_bins : int
        Grid length T.
    spec : KernelSpec
        Kernel hyperparameters; the spec's jitter is part of the factored
        matrix (it sits on the diagonal that the pivots consume).
    tol : float, optional
        Truncation tolerance on the residual trace of K − GGᵀ.
        Defaults to ``DEFAULT_ICHOL_TOL_SCALE * n_bins * sigma2``.
    max_rank : int, optional
        Rank cap; defaults to ``min(n_bins, DEFAULT_MAX_RANK)``.
    """
    if n_bins < 1:
        raise ValidationError(f"n_bins must be ≥ 1, got {n_bins}")
    if tol is None:
        tol = DEFAULT_ICHOL_TOL_SCALE * n_bins * spec.sigma2
    if tol <= 0:
        tol = 0.0
    if max_rank is None:
        max_rank = min(n_bins, DEFAULT_MAX_RANK)
    if not 1 <= max_rank <= n_bins:
        raise ValidationError(f"max_rank must be in [1, {n_bins}], got {max_rank}")

    t = np.arange(n_bins, dtype=float)
    diag = np.full(n_bins, spec.sigma2 + spec.jitter)

    def column(j):
        col = spec.sigma2 * np.exp(-spec.omega * (t - j) ** 2)
        col[j] += spec.jitter
        return col

    neg_tol = spec.jitter + 1e-12 * spec.sigma2
    G, rank, residual = _pivoted_ichol(diag, column, tol, max_rank, neg_tol)
    return CholFactor(G=G, rank=rank, residual_trace=residual)


def posterior_inv_factor(w_l, factor):
    """Cholesky of I + B with B = Gᵀ diag(w) G, shared by the posterior identities."""
    G = factor.G
    B = G.T @ (w_l[:, None] * G)
    try:
        cf = cho_factor(np.eye(factor.rank) + B, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - W ≥ 0 prevents this
        raise NumericalError(f"I + GᵀWG singular: corrupted W ({exc})") from exc
    return B, cf


def posterior_trace_logdet(w_l, factor):
    """tr(K⁻¹Σ) and logdet(K⁻¹Σ) via the low-rank identities.

    With B = GᵀWG: tr(K⁻¹Σ) = T − tr(B) + tr(B(I+B)⁻¹B) and
    logdet(K⁻¹Σ) = logdet(I − B + B(I+B)⁻¹B) = −logdet(I+B); the last form is
    evaluated because it is cancellation-free.
    """
    n = factor.n_bins
    B, cf = posterior_inv_factor(w_l, factor)
    s = cho_solve(cf, B)
    trace = n - np.trace(B) + float(np.sum(B * s.T))
    logdet = -2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    return trace, logdet


def posterior_variance(w_l, factor):
    """diag(Σ) = [G ∘ (G − GB + GB(I+B)⁻¹B)] 1, evaluated as [G ∘ G(I+B)⁻¹] 1."""
    G = factor.G
    B, cf = posterior_inv_factor(w_l, factor)
    return np.sum(G * cho_solve(cf, G.T).T, axis=1)


class GPPrior:
    """Per-latent squared-exponential priors with cached low-rank factors.

    Factors are built from jitter-free copies of the specs (the low-rank path
    never inverts K directly) and cached per (latent, length) so trials of
    equal length share one factor.
    """

    def __init__(self, specs, tol_scale=DEFAULT_ICHOL_TOL_SCALE, max_rank=DEFAULT_MAX_RANK):
        self.specs = list(specs)
        self.tol_scale = tol_scale
        self.max_rank = max_rank
        self._factors = {}

    @property
    def n_latents(self):
        return len(self.specs)

    def spec(self, l):
        return self.specs[l]

    def set_spec(self, l, spec):
        self.specs[l] = spec
        self._factors = {k: v for k, v in self._factors.items() if k[0] != l}

    def ridge(self, l):
        return RIDGE_SCALE * self.specs[l].sigma2

    def factor(self, l, n_bins):
        key = (l, n_bins)
        if key not in self._factors:
            spec = replace(self.specs[l], jitter=0.0)
            tol = self.tol_scale * n_bins * spec.sigma2
            self._factors[key] = incomplete_cholesky(
                n_bins, spec, tol=tol, max_rank=min(n_bins, self.max_rank)
            )
        return self._factors[key]

    def copy(self):
        dup = GPPrior(self.specs, self.tol_scale, self.max_rank)
        dup._factors = dict(self._factors)
        return dup
