"""Kernel evaluation, incomplete Cholesky, and hyperparameter gradients."""

import numpy as np
import pytest

from vlgp.exceptions import IndefiniteKernelError, ValidationError
from vlgp.kernels import (
    CholFactor,
    GPPrior,
    KernelSpec,
    _pivoted_ichol,
    cov_matrix,
    incomplete_cholesky,
    kernel_log_grads,
    sq_exp_cov,
)


class TestSqExpCov:
    def test_zero_distance(self):
        assert sq_exp_cov(7, 7, KernelSpec(1.0, 0.01, jitter=0.0)) == pytest.approx(1.0)

    def test_distance_ten(self):
        spec = KernelSpec(1.0, 0.01, jitter=0.0)
        assert sq_exp_cov(0, 10, spec) == pytest.approx(np.exp(-1.0), rel=1e-12)
        assert sq_exp_cov(25, 15, spec) == pytest.approx(np.exp(-1.0), rel=1e-12)

    def test_constant_kernel(self):
        assert sq_exp_cov(3, 13, KernelSpec(2.0, 0.0, jitter=0.0)) == pytest.approx(2.0)

    def test_jitter_only_on_diagonal(self):
        spec = KernelSpec(1.0, 0.01, jitter=1e-3)
        assert sq_exp_cov(4, 4, spec) == pytest.approx(1.0 + 1e-3)
        assert sq_exp_cov(4, 5, spec) == pytest.approx(np.exp(-0.01))

    def test_default_jitter_scales_with_sigma2(self):
        assert KernelSpec(4.0, 0.1).jitter == pytest.approx(4e-7)

    def test_invalid_spec(self):
        with pytest.raises(ValidationError):
            KernelSpec(-1.0, 0.1)
        with pytest.raises(ValidationError):
            KernelSpec(1.0, -0.1)
        with pytest.raises(ValidationError):
            KernelSpec(1.0, 0.1, jitter=-1e-9)


@pytest.mark.parametrize("sigma2,omega", [(1.0, 0.01), (2.5, 1e-4), (0.3, 0.5)])
def test_dense_kernel_symmetric_and_chol(sigma2, omega):
    n = 200
    spec = KernelSpec(sigma2, omega, jitter=1e-10 * sigma2)
    k = cov_matrix(n, spec)
    assert np.allclose(k, k.T)
    np.linalg.cholesky(k)  # passes iff positive definite
    # matches the scalar evaluation entrywise
    for t, s in [(0, 0), (3, 11), (199, 0)]:
        assert k[t, s] == pytest.approx(sq_exp_cov(t, s, spec), rel=1e-14)


class TestIncompleteCholesky:
    def test_scalar_case(self):
        for jitter in (0.0, 1e-3):
            fac = incomplete_cholesky(1, KernelSpec(2.0, 0.3, jitter=jitter))
            assert fac.rank == 1
            assert fac.G.shape == (1, 1)
            assert fac.G[0, 0] == pytest.approx(np.sqrt(2.0 + jitter))
            assert fac.residual_trace == pytest.approx(0.0, abs=1e-12)

    def test_constant_kernel_rank_one(self):
        fac = incomplete_cholesky(50, KernelSpec(1.0, 0.0, jitter=0.0), tol=1e-10, max_rank=50)
        assert fac.rank == 1

    def test_dense_oracle_elementwise(self):
        spec = KernelSpec(1.0, 0.01, jitter=0.0)
        fac = incomplete_cholesky(200, spec, tol=1e-8, max_rank=200)
        dense = cov_matrix(200, spec)
        assert np.max(np.abs(dense - fac.G @ fac.G.T)) <= 1e-6

    @pytest.mark.parametrize("sigma2,omega", [(1.0, 0.01), (3.0, 1e-3)])
    def test_tol_zero_reproduces_dense(self, sigma2, omega):
        n = 120
        spec = KernelSpec(sigma2, omega, jitter=0.0)
        fac = incomplete_cholesky(n, spec, tol=0.0, max_rank=n)
        dense = cov_matrix(n, spec)
        assert np.max(np.abs(dense - fac.G @ fac.G.T)) <= 1e-8 * sigma2

    def test_residual_trace_non_increasing_in_rank(self):
        spec = KernelSpec(1.0, 0.01, jitter=0.0)
        residuals = [
            incomplete_cholesky(80, spec, tol=0.0, max_rank=r).residual_trace
            for r in range(1, 13)
        ]
        assert all(a >= b - 1e-12 for a, b in zip(residuals, residuals[1:]))

    def test_indefinite_matrix_raises(self):
        target = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3 and -1
        with pytest.raises(IndefiniteKernelError):
            _pivoted_ichol(
                np.diag(target).copy(),
                lambda j: target[:, j].copy(),
                tol=0.0,
                max_rank=2,
                neg_tol=1e-10,
            )

    def test_bad_arguments(self):
        with pytest.raises(ValidationError):
            incomplete_cholesky(0, KernelSpec(1.0, 0.1))
        with pytest.raises(ValidationError):
            incomplete_cholesky(5, KernelSpec(1.0, 0.1), max_rank=9)


class TestKernelLogGrads:
    def test_diagonals(self):
        d_sig, d_om = kernel_log_grads(30, KernelSpec(2.0, 0.01))
        assert np.allclose(np.diag(d_sig), 2.0)
        assert np.allclose(np.diag(d_om), 0.0)

    def test_entry_value(self):
        d_sig, d_om = kernel_log_grads(20, KernelSpec(1.0, 0.01))
        assert d_om[0, 10] == pytest.approx(-0.01 * 100 * np.exp(-1.0), rel=1e-12)
        assert d_sig[0, 10] == pytest.approx(np.exp(-1.0), rel=1e-12)

    @pytest.mark.parametrize("sigma2,omega", [(1.0, 0.01), (0.5, 0.002), (2.0, 0.2)])
    def test_matches_finite_differences(self, sigma2, omega):
        n = 40
        step = 1e-5
        d_sig, d_om = kernel_log_grads(n, KernelSpec(sigma2, omega))

        def dense(ls, lo):
            return cov_matrix(n, KernelSpec(np.exp(ls), np.exp(lo), jitter=0.0))

        ls, lo = np.log(sigma2), np.log(omega)
        fd_sig = (dense(ls + step, lo) - dense(ls - step, lo)) / (2 * step)
        fd_om = (dense(ls, lo + step) - dense(ls, lo - step)) / (2 * step)
        assert np.max(np.abs(fd_sig - d_sig)) <= 1e-5 * sigma2
        assert np.max(np.abs(fd_om - d_om)) <= 1e-5 * sigma2


class TestCholFactorSolves:
    def test_inv_quad_and_apply_match_dense(self, rng):
        # rough kernel: well conditioned, full-rank factor
        n = 25
        spec = KernelSpec(1.5, 0.3, jitter=0.0)
        fac = incomplete_cholesky(n, spec, tol=0.0, max_rank=n)
        assert fac.rank == n
        k = cov_matrix(n, spec)
        x = rng.standard_normal(n)
        ridge = 1e-7 * spec.sigma2
        assert fac.inv_quad(x, ridge) == pytest.approx(x @ np.linalg.solve(k, x), rel=1e-8)
        assert np.allclose(fac.inv_apply(x, ridge), np.linalg.solve(k, x), rtol=1e-7, atol=1e-9)

    def test_out_of_range_component_is_ridge_penalized(self):
        g = np.array([[1.0], [0.0]])  # span is the first axis only
        fac = CholFactor(G=g, rank=1, residual_trace=0.0)
        ridge = 1e-4
        x = np.array([2.0, 3.0])
        assert fac.inv_quad(x, ridge) == pytest.approx(4.0 + 9.0 / ridge)


class TestGPPrior:
    def test_factor_cache_and_invalidation(self):
        prior = GPPrior([KernelSpec(1.0, 0.01), KernelSpec(1.0, 0.1)])
        f1 = prior.factor(0, 50)
        assert prior.factor(0, 50) is f1
        assert prior.factor(1, 50) is not f1
        prior.set_spec(0, KernelSpec(2.0, 0.01))
        assert prior.factor(0, 50) is not f1
        assert prior.spec(0).sigma2 == 2.0

    def test_factor_excludes_jitter(self):
        # the low-rank path factors the jitter-free kernel
        prior = GPPrior([KernelSpec(1.0, 0.0)], max_rank=50)
        assert prior.factor(0, 50).rank == 1
