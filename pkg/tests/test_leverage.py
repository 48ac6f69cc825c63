import math

import numpy as np
import pytest

from commopt.leverage import (block_leverage, generalized_leverage, leverage_exact,
                              lewis_fixed_point, lewis_map, lewis_residual, log_d, pencil_bounds,
                              predicted_lewis_iterations, psd_pinv, psd_sqrt, ridge_leverage,
                              sample_diag)

TRIANGLE = np.array([[1.0, 0], [0, 1], [1, 1]])


@pytest.mark.parametrize("A,tau", [
    (np.eye(3), [1, 1, 1]),
    (np.array([[1.0], [1.0]]), [0.5, 0.5]),
    (TRIANGLE, [2 / 3, 2 / 3, 2 / 3]),
])
def test_leverage_exact_examples(A, tau):
    assert np.allclose(leverage_exact(A).tau, tau)


def test_leverage_matches_definition():
    A = np.random.default_rng(0).standard_normal((15, 4))
    direct = np.einsum("ij,jk,ik->i", A, np.linalg.inv(A.T @ A), A)
    assert np.allclose(leverage_exact(A).tau, direct)
    assert leverage_exact(A).sum() == pytest.approx(4)


def test_generalized_leverage():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((10, 3))
    assert np.allclose(generalized_leverage(A, A).tau, leverage_exact(A).tau)
    B = np.array([[1.0, 0, 0], [0, 1, 0]])
    tau = generalized_leverage(np.array([[0, 0, 1.0], [1, 1, 0]]), B).tau
    assert tau[0] == np.inf and np.isfinite(tau[1])
    # duplicating the rows of A gives B^T B = 2 A^T A, so tau^B = tau / 2; the
    # sandwich tau <= tau^B <= 2 tau holds for B^T B = A^T A / 2 (the rows scaled by 1/sqrt 2)
    tB = generalized_leverage(A, A / math.sqrt(2)).tau
    t = leverage_exact(A).tau
    assert np.all(t <= tB * (1 + 1e-12)) and np.all(tB <= 2 * t * (1 + 1e-12))


def test_ridge_leverage():
    assert np.allclose(ridge_leverage(np.eye(4), 1.0).tau, 0.5)
    A = np.random.default_rng(2).standard_normal((12, 4))
    assert np.allclose(ridge_leverage(A, 0.0).tau, leverage_exact(A).tau)
    lam = np.linalg.svd(A, compute_uv=False)[-1] ** 2
    t, tl = leverage_exact(A).tau, ridge_leverage(A, lam).tau
    assert np.all(tl <= t + 1e-12)
    assert np.all(t <= 2 * tl + 1e-12)
    with pytest.raises(ValueError):
        ridge_leverage(A, -1.0)


def test_block_leverage_examples():
    assert np.allclose(block_leverage(np.eye(4), [2, 2]), [2, 2])
    assert np.allclose(block_leverage(TRIANGLE, [2, 1]), [4 / 3, 2 / 3])


def test_block_leverage_is_sensitivity():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((8, 3))
    U = np.linalg.svd(A, full_matrices=False)[0]
    for lo, hi in [(0, 3), (3, 8)]:
        # sup_X ||A_i X||_F^2 / ||A X||_2^2 is attained at X = (A^T A)^{-1/2}
        X = np.linalg.inv(psd_sqrt(A.T @ A))
        ratio = np.linalg.norm(A[lo:hi] @ X) ** 2 / np.linalg.norm(A @ X, 2) ** 2
        assert ratio == pytest.approx(np.sum(U[lo:hi] ** 2))
        # and no random X does better
        for _ in range(50):
            Y = rng.standard_normal((3, 3))
            assert np.linalg.norm(A[lo:hi] @ Y) ** 2 / np.linalg.norm(A @ Y, 2) ** 2 <= ratio + 1e-9
    assert np.allclose(block_leverage(A, [3, 5]), [np.sum(U[:3] ** 2), np.sum(U[3:] ** 2)])


def test_sample_diag_examples():
    rng = np.random.default_rng(4)
    S = sample_diag(np.array([0.0, 1.0, 0.5]), 10.0, 1.0, 3, rng)
    assert 0 not in S.index
    assert 1 in S.index and 2 in S.index
    assert np.allclose(S.values, 1.0)


def test_sample_diag_half_probability():
    n, d = 200, 3
    alpha = 0.5 / log_d(d)
    fracs = [sample_diag(np.ones(n), alpha, 1.0, d, np.random.default_rng(s)).nnz / n
             for s in range(1000)]
    assert abs(np.mean(fracs) - 0.5) <= 0.05
    with pytest.raises(ValueError):
        sample_diag(-np.ones(2), 1.0, 1.0, 2, np.random.default_rng(0))


def test_psd_helpers():
    rng = np.random.default_rng(5)
    B = rng.standard_normal((5, 3))
    Q = B @ B.T
    P = psd_pinv(Q)
    assert np.allclose(Q @ P @ Q, Q)
    R = psd_sqrt(Q)
    assert np.allclose(R @ R, Q)
    lo, hi = pencil_bounds(2 * Q, Q)
    assert lo == pytest.approx(2) and hi == pytest.approx(2)


@pytest.mark.parametrize("p", [1.0, 4 / 3, 2.0, 3.0])
def test_lewis_identity_is_fixed(p):
    w = lewis_fixed_point(np.eye(4), p, 0.0, 1e-10).w
    assert np.allclose(w, 1)


def test_lewis_p2_is_leverage():
    A = np.random.default_rng(6).standard_normal((10, 3))
    w = lewis_fixed_point(A, 2.0, 0.0, 1e-10).w
    assert np.allclose(w, leverage_exact(A).tau, atol=1e-10)


def test_lewis_regularized_residual():
    A = np.random.default_rng(7).standard_normal((12, 3))
    eps, eta, p = 1e-8, 1e-3, 4 / 3
    res = lewis_fixed_point(A, p, eta, eps, max_iters=10 ** 4)
    w = res.w
    Wp = w ** (0.5 - 1 / p)
    B = Wp[:, None] * A
    sigma = np.einsum("ij,jk,ik->i", B, np.linalg.pinv(B.T @ B), B)
    assert np.max(np.abs(w - sigma - eta)) <= eps
    assert lewis_residual(A, w, p, eta) <= eps
    assert np.allclose(lewis_map(A, w, p, eta), w, atol=1e-6)


def test_lewis_iteration_prediction():
    A = np.random.default_rng(8).standard_normal((12, 3))
    for p in (1.0, 4 / 3):
        cap = 2 * predicted_lewis_iterations(p, 0.0, 1e-6)
        assert lewis_fixed_point(A, p, 0.0, 1e-6, cap).iterations <= cap


def test_lewis_rejects_bad_p():
    with pytest.raises(ValueError):
        lewis_fixed_point(np.eye(2), 4.0)
