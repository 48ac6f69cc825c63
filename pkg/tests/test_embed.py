import math

import numpy as np
import pytest

from commopt.commsim import Network, RowPartitionedMatrix, even_partition
from commopt.embed import (InvalidDistribution, NoMass, approx_lewis_form, block_lev_sample,
                           block_sample_size, estimate_block_leverages, integer_kernel_basis,
                           kernel_membership, lewis_embedding, make_kernel_test,
                           refinement_overestimates, relative_lewis_sampling, relative_target)
from commopt.leverage import block_leverage, leverage_exact, lewis_quadratic_form, lewis_weights


def _rpm(A, s, L=12):
    return RowPartitionedMatrix.from_dense(A, even_partition(A.shape[0], s), L)


# -- block leverage -----------------------------------------------------------------------------

def test_block_estimates_single_server_fallback():
    A = _rpm(np.random.default_rng(0).standard_normal((20, 4)), 1)
    r = estimate_block_leverages(A, Network(1))
    assert r.L[0] == 4


def test_block_estimates_identity():
    d, s = 8, 4
    ok = 0
    for seed in range(100):
        r = estimate_block_leverages(_rpm(np.eye(d), s), Network(s, seed=seed))
        ok += np.all(r.L >= 0.25 * d / s)
    assert ok >= 95


def test_block_estimates_random_invariants():
    d, s = 8, 8
    cap = (math.ceil(math.log(d)) + 1) * d + 4 * d
    ok = 0
    for seed in range(100):
        A = _rpm(np.random.default_rng(seed).standard_normal((256, d)), s)
        r = estimate_block_leverages(A, Network(s, seed=seed))
        ok += np.all(r.L >= block_leverage(A.dense(), A.partition) / 4) and r.L.sum() <= cap
        assert r.rounds <= math.ceil(math.log(d)) + 1
    assert ok >= 95


def test_block_sample_is_unbiased():
    A = _rpm(np.random.default_rng(1).standard_normal((6, 3)), 1)
    X = A.dense()
    G = np.mean([block_lev_sample(A, Network(1, seed=s), [1.0], 16).gram() for s in range(10 ** 4)],
                axis=0)
    assert np.linalg.norm(G - X.T @ X) <= 0.02 * np.linalg.norm(X.T @ X)


def test_block_sample_identity_sandwich():
    A = _rpm(np.eye(4), 2)
    p = block_leverage(A.dense(), A.partition)
    p = p / p.sum()
    N = block_sample_size(4, 0.25, 0.5)
    ok = 0
    for seed in range(100):
        lo, hi = block_lev_sample(A, Network(2, seed=seed), p, N).bounds(A.dense())
        ok += lo >= 0.5 and hi <= 1.5
    assert ok >= 85


def test_block_sample_missing_block_fails():
    A = _rpm(np.eye(4), 2)
    lo, _ = block_lev_sample(A, Network(2), [1.0, 0.0], 50).bounds(A.dense())
    assert lo < 0.5
    with pytest.raises(InvalidDistribution):
        block_lev_sample(A, Network(2), [0.7, 0.7], 5)


# -- relative Lewis sampling ----------------------------------------------------------------------

def test_relative_sampling_zero_form():
    A = _rpm(np.random.default_rng(2).standard_normal((8, 2)), 2)
    with pytest.raises(NoMass):
        relative_lewis_sampling(A, Network(2), np.zeros((2, 2)), 2.0, 0.1, 10, 4)


def test_relative_sampling_all_outliers():
    A = _rpm(np.vstack([np.eye(3) * 2, -np.eye(3) * 3]), 2)
    N, p = 60, 1.0
    res = relative_lewis_sampling(A, Network(2, seed=1), np.eye(3), p, 0.1, N, 6)
    assert res.q == pytest.approx(1.0)
    assert sorted(res.outliers) == list(range(6))
    assert np.allclose(res.prob, 1 / 6)
    assert np.allclose(res.rows, res.raw_rows * (N / 6) ** (-1 / p))


@pytest.mark.parametrize("sampler,eps", [("direct", 0.5), ("sketch", 0.1)])
def test_relative_sampling_distribution(sampler, eps):
    rng = np.random.default_rng(3)
    X = rng.standard_normal((32, 3))
    A = _rpm(X, 4)
    M = 0.3 * np.linalg.inv(np.linalg.cholesky(A.dense().T @ A.dense())).T
    N = 10 ** 4
    res = relative_lewis_sampling(A, Network(4, seed=4), M, 2.0, 0.1, N, 6, eps=eps,
                                  sampler=sampler)
    emp = np.bincount(res.index, minlength=32) / N
    assert 0.5 * np.abs(emp - relative_target(A.dense(), M, 2.0)).sum() <= 0.05


# -- ApproxLewisForm and the embedding ------------------------------------------------------------

def test_approx_lewis_form_base_case():
    X = np.random.default_rng(5).standard_normal((5, 3))
    A = _rpm(X, 1)
    res = approx_lewis_form(A, Network(1), 1.0)
    w = lewis_weights(A.dense(), 1.0)
    assert np.allclose(res.Q, lewis_quadratic_form(A.dense(), w, 1.0))
    assert res.levels == 0


def test_approx_lewis_form_identity():
    A = _rpm(np.eye(6), 2)
    ev = np.linalg.eigvalsh(approx_lewis_form(A, Network(2), 2.0).Q)
    assert ev.min() > 0.2 and ev.max() < 5


def test_lewis_embedding_l1():
    X = np.random.default_rng(6).standard_normal((64, 4))
    A = _rpm(X, 4)
    emb = lewis_embedding(A, Network(4, seed=7), 1.0, 0.5, 0.1)
    xs = np.random.default_rng(8).standard_normal((4, 1000))
    ratio = np.abs(emb.rows @ xs).sum(axis=0) / np.abs(A.dense() @ xs).sum(axis=0)
    assert np.all(np.abs(ratio - 1) <= 0.5)


# -- kernel tests and refinement ------------------------------------------------------------------

def test_kernel_test_trivial_kernel():
    rng = np.random.default_rng(0)
    t = make_kernel_test(np.eye(3, dtype=int).tolist(), 3, 8, 4, rng)
    assert t.trivial
    assert np.all(kernel_membership(np.array([[1, 2, 3], [0, 0, 1]]), t))


def test_kernel_test_detects_kernel_direction():
    rng = np.random.default_rng(1)
    t = make_kernel_test([[1, 0]], 2, 8, 10, rng)
    assert list(kernel_membership(np.array([[0, 1], [3, 0]]), t, audit=True)) == [False, True]


def test_kernel_test_matches_rank_oracle():
    agree = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        B = rng.integers(-5, 6, size=(3, 4))
        sub = (rng.integers(-3, 4, size=(6, 3)) @ B).tolist()
        inside = rng.integers(-3, 4, size=(5, 3)) @ B
        outside = rng.integers(-5, 6, size=(5, 4))
        rows = np.vstack([inside, outside])
        truth = [np.linalg.matrix_rank(np.vstack([sub, r])) == np.linalg.matrix_rank(sub)
                 for r in rows]
        got = kernel_membership(rows, make_kernel_test(sub, 4, 8, 20, rng))
        agree += list(got) == truth
    assert agree >= 99


def test_integer_kernel_basis():
    basis = integer_kernel_basis([[1, 2, 3], [2, 4, 6]], 3)
    assert len(basis) == 2
    for b in basis:
        assert all(isinstance(v, int) for v in b)
        assert 1 * b[0] + 2 * b[1] + 3 * b[2] == 0


def test_refinement_identity():
    d = 6
    r = refinement_overestimates(_rpm(np.eye(d), 2, 8), Network(2, seed=0))
    assert np.all(r.tau_hat >= 1) and r.tau_hat.sum() <= 9 * d


def test_refinement_duplicated_rows():
    X = np.random.default_rng(9).standard_normal((40, 4))
    X[17] = X[3]
    r = refinement_overestimates(_rpm(X, 4, 8), Network(4, seed=1))
    assert r.tau_hat[3] == r.tau_hat[17]


def test_refinement_dominates_leverage():
    ok = 0
    for seed in range(20):
        A = _rpm(np.random.default_rng(seed).standard_normal((200, 10)), 4, 8)
        r = refinement_overestimates(A, Network(4, seed=seed))
        ok += np.all(r.tau_hat >= leverage_exact(A.dense()).tau) and r.tau_hat.sum() <= 90
    assert ok >= 19
