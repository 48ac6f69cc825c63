import numpy as np
import pytest
from scipy.stats import linregress

from commopt.checks import LOWRANK_SPECTRUM, gaussian_instance, planted_spectrum_instance
from commopt.commsim import Network, RowPartitionedMatrix, even_partition
from commopt.lowrank import best_rank_k_error, low_rank_projection, rank_k_least_squares


def test_exact_rank_k_is_recovered():
    rng = np.random.default_rng(0)
    # integer factors keep the product exactly rank 3 on the grid
    X = rng.integers(-4, 5, (64, 3)) @ rng.integers(-4, 5, (3, 8))
    A = RowPartitionedMatrix.from_dense(X, even_partition(64, 4), 8)
    Xd = A.dense()
    r = low_rank_projection(A, Network(4, seed=1), 3)
    assert r.error(Xd) <= 1e-8 * np.linalg.norm(Xd)


def test_full_rank_k_gives_identity():
    A = gaussian_instance(40, 5, 2, 12, 2, with_b=False)
    r = low_rank_projection(A, Network(2, seed=2), 5)
    assert np.allclose(r.Pi, np.eye(5), atol=1e-9)


def test_projection_properties_and_ratio():
    ok = 0
    for seed in range(20):
        A = planted_spectrum_instance(128, LOWRANK_SPECTRUM, 4, 12, seed)
        r = low_rank_projection(A, Network(4, seed=seed), 3, 0.5)
        P = r.Pi
        assert np.max(np.abs(P @ P - P)) <= 1e-9 and np.max(np.abs(P - P.T)) <= 1e-9
        assert np.allclose(r.V.T @ r.V, np.eye(3), atol=1e-9)
        X = A.dense()
        ok += r.error(X) <= 1.5 * best_rank_k_error(X, 3)
    assert ok >= 17


def test_bits_affine_in_machines():
    s_grid = [2, 4, 8, 16, 32]
    bits = []
    for s in s_grid:
        net = Network(s, seed=0)
        low_rank_projection(gaussian_instance(128, 12, s, 12, 0, with_b=False), net, 3, 0.5)
        bits.append(net.ledger.total_bits)
    assert linregress(s_grid, bits).rvalue ** 2 >= 0.95


def test_rank_k_least_squares_matches_svd():
    rng = np.random.default_rng(3)
    B = rng.standard_normal((10, 4))
    C = rng.standard_normal((10, 6))
    Xh = rank_k_least_squares(B, C, 2)
    assert np.linalg.matrix_rank(Xh) <= 2
    # B Xh is the best rank-2 approximation of the projection of C onto range(B)
    U = np.linalg.qr(B)[0]
    PC = U @ U.T @ C
    u, sv, vt = np.linalg.svd(PC)
    assert np.allclose(B @ Xh, (u[:, :2] * sv[:2]) @ vt[:2], atol=1e-9)


def test_rejects_bad_rank():
    A = gaussian_instance(20, 3, 2, 8, 0, with_b=False)
    with pytest.raises(ValueError):
        low_rank_projection(A, Network(2), 4)
