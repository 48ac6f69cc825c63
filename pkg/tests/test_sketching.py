import math

import numpy as np
import pytest

from commopt.commsim import Network
from commopt.sketching import (ZeroProductMatrix, ZeroVector, jl_estimate_norm, jl_failure_bound,
                               lp2_norm_estimate, lp_norm_estimate, lp_sample, lp_sample_many,
                               row_distribution, sample_from_block_many)


def _tv(idx, target):
    emp = np.bincount(idx, minlength=len(target)) / len(idx)
    return 0.5 * float(np.abs(emp - target).sum())


def test_jl_zero_and_unbiased():
    assert jl_estimate_norm(np.zeros(5), 8) == 0.0
    e1 = np.eye(6)[0]
    mean = np.mean([jl_estimate_norm(e1, 4, seed) for seed in range(10 ** 4)])
    assert 0.97 <= mean <= 1.03


def test_jl_failure_rate_within_bound():
    x = np.random.default_rng(0).standard_normal(40)
    r, eps, trials = 64, 0.5, 2000
    ests = np.array([jl_estimate_norm(x, r, seed) for seed in range(trials)])
    fail = np.mean(np.abs(ests / (x @ x) - 1) > eps)
    slack = 3 * math.sqrt(0.25 / trials)
    assert fail <= jl_failure_bound(eps, r) + slack


@pytest.mark.parametrize("x,target", [(np.eye(5)[0], 1.0), (np.ones(8), 8.0)])
def test_lp_norm_estimate_simple(x, target):
    eps, delta = 0.25, 0.1
    ok = [abs(lp_norm_estimate(x, 1.0, eps, delta, seed) - target) <= eps * target
          for seed in range(1000)]
    assert np.mean(ok) >= 1 - delta


def test_lp_norm_estimate_mixed_magnitudes():
    L = 10
    x = np.array([2.0 ** L, -(2.0 ** -L), 2.0 ** -L, 3 * 2.0 ** L, 2.0 ** -L])
    eps, delta = 0.25, 0.1
    for p in (1.0, 1.5):
        target = float(np.sum(np.abs(x) ** p) ** (1 / p))
        ok = [abs(lp_norm_estimate(x, p, eps, delta, seed) - target) <= eps * target
              for seed in range(300)]
        assert np.mean(ok) >= 1 - delta


def test_lp_sample_point_mass():
    x = np.eye(6)[2]
    hits = [lp_sample(x, 1.0, seed=seed)[0] == 2 for seed in range(1000)]
    assert np.mean(hits) >= 0.99


def test_lp_sample_symmetric_pair():
    idx, _ = lp_sample_many(np.ones(2), 1.0, 10 ** 4, seed=1)
    assert abs(np.mean(idx == 0) - 0.5) <= 0.05


def test_lp_sample_weighted():
    idx, probs = lp_sample_many(np.array([1.0, 2.0, 3.0]), 2.0, 10 ** 4, seed=2)
    target = np.array([1, 4, 9]) / 14
    assert _tv(idx, target) <= 0.05
    assert np.allclose(probs, target[idx], rtol=0.2)


def test_lp_sample_zero_vector():
    with pytest.raises(ZeroVector):
        lp_sample(np.zeros(3), 1.0)


def test_sample_from_block_identity_is_uniform():
    from scipy.stats import chisquare
    idx, _, ph = sample_from_block_many(np.eye(4), np.eye(4), 2.0, 0.25, 0.1, 10 ** 4, seed=0)
    counts = np.bincount(idx, minlength=4)
    assert chisquare(counts).pvalue > 0.01
    assert np.all(np.abs(ph - 0.25) <= 0.25 * 0.25)


def test_sample_from_block_single_row():
    X = np.zeros((4, 4))
    X[0, 0] = 1.0
    idx, rows, ph = sample_from_block_many(X, np.eye(4), 2.0, 0.25, 0.1, 50, seed=0)
    assert np.all(idx == 0)
    assert np.allclose(rows, X[0])
    assert np.all(np.abs(ph - 1) <= 0.25)


def test_sample_from_block_matches_row_distribution():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((8, 3))
    B = rng.standard_normal((3, 3))
    M = B @ B.T + np.eye(3)
    idx, _, _ = sample_from_block_many(X, M, 1.0, 0.25, 0.1, 10 ** 4, seed=5)
    assert _tv(idx, row_distribution(X, M, 1.0)) <= 0.05


def test_sample_from_block_zero_product():
    with pytest.raises(ZeroProductMatrix):
        sample_from_block_many(np.ones((3, 2)), np.zeros((2, 2)), 1.0, 0.5, 0.1, 1)


def test_sample_from_block_charges_upload_and_request():
    net = Network(1)
    sample_from_block_many(np.eye(3), np.eye(3), 2.0, 0.5, 0.1, 3, net=net, norm_estimate=3.0)
    tags = {r.tag for r in net.ledger.per_step}
    assert {"sfb:SX'", "sfb:req", "sfb:row"} <= tags
    assert net.ledger.check_additivity()


@pytest.mark.parametrize("X,M,p,target", [
    (np.eye(4), np.eye(4), 2.0, 4.0),
    (np.diag([1.0, 0, 0]), np.eye(3), 1.0, 1.0),
])
def test_lp2_norm_simple(X, M, p, target):
    eps = 0.25
    ok = [abs(lp2_norm_estimate(X, M, p, eps, 0.1, seed=seed) - target) <= eps * target
          for seed in range(200)]
    assert np.mean(ok) >= 0.9


def test_lp2_norm_random_instance():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((16, 4))
    M = rng.standard_normal((4, 4))
    eps, delta = 0.5, 0.1
    for p in (1.0, 2.0):
        exact = float(np.sum(np.linalg.norm(X @ M, axis=1) ** p))
        ok = [abs(lp2_norm_estimate(X, M, p, eps, delta, seed=s) - exact) <= eps * exact
              for s in range(200)]
        assert np.mean(ok) >= 1 - delta
