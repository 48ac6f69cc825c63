import math

import numpy as np
import pytest

from commopt.commsim import Network, RowPartitionedMatrix
from commopt.config import get_preset
from commopt.leverage import leverage_exact
from commopt.lp import (GuardViolated, InverseMaintainer, IpmParams, IpmState, LpInstance,
                        LpNetwork, bfs_oracle, build_modified_lp, initial_point, inverse_maintain,
                        ipm_solve, ipm_step, load_lp, lp_oracle, potential, potential_grad,
                        random_feasible_lp, save_lp, warm_start_weights, weight_function,
                        wire_bits)


def _inst(A, b, c, R=1.0, s=1, L=12):
    A = np.asarray(A, dtype=float)
    part = [A.shape[0] // s] * s
    part[-1] += A.shape[0] - sum(part)
    return LpInstance(RowPartitionedMatrix.from_dense(A, part, L), np.asarray(b, float),
                      np.asarray(c, float), R)


def _network(inst, eps, s=None):
    net = Network(inst.A.s)
    mlp = build_modified_lp(inst, eps)
    return mlp, LpNetwork(mlp, net, wire_bits(inst, eps), inst.L), net


# -- the modified program -------------------------------------------------------------------------

def test_modified_lp_identity_example():
    mlp = build_modified_lp(_inst(np.eye(2), [1, 1], [1, 1]), 1.0)
    assert np.allclose(mlp.bbar, [1, 1, 3 * math.sqrt(2)])
    assert mlp.n_bar == 4 and mlp.d_bar == 3


def test_modified_lp_cost_block():
    mlp = build_modified_lp(_inst(np.eye(3), [1, 1, 1], [1, 0, 0]), 0.25)
    assert np.allclose(mlp.cbar[:3], [0.25, 0, 0])
    assert np.allclose(mlp.cbar[3:], [0, 1])


def test_initial_point_is_feasible():
    for seed in range(10):
        inst = random_feasible_lp(20, 4, 2, seed=seed)
        mlp = build_modified_lp(inst, 1e-3)
        x, y, s = initial_point(mlp)
        assert np.all(x == 1)
        assert np.allclose(mlp.Abar.T @ x, mlp.bbar, atol=1e-9)
        assert np.allclose(mlp.Abar @ y + s, mlp.cbar, atol=1e-12, rtol=0)
        assert np.all(s > 0)


def test_initial_point_guard():
    mlp = build_modified_lp(_inst(np.eye(2), [1, 1], [1, 0]), 1.0)
    with pytest.raises(GuardViolated):
        initial_point(mlp)


def test_modified_lp_charges_setup():
    inst = random_feasible_lp(20, 3, 4, seed=1)
    net = Network(4)
    build_modified_lp(inst, 1e-3, net)
    assert net.ledger.total_up > 0 and net.ledger.total_down > 0


# -- parameters and potential ---------------------------------------------------------------------

def test_params_follow_formulas():
    P = IpmParams.build(50, 6, "paper")
    a = 1 / (4 * math.log(4 * 50 / 6))
    assert P.alpha == pytest.approx(a)
    assert P.paper_schedule and not IpmParams.build(50, 6, "desk").paper_schedule


def test_potential_at_center():
    v = np.ones(7)
    assert potential(v, 3.0) == pytest.approx(14)
    assert np.all(potential_grad(v, 3.0) == 0)


# -- warm start -----------------------------------------------------------------------------------

def test_warm_start_residual_and_count():
    inst = random_feasible_lp(24, 3, 2, seed=2)
    mlp, ln, _ = _network(inst, 1e-3)
    P = IpmParams.build(mlp.n_bar, mlp.d_bar)
    ws = warm_start_weights(mlp, ln, P.alpha, 0.1)
    s = ws.s_hat
    sig = leverage_exact(s[:, None] ** (-0.5 - P.alpha) * mlp.Abar).tau
    eta = mlp.d_bar / mlp.n_bar
    assert np.all(np.abs(s - sig - eta) <= (math.exp(0.1) - 1) * s + 1e-12)
    assert ws.iterations <= ws.max_iterations


# -- the step -------------------------------------------------------------------------------------

def _centered_state(inst, eps, exact=True):
    mlp, ln, net = _network(inst, eps)
    P = IpmParams.build(mlp.n_bar, mlp.d_bar)
    x, y, s = initial_point(mlp)
    tau = weight_function(ln, x, s, P.alpha)
    return mlp, ln, IpmState(x, s, y, tau, 1.0, P)


def test_step_with_zero_direction_is_identity():
    inst = random_feasible_lp(12, 3, 1, seed=3)
    mlp, ln, st = _centered_state(inst, 1e-3)
    st.tau = st.w / st.mu      # v = 1 exactly, so the potential gradient vanishes
    x0, s0 = st.x.copy(), st.s.copy()
    out = ipm_step(st, ln, exact_H=True)
    assert out.iterations == 0 and np.array_equal(out.x, x0) and np.array_equal(out.s, s0)


def test_step_kkt_identity_exact_H():
    inst = random_feasible_lp(12, 3, 1, seed=4)
    mlp, ln, st = _centered_state(inst, 1e-3)
    st.mu = 0.8
    ipm_step(st, ln, exact_H=True)
    assert st.iterations == 1
    assert st.kkt[-1] <= 1e-8
    assert np.all(st.x > 0) and np.all(st.s > 0)


# -- inverse maintenance --------------------------------------------------------------------------

def _maintainer(seed=5):
    inst = random_feasible_lp(30, 4, 2, seed=seed)
    mlp, ln, net = _network(inst, 1e-3)
    D = np.ones(mlp.n_bar)
    sigma = ln.leverage(D)
    return mlp, ln, InverseMaintainer(ln, D, sigma, 1000 * math.log(mlp.d_bar)), D, sigma


def test_maintainer_unchanged_weights():
    _, _, im, D, sigma = _maintainer()
    h, K = im.h.copy(), im.K.copy()
    K2 = inverse_maintain(im, D, sigma)
    assert np.array_equal(im.h, h) and np.array_equal(K2, K) and im.resamples == 0


def test_maintainer_single_change():
    _, ln, im, D, sigma = _maintainer()
    D2 = D.copy()
    D2[3] *= 2
    assert im.update(D2, sigma) == 1
    assert im.resamples == 1
    # gamma_im sigma >= 1 here, so the row is kept with weight d_i / 1
    assert im.h[3] == pytest.approx(D2[3] / min(1.0, im.gamma_im * sigma[3]))


def test_maintainer_drift_resample_bound():
    mlp, ln, im, D, sigma = _maintainer(6)
    rng = np.random.default_rng(0)
    steps = 50
    for _ in range(steps):
        D = D * np.exp(0.05 * rng.standard_normal(D.size))
        im.update(D, ln.leverage(D))
    C = get_preset().im_C
    assert im.resamples <= 3 * C * steps ** 2 * math.log(mlp.d_bar)
    lo, hi = im.bounds(D)
    assert lo > 0.5 and hi < 2


# -- end to end -----------------------------------------------------------------------------------

def test_toy_lp():
    eps = 1e-3
    inst = _inst([[1.0], [1.0]], [1.0], [1.0, 1.0], R=1.0, s=2)
    r = ipm_solve(inst, eps, Network(2))
    assert abs(r.objective - 1) <= eps * math.sqrt(2) * inst.R
    assert np.all(r.x >= 0)


def test_zero_rhs_lp():
    eps = 1e-3
    rng = np.random.default_rng(7)
    A = np.hstack([1 + rng.random((10, 1)), rng.standard_normal((10, 1))])
    inst = _inst(A, [0.0, 0.0], 1 + rng.random(10), R=1.0, s=2)
    r = ipm_solve(inst, eps, Network(2))
    assert r.objective <= eps * np.linalg.norm(inst.c) * inst.R
    assert np.linalg.norm(r.x) <= 1e-2


def test_random_lps_match_oracle():
    eps = 1e-3
    ok = 0
    for seed in range(10):
        inst = random_feasible_lp(30, 4, 3, seed=seed)
        A = inst.A.dense()
        r = ipm_solve(inst, eps, Network(3, seed=seed))
        opt, _ = lp_oracle(A, inst.b, inst.c)
        ok += (r.objective <= opt + eps * np.linalg.norm(inst.c) * inst.R
               and r.residual <= eps * (np.linalg.norm(A) * inst.R + np.linalg.norm(inst.b)))
        assert r.report["max_kkt"] <= 1e-8
    assert ok >= 9


def test_solution_is_shared():
    inst = random_feasible_lp(20, 3, 2, seed=8)
    net = Network(2)
    ipm_solve(inst, 1e-3, net)
    tags = [r.tag for r in net.ledger.per_step if r.tag.endswith("xhat")]
    assert tags.count("lp:xhat") == 2 + 2      # two uploads and a broadcast to both machines


def test_oracles_agree():
    for seed in range(5):
        inst = random_feasible_lp(8, 3, 1, seed=seed)
        A = inst.A.dense()
        assert lp_oracle(A, inst.b, inst.c)[0] == pytest.approx(
            bfs_oracle(A, inst.b, inst.c), rel=1e-7, abs=1e-9)


def test_lp_file_round_trip(tmp_path):
    inst = random_feasible_lp(15, 3, 3, seed=9)
    path = str(tmp_path / "lp.json")
    save_lp(path, inst, 9)
    back = load_lp(path)
    assert np.array_equal(back.A.dense(), inst.A.dense())
    assert np.allclose(back.b, inst.b) and np.allclose(back.c, inst.c) and back.R == inst.R
