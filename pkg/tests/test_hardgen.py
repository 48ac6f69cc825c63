import math
import warnings

import numpy as np
import pytest

from commopt.hardgen import (HardInstance, RegimeViolation, RegimeWarning, check_inner_product,
                             exact_feasible, gen_feasibility, gen_high_precision,
                             gen_inner_product, gen_regression_gap, load_hard_instance,
                             regression_alpha, regression_distinguisher, verify_feasibility)


# -- inner-product game ---------------------------------------------------------------------------

def test_inner_product_case_a_single_server():
    inst = gen_inner_product(1, 5, 0.1, "a", seed=0)
    assert abs(inst.vectors["W"][0] @ inst.vectors["v"]) <= 1e-12
    assert check_inner_product(inst)


@pytest.mark.parametrize("seed", range(5))
def test_inner_product_case_b_certificate(seed):
    inst = gen_inner_product(6, 8, 0.2, "b", seed=seed)
    ips = np.abs(inst.vectors["W"] @ inst.vectors["v"])
    k = inst.certificate["k"]
    assert ips[k] >= 0.2 / 8
    assert np.all(np.delete(ips, k) <= 1e-12)
    assert check_inner_product(inst)


def test_inner_product_rotation_invariance():
    inst = gen_inner_product(4, 6, 0.1, "b", seed=3)
    Q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((6, 6)))
    rot = HardInstance(inst.kind, inst.params, inst.A, None, inst.certificate,
                       {"v": Q @ inst.vectors["v"], "W": inst.vectors["W"] @ Q.T})
    assert check_inner_product(rot)


def test_inner_product_rejects_small_d():
    with pytest.raises(ValueError):
        gen_inner_product(2, 2, 0.1, "a")


# -- regression gap -------------------------------------------------------------------------------

def test_regression_alpha_is_power_of_two_below_threshold():
    for d, eps in [(4, 0.1), (6, 2.0 ** -16), (8, 1 / 64), (3, 0.5)]:
        a = regression_alpha(d, eps)
        assert a < eps / (8 * d)
        assert math.log2(a) == int(math.log2(a))
        assert 2 * a >= eps / (8 * d)


@pytest.mark.parametrize("seed", range(5))
def test_regression_gap_distinguisher(seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegimeWarning)
        pair = gen_regression_gap(4, 6, 24, 2.0 ** -16, seed)
    for inst in pair:
        x = np.linalg.lstsq(inst.A.dense(), inst.b, rcond=None)[0]
        assert regression_distinguisher(inst, x) == inst.certificate["case"]
    cb = pair[1].certificate
    assert cb["sigma_min"] >= cb["eps_prime"] / 4


def test_regression_gap_regime_warning():
    with pytest.warns(RegimeWarning):
        gen_regression_gap(4, 6, 24, 2.0 ** -16, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error", RegimeWarning)
        gen_regression_gap(2, 3, 40, 2.0 ** -8, 0)


# -- feasibility ----------------------------------------------------------------------------------

@pytest.mark.parametrize("case", ["a", "b"])
def test_feasibility_certificates(case):
    for seed in range(3):
        inst = gen_feasibility(4, 6, 24, 2.0 ** -10, case, seed)
        assert inst.certificate["feasible"] == (case == "a")
        assert verify_feasibility(inst)
        if case == "b":
            assert inst.certificate["lower_bound"] > 0


def test_feasibility_guard():
    L, d = 10, 4
    eta = 2.0 ** -L * math.ceil(math.sqrt(d))
    with pytest.raises(RegimeViolation):
        gen_feasibility(2, d, L, 4 * eta * d, "a")


def test_exact_feasible_small_systems():
    assert exact_feasible(np.array([[1.0], [-1.0]]), np.array([1.0, 0.0]), 4)
    assert not exact_feasible(np.array([[1.0], [-1.0]]), np.array([-0.5, 0.0]), 4)


# -- high precision rows --------------------------------------------------------------------------

def test_high_precision_spectrum():
    for seed in range(100):
        inst = gen_high_precision(5, 4, seed)
        A = inst.A.dense()
        ev = np.linalg.eigvalsh(A.T @ A)
        assert ev[0] >= 1 - 1e-12 and ev[-1] <= 4
        assert np.array_equal(A.T @ inst.b, np.eye(4)[0])


# -- files ----------------------------------------------------------------------------------------

@pytest.mark.parametrize("make", [
    lambda: gen_inner_product(3, 5, 0.1, "b", 2),
    lambda: gen_feasibility(3, 4, 20, 2.0 ** -8, "b", 2),
    lambda: gen_high_precision(3, 4, 2),
])
def test_save_load_round_trip(tmp_path, make):
    inst = make()
    path = str(tmp_path / "inst.json")
    inst.save(path)
    back = load_hard_instance(path)
    assert back.kind == inst.kind and back.params == inst.params
    assert np.array_equal(back.A.dense(), inst.A.dense())
    if inst.b is not None:
        assert np.array_equal(back.b, inst.b)
    if inst.kind == "inner_product":
        assert check_inner_product(back)
    if inst.kind == "feasibility":
        assert verify_feasibility(back)
