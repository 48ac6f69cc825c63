"""Acceptance checks: seeded instance suites run against dense oracles.

Each ``check_*`` function runs one suite and returns a :class:`CheckResult`
whose ``ok`` flag applies the suite's pass threshold.  The test suite and
``commopt verify`` both call these functions.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import linregress

from .commsim import Network, RowPartitionedMatrix, even_partition, quantize
from .config import get_preset
from .embed import (block_lev_sample, block_sample_size, estimate_block_leverages,
                    refinement_overestimates)
from .hardgen import (RegimeWarning, gen_feasibility, gen_regression_gap,
                      regression_distinguisher, verify_feasibility)
from .leverage import (block_leverage, leverage_exact, lewis_fixed_point, pencil_bounds,
                       predicted_lewis_iterations)
from .lowrank import best_rank_k_error, low_rank_projection
from .lp import ipm_solve, lp_oracle, random_feasible_lp
from .regression import (build_preconditioner, exact_least_squares, l1_solve, richardson_bit_bound,
                         richardson_solve, solve_l2_high_accuracy, solve_lp_constant)
from .sketching import lp_sample_many


@dataclass
class CheckResult:
    name: str
    ok: bool
    passed: int
    total: int
    required: int
    summary: str = ""
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.summary}"


# ---------------------------------------------------------------------------
# instance families
# ---------------------------------------------------------------------------

def gaussian_instance(n: int, d: int, s: int, L: int, seed: int, with_b: bool = True):
    """Gaussian A (and b) on the ``2^-L`` grid, rows split evenly over s machines."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    rpm = RowPartitionedMatrix.from_dense(A, even_partition(n, s), L)
    if not with_b:
        return rpm
    b = quantize(rng.standard_normal(n), L)
    return rpm, b


def noisy_instance(n: int, d: int, s: int, L: int, seed: int):
    """``b = A x0 + noise`` with Gaussian A, x0 and noise."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    b = quantize(A @ rng.standard_normal(d) + rng.standard_normal(n), L)
    return RowPartitionedMatrix.from_dense(A, even_partition(n, s), L), b


def planted_spectrum_instance(n: int, spectrum, s: int, L: int, seed: int, scale: float = 4.0):
    """``U diag(spectrum) V^T`` with random orthonormal U (n x d) and V (d x d)."""
    spectrum = np.asarray(spectrum, dtype=float)
    d = spectrum.size
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((n, d)))
    V, _ = np.linalg.qr(rng.standard_normal((d, d)))
    A = scale * (U * spectrum) @ V.T
    return RowPartitionedMatrix.from_dense(A, even_partition(n, s), L)


# padding of the spectrum 10, 9, ..., 1 to twelve columns
LOWRANK_SPECTRUM = (10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 1, 1)


def _frac_line(passed, total, required) -> str:
    return f"{passed}/{total} (need >= {required})"


# ---------------------------------------------------------------------------
# 1-4: leverage overestimates, preconditioner, Richardson
# ---------------------------------------------------------------------------

def check_overestimates(seeds: int = 100, required: int = 95, time_limit: float = 60.0,
                        preset="desk") -> CheckResult:
    """200 x 10 at L = 8: ``tau_hat >= tau`` and ``||tau_hat||_1 <= 9d``."""
    t0 = time.perf_counter()
    passed = 0
    for seed in range(seeds):
        A = gaussian_instance(200, 10, 4, 8, seed, with_b=False)
        res = refinement_overestimates(A, Network(4, seed=seed), kappa=1e3, preset=preset)
        tau = leverage_exact(A.dense()).tau
        passed += bool(np.all(res.tau_hat >= tau) and res.tau_hat.sum() <= 9 * 10)
    el = time.perf_counter() - t0
    need = math.ceil(required * seeds / 100)
    ok = passed >= need and el <= time_limit * seeds / 100
    return CheckResult("1 leverage overestimates", ok, passed, seeds, need,
                       f"{_frac_line(passed, seeds, need)}, {el:.1f}s", {"seconds": el})


def check_preconditioner(seeds: int = 100, required: int = 90, preset="desk") -> CheckResult:
    """300 x 8 at L = 8: ``(0.9/1.1) A^T A <= M <= (1.1/0.9) A^T A``."""
    passed = 0
    for seed in range(seeds):
        A = gaussian_instance(300, 8, 4, 8, seed, with_b=False)
        pre = build_preconditioner(A, Network(4, seed=seed), preset=preset)
        X = A.dense()
        lo, hi = pencil_bounds(pre.M_sampled, X.T @ X)
        passed += bool(lo >= 0.9 / 1.1 and hi <= 1.1 / 0.9)
    need = math.ceil(required * seeds / 100)
    return CheckResult("2 preconditioner sandwich", passed >= need, passed, seeds, need,
                       _frac_line(passed, seeds, need))


def _additive_ok(X, b, x, xs_exact, eps) -> bool:
    """``||A x - b||^2 <= eps^2 ||A x*||^2 + ||A x* - b||^2`` against the exact optimum."""
    xs = np.array([float(v) for v in xs_exact])
    fit = X @ xs
    lhs = float(np.sum((X @ x - b) ** 2))
    rhs = eps ** 2 * float(fit @ fit) + float(np.sum((fit - b) ** 2))
    return lhs <= rhs * (1 + 1e-12)


def check_richardson(seeds: int = 100, required: int = 95, lam: float = 1.23, eps: float = 1e-6,
                     preset="desk") -> CheckResult:
    """M-norm contraction on every iteration (both modes) and the final additive bound."""
    rho = 1 - 1 / (2 * lam) + 1e-6
    bound_ok = 0
    worst = 0.0
    contraction_ok = True
    for seed in range(seeds):
        A, b = gaussian_instance(200, 10, 4, 8, seed)
        X = A.dense()
        xe = exact_least_squares(A, b)
        net = Network(4, seed=seed)
        pre = build_preconditioner(A, net, preset=preset)
        good = True
        for truncate in (True, False):
            r = richardson_solve(A, b, net, pre.M, lam, eps, truncate, x_star=xe, guard=False)
            e = r.history["err_M"]
            ratios = [e[i + 1] / e[i] for i in range(len(e) - 1) if e[i] > 0]
            if ratios:
                worst = max(worst, max(ratios))
                contraction_ok &= max(ratios) <= rho
            good &= _additive_ok(X, b, r.x, xe, eps)
        bound_ok += good
    need = math.ceil(required * seeds / 100)
    ok = contraction_ok and bound_ok >= need
    return CheckResult("3 Richardson contraction", ok, bound_ok, seeds, need,
                       f"worst ratio {worst:.4f} (limit {rho:.6f}), additive bound "
                       f"{_frac_line(bound_ok, seeds, need)}", {"worst_ratio": worst})


def check_richardson_bits(seeds: int = 5, eps_grid=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8),
                          r2_min: float = 0.98, kappa: float = 1e3, preset="desk") -> CheckResult:
    """Per-iteration, per-machine bits under the wire bound; total bits affine in log(1/eps)."""
    n, d, s, L = 200, 10, 4, 8
    limit = richardson_bit_bound(n, d, L, kappa)
    worst = 0.0
    totals = []
    for eps in eps_grid:
        tot = []
        for seed in range(seeds):
            A, b = gaussian_instance(n, d, s, L, seed)
            net = Network(s, seed=seed)
            r = solve_l2_high_accuracy(A, b, net, eps, kappa, preset)
            if r.history.get("bits_machine"):
                worst = max(worst, max(r.history["bits_machine"]))
            tot.append(net.ledger.total_bits)
        totals.append(float(np.mean(tot)))
    fit = linregress(np.log(1 / np.asarray(eps_grid)), totals)
    r2 = fit.rvalue ** 2
    ok = worst <= limit and r2 >= r2_min
    return CheckResult("4 Richardson wire bits", ok, int(worst <= limit) + int(r2 >= r2_min), 2, 2,
                       f"max per-machine iteration bits {worst:.0f} <= {limit:.0f}; "
                       f"log(1/eps) fit R^2 = {r2:.4f} (need >= {r2_min})",
                       {"totals": totals, "r2": r2, "slope": fit.slope})


# ---------------------------------------------------------------------------
# 5: constant-factor regression
# ---------------------------------------------------------------------------

def check_constant_regression(seeds: int = 100, required: int = 90, s_grid=(2, 4, 8, 16, 32),
                              sweep_seeds: int = 5, r2_min: float = 0.95,
                              preset="desk") -> CheckResult:
    """l2 and l1 ratio <= 1.5 on 128 x 6; total bits affine in s."""
    n, d, L, eps = 128, 6, 12, 0.5
    counts = {}
    for p in (2, 1):
        passed = 0
        for seed in range(seeds):
            A, b = noisy_instance(n, d, 4, L, seed)
            X = A.dense()
            r = solve_lp_constant(A, b, Network(4, seed=seed), p, eps, preset=preset)
            xo = np.linalg.lstsq(X, b, rcond=None)[0] if p == 2 else l1_solve(X, b)
            opt = float(np.sum(np.abs(X @ xo - b) ** p) ** (1 / p))
            passed += r.residual <= (1 + eps) * opt
        counts[p] = passed
    bits = []
    for s in s_grid:
        tot = []
        for seed in range(sweep_seeds):
            A, b = noisy_instance(n, d, s, L, seed)
            net = Network(s, seed=seed)
            solve_lp_constant(A, b, net, 2, eps, preset=preset)
            tot.append(net.ledger.total_bits)
        bits.append(float(np.mean(tot)))
    r2 = linregress(s_grid, bits).rvalue ** 2
    need = math.ceil(required * seeds / 100)
    ok = counts[2] >= need and counts[1] >= need and r2 >= r2_min
    return CheckResult("5 constant-factor regression", ok, min(counts.values()), seeds, need,
                       f"l2 {_frac_line(counts[2], seeds, need)}, l1 "
                       f"{_frac_line(counts[1], seeds, need)}, bits-vs-s R^2 = {r2:.4f} "
                       f"(need >= {r2_min})", {"bits": bits, "r2": r2})


# ---------------------------------------------------------------------------
# 6-7: block leverage, low rank
# ---------------------------------------------------------------------------

def check_block_leverage(seeds: int = 100, required: int = 95, sample_required: int = 85,
                         preset="desk") -> CheckResult:
    """Block overestimates, their total, the round count and the block-sampling sandwich."""
    n, d, s, L = 256, 8, 8, 12
    lg = math.ceil(math.log(d))
    total_cap = (lg + 1) * d + 4 * d
    est_ok = samp_ok = 0
    rounds_ok = True
    for seed in range(seeds):
        A = gaussian_instance(n, d, s, L, seed, with_b=False)
        net = Network(s, seed=seed)
        r = estimate_block_leverages(A, net, preset)
        true = block_leverage(A.dense(), A.partition)
        est_ok += bool(np.all(r.L >= true / 4) and r.L.sum() <= total_cap)
        rounds_ok &= r.rounds <= lg + 1
        N = block_sample_size(d, 0.25, 0.5)
        sa = block_lev_sample(A, net, r.L / r.L.sum(), N, 0.5)
        lo, hi = sa.bounds(A.dense())
        samp_ok += bool(lo >= 0.5 and hi <= 1.5)
    need = math.ceil(required * seeds / 100)
    need_s = math.ceil(sample_required * seeds / 100)
    ok = est_ok >= need and samp_ok >= need_s and rounds_ok
    return CheckResult("6 block leverage", ok, est_ok, seeds, need,
                       f"estimates {_frac_line(est_ok, seeds, need)}, rounds within "
                       f"{lg + 1}: {rounds_ok}, sampling {_frac_line(samp_ok, seeds, need_s)}")


def check_lowrank(seeds: int = 100, required: int = 85, k: int = 3, eps: float = 0.5,
                  preset="desk") -> CheckResult:
    """Planted-spectrum 128 x 12: ratio <= 1 + eps; Pi symmetric and idempotent."""
    passed = 0
    proj_err = 0.0
    for seed in range(seeds):
        A = planted_spectrum_instance(128, LOWRANK_SPECTRUM, 4, 12, seed)
        r = low_rank_projection(A, Network(4, seed=seed), k, eps, preset=preset)
        X = A.dense()
        passed += r.error(X) <= (1 + eps) * best_rank_k_error(X, k)
        P = r.Pi
        proj_err = max(proj_err, float(np.max(np.abs(P @ P - P))), float(np.max(np.abs(P - P.T))))
    need = math.ceil(required * seeds / 100)
    ok = passed >= need and proj_err <= 1e-9
    return CheckResult("7 low-rank projection", ok, passed, seeds, need,
                       f"{_frac_line(passed, seeds, need)}, projection error {proj_err:.1e}")


# ---------------------------------------------------------------------------
# 8-9: l_p sampler, Lewis weights
# ---------------------------------------------------------------------------

def lp_test_vectors(count: int = 20, max_len: int = 64, seed: int = 0) -> list:
    """Fixed heavy-tailed test vectors with lengths in [2, max_len]."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n = int(rng.integers(2, max_len + 1))
        out.append(rng.standard_normal(n) * rng.exponential(1.0, n))
    return out


def check_lp_sampler(draws: int = 10 ** 4, tv_max: float = 0.05) -> CheckResult:
    """Empirical vs exact l_p distributions for p in {1, 1.5, 2}."""
    vecs = lp_test_vectors()
    worst = 0.0
    passed = 0
    for p in (1.0, 1.5, 2.0):
        for v, x in enumerate(vecs):
            idx, _ = lp_sample_many(x, p, draws, seed=v)
            emp = np.bincount(idx, minlength=x.size) / draws
            ex = np.abs(x) ** p / np.sum(np.abs(x) ** p)
            tv = 0.5 * float(np.abs(emp - ex).sum())
            worst = max(worst, tv)
            passed += tv <= tv_max
    total = 3 * len(vecs)
    return CheckResult("8 l_p sampler", passed == total, passed, total, total,
                       f"{passed}/{total} within TV {tv_max}, worst {worst:.4f}")


def check_lewis(seeds: int = 100, tol: float = 1e-6) -> CheckResult:
    """Fixed point within twice the predicted count; p = 2 equals leverage scores."""
    passed = 0
    total = 0
    lev_err = 0.0
    for p in (1.0, 4.0 / 3.0, 2.0):
        cap = 2 * predicted_lewis_iterations(p, 0.0, tol)
        for seed in range(seeds):
            A = np.random.default_rng(seed).standard_normal((12, 3))
            total += 1
            try:
                w = lewis_fixed_point(A, p, 0.0, tol, cap)
            except RuntimeError:
                continue
            passed += w.residual <= tol
            if p == 2.0:
                lev_err = max(lev_err, float(np.max(np.abs(w.w - leverage_exact(A).tau))))
    ok = passed == total and lev_err <= tol
    return CheckResult("9 Lewis fixed point", ok, passed, total, total,
                       f"{passed}/{total} converged within 2x prediction, p=2 vs leverage "
                       f"{lev_err:.1e}")


# ---------------------------------------------------------------------------
# 10: LP
# ---------------------------------------------------------------------------

def lp_suite_instance(seed: int):
    """Random feasible LP with n in [20, 60] and d in [2, 10]."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 61))
    d = int(rng.integers(2, 11))
    return random_feasible_lp(n, d, 4, seed=seed)


def check_lp(seeds: int = 100, required: int = 90, eps: float = 1e-3, preset="desk") -> CheckResult:
    """Objective and residual guarantees, KKT identity and the resample bound."""
    pr = get_preset(preset)
    passed = 0
    kkt = 0.0
    resample_ok = True
    for seed in range(seeds):
        inst = lp_suite_instance(seed)
        A = inst.A.dense()
        r = ipm_solve(inst, eps, Network(4, seed=seed), preset)
        opt, _ = lp_oracle(A, inst.b, inst.c)
        obj_ok = r.objective <= opt + eps * np.linalg.norm(inst.c) * inst.R
        res_ok = r.residual <= eps * (np.linalg.norm(A) * inst.R + np.linalg.norm(inst.b))
        passed += bool(obj_ok and res_ok)
        kkt = max(kkt, r.report["max_kkt"])
        d_bar = A.shape[1] + 1
        resample_ok &= r.resamples <= 3 * pr.im_C * r.iterations ** 2 * math.log(d_bar)
    need = math.ceil(required * seeds / 100)
    ok = passed >= need and kkt <= 1e-8 and resample_ok
    return CheckResult("10 LP end to end", ok, passed, seeds, need,
                       f"{_frac_line(passed, seeds, need)}, max KKT {kkt:.1e}, "
                       f"resample bound held: {resample_ok}")


# ---------------------------------------------------------------------------
# 11-12: hard instances, determinism
# ---------------------------------------------------------------------------

def check_hard_instances(seeds: int = 100) -> CheckResult:
    """Regression-gap distinguisher on oracle solutions; exact feasibility certificates."""
    gap_ok = 0
    feas_ok = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegimeWarning)
        for seed in range(seeds):
            pair = gen_regression_gap(4, 6, 24, 2.0 ** -16, seed)
            good = True
            for inst in pair:
                x = np.linalg.lstsq(inst.A.dense(), inst.b, rcond=None)[0]
                good &= regression_distinguisher(inst, x) == inst.certificate["case"]
            good &= pair[1].certificate["sigma_min"] >= pair[1].certificate["case_b_sigma_floor"]
            gap_ok += good
            feas_ok += all(verify_feasibility(gen_feasibility(4, 6, 24, 2.0 ** -16, case, seed))
                           for case in "ab")
    ok = gap_ok == seeds and feas_ok == seeds
    return CheckResult("11 hard instances", ok, min(gap_ok, feas_ok), seeds, seeds,
                       f"distinguisher {gap_ok}/{seeds}, feasibility certificates "
                       f"{feas_ok}/{seeds}")


def _suite_runs(mode: str) -> dict[str, Callable[[int], tuple]]:
    """Small runs of every protocol; each returns (ledger fingerprint, output bytes, down bits)."""

    def wrap(fn):
        def run(seed):
            net = Network(4, mode=mode, seed=seed)
            out = fn(net, seed)
            return net.ledger.fingerprint(), np.asarray(out, dtype=float).tobytes(), \
                net.ledger.total_down
        return run

    def over(net, seed):
        return refinement_overestimates(gaussian_instance(64, 4, 4, 8, seed, False), net).tau_hat

    def l2(net, seed):
        A, b = gaussian_instance(64, 4, 4, 8, seed)
        return solve_l2_high_accuracy(A, b, net, 1e-4).x

    def l1(net, seed):
        A, b = noisy_instance(64, 4, 4, 10, seed)
        return solve_lp_constant(A, b, net, 1, 0.5).x

    def blocks(net, seed):
        A = gaussian_instance(64, 4, 4, 10, seed, False)
        r = estimate_block_leverages(A, net)
        return np.concatenate([r.L, block_lev_sample(A, net, r.L / r.L.sum(), 16).rows.ravel()])

    def lowrank(net, seed):
        A = planted_spectrum_instance(64, (5, 4, 3, 2, 1, 1), 4, 10, seed)
        return low_rank_projection(A, net, 2).V

    def lp(net, seed):
        return ipm_solve(random_feasible_lp(16, 3, 4, seed=seed), 1e-3, net).x

    return {k: wrap(f) for k, f in
            {"overestimates": over, "l2_high_accuracy": l2, "l1_constant": l1,
             "block_leverage": blocks, "lowrank": lowrank, "lp": lp}.items()}


def check_determinism(seeds: int = 3) -> CheckResult:
    """Two runs per seed give identical ledgers and outputs; blackboard down-bits are zero."""
    same = 0
    total = 0
    bb_zero = True
    for name, run in _suite_runs("coordinator").items():
        for seed in range(seeds):
            a, b = run(seed), run(seed)
            total += 1
            same += a[0] == b[0] and a[1] == b[1]
    for name, run in _suite_runs("blackboard").items():
        for seed in range(seeds):
            bb_zero &= run(seed)[2] == 0
    ok = same == total and bb_zero
    return CheckResult("12 simulator hygiene", ok, same, total, total,
                       f"{same}/{total} identical reruns, blackboard down-bits zero: {bb_zero}")


def check_ledger_additivity(seeds: int = 100) -> CheckResult:
    """Per-step records sum to the per-machine totals on every run."""
    passed = 0
    for seed in range(seeds):
        A, b = gaussian_instance(64, 4, 4, 8, seed)
        net = Network(4, seed=seed)
        solve_l2_high_accuracy(A, b, net, 1e-3)
        passed += net.ledger.check_additivity()
    return CheckResult("ledger additivity", passed == seeds, passed, seeds, seeds,
                       f"{passed}/{seeds} ledgers additive")


ALL_CHECKS = {
    "overestimates": check_overestimates,
    "preconditioner": check_preconditioner,
    "richardson": check_richardson,
    "richardson_bits": check_richardson_bits,
    "constant_regression": check_constant_regression,
    "block_leverage": check_block_leverage,
    "lowrank": check_lowrank,
    "lp_sampler": check_lp_sampler,
    "lewis": check_lewis,
    "lp": check_lp,
    "hard_instances": check_hard_instances,
    "determinism": check_determinism,
}

# extra invariant suites reachable from ``commopt verify``; not acceptance criteria
EXTRA_CHECKS = {"ledger_additivity": check_ledger_additivity}
