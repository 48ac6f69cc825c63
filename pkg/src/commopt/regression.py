"""Distributed regression over the metered network.

Constant-factor l_p regression (1 <= p <= 2) solves the problem restricted to a
sampled subspace embedding of ``[A | b]``.  High-accuracy l_2 regression builds
a spectral preconditioner from leverage score overestimates and then runs a
preconditioned Richardson iteration whose updates carry only the bits that
changed.

Richardson keeps the iterate in exact dyadic arithmetic (``Fraction`` with
power-of-two denominators) on the coordinator and on every machine, so the
truncation rule and the copies held by machines are bit-exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .commsim import Message, Network, RowPartitionedMatrix, quantize, uvarint_bits, varint_bits
from .config import get_preset
from .embed import lewis_embedding, refinement_overestimates
from .leverage import psd_pinv, sample_probabilities

# c_0 in the per-iteration wire law d * (c_0 + 2L + log2(kappa) + log2(n d^2))
RICHARDSON_BIT_CONSTANT = 48


def richardson_bit_bound(n: int, d: int, L: int, kappa: float) -> float:
    """Per-machine bits of one Richardson iteration: ``d (c0 + 2L + log2 kappa + log2(n d^2))``."""
    return d * (RICHARDSON_BIT_CONSTANT + 2 * L + math.log2(kappa) + math.log2(n * d * d))


class DivergenceGuard(RuntimeError):
    pass


@dataclass
class RegressionResult:
    x: np.ndarray
    residual: float
    p: float
    mode: str
    eps: float
    bits: int
    rounds: int
    iterations: int = 0
    history: dict = field(default_factory=dict)

    def recompute_residual(self, A, b) -> float:
        r = np.asarray(A, dtype=float) @ self.x - np.asarray(b, dtype=float)
        return float(np.sum(np.abs(r) ** self.p) ** (1.0 / self.p))


@dataclass
class Preconditioner:
    """Spectral preconditioner built from sampled rows.

    ``M_sampled`` is ``(1/1.1) * sum of sampled rescaled outer products`` and
    lies between ``(0.9/1.1) A^T A`` and ``A^T A`` w.h.p.  ``M`` is the same
    matrix scaled by ``1.1/0.9`` so that ``A^T A <= M <= lam A^T A`` with
    ``lam = 1.1/0.9``.
    """

    M_sampled: np.ndarray
    lam: float
    rows: int

    @property
    def M(self) -> np.ndarray:
        return self.M_sampled * (1.1 / 0.9)


def _split_b(A: RowPartitionedMatrix, b) -> list[np.ndarray]:
    return [quantize(v, A.L) for v in A.split_vector(np.asarray(b, dtype=float).ravel())]


# ---------------------------------------------------------------------------
# constant-factor regression
# ---------------------------------------------------------------------------

def l1_solve(X, y) -> np.ndarray:
    """``argmin_x ||X x - y||_1`` as a linear program (HiGHS)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m, d = X.shape
    c = np.concatenate([np.zeros(d), np.ones(m)])
    I = np.eye(m)
    A_ub = np.block([[X, -I], [-X, -I]])
    b_ub = np.concatenate([y, -y])
    bounds = [(None, None)] * d + [(0, None)] * m
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"l1 solve failed: {res.message}")
    return res.x[:d]


def lp_regression_solve(X, y, p: float) -> np.ndarray:
    """Dense ``argmin_x ||X x - y||_p``: exact for p in {1, 2}, BFGS for 1 < p < 2."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if p == 2:
        return np.linalg.lstsq(X, y, rcond=None)[0]
    if p == 1:
        return l1_solve(X, y)
    from scipy.optimize import minimize

    x0 = np.linalg.lstsq(X, y, rcond=None)[0]
    f = lambda x: np.sum(np.abs(X @ x - y) ** p)
    g = lambda x: X.T @ (p * np.abs(X @ x - y) ** (p - 1) * np.sign(X @ x - y))
    return minimize(f, x0, jac=g, method="BFGS", options={"gtol": 1e-10}).x


def solve_lp_constant(A: RowPartitionedMatrix, b, net: Network, p: float, eps: float,
                      delta: float = 0.1, preset=None, tag: str = "lpreg") -> RegressionResult:
    """``(1+eps)``-approximate l_p regression from an embedding of ``[A | b]``."""
    if not 1 <= p <= 2:
        raise ValueError("constant-factor regression is provided for 1 <= p <= 2")
    bb = _split_b(A, b)
    Ab = RowPartitionedMatrix([np.hstack([B, v[:, None]]) for B, v in zip(A.blocks, bb)], A.L)
    emb = lewis_embedding(Ab, net, p, eps, delta, preset, tag=tag)
    x = lp_regression_solve(emb.rows[:, :-1], emb.rows[:, -1], p)
    net.broadcast(Message.float64(f"{tag}:x", x))
    Afull = A.dense()
    bfull = np.concatenate(bb)
    res = float(np.sum(np.abs(Afull @ x - bfull) ** p) ** (1.0 / p))
    return RegressionResult(x, res, p, "constant_factor", eps, net.ledger.total_bits,
                            net.ledger.rounds, history={"rows": int(emb.rows.shape[0])})


# ---------------------------------------------------------------------------
# preconditioner
# ---------------------------------------------------------------------------

def build_preconditioner(A: RowPartitionedMatrix, net: Network, c: Optional[float] = None,
                         kappa: float = 1e3, preset=None, tau_hat=None,
                         tag: str = "precond") -> Preconditioner:
    """Sample ``Sample(tau_hat, 100, c)`` rows on every machine and sum their outer products."""
    preset = get_preset(preset)
    c = preset.sample_c if c is None else c
    if tau_hat is None:
        tau_hat = refinement_overestimates(A, net, c, kappa, preset, tag=tag + ":refine")
    expo = np.asarray(tau_hat.exponents)
    offs = A.offsets
    d = A.d
    M = np.zeros((d, d))
    rows = 0
    for i in range(A.s):
        u = 1.01 * 2.0 ** expo[offs[i]:offs[i + 1]]
        pr = sample_probabilities(u, 100.0, c, d)
        keep = np.flatnonzero(net.rng(f"{tag}:S", i).random(u.size) < pr)
        if keep.size == 0:
            continue
        R = np.asarray(net.upload(i, Message.matrix(f"{tag}:rows", A.blocks[i][keep], A.L, A.int_bits)))
        net.upload(i, Message.varints(f"{tag}:exp", expo[offs[i] + keep]))
        # the coordinator recomputes the probabilities from the exponents
        w = 1.0 / sample_probabilities(1.01 * 2.0 ** expo[offs[i] + keep], 100.0, c, d)
        M += (R * w[:, None]).T @ R
        rows += keep.size
    net.round_barrier()
    return Preconditioner(M / 1.1, 1.1 / 0.9, rows)


# ---------------------------------------------------------------------------
# exact dyadic helpers for Richardson
# ---------------------------------------------------------------------------

def _int_payload_bits(k: int) -> int:
    """Length varint, sign bit and magnitude bits of one integer."""
    nb = abs(int(k)).bit_length()
    return uvarint_bits(nb) + (1 + nb if nb else 0)


def _dyadic_bits(v: Fraction) -> int:
    """Exact dyadic value ``k / 2^e``: exponent varint plus integer payload."""
    e = v.denominator.bit_length() - 1
    return varint_bits(e) + _int_payload_bits(v.numerator)


def _round_to_grid(v: Fraction, e: int) -> int:
    """Nearest integer to ``v / 2^e`` (ties away from zero)."""
    q = v / (Fraction(2) ** e)
    k = (abs(q.numerator) * 2 + q.denominator) // (2 * q.denominator)
    return k if q >= 0 else -k


def _hi(v: Fraction, t: int) -> Fraction:
    """Sign-magnitude truncation of v to place values ``>= 2^t``."""
    g = Fraction(2) ** t
    k = abs(v) // g
    return k * g if v >= 0 else -k * g


def _matvec_exact(G: list[list[int]], x: list[Fraction]) -> list[Fraction]:
    den = 1
    for v in x:
        den = max(den, v.denominator)
    xi = [int(v * den) for v in x]
    return [Fraction(sum(g * xv for g, xv in zip(row, xi)), den) for row in G]


def exact_least_squares(A: RowPartitionedMatrix, b) -> list[Fraction]:
    """Exact solution of ``A^T A x = A^T b`` over the rationals (A of full column rank).

    Serves as a reference whose error does not hide the iterates' own error.
    """
    X = A.numerators()
    y = [int(v) for v in np.concatenate(_split_b(A, b)) * 2.0 ** A.L]
    d = A.d
    G = [[Fraction(sum(int(X[r, a]) * int(X[r, c]) for r in range(X.shape[0])))
          for c in range(d)] for a in range(d)]
    rhs = [Fraction(sum(int(X[r, a]) * y[r] for r in range(X.shape[0]))) for a in range(d)]
    for col in range(d):
        piv = next((r for r in range(col, d) if G[r][col] != 0), None)
        if piv is None:
            raise np.linalg.LinAlgError("A^T A is singular")
        G[col], G[piv] = G[piv], G[col]
        rhs[col], rhs[piv] = rhs[piv], rhs[col]
        for r in range(d):
            if r != col and G[r][col] != 0:
                f = G[r][col] / G[col][col]
                G[r] = [a - f * c for a, c in zip(G[r], G[col])]
                rhs[r] -= f * rhs[col]
    return [rhs[i] / G[i][i] for i in range(d)]


def richardson_iterations(lam: float, eps: float) -> int:
    """Smallest T with ``(1 - 1/(2 lam))^T <= eps``."""
    rho = 1 - 1 / (2 * lam)
    return max(1, math.ceil(math.log(eps) / math.log(rho) - 1e-12))


def richardson_solve(A: RowPartitionedMatrix, b, net: Network, M, lam: float, eps: float,
                     truncate: bool = True, x_star=None, guard: bool = True,
                     tag: str = "rich") -> RegressionResult:
    """Preconditioned Richardson iteration ``x <- x - M^+ (A^T A x - A^T b)``.

    Parameters
    ----------
    M : (d, d) array
        Preconditioner with ``A^T A <= M <= lam A^T A``.
    truncate : bool
        Send only the middle bits of every update (and round uplink
        gradients to a matching grid).  Without truncation every value is
        transmitted exactly.
    x_star : array, optional
        Reference solution (floats or exact ``Fraction`` values, see
        :func:`exact_least_squares`); when given, the M-norm error of every
        iterate is recorded in ``history["err_M"]``.
    """
    M = np.asarray(M, dtype=float)
    Mp = psd_pinv(M)
    s, d, L, n = A.s, A.d, A.L, A.n
    bb = _split_b(A, b)
    eps_hat = 1.0 / (2 * lam)
    rho = 1 - eps_hat
    ev = np.linalg.eigvalsh(M)
    sig_min = math.sqrt(max(ev[ev > 1e-12 * max(ev.max(), 1e-300)].min(), 1e-300)) \
        if np.any(ev > 0) else 1.0
    T = richardson_iterations(lam, eps)
    # machine-local exact Gram matrices at integer scale 2^{2L}
    Aint = A.numerators()
    offs = A.offsets
    G = []
    for i in range(s):
        Ai = Aint[offs[i]:offs[i + 1]]
        G.append([[sum(int(Ai[r, a]) * int(Ai[r, c]) for r in range(Ai.shape[0]))
                   for c in range(d)] for a in range(d)])
    scale = Fraction(1, 2 ** (2 * L))
    # A^T b is sent once, exactly
    Atb = [Fraction(0)] * d
    for i in range(s):
        v = A.blocks[i].T @ bb[i]
        got = net.upload(i, Message.fitted(f"{tag}:Atb", v, 2 * L))
        Atb = [a + Fraction(float(g)) for a, g in zip(Atb, np.ravel(got))]
    net.round_barrier()
    x = [Fraction(0)] * d
    h = [[Fraction(0)] * d for _ in range(s)]     # coordinator's copy of A_i^T A_i x
    hist = {"step_M": [], "err_M": [], "bits_down": [], "bits_up": [], "bits_machine": [], "t": [],
            "payload_bound": []}
    Xs = None
    if x_star is not None:
        Xs = [v if isinstance(v, Fraction) else Fraction(float(v)) for v in x_star]

    def err_M(xf):
        e = np.array([float(a - c) for a, c in zip(xf, Xs)])
        return float(math.sqrt(max(e @ M @ e, 0.0)))

    if Xs is not None:
        hist["err_M"].append(err_M(x))
    if all(v == 0 for v in Atb):
        T = 0
    prev_step = None
    ratio_obs = 1.0
    for k in range(T):
        mk = net.ledger.mark()
        grad = [sum((h[i][j] for i in range(s)), Fraction(0)) - Atb[j] for j in range(d)]
        gf = np.array([float(v) for v in grad])
        u = -Mp @ gf
        step = float(math.sqrt(max(u @ M @ u, 0.0)))
        if prev_step is not None and guard and prev_step > 0 and step > (rho + 1e-6) * prev_step:
            raise DivergenceGuard(f"step M-norm grew by {step / prev_step:.4f} > {rho:.4f}")
        xt = [a + Fraction(float(b_)) for a, b_ in zip(x, u)]
        if truncate and step > 0:
            theta = eps_hat * step / (lam * n * d * d * 2.0 ** (2 * L + 1))
            t = math.floor(math.log2(theta))
            xn = [_hi(a, t) + (b_ - _hi(b_, t)) for a, b_ in zip(xt, x)]
            delta = [a - b_ for a, b_ in zip(xn, x)]
            ks = [int(dv / Fraction(2) ** t) for dv in delta]
            dbits = varint_bits(t) + sum(_int_payload_bits(kv) for kv in ks)
            bound = math.log2((1 + eps_hat) / (eps_hat * sig_min) * lam * n * d * d
                              * 2.0 ** (2 * L + 3))
            worst = max(abs(kv).bit_length() for kv in ks)
            hist["payload_bound"].append((worst, bound))
            if worst > bound + 2:
                raise AssertionError(f"update payload of {worst} bits exceeds {bound:.1f}")
        else:
            t = None
            xn = xt
            delta = [a - b_ for a, b_ in zip(xn, x)]
            dbits = sum(_dyadic_bits(dv) for dv in delta)
        net.broadcast(Message.raw(f"{tag}:delta", delta, dbits))
        x = xn
        # machines: exact A_i^T A_i x, rounded relative to h_i with error feedback
        if truncate and step > 0:
            ref = step * min(1.0, ratio_obs)
            e_up = math.floor(math.log2(max(eps_hat * sig_min * ref / (8 * s * math.sqrt(d)),
                                            1e-300)))
        for i in range(s):
            exact = [v * scale for v in _matvec_exact(G[i], x)]
            diff = [a - b_ for a, b_ in zip(exact, h[i])]
            if truncate and step > 0:
                ks = [_round_to_grid(v, e_up) for v in diff]
                sent = [kv * Fraction(2) ** e_up for kv in ks]
                ubits = varint_bits(e_up) + sum(_int_payload_bits(kv) for kv in ks)
            else:
                sent = diff
                ubits = sum(_dyadic_bits(v) for v in diff)
            net.upload(i, Message.raw(f"{tag}:grad", sent, ubits))
            h[i] = [a + b_ for a, b_ in zip(h[i], sent)]
        net.round_barrier()
        if prev_step:
            ratio_obs = step / prev_step
        prev_step = step
        hist["step_M"].append(step)
        hist["t"].append(t)
        hist["bits_down"].append(max(net.ledger.bits_since(mk, "down", i) for i in range(s)))
        hist["bits_up"].append(max(net.ledger.bits_since(mk, "up", i) for i in range(s)))
        hist["bits_machine"].append(max(net.ledger.bits_since(mk, None, i) for i in range(s)))
        if Xs is not None:
            hist["err_M"].append(err_M(x))
    xf = np.array([float(v) for v in x])
    Af = A.dense()
    bf = np.concatenate(bb)
    res = float(np.linalg.norm(Af @ xf - bf))
    hist["x_exact"] = x
    hist["sigma_min"] = sig_min
    return RegressionResult(xf, res, 2.0, "high_accuracy", eps, net.ledger.total_bits,
                            net.ledger.rounds, T, hist)


def solve_l2_high_accuracy(A: RowPartitionedMatrix, b, net: Network, eps: float,
                           kappa: float = 1e3, preset=None, lam: float = 1.23,
                           truncate: bool = True, x_star=None,
                           tag: str = "l2") -> RegressionResult:
    """Refinement overestimates, then the preconditioner, then Richardson."""
    preset = get_preset(preset)
    pre = build_preconditioner(A, net, None, kappa, preset, tag=tag + ":pre")
    if lam < pre.lam:
        raise ValueError(f"lam must be at least the certified {pre.lam:.4f}")
    out = richardson_solve(A, b, net, pre.M, lam, eps, truncate, x_star, tag=tag + ":rich")
    out.history["preconditioner_rows"] = pre.rows
    return out
