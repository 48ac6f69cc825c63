"""High-accuracy linear programming in the coordinator model.

Solves ``min c^T x  s.t.  A^T x = b, x >= 0`` for a row-partitioned ``A``
(n x d, n >= d).  The solver works on the modified program ``(Abar, bbar,
cbar)`` which has the explicit feasible start ``x = 1``.  Regularized Lewis
weights give a starting point on the weighted central path of a
modified objective; a first path-following phase raises mu, the objective is
switched to ``cbar`` by shifting the slacks, and a second phase drives mu
down to ``mu_final``.

Machines own the first n rows of ``Abar`` (their rows of A plus the
``||A||_F`` column) together with the matching entries of x, s and the
weights.  The coordinator owns the two extra rows.  Every vector that crosses
a channel is rounded to ``F = L + ceil(log2(kappa R / (r eps)))`` mantissa
bits and charged at that width plus its exponent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .commsim import (Message, Network, RowPartitionedMatrix, load_instance, save_instance,
                      uvarint_bits, varint_bits)
from .config import get_preset
from .leverage import (NonConvergence, lewis_map, pencil_bounds, predicted_lewis_iterations,
                       psd_pinv)


class GuardViolated(ValueError):
    pass


class PositivityLoss(RuntimeError):
    pass


class InfeasibleDetected(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

@dataclass
class LpInstance:
    """``min c^T x`` subject to ``A^T x = b``, ``x >= 0``; A is n x d and row-partitioned."""

    A: RowPartitionedMatrix
    b: np.ndarray
    c: np.ndarray
    R: float
    r: float = 1.0
    kappa: float = 1e3

    @property
    def L(self) -> int:
        return self.A.L


@dataclass
class ModifiedLp:
    Abar: np.ndarray
    bbar: np.ndarray
    cbar: np.ndarray
    n: int
    d: int
    eps: float
    R: float
    c_norm: float
    A_fro: float
    partition: list

    @property
    def n_bar(self) -> int:
        return self.n + 2

    @property
    def d_bar(self) -> int:
        return self.d + 1

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.partition)]).astype(int)


def build_modified_lp(inst: LpInstance, eps: float, net: Optional[Network] = None,
                      tag: str = "mlp") -> ModifiedLp:
    """Assemble ``(Abar, bbar, cbar)``.

    ``Abar = [[A, ||A||_F 1], [0, ||A||_F], [b^T/R - 1^T A, 0]]``,
    ``bbar = [b/R; (n+1) ||A||_F]`` and ``cbar = [(eps/||c||) c; 0; 1]``.
    With a network, machines send their column sums, ``||A^(i)||_F^2`` and
    ``||c^(i)||^2``, and the coordinator broadcasts ``||A||_F`` and ``||c||``.
    """
    if inst.R <= 0:
        raise ValueError("the outer radius R must be positive")
    A = inst.A.dense()
    n, d = A.shape
    c = np.asarray(inst.c, dtype=float).ravel()
    b = np.asarray(inst.b, dtype=float).ravel()
    if net is not None:
        L = inst.A.L
        for i, B in enumerate(inst.A.blocks):
            ci = inst.A.split_vector(c)[i]
            net.upload(i, Message.fitted(tag + ":colsum", B.sum(axis=0), L))
            net.upload(i, Message.fitted(tag + ":fro2", np.array([np.sum(B * B)]), 2 * L))
            net.upload(i, Message.float64(tag + ":c2", [float(ci @ ci)]))
        net.broadcast(Message.float64(tag + ":norms", [np.linalg.norm(A), np.linalg.norm(c)]))
        net.round_barrier()
    c_norm = float(np.linalg.norm(c))
    if c_norm <= 0:
        raise ValueError("c must be nonzero")
    fro = float(np.linalg.norm(A))
    Abar = np.zeros((n + 2, d + 1))
    Abar[:n, :d] = A
    Abar[:n, d] = fro
    Abar[n, d] = fro
    Abar[n + 1, :d] = b / inst.R - A.sum(axis=0)
    bbar = np.concatenate([b / inst.R, [(n + 1) * fro]])
    cbar = np.concatenate([(eps / c_norm) * c, [0.0, 1.0]])
    return ModifiedLp(Abar, bbar, cbar, n, d, eps, inst.R, c_norm, fro, inst.A.partition)


def initial_point(mlp: ModifiedLp):
    """``x = 1``, ``y = (0, -1/||A||_F)``, ``s = (1 + (eps/||c||) c, 1, 1)``."""
    c = mlp.cbar[:mlp.n] / mlp.eps * mlp.c_norm
    if mlp.eps * np.max(np.abs(c)) >= mlp.c_norm:
        raise GuardViolated("s > 0 needs eps < ||c||_2 / ||c||_inf")
    x = np.ones(mlp.n_bar)
    y = np.concatenate([np.zeros(mlp.d), [-1.0 / mlp.A_fro]])
    s = np.concatenate([1.0 + mlp.cbar[:mlp.n], [1.0, 1.0]])
    return x, y, s


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IpmParams:
    """Step parameters.  ``paper`` holds the analysis formulas; the desk fields drive runs."""

    alpha: float
    lam: float
    gamma: float
    eps_hat: float
    n: int
    d: int
    paper_schedule: bool = True
    step_gamma: float = 0.5
    mu_rate: float = 0.2
    step_lam: float = 2.0
    band: float = 0.25
    max_move: float = 0.5

    @classmethod
    def build(cls, n: int, d: int, preset=None) -> "IpmParams":
        preset = get_preset(preset)
        alpha = 1.0 / (4.0 * math.log(4.0 * n / d))
        lam = alpha / 32000.0 * math.log(2 ** 16 * n * math.sqrt(d) / alpha ** 2)
        gamma = min(alpha / 64000.0, alpha / (50.0 * lam))
        p = cls(alpha, lam, gamma, 0.1, n, d, preset.lp_paper_schedule, preset.lp_desk_gamma,
                preset.lp_desk_mu_rate, preset.lp_desk_lambda)
        p.check()
        return p

    def check(self) -> None:
        n, d = self.n, self.d
        a = 1.0 / (4.0 * math.log(4.0 * n / d))
        lam = a / 32000.0 * math.log(2 ** 16 * n * math.sqrt(d) / a ** 2)
        assert math.isclose(self.alpha, a) and math.isclose(self.lam, lam)
        assert math.isclose(self.gamma, min(a / 64000.0, a / (50.0 * lam)))
        assert self.eps_hat == 0.1

    @property
    def mu_factor(self) -> float:
        """Per-step relative change of mu."""
        if self.paper_schedule:
            return self.gamma * self.alpha / (2 ** 15 * math.sqrt(self.d))
        return self.mu_rate

    @property
    def potential_lam(self) -> float:
        return self.lam if self.paper_schedule else self.step_lam

    @property
    def potential_bound(self) -> float:
        return 2 ** 16 * self.n * math.sqrt(self.d) / self.alpha ** 2


def potential(v, lam: float) -> float:
    """``sum exp(lam (v-1)) + exp(-lam (v-1))``."""
    v = np.asarray(v, dtype=float)
    return float(np.sum(np.exp(lam * (v - 1)) + np.exp(-lam * (v - 1))))


def potential_grad(v, lam: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return lam * (np.exp(lam * (v - 1)) - np.exp(-lam * (v - 1)))


# ---------------------------------------------------------------------------
# metered linear algebra on Abar
# ---------------------------------------------------------------------------

def mantissa_round(x, F: int) -> np.ndarray:
    """Round every entry to F significant bits (ties away from zero)."""
    x = np.asarray(x, dtype=float)
    m, e = np.frexp(x)
    m = np.sign(m) * np.floor(np.abs(m) * 2.0 ** F + 0.5) / 2.0 ** F
    return np.ldexp(m, e)


def mantissa_bits(x, F: int) -> int:
    """Length header plus sign, F mantissa bits and an exponent varint per entry."""
    x = np.asarray(x, dtype=float).ravel()
    _, e = np.frexp(x)
    return uvarint_bits(x.size) + sum(1 + F + varint_bits(int(k)) for k in e)


class LpNetwork:
    """Metered operations with ``Abar`` for one modified program."""

    def __init__(self, mlp: ModifiedLp, net: Network, F: int, L: int, tag: str = "lp"):
        self.mlp = mlp
        self.net = net
        self.F = F
        self.L = L
        self.tag = tag
        self.offs = mlp.offsets
        self.s = len(mlp.partition)
        self.coord = slice(mlp.n, mlp.n + 2)
        self.inner_stalls = 0

    # -- channels ---------------------------------------------------------------
    def up(self, i: int, v, name: str) -> np.ndarray:
        q = mantissa_round(v, self.F)
        self.net.upload(i, Message.raw(f"{self.tag}:{name}", q, mantissa_bits(q, self.F)))
        return q

    def bcast(self, v, name: str) -> np.ndarray:
        q = mantissa_round(v, self.F)
        self.net.broadcast(Message.raw(f"{self.tag}:{name}", q, mantissa_bits(q, self.F)))
        return q

    def rows(self, i: int) -> slice:
        return slice(self.offs[i], self.offs[i + 1])

    # -- reductions -------------------------------------------------------------
    def gather(self, f, name: str = "Atf") -> np.ndarray:
        """``Abar^T f``; machines send their partial sums."""
        Ab = self.mlp.Abar
        tot = Ab[self.coord].T @ f[self.coord]
        for i in range(self.s):
            r = self.rows(i)
            tot = tot + self.up(i, Ab[r].T @ f[r], name)
        return tot

    def global_max(self, v, name: str = "max") -> float:
        """Max over all rows; every machine sends one scalar."""
        m = float(np.max(v[self.coord]))
        for i in range(self.s):
            r = self.rows(i)
            if r.stop > r.start:
                m = max(m, float(self.up(i, [np.max(v[r])], name)[0]))
        return m

    def matvec(self, D, Z, name: str = "mv") -> np.ndarray:
        """``Abar^T D Abar Z`` after broadcasting Z."""
        Ab = self.mlp.Abar
        Zq = self.bcast(Z, name + ":z")
        tot = Ab[self.coord].T @ (D[self.coord, None] * (Ab[self.coord] @ Zq.reshape(
            Ab.shape[1], -1)))
        for i in range(self.s):
            r = self.rows(i)
            part = Ab[r].T @ (D[r, None] * (Ab[r] @ Zq.reshape(Ab.shape[1], -1)))
            tot = tot + self.up(i, part, name).reshape(part.shape)
        self.net.round_barrier()
        return tot.reshape(np.shape(Z))

    def leverage(self, D, name: str = "lev") -> np.ndarray:
        """Leverage scores of ``D^{1/2} Abar``.

        Machines send their Gram blocks, the coordinator broadcasts the
        pseudo-inverse K of the sum, and every machine evaluates
        ``D_i a_i^T K a_i`` for its rows.
        """
        Ab = self.mlp.Abar
        iu = np.triu_indices(Ab.shape[1])
        G = (Ab[self.coord] * D[self.coord, None]).T @ Ab[self.coord]
        for i in range(self.s):
            r = self.rows(i)
            part = (Ab[r] * D[r, None]).T @ Ab[r]
            q = self.up(i, part[iu], name + ":gram")
            P = np.zeros_like(part)
            P[iu] = q
            G = G + P + np.triu(P, 1).T
        K = psd_pinv(G)
        Kq = np.zeros_like(K)
        Kq[iu] = self.bcast(K[iu], name + ":K")
        Kq = Kq + np.triu(Kq, 1).T
        self.net.round_barrier()
        return np.clip(D * np.einsum("ij,jk,ik->i", Ab, Kq, Ab), 0.0, 1.0)


# ---------------------------------------------------------------------------
# warm start
# ---------------------------------------------------------------------------

@dataclass
class WarmStart:
    s_hat: np.ndarray
    iterations: int
    gap: float
    max_iterations: int


def warm_start_weights(mlp: ModifiedLp, ln: LpNetwork, alpha: float, eps_hat: float = 0.1,
                       preset=None) -> WarmStart:
    """Regularized Lewis weights ``s = sigma(S^{-1/2-alpha} Abar) + (d/n) 1``.

    Runs the Lewis fixed-point map with ``p = 1/(1+alpha)`` and
    ``eta = d/n``; each iteration is one metered leverage pass.  Stops when
    ``s`` is within ``e^{eps_hat}`` of its image.
    """
    preset = get_preset(preset)
    p = 1.0 / (1.0 + alpha)
    eta = mlp.d_bar / mlp.n_bar
    cap = math.ceil(preset.lewis_iter_C * predicted_lewis_iterations(p, eta, eps_hat))
    w = np.ones(mlp.n_bar)
    tol = math.exp(eps_hat) - 1
    for it in range(cap + 1):
        sig = ln.leverage(w ** (1.0 - 2.0 / p), "ws")
        target = sig + eta
        gap = ln.global_max(np.abs(w - target) / target, "ws:gap")
        if gap <= tol:
            return WarmStart(w, it, gap, cap)
        if it == cap:
            break
        q = sig * w ** (2.0 / p - 1.0)
        w = lewis_map(mlp.Abar, w, p, eta, q)
    raise NonConvergence(f"warm start gap {gap:.3e} after {cap} iterations")


# ---------------------------------------------------------------------------
# inverse maintenance
# ---------------------------------------------------------------------------

class InverseMaintainer:
    """Sampled ``H = Abar^T diag(h) Abar`` kept close to ``Abar^T D Abar``.

    A row is resampled, with probability ``min(1, gamma_im sigma_i)``, only
    when its weight or its leverage score moved by more than ``threshold``
    relative to the values at its last sample.
    """

    def __init__(self, ln: LpNetwork, dvec, sigma, gamma_im: float, threshold: float = 0.1,
                 tag: str = "im"):
        self.ln = ln
        self.gamma_im = gamma_im
        self.threshold = threshold
        self.tag = tag
        n = ln.mlp.n_bar
        self.h = np.zeros(n)
        self.d_old = np.asarray(dvec, dtype=float).copy()
        self.s_old = np.asarray(sigma, dtype=float).copy()
        self.resamples = 0
        self.updates = 0
        self._sample(np.arange(n), self.d_old, self.s_old)
        self.initial_rows = int(np.count_nonzero(self.h))
        self._refresh()

    def _sample(self, idx, dvec, sigma) -> None:
        ln = self.ln
        pr = np.minimum(1.0, self.gamma_im * sigma[idx])
        for i in range(ln.s + 1):
            if i < ln.s:
                r = ln.rows(i)
                mine = idx[(idx >= r.start) & (idx < r.stop)]
                rng = ln.net.rng(self.tag + ":h", i)
            else:
                mine = idx[idx >= ln.mlp.n]
                rng = ln.net.rng(self.tag + ":h")
            if mine.size == 0:
                continue
            p = pr[np.searchsorted(idx, mine)]
            keep = rng.random(mine.size) < p
            self.h[mine] = np.where(keep, dvec[mine] / np.where(p > 0, p, 1.0), 0.0)
            if i < ln.s and np.any(keep):
                k = mine[keep]
                ln.net.upload(i, Message.indices(self.tag + ":idx", (k - r.start).tolist()))
                ln.net.upload(i, Message.fitted(self.tag + ":rows",
                                                ln.mlp.Abar[k, :ln.mlp.d], ln.L))
                ln.up(i, self.h[k], "im:h")

    def _refresh(self) -> None:
        Ab = self.ln.mlp.Abar
        self.H = (Ab * self.h[:, None]).T @ Ab
        # Abar has full column rank, so H is positive definite; near the end of
        # the path its condition number passes any pseudo-inverse cutoff
        try:
            self.K = cho_solve(cho_factor(self.H), np.eye(self.H.shape[0]))
        except np.linalg.LinAlgError:
            self.K = psd_pinv(self.H)

    def update(self, dvec, sigma) -> int:
        dvec = np.asarray(dvec, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        changed = np.flatnonzero(
            (np.abs(dvec - self.d_old) > self.threshold * self.d_old)
            | (np.abs(sigma - self.s_old) > self.threshold * np.maximum(self.s_old, 1e-300)))
        self.updates += 1
        if changed.size:
            self.d_old[changed] = dvec[changed]
            self.s_old[changed] = sigma[changed]
            self._sample(changed, dvec, sigma)
            self.resamples += int(changed.size)
            self._refresh()
        self.ln.net.round_barrier()
        return int(changed.size)

    def bounds(self, dvec) -> tuple[float, float]:
        """Extreme generalized eigenvalues of ``(H, Abar^T D Abar)`` (test mode)."""
        Ab = self.ln.mlp.Abar
        return pencil_bounds(self.H, (Ab * np.asarray(dvec)[:, None]).T @ Ab)


def inverse_maintain(maintainer: InverseMaintainer, dvec, sigma) -> np.ndarray:
    """Feed new weights to the maintainer; returns the updated K."""
    maintainer.update(dvec, sigma)
    return maintainer.K


# ---------------------------------------------------------------------------
# the step
# ---------------------------------------------------------------------------

@dataclass
class IpmState:
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray
    tau: np.ndarray
    mu: float
    params: IpmParams
    im: Optional[InverseMaintainer] = None
    iterations: int = 0
    kkt: list = field(default_factory=list)
    positivity_losses: int = 0
    solver_iters: list = field(default_factory=list)

    @property
    def w(self) -> np.ndarray:
        return self.x * self.s

    @property
    def v(self) -> np.ndarray:
        return self.mu * self.tau / self.w


def weight_function(ln: LpNetwork, x, s, alpha: float) -> np.ndarray:
    """``tau = sigma(S^{-1/2-alpha} X^{1/2-alpha} Abar) + (d/n) 1``."""
    mlp = ln.mlp
    D = s ** (-1.0 - 2 * alpha) * x ** (1.0 - 2 * alpha)
    return ln.leverage(D, "tau") + mlp.d_bar / mlp.n_bar


def preconditioned_richardson(ln: LpNetwork, D, rhs, K, tol: float = 1e-10,
                              max_iters: int = 500,
                              stall_tol: float = 1e-5) -> tuple[np.ndarray, int]:
    """Solve ``Abar^T D Abar u = rhs`` with preconditioner K.

    Each iteration is one metered matvec; the step length along ``K r``
    minimizes the energy-norm error.  Late on degenerate paths the F-bit wire
    rounding puts a floor under the residual; a solve that stalls below
    ``stall_tol`` is accepted and counted in ``ln.inner_stalls``.
    """
    nr = float(np.linalg.norm(rhs))
    if nr == 0:
        return np.zeros_like(rhs), 0
    u = K @ rhs
    r = rhs - ln.matvec(D, u)
    for it in range(1, max_iters + 1):
        if np.linalg.norm(r) <= tol * nr:
            return u, it
        p = K @ r
        q = ln.matvec(D, p)
        pq = float(p @ q)
        if pq <= 0:
            break
        om = float(r @ p) / pq
        u = u + om * p
        r = r - om * q
    if np.linalg.norm(r) <= stall_tol * nr:
        ln.inner_stalls += 1
        return u, max_iters
    raise NonConvergence(f"inner solve residual {np.linalg.norm(r) / nr:.2e}")


def kkt_residual(Abar, x, s, dx, ds, dy, delta) -> float:
    """Largest scaled violation of ``X ds + S dx = delta``, ``Abar^T dx = 0``, ``Abar dy + ds = 0``."""
    e1 = np.linalg.norm(x * ds + s * dx - delta) / max(np.linalg.norm(delta), 1e-300)
    B = np.sqrt(x / s)[:, None] * Abar
    z = delta / np.sqrt(x * s)
    e2 = np.linalg.norm(Abar.T @ dx) / max(np.linalg.norm(B, 2) * np.linalg.norm(z), 1e-300)
    e3 = np.linalg.norm(Abar @ dy + ds) / max(np.linalg.norm(Abar, 2) * np.linalg.norm(dy),
                                              np.linalg.norm(ds), 1e-300)
    return float(max(e1, e2, e3))


def ipm_step(state: IpmState, ln: LpNetwork, scale: float = 1.0, exact_H: bool = False,
             update_weights: bool = True) -> IpmState:
    """One potential-reduction Newton step at the current mu.

    ``delta = w * g`` with ``g = grad Phi(v) / (2 lam^2)`` (about ``v - 1``
    near the path), clipped so that ``||g||_inf <= step_gamma``; the analysis
    schedule instead normalizes by ``gamma / ||grad Phi||_2``.  Machines send
    ``Abar_i^T S_i^{-1} delta_i``; the coordinator solves with the maintained
    preconditioner and broadcasts ``u``; machines set ``ds = Abar u`` and
    ``dx = S^{-1} delta - (X/S) Abar u``.  The whole step is scaled down
    if some coordinate of x or s would move by more than ``max_move`` of its
    value.

    Raises
    ------
    PositivityLoss
        If the step would make a coordinate of x or s nonpositive; the state
        is left unchanged.
    """
    P = state.params
    lam = P.potential_lam
    x, s = state.x, state.s
    w = x * s
    gp = potential_grad(state.v, lam)
    if P.paper_schedule:
        nrm = float(np.linalg.norm(gp))
        delta = w * gp * (P.gamma / nrm if nrm > 0 else 0.0)
    else:
        g = gp / (2 * lam * lam)
        gmax = ln.global_max(np.abs(g), "gmax")
        delta = w * g * (min(1.0, P.step_gamma / gmax) if gmax > 0 else 0.0)
    delta = delta * scale
    if not np.any(delta):
        return state
    D = x / s
    rhs = ln.gather(delta / s, "Asd")
    if exact_H:
        Ab = ln.mlp.Abar
        u = np.linalg.lstsq((Ab * D[:, None]).T @ Ab, rhs, rcond=None)[0]
        its = 0
    else:
        u, its = preconditioned_richardson(ln, D, rhs, state.im.K)
    u = ln.bcast(u, "u")
    ln.net.round_barrier()
    Ab = ln.mlp.Abar
    ds = Ab @ u
    dx = delta / s - D * ds
    dy = -u
    # damping: no coordinate of x or s moves by more than half of its value
    ratio = ln.global_max(np.maximum(np.abs(dx / x), np.abs(ds / s)), "ratio")
    if ratio > P.max_move:
        f = P.max_move / ratio
        dx, ds, dy, delta = f * dx, f * ds, f * dy, f * delta
    xn, sn = x + dx, s + ds
    if np.any(xn <= 0) or np.any(sn <= 0):
        state.positivity_losses += 1
        raise PositivityLoss("step leaves the positive orthant")
    state.kkt.append(kkt_residual(Ab, x, s, dx, ds, dy, delta))
    state.solver_iters.append(its)
    state.x, state.s, state.y = xn, sn, state.y + dy
    state.iterations += 1
    if update_weights:
        state.tau = weight_function(ln, xn, sn, P.alpha)
        if state.im is not None:
            Dn = xn / sn
            state.im.update(Dn, ln.leverage(Dn, "im:sigma"))
    return state


def _drive(state: IpmState, ln: LpNetwork, mu_final: float, max_iters: int,
           exact_H: bool = False) -> IpmState:
    """Move mu geometrically to ``mu_final`` and re-center; returns when centered there."""
    P = state.params
    f = P.mu_factor
    for _ in range(max_iters):
        if state.mu > mu_final:
            state.mu = max(mu_final, (1 - f) * state.mu)
        elif state.mu < mu_final:
            state.mu = min(mu_final, (1 + f) * state.mu)
        scale = 1.0
        for _ in range(40):
            try:
                ipm_step(state, ln, scale, exact_H)
                break
            except PositivityLoss:
                scale /= 2
        else:
            raise PositivityLoss("no positive step after 40 halvings")
        v = state.v
        if state.mu == mu_final:
            if P.paper_schedule:
                done = potential(v, P.potential_lam) <= P.potential_bound
            else:
                done = ln.global_max(np.abs(v - 1), "band") <= P.band
            if done:
                return state
    raise NonConvergence(f"IPM did not reach mu_final within {max_iters} steps")


@dataclass
class LpResult:
    x: np.ndarray
    objective: float
    residual: float
    iterations: int
    resamples: int
    report: dict
    state: IpmState = field(repr=False, default=None)


def wire_bits(inst: LpInstance, eps: float) -> int:
    """``L + ceil(log2(kappa R / (r eps)))`` mantissa bits."""
    return inst.L + max(1, math.ceil(math.log2(inst.kappa * inst.R / (inst.r * eps))))


def ipm_solve(inst: LpInstance, eps: float, net: Network, preset=None, mu_final=None,
              exact_H: bool = False, tag: str = "lp") -> LpResult:
    """Two-phase weighted path following on the modified program; returns ``R x_bar[:n]``."""
    preset = get_preset(preset)
    mlp = build_modified_lp(inst, eps, net, tag + ":mlp")
    x, y, s = initial_point(mlp)
    F = wire_bits(inst, eps)
    ln = LpNetwork(mlp, net, F, inst.L, tag)
    P = IpmParams.build(mlp.n_bar, mlp.d_bar, preset)
    nb, db = mlp.n_bar, mlp.d_bar
    if mu_final is None:
        mu_final = (eps ** 2 / (512 * nb ** 4 * db) if P.paper_schedule
                    else eps ** 2 / (64 * db))
    mu_big = (nb ** 2 * math.sqrt(db) / (P.gamma * P.alpha ** 2) if P.paper_schedule
              else 64 * nb ** 2 / db)
    marks = {"start": net.ledger.mark()}
    # warm start: x = 1 and s = c_hat = Lewis weights is on the modified path at mu = 1
    ws = warm_start_weights(mlp, ln, P.alpha, P.eps_hat, preset)
    c_hat = ws.s_hat.copy()
    s = ws.s_hat.copy()
    y = np.zeros(db)
    tau = weight_function(ln, x, s, P.alpha)
    D = x / s
    gamma_im = preset.im_C * 1000 * math.log(db)
    im = None if exact_H else InverseMaintainer(ln, D, ln.leverage(D, "im:sigma"), gamma_im)
    state = IpmState(x, s, y, tau, 1.0, P, im)
    marks["phase1"] = net.ledger.mark()
    _drive(state, ln, mu_big, preset.lp_max_iters, exact_H)
    it1 = state.iterations
    # switch to the true objective by shifting the slacks
    state.s = state.s + mlp.cbar - c_hat
    if np.any(state.s <= 0):
        raise PositivityLoss("slack shift at the phase switch left the positive orthant")
    state.tau = weight_function(ln, state.x, state.s, P.alpha)
    marks["phase2"] = net.ledger.mark()
    _drive(state, ln, mu_final, preset.lp_max_iters, exact_H)
    # recover x and make it known to every machine
    xb = state.x
    for i in range(ln.s):
        ln.up(i, xb[ln.rows(i)], "xhat")
    xq = ln.bcast(xb[:mlp.n], "xhat")
    net.round_barrier()
    xo = inst.R * xq
    A = inst.A.dense()
    res = float(np.linalg.norm(A.T @ xo - inst.b))
    obj = float(np.asarray(inst.c) @ xo)
    bound = eps * (np.linalg.norm(A) * inst.R + np.linalg.norm(inst.b))
    if res > 100 * bound:
        raise InfeasibleDetected(f"residual {res:.3e} after reaching mu_final")
    led = net.ledger
    report = {
        "phase_bits": {"setup": led.bits_since(marks["start"]) - led.bits_since(marks["phase1"]),
                       "phase1": led.bits_since(marks["phase1"]) - led.bits_since(marks["phase2"]),
                       "phase2": led.bits_since(marks["phase2"])},
        "iters": state.iterations, "iters_phase1": it1,
        "warm_start_iters": ws.iterations,
        "resamples": 0 if im is None else im.resamples,
        "objective": obj, "residual": res, "residual_bound": bound,
        "mu_final": mu_final, "max_kkt": max(state.kkt) if state.kkt else 0.0,
        "positivity_losses": state.positivity_losses, "inner_stalls": ln.inner_stalls,
    }
    return LpResult(xo, obj, res, state.iterations, report["resamples"], report, state)


# ---------------------------------------------------------------------------
# instances and oracles for tests
# ---------------------------------------------------------------------------

def save_lp(path: str, inst: LpInstance, seed: Optional[int] = None) -> None:
    """Instance file with ``b``, ``c`` and the header fields ``R``, ``r``, ``kappa``."""
    save_instance(path, inst.A, "lp", {"R": inst.R, "r": inst.r, "kappa": inst.kappa, "seed": seed},
                  {"b": inst.b, "c": inst.c})


def load_lp(path: str) -> LpInstance:
    """Inverse of :func:`save_lp`."""
    A, doc, vecs = load_instance(path, ("b", "c"))
    return LpInstance(A, vecs["b"], vecs["c"], float(doc["R"]), float(doc.get("r", 1.0)),
                      float(doc.get("kappa", 1e3)))


def random_feasible_lp(n: int, d: int, s: int, L: int = 12, seed: int = 0,
                       kappa: float = 1e3) -> LpInstance:
    """Random bounded feasible LP.

    The first column of A is positive, so ``A^T x = b`` with ``x >= 0``
    forces ``||x||_1 <= b_1 / min_i a_i1 = R``.  ``b = A^T x0`` for a
    positive x0 and c is Gaussian.
    """
    from .commsim import even_partition

    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    A[:, 0] = rng.uniform(1.0, 2.0, n)
    A = np.round(A * 2 ** L) / 2 ** L
    x0 = rng.uniform(0.0, 1.0, n)
    b = np.round(A.T @ x0 * 2 ** L) / 2 ** L
    c = np.round(rng.standard_normal(n) * 2 ** L) / 2 ** L
    R = float(b[0] / A[:, 0].min())
    Ap = RowPartitionedMatrix.from_dense(A, even_partition(n, s), L)
    return LpInstance(Ap, b, c, R, 1.0, kappa)


def lp_oracle(A, b, c) -> tuple[float, np.ndarray]:
    """Exact optimum of ``min c^T x, A^T x = b, x >= 0`` by the HiGHS simplex."""
    from scipy.optimize import linprog

    A = np.asarray(A, dtype=float)
    res = linprog(c, A_eq=A.T, b_eq=b, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise InfeasibleDetected(res.message)
    return float(res.fun), res.x


def bfs_oracle(A, b, c, tol: float = 1e-9) -> float:
    """Optimum by enumerating basic feasible solutions (small n only)."""
    from itertools import combinations

    A = np.asarray(A, dtype=float)
    n, d = A.shape
    r = np.linalg.matrix_rank(A)
    best = math.inf
    for cols in combinations(range(n), r):
        B = A[list(cols)].T
        if np.linalg.matrix_rank(B) < r:
            continue
        xb = np.linalg.lstsq(B, b, rcond=None)[0]
        if np.any(xb < -tol) or np.linalg.norm(B @ xb - b) > tol * (1 + np.linalg.norm(b)):
            continue
        best = min(best, float(np.asarray(c)[list(cols)] @ xb))
    if best == math.inf:
        raise InfeasibleDetected("no basic feasible solution")
    return best
