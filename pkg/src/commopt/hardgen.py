"""Generators for hard instances of the inner-product game and its reductions.

The game: a coordinator holds a unit vector v in R^d (d >= 3) and server k
holds a unit vector w_k.  In case (a) every ``<v, w_k>`` is zero; in case
(b) exactly one satisfies ``|<v, w_k>| >= eps/d``.  The regression and
feasibility gadgets embed the game into a rounded matrix so that a solver
for those problems decides the game.

Game vectors are kept in double precision and orthogonalized explicitly;
rounding to L bits is a separate step, so each instance records both the
exact vectors and the rounded payload.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .commsim import RowPartitionedMatrix, load_instance, save_instance

REGIME_C = 4.0
GAME_BITS = 52


class RegimeViolation(ValueError):
    pass


class RegimeWarning(UserWarning):
    pass


@dataclass
class HardInstance:
    """A generated instance plus the planted quantity it certifies.

    ``A`` is partitioned with one block per server; gadgets that need
    coordinator-held rows put them in an extra leading block.
    """

    kind: str
    params: dict
    A: RowPartitionedMatrix
    b: Optional[np.ndarray]
    certificate: dict
    vectors: dict = field(default_factory=dict)

    def save(self, path: str) -> None:
        """Instance file at ``path`` and the certificate at ``path + '.cert.json'``."""
        vecs = {k: v for k, v in self.vectors.items() if k != "W"}
        if self.b is not None:
            vecs["b"] = self.b
        save_instance(path, self.A, "hard:" + self.kind, {"params": self.params}, vecs)
        with open(path + ".cert.json", "w") as fh:
            json.dump({"kind": self.kind, "params": self.params,
                       "certificate": _jsonable(self.certificate)}, fh, sort_keys=True)


def load_hard_instance(path: str) -> HardInstance:
    """Inverse of :meth:`HardInstance.save`."""
    with open(path + ".cert.json") as fh:
        meta = json.load(fh)
    A, doc, vecs = load_instance(path, ("b", "v"))
    vectors = {}
    if meta["kind"] == "inner_product":
        vectors = {"v": vecs["v"], "W": A.dense()}
    return HardInstance(meta["kind"], meta["params"], A, vecs.get("b"), meta["certificate"],
                        vectors)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def round_to_grid(x, L: int, toward_zero: bool = False) -> np.ndarray:
    """Round to the ``2^-L`` grid, to nearest or toward zero."""
    x = np.asarray(x, dtype=float) * 2.0 ** L
    r = np.trunc(x) if toward_zero else np.round(x)
    return r / 2.0 ** L


def _unit(x) -> np.ndarray:
    return x / np.linalg.norm(x)


def _orthogonal_unit(v, rng) -> np.ndarray:
    """Random unit vector orthogonal to the unit vector v (two Gram-Schmidt passes)."""
    u = rng.standard_normal(v.size)
    for _ in range(2):
        u = u - (u @ v) * v
    return _unit(u)


def orthonormal_complement(v) -> np.ndarray:
    """Rows form an orthonormal basis of ``v^perp``."""
    v = _unit(np.asarray(v, dtype=float))
    Q, _ = np.linalg.qr(np.column_stack([v, np.eye(v.size)]))
    return Q[:, 1:v.size].T


# ---------------------------------------------------------------------------
# the game
# ---------------------------------------------------------------------------

def gen_inner_product(s: int, d: int, eps: float, case: str, seed: int = 0) -> HardInstance:
    """Unit vectors v (coordinator) and ``w_1..w_s`` (servers) for the inner-product game."""
    if d < 3:
        raise ValueError("the game needs d >= 3")
    if case not in ("a", "b"):
        raise ValueError("case must be 'a' or 'b'")
    rng = np.random.default_rng(seed)
    v = _unit(rng.standard_normal(d))
    W = np.array([_orthogonal_unit(v, rng) for _ in range(s)])
    cert = {"case": case, "threshold": eps / d}
    if case == "b":
        k = int(rng.integers(s))
        t = eps / d * (1 + 1e-9) * (1 if rng.random() < 0.5 else -1)
        W[k] = t * v + math.sqrt(1 - t * t) * W[k]
        cert["k"] = k
    ips = W @ v
    cert["inner_products"] = ips.tolist()
    if case == "b":
        cert["achieved"] = float(abs(ips[cert["k"]]))
    A = RowPartitionedMatrix.from_dense(W, [1] * s, GAME_BITS)
    return HardInstance("inner_product", {"s": s, "d": d, "eps": eps, "case": case, "seed": seed},
                        A, None, cert, {"v": v, "W": W})


def check_inner_product(inst: HardInstance, tol: float = 1e-12) -> bool:
    """Recompute the inner products against the case promise."""
    v, W = inst.vectors["v"], inst.vectors["W"]
    ips = np.abs(W @ v)
    units = np.allclose(np.linalg.norm(W, axis=1), 1, atol=1e-12) and abs(v @ v - 1) < 1e-12
    if inst.certificate["case"] == "a":
        return bool(units and np.all(ips <= tol))
    k = inst.certificate["k"]
    rest = np.delete(ips, k)
    return bool(units and ips[k] >= inst.params["eps"] / inst.params["d"] and np.all(rest <= tol))


# ---------------------------------------------------------------------------
# regression gap
# ---------------------------------------------------------------------------

def regression_alpha(d: int, eps: float) -> float:
    """Largest power of two strictly below ``eps / (8 d)``."""
    e = math.floor(math.log2(eps / (8 * d)))
    a = 2.0 ** e
    return a / 2 if a >= eps / (8 * d) else a


def _warn_regime(L: int, s: int, d: int, eps: float) -> bool:
    ok = math.log2(1 / eps) <= L - REGIME_C * math.log2(s + d)
    if not ok:
        warnings.warn(f"log2(1/eps) = {math.log2(1 / eps):.1f} exceeds "
                      f"L - {REGIME_C:g} log2(s+d) = {L - REGIME_C * math.log2(s + d):.1f}",
                      RegimeWarning, stacklevel=3)
    return ok


def _regression_one(v, W, s, d, L, eps, alpha, case, params) -> HardInstance:
    U = orthonormal_complement(v)
    a_exp = int(round(-math.log2(alpha)))
    top = np.vstack([alpha * round_to_grid(v, L), round_to_grid(U, L)])
    Wr = round_to_grid(W, L)
    A = RowPartitionedMatrix([top, *[Wr[i:i + 1] for i in range(s)]], L + a_exp)
    b = np.zeros(A.n)
    b[0] = 1.0
    eps_p = eps / d
    eta = 2.0 ** -L * d
    beta = 1.0
    inner = alpha ** -2 * s + alpha ** -2 * d + 1
    cert = {
        "case": case,
        "alpha": alpha,
        "eps_prime": eps_p,
        "case_b_ceiling": 4 * (1 + math.sqrt(beta)) / eps_p,
        "case_b_sigma_floor": eps_p / 4,
        "case_a_floor": (1 - eta * math.sqrt((1 + beta) * inner)) / alpha,
        "sigma_min": float(np.linalg.svd(A.dense(), compute_uv=False)[-1]),
    }
    return HardInstance("regression_gap", dict(params, case=case), A, b, cert,
                        {"v": v, "W": W})


def gen_regression_gap(s: int, d: int, L: int, eps: float, seed: int = 0):
    """Case (a) and case (b) regression gadgets from one draw of the game.

    Rows: ``alpha v'`` and a rounded orthonormal basis of ``v^perp`` (the
    coordinator block), then ``w'_i`` on server i.  ``b`` is the indicator
    of the ``alpha v'`` row.  alpha is a power of two below ``eps/(8d)``,
    so the instance is on the ``2^-(L + log2(1/alpha))`` grid.
    """
    _warn_regime(L, s, d, eps)
    alpha = regression_alpha(d, eps)
    params = {"s": s, "d": d, "L": L, "eps": eps, "seed": seed}
    ga = gen_inner_product(s, d, eps, "a", seed)
    gb = gen_inner_product(s, d, eps, "b", seed)
    out = []
    for case, g in (("a", ga), ("b", gb)):
        out.append(_regression_one(g.vectors["v"], g.vectors["W"], s, d, L, eps, alpha, case,
                                   params))
    return tuple(out)


def regression_distinguisher(inst: HardInstance, x_hat) -> str:
    """Case (a) iff ``||x_hat||`` exceeds the case-(b) ceiling ``4 (1 + sqrt(beta)) / eps'``."""
    return "a" if np.linalg.norm(x_hat) > inst.certificate["case_b_ceiling"] else "b"


# ---------------------------------------------------------------------------
# feasibility
# ---------------------------------------------------------------------------

def gen_feasibility(s: int, d: int, L: int, eps: float, case: str, seed: int = 0) -> HardInstance:
    """System ``A x <= b`` that is feasible exactly in case (a).

    Server i holds ``|<w'_i, x>| <= 2 eta`` as two rows, with
    ``eta = 2^-L ceil(sqrt(d))`` and w' rounded toward zero.  The
    coordinator block holds ``x <= v'`` and ``-x <= -v'``, forcing ``x = v'``.
    """
    eta = 2.0 ** -L * math.ceil(math.sqrt(d))
    if eps <= 4 * eta * d:
        raise RegimeViolation(f"need eps > 4 eta d = {4 * eta * d:.3e}")
    g = gen_inner_product(s, d, eps, case, seed)
    v, W = g.vectors["v"], g.vectors["W"]
    vr = round_to_grid(v, L, toward_zero=True)
    Wr = round_to_grid(W, L, toward_zero=True)
    I = np.eye(d)
    blocks = [np.vstack([I, -I])] + [np.vstack([Wr[i], -Wr[i]]) for i in range(s)]
    b = np.concatenate([vr, -vr, np.full(2 * s, 2 * eta)])
    A = RowPartitionedMatrix(blocks, L)
    margin = None
    if case == "b":
        margin = float(eps / d - 2 * eta)
    cert = {"case": case, "feasible": case == "a", "eta": eta, "point": vr.tolist(),
            "lower_bound": margin}
    params = {"s": s, "d": d, "L": L, "eps": eps, "case": case, "seed": seed}
    return HardInstance("feasibility", params, A, b, cert, {"v": v, "W": W})


def _frac_matrix(A, L):
    return [[Fraction(int(round(x * 2 ** L)), 2 ** L) for x in row] for row in np.atleast_2d(A)]


def exact_feasible(A, b, L: int) -> bool:
    """Decide ``exists x: A x <= b`` exactly by a rational phase-1 simplex.

    Free variables are split as ``x = x+ - x-``; rows with negative right-hand
    side get an artificial variable.  Bland's rule guarantees termination.
    """
    A = _frac_matrix(A, L)
    b = [Fraction(int(round(x * 2 ** L)), 2 ** L) for x in np.ravel(b)]
    m, d = len(A), len(A[0])
    nv = 2 * d + m
    rows, basis, art = [], [], []
    for i in range(m):
        sg = 1 if b[i] >= 0 else -1
        r = [sg * a for a in A[i]] + [-sg * a for a in A[i]] + [Fraction(0)] * m
        r[2 * d + i] = Fraction(sg)
        rows.append(r)
        if sg > 0:
            basis.append(2 * d + i)
        else:
            art.append(i)
            basis.append(None)
    na = len(art)
    for r in rows:
        r.extend([Fraction(0)] * na)
    for j, i in enumerate(art):
        rows[i][nv + j] = Fraction(1)
        basis[i] = nv + j
    rhs = [abs(x) for x in b]
    tot = nv + na
    cost = [Fraction(0)] * nv + [Fraction(1)] * na
    while True:
        red = cost[:]
        obj = Fraction(0)
        for i, bi in enumerate(basis):
            cb = cost[bi]
            if cb:
                for j in range(tot):
                    red[j] -= cb * rows[i][j]
                obj += cb * rhs[i]
        enter = next((j for j in range(tot) if red[j] < 0), None)
        if enter is None:
            return obj == 0
        best, leave = None, None
        for i in range(m):
            if rows[i][enter] > 0:
                ratio = rhs[i] / rows[i][enter]
                if best is None or ratio < best or (ratio == best and basis[i] < basis[leave]):
                    best, leave = ratio, i
        if leave is None:
            return obj == 0
        piv = rows[leave][enter]
        rows[leave] = [x / piv for x in rows[leave]]
        rhs[leave] /= piv
        for i in range(m):
            if i != leave and rows[i][enter] != 0:
                f = rows[i][enter]
                rows[i] = [x - f * y for x, y in zip(rows[i], rows[leave])]
                rhs[i] -= f * rhs[leave]
        basis[leave] = enter


def verify_feasibility(inst: HardInstance) -> bool:
    """Check the planted certificate exactly.

    Case (a): the stored point satisfies every constraint.  Case (b): the
    forced point violates a server constraint by the certified margin.  In
    both cases the exact feasibility oracle must agree.
    """
    L = inst.params["L"]
    A, b = inst.A.dense(), inst.b
    x = [Fraction(int(round(t * 2 ** L)), 2 ** L) for t in inst.certificate["point"]]
    Af, bf = _frac_matrix(A, L), [Fraction(int(round(t * 2 ** L)), 2 ** L) for t in b]
    slack = [bf[i] - sum(a * xi for a, xi in zip(Af[i], x)) for i in range(len(Af))]
    if inst.certificate["feasible"]:
        planted = all(t >= 0 for t in slack)
    else:
        eta = Fraction(inst.certificate["eta"])
        d = inst.params["d"]
        ips = [abs(sum(a * xi for a, xi in zip(Af[i], x))) for i in range(2 * d, len(Af), 2)]
        planted = max(ips) > 2 * eta
    return bool(planted and exact_feasible(A, b, L) == inst.certificate["feasible"])


# ---------------------------------------------------------------------------
# high precision rows
# ---------------------------------------------------------------------------

def gen_high_precision(s: int, d: int, seed: int = 0, L: int = 52) -> HardInstance:
    """s rows uniform on the sphere of radius ``sqrt(d/(s+d))`` plus ``e_1..e_d``.

    Server i holds row i; the identity rows form a trailing block known to
    everyone.  ``b = e_{s+1}`` so that ``A^T b = e_1``.
    """
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((s, d))
    G = G / np.linalg.norm(G, axis=1, keepdims=True) * math.sqrt(d / (s + d))
    G = round_to_grid(G, L)
    A = RowPartitionedMatrix([G[i:i + 1] for i in range(s)] + [np.eye(d)], L)
    b = np.zeros(s + d)
    b[s] = 1.0
    ev = np.linalg.eigvalsh(A.dense().T @ A.dense())
    cert = {"lambda_min": float(ev[0]), "lambda_max": float(ev[-1]),
            "kappa": float(math.sqrt(ev[-1] / ev[0]))}
    return HardInstance("high_precision", {"s": s, "d": d, "L": L, "seed": seed}, A, b, cert)
