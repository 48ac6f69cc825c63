"""Leverage scores, their generalized/ridge/block variants, Lewis weights and the
``Sample(u, alpha, c)`` row sampler."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

PINV_RTOL = 1e-12


class NonConvergence(RuntimeError):
    """The Lewis fixed-point iteration did not reach the requested residual."""


def _row_basis(A: np.ndarray, rtol: float = PINV_RTOL):
    """Orthonormal bases of the row space and right singular values of A."""
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return np.zeros((A.shape[1], 0)), np.zeros(0)
    _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    keep = sv > rtol * (sv[0] if sv.size else 0.0)
    return Vt[keep].T, sv[keep]


def psd_pinv(Q: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix with a relative eigenvalue cutoff."""
    Q = (np.asarray(Q, dtype=float) + np.asarray(Q, dtype=float).T) / 2
    ev, V = np.linalg.eigh(Q)
    top = ev.max() if ev.size else 0.0
    keep = ev > rtol * max(top, 0.0)
    return (V[:, keep] / ev[keep]) @ V[:, keep].T


def psd_sqrt(Q: np.ndarray, inverse: bool = False, rtol: float = PINV_RTOL) -> np.ndarray:
    """Symmetric square root (or pseudo-inverse square root) of a PSD matrix."""
    Q = (np.asarray(Q, dtype=float) + np.asarray(Q, dtype=float).T) / 2
    ev, V = np.linalg.eigh(Q)
    top = max(ev.max() if ev.size else 0.0, 0.0)
    keep = ev > rtol * top
    e = np.sqrt(ev[keep])
    if inverse:
        e = 1.0 / e
    return (V[:, keep] * e) @ V[:, keep].T


@dataclass
class LeverageVector:
    tau: np.ndarray
    flavor: str = "plain"

    def __array__(self, dtype=None):
        return np.asarray(self.tau, dtype=dtype)

    def sum(self) -> float:
        return float(np.sum(self.tau))


def leverage_exact(A) -> LeverageVector:
    """Leverage scores ``a_i^T (A^T A)^+ a_i`` computed from the left singular vectors."""
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return LeverageVector(np.zeros(A.shape[0]))
    U, sv, _ = np.linalg.svd(A, full_matrices=False)
    keep = sv > PINV_RTOL * sv[0] if sv.size else np.zeros(0, bool)
    tau = np.sum(U[:, keep] ** 2, axis=1)
    return LeverageVector(np.clip(tau, 0.0, 1.0))


def generalized_leverage(A, B, tol: float = 1e-9) -> LeverageVector:
    """Leverage of the rows of A measured against ``B^T B``; infinite off rowspace(B)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    V, sv = _row_basis(B)
    coeff = A @ V
    resid = np.linalg.norm(A - coeff @ V.T, axis=1)
    scale = np.linalg.norm(A, axis=1)
    tau = np.sum((coeff / sv) ** 2, axis=1) if sv.size else np.zeros(A.shape[0])
    off = resid > tol * np.maximum(scale, 1e-300)
    tau = np.where(off & (scale > 0), np.inf, tau)
    return LeverageVector(tau, "generalized")


def ridge_leverage(A, lam: float) -> LeverageVector:
    """Ridge leverage ``a_i^T (A^T A + lam I)^-1 a_i``."""
    if lam < 0:
        raise ValueError("ridge parameter must be nonnegative")
    A = np.asarray(A, dtype=float)
    if lam == 0:
        lev = leverage_exact(A)
        return LeverageVector(lev.tau, "ridge")
    _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    coeff = A @ Vt.T
    w = 1.0 / (sv ** 2 + lam)
    tau = coeff ** 2 @ w
    # directions outside the row space of A contribute nothing since A has no mass there
    return LeverageVector(tau, "ridge")


def block_leverage(A, partition: Sequence[int]) -> np.ndarray:
    """Block leverage scores ``Tr(A_i (A^T A)^+ A_i^T)`` for a row partition."""
    A = np.asarray(A, dtype=float)
    if sum(partition) != A.shape[0]:
        raise ValueError("partition must cover all rows")
    tau = leverage_exact(A).tau
    offs = np.concatenate([[0], np.cumsum(partition)]).astype(int)
    return np.array([tau[offs[i]:offs[i + 1]].sum() for i in range(len(partition))])


def spectral_bounds(Atil, A) -> tuple[float, float]:
    """Extreme generalized eigenvalues of the pencil (Atil^T Atil, A^T A) on rowspace(A).

    Returns ``(lo, hi)`` with ``lo * A^T A <= Atil^T Atil <= hi * A^T A``.
    Directions in which ``Atil`` has mass outside rowspace(A) give ``hi = inf``.
    """
    return pencil_bounds(np.asarray(Atil).T @ np.asarray(Atil), np.asarray(A).T @ np.asarray(A))


def pencil_bounds(Q, P) -> tuple[float, float]:
    """Extreme eigenvalues of ``P^{+1/2} Q P^{+1/2}`` restricted to range(P)."""
    Ph = psd_sqrt(P, inverse=True)
    V, _ = _row_basis(psd_sqrt(P))
    K = V.T @ Ph @ Q @ Ph @ V
    ev = np.linalg.eigvalsh((K + K.T) / 2)
    # mass of Q outside range(P)
    if V.shape[1] < P.shape[0]:
        W = np.eye(P.shape[0]) - V @ V.T
        leak = np.linalg.norm(W @ Q @ W)
        if leak > 1e-9 * max(np.linalg.norm(Q), 1e-300):
            return float(ev.min()), float("inf")
    return float(ev.min()), float(ev.max())


# ---------------------------------------------------------------------------
# Sample(u, alpha, c)
# ---------------------------------------------------------------------------

def log_d(d: int) -> float:
    """``log d`` floored at 1 so that tiny dimensions do not zero out probabilities."""
    return max(1.0, math.log(d))


@dataclass
class SamplingDiagonal:
    """Nonzero entries ``1/sqrt(p_i)`` of a random diagonal sampling matrix."""

    n: int
    index: np.ndarray
    prob: np.ndarray
    all_prob: np.ndarray = field(repr=False, default=None)

    @property
    def values(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.prob)

    @property
    def nnz(self) -> int:
        return int(self.index.size)

    def dense(self) -> np.ndarray:
        S = np.zeros((self.n, self.n))
        S[self.index, self.index] = self.values
        return S

    def apply(self, A) -> np.ndarray:
        """Nonzero rows of ``S A``."""
        return np.asarray(A)[self.index] * self.values[:, None]


def sample_probabilities(u, alpha: float, c: float, d: int) -> np.ndarray:
    return np.minimum(1.0, alpha * c * log_d(d) * np.asarray(u, dtype=float))


def sample_diag(u, alpha: float, c: float, d: int, rng: np.random.Generator) -> SamplingDiagonal:
    """Keep row i independently with ``p_i = min(1, alpha c log d u_i)``, scaled by 1/sqrt(p_i)."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("overestimates must be nonnegative")
    p = sample_probabilities(u, alpha, c, d)
    keep = rng.random(u.size) < p
    idx = np.flatnonzero(keep & (p > 0))
    return SamplingDiagonal(u.size, idx, p[idx], p)


# ---------------------------------------------------------------------------
# Lewis weights
# ---------------------------------------------------------------------------

@dataclass
class LewisWeightVector:
    w: np.ndarray
    p: float
    eta: float
    residual: float
    iterations: int = 0
    history: list = field(default_factory=list, repr=False)


def lewis_quadratic_form(A, w, p: float) -> np.ndarray:
    """``A^T W^{1-2/p} A``."""
    A = np.asarray(A, dtype=float)
    scale = np.asarray(w, dtype=float) ** (1.0 - 2.0 / p)
    return (A * scale[:, None]).T @ A


def lewis_q(A, w, p: float) -> np.ndarray:
    """``q_i(w) = a_i^T (A^T W^{1-2/p} A)^{-1} a_i``."""
    A = np.asarray(A, dtype=float)
    Qi = psd_pinv(lewis_quadratic_form(A, w, p))
    return np.einsum("ij,jk,ik->i", A, Qi, A)


def lewis_map(A, w, p: float, eta: float = 0.0, q: Optional[np.ndarray] = None) -> np.ndarray:
    """One application of ``T_i(w) = (q_i(w) + eta w_i^{2/p-1})^{p/2}``."""
    w = np.asarray(w, dtype=float)
    if q is None:
        q = lewis_q(A, w, p)
    return (np.maximum(q, 0.0) + eta * w ** (2.0 / p - 1.0)) ** (p / 2.0)


def lewis_residual(A, w, p: float, eta: float = 0.0) -> float:
    """Largest violation of ``w_i^{2/p} = q_i(w) + eta w_i^{2/p-1}``."""
    w = np.asarray(w, dtype=float)
    q = lewis_q(A, w, p)
    return float(np.max(np.abs(w ** (2.0 / p) - q - eta * w ** (2.0 / p - 1.0))))


def lewis_relative_residual(A, w, p: float, eta: float = 0.0) -> float:
    """Largest relative gap between w and ``sigma(W^{1/2-1/p} A) + eta``."""
    w = np.asarray(w, dtype=float)
    q = lewis_q(A, w, p)
    target = q * w ** (1.0 - 2.0 / p) + eta
    return float(np.max(np.abs(w - target) / target))


def lewis_contraction(p: float) -> float:
    return abs(p / 2.0 - 1.0)


def lewis_eps1(p: float, eps: float) -> float:
    """Per-step accuracy used for the approximate map (case split on p)."""
    return p * eps / 4.0 if p <= 2 else eps * (4.0 - p) / 4.0


def predicted_lewis_iterations(p: float, eta: float, eps: float) -> int:
    """``ceil(log(1/(eta eps p)) / (1 - |p/2 - 1|))``; eta = 0 is counted as eta = eps."""
    eta_eff = eta if eta > 0 else eps
    return max(1, math.ceil(math.log(1.0 / (eta_eff * eps * p)) / (1.0 - lewis_contraction(p))))


def tilde_map_ok(q_approx, q_exact, p: float, eps: float, eta: float, n: int) -> bool:
    """Whether approximate quotients satisfy the tolerance of the approximate map."""
    e1 = lewis_eps1(p, eps)
    slack = eta ** (2.0 / p) / n ** 2 if eta > 0 else 0.0
    q_approx = np.asarray(q_approx)
    q_exact = np.asarray(q_exact)
    return bool(np.all(np.abs(q_approx - q_exact) <= (math.exp(e1) - 1) * q_exact + slack + 1e-15))


def lewis_fixed_point(A, p: float, eta: float = 0.0, eps: float = 1e-8, max_iters: int = 1000,
                      w0=None, q_oracle: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                      keep_history: bool = False) -> LewisWeightVector:
    """Iterate the (regularized) Lewis map from ``eta * 1`` to its fixed point.

    Parameters
    ----------
    A : (n, d) array
    p : float
        Exponent, ``0 < p < 4``.
    eta : float
        Regularizer; the fixed point satisfies ``w = sigma(W^{1/2-1/p} A) + eta``.
    eps : float
        Stop once the absolute residual (see :func:`lewis_residual`) and the
        relative gap (see :func:`lewis_relative_residual`) are both at most eps.
    q_oracle : callable, optional
        Replacement for the exact quotients ``q_i(w)``, used when the
        quotients are estimated over a network.
    """
    if not 0 < p < 4:
        raise ValueError("Lewis weights need 0 < p < 4")
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if w0 is None:
        w = np.full(n, eta if eta > 0 else 1.0)
    else:
        w = np.asarray(w0, dtype=float).copy()
    hist = [w.copy()] if keep_history else []
    for it in range(1, max_iters + 1):
        q = q_oracle(w) if q_oracle is not None else lewis_q(A, w, p)
        w = lewis_map(A, w, p, eta, q)
        if keep_history:
            hist.append(w.copy())
        res = lewis_residual(A, w, p, eta)
        if res <= eps and lewis_relative_residual(A, w, p, eta) <= eps:
            return LewisWeightVector(w, p, eta, res, it, hist)
    res = lewis_residual(A, w, p, eta)
    raise NonConvergence(f"residual {res:.3e} > {eps:.1e} after {max_iters} iterations")


def lewis_weights(A, p: float, eps: float = 1e-10, max_iters: int = 2000) -> np.ndarray:
    """Unregularized Lewis weights (``eta = 0``)."""
    return lewis_fixed_point(A, p, 0.0, eps, max_iters).w
