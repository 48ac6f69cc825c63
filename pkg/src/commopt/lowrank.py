"""Distributed rank-k approximation.

Machines multiply their blocks by a shared Rademacher matrix R, leverage
scores of ``A R`` select a few rows, and the coordinator solves a small
rank-constrained least-squares problem on the selected rows of ``A R`` and
``A``.  The returned projection is onto the row space of ``R X``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np

from .commsim import Message, Network, RowPartitionedMatrix
from .config import get_preset
from .embed import refinement_overestimates
from .leverage import sample_probabilities
from .sketching import rademacher


@dataclass
class ProjectionResult:
    """Orthogonal projection ``Pi = V V^T`` stored through its orthonormal factor V."""

    V: np.ndarray
    k: int
    bits: int
    rounds: int
    rows: int

    @property
    def Pi(self) -> np.ndarray:
        return self.V @ self.V.T

    def error(self, A) -> float:
        A = np.asarray(A, dtype=float)
        return float(np.linalg.norm(A - A @ self.V @ self.V.T))


def best_rank_k_error(A, k: int) -> float:
    """``||A - A_k||_F`` from the singular values."""
    sv = np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)
    return float(np.sqrt(np.sum(sv[k:] ** 2)))


def rank_k_least_squares(B, C, k: int) -> np.ndarray:
    """``argmin_{rank(X) <= k} ||B X - C||_F`` via ``B^+ [U U^T C]_k`` with U a basis of range(B)."""
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    U, sv, _ = np.linalg.svd(B, full_matrices=False)
    U = U[:, sv > 1e-12 * max(sv.max(initial=0.0), 1e-300)]
    P = U @ (U.T @ C)
    u, sp, vt = np.linalg.svd(P, full_matrices=False)
    Pk = (u[:, :k] * sp[:k]) @ vt[:k]
    return np.linalg.pinv(B) @ Pk


def sketch_columns(k: int, eps: float, d: int) -> int:
    """``k + ceil(k/eps)`` Rademacher columns, at most d."""
    return min(d, k + math.ceil(k / eps))


def low_rank_projection(A: RowPartitionedMatrix, net: Network, k: int, eps: float = 0.5,
                        delta: float = 0.1, preset=None, kappa: float = 1e3,
                        tag: str = "lowrank") -> ProjectionResult:
    """Rank-k projection with ``||A Pi - A||_F <= (1+eps) ||A - A_k||_F`` w.p. >= const."""
    preset = get_preset(preset)
    n, d, L = A.n, A.d, A.L
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    m = sketch_columns(k, eps, d)
    R = rademacher(d, m, net.shared_rng(tag + ":R"), normalize=False)
    # A R has entries on the same 2^-L grid; its integer part grows by log2(d)
    ib = (A.L if A.int_bits is None else A.int_bits) + math.ceil(math.log2(d)) + 1
    AR = RowPartitionedMatrix([B @ R for B in A.blocks], L, ib)
    over = refinement_overestimates(AR, net, preset.sample_c, kappa, preset,
                                    tag=tag + ":lev") if n >= 5 else None
    alpha = max(1.0, 1.0 / eps)
    offs = A.offsets
    SAR, SA = [], []
    for i in range(A.s):
        ni = A.blocks[i].shape[0]
        if over is None:
            keep = np.arange(ni)
            w = np.ones(ni)
        else:
            u = over.blocks[i]
            pr = sample_probabilities(u, alpha, preset.sample_c, m)
            keep = np.flatnonzero(net.rng(tag + ":S", i).random(ni) < pr)
            w = 1.0 / np.sqrt(pr[keep])
            if keep.size:
                net.upload(i, Message.varints(tag + ":exp", over.exponents[offs[i] + keep]))
        if keep.size == 0:
            continue
        rar = np.asarray(net.upload(i, Message.fitted(tag + ":SAR", AR.blocks[i][keep], L)))
        ra = np.asarray(net.upload(i, Message.matrix(tag + ":SA", A.blocks[i][keep], L, A.int_bits)))
        SAR.append(rar.reshape(-1, m) * w[:, None])
        SA.append(ra.reshape(-1, d) * w[:, None])
    net.round_barrier()
    B = np.vstack(SAR) if SAR else np.zeros((0, m))
    C = np.vstack(SA) if SA else np.zeros((0, d))
    X = rank_k_least_squares(B, C, k)
    Y = R @ X                                   # d x d, rank <= k
    U, sv, _ = np.linalg.svd(Y.T, full_matrices=False)
    r = int(min(k, np.sum(sv > 1e-12 * max(sv.max(initial=0.0), 1e-300))))
    V = U[:, :r]
    net.broadcast(Message.float64(tag + ":V", V))
    return ProjectionResult(V, k, net.ledger.total_bits, net.ledger.rounds, int(B.shape[0]))
