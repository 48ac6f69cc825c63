"""Oblivious sketches: Rademacher/JL maps, p-stable norm sketches with rounded
entries, exponential-scaling l_p samplers and the l_{p,2} block procedures."""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Optional

import numpy as np

from .commsim import COORDINATOR, Message, Network, quantize, uvarint_bits


class ZeroVector(ValueError):
    pass


class ZeroProductMatrix(ValueError):
    pass


# ---------------------------------------------------------------------------
# Rademacher / JL
# ---------------------------------------------------------------------------

def rademacher(r: int, n: int, rng: np.random.Generator, normalize: bool = True) -> np.ndarray:
    """``r x n`` matrix with entries +-1/sqrt(r) (or +-1 when ``normalize`` is false)."""
    G = rng.integers(0, 2, size=(r, n), dtype=np.int8).astype(float) * 2.0 - 1.0
    return G / math.sqrt(r) if normalize else G


def jl_estimate_norm(x, r: int, seed=0) -> float:
    """``||G x / sqrt(r)||^2`` for a Rademacher G; unbiased for ``||x||^2``."""
    if r < 1:
        raise ValueError("need at least one row")
    x = np.asarray(x, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    G = rademacher(r, x.size, rng)
    return float(np.sum((G @ x) ** 2))


def jl_failure_bound(eps: float, r: int) -> float:
    """``2 exp(-(eps^2 - eps^3) r / 4)``."""
    return 2.0 * math.exp(-(eps ** 2 - eps ** 3) * r / 4.0)


# ---------------------------------------------------------------------------
# p-stable variates and norm sketches
# ---------------------------------------------------------------------------

def gaussian_abs_moment(p: float) -> float:
    """``E|N(0,1)|^p = 2^{p/2} Gamma((p+1)/2) / sqrt(pi)``."""
    return 2.0 ** (p / 2.0) * math.gamma((p + 1.0) / 2.0) / math.sqrt(math.pi)


def c_p(p: float) -> float:
    """``1 / E|N(0,1)|^p``; equals sqrt(pi/2) at p = 1 and 1 at p = 2."""
    if p == 1:
        return math.sqrt(math.pi / 2.0)
    if p == 2:
        return 1.0
    return 1.0 / gaussian_abs_moment(p)


def stable(p: float, size, rng: np.random.Generator) -> np.ndarray:
    """Symmetric p-stable variates (Gaussian, Cauchy, or Chambers-Mallows-Stuck)."""
    if not 0 < p <= 2:
        raise ValueError("p-stable variates need 0 < p <= 2")
    if p == 2:
        return rng.standard_normal(size)
    if p == 1:
        return rng.standard_cauchy(size)
    V = rng.uniform(-math.pi / 2, math.pi / 2, size)
    W = rng.exponential(1.0, size)
    return (np.sin(p * V) / np.cos(V) ** (1.0 / p)
            * (np.cos((1.0 - p) * V) / W) ** ((1.0 - p) / p))


@lru_cache(maxsize=None)
def stable_abs_median(p: float) -> float:
    """Median of ``|X|`` for the variates of :func:`stable`."""
    if p == 2:
        return 0.6744897501960817
    if p == 1:
        return 1.0
    rng = np.random.default_rng(20240917)
    return float(np.median(np.abs(stable(p, 2_000_000, rng))))


def norm_sketch_rows(eps: float, delta: float, const: float = 6.0) -> int:
    return max(3, math.ceil(const * eps ** -2 * math.log(2.0 / delta)))


class LpNormSketch:
    """``m x n`` matrix of p-stable variates rounded to ``frac_bits`` fraction bits.

    The estimate of ``||x||_p`` is ``median|Sx| / median|X|``.  The rounding
    error per entry is at most ``eps / (2 sqrt(n))``.
    """

    def __init__(self, n: int, p: float, eps: float, delta: float, rng: np.random.Generator,
                 const: float = 6.0, m: Optional[int] = None):
        if not 1 <= p <= 2:
            raise ValueError("norm sketches are provided for 1 <= p <= 2")
        self.n, self.p, self.eps = n, p, eps
        self.m = m if m is not None else norm_sketch_rows(eps, delta, const)
        self.frac_bits = max(1, math.ceil(math.log2(math.sqrt(max(n, 1)) / eps)) + 1)
        self.raw = stable(p, (self.m, n), rng)
        self.S = np.round(self.raw * 2.0 ** self.frac_bits) / 2.0 ** self.frac_bits
        self.med = stable_abs_median(p)

    def apply(self, x, rounded: bool = True) -> np.ndarray:
        return (self.S if rounded else self.raw) @ np.asarray(x, dtype=float)

    def estimate(self, sx) -> float:
        """Estimate of ``||x||_p`` from ``S x`` (columnwise for matrices)."""
        return np.median(np.abs(sx), axis=0) / self.med


def lp_norm_estimate(x, p: float, eps: float, delta: float, seed=0, const: float = 6.0) -> float:
    """Median estimator of ``||x||_p`` from a rounded p-stable sketch."""
    x = np.asarray(x, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sk = LpNormSketch(x.size, p, eps, delta, rng, const)
    return float(sk.estimate(sk.apply(x)))


# ---------------------------------------------------------------------------
# l_p sampler: exponential scaling + count-sketch recovery
# ---------------------------------------------------------------------------

def sampler_shape(n: int) -> tuple[int, int]:
    """(repetitions, buckets) of the count sketch: O(log n) x O(log^2 n)."""
    lg = max(1, math.ceil(math.log2(max(n, 2))))
    return 2 * lg + 1, max(16, 8 * lg * lg)


class LpSampler:
    """Linear sketch from which an index i is drawn with probability ~ |x_i|^p / ||x||_p^p.

    The input is scaled by ``E_i^{-1/p}`` with ``E_i ~ Exp(1)``; the index of
    the largest scaled coordinate has exactly the l_p distribution, and a
    count sketch recovers it.  A companion norm sketch gives the probability
    estimate.
    """

    def __init__(self, n: int, p: float, rng: np.random.Generator, nu: float = 0.1,
                 delta: float = 0.05, norm_const: float = 6.0, with_norm: bool = True):
        if not 1 <= p <= 2:
            raise ValueError("l_p samplers are provided for 1 <= p <= 2")
        self.n, self.p = n, p
        self.reps, self.buckets = sampler_shape(n)
        self.scale = rng.exponential(1.0, n) ** (-1.0 / p)
        self.h = rng.integers(0, self.buckets, size=(self.reps, n))
        self.sgn = rng.integers(0, 2, size=(self.reps, n)) * 2.0 - 1.0
        self.norm = LpNormSketch(n, p, nu / (2 * p), delta, rng, norm_const) if with_norm else None

    @property
    def rows(self) -> int:
        return self.reps * self.buckets + (self.norm.m if self.norm is not None else 0)

    def sketch(self, x) -> np.ndarray:
        """Concatenated count sketch and norm sketch (linear in x)."""
        x = np.asarray(x, dtype=float)
        flat = (np.arange(self.reps)[:, None] * self.buckets + self.h).ravel()
        w = (self.sgn * (self.scale * x)[None, :]).ravel()
        cs = np.bincount(flat, weights=w, minlength=self.reps * self.buckets)
        parts = [cs]
        if self.norm is not None:
            parts.append(self.norm.apply(x))
        return np.concatenate(parts)

    def recover(self, sk) -> tuple[int, float]:
        sk = np.asarray(sk, dtype=float)
        k = self.reps * self.buckets
        cs = sk[:k].reshape(self.reps, self.buckets)
        est = np.median(self.sgn * cs[np.arange(self.reps)[:, None], self.h], axis=0)
        i = int(np.argmax(np.abs(est)))
        if np.abs(est[i]) == 0:
            raise ZeroVector("sketch of the zero vector")
        prob = float("nan")
        if self.norm is not None:
            xi = abs(est[i]) / self.scale[i]
            nrm = float(self.norm.estimate(sk[k:]))
            prob = xi ** self.p / nrm ** self.p if nrm > 0 else float("nan")
        return i, prob


def lp_sample(x, p: float, nu: float = 0.1, seed=0) -> tuple[int, float]:
    """Draw one index with probability ~ |x_i|^p/||x||_p^p; returns (index, probability estimate)."""
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        raise ZeroVector("cannot sample from the zero vector")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    smp = LpSampler(x.size, p, rng, nu)
    return smp.recover(smp.sketch(x))


def _batched_indices(Y: np.ndarray, p: float, rng: np.random.Generator,
                     chunk: int = 512) -> np.ndarray:
    """Count-sketch argmax recovery for each row of ``Y`` with fresh randomness per row."""
    if Y.shape[0] > chunk:
        return np.concatenate([_batched_indices(Y[i:i + chunk], p, rng, chunk)
                               for i in range(0, Y.shape[0], chunk)])
    D, n = Y.shape
    reps, B = sampler_shape(n)
    scale = rng.exponential(1.0, (D, n)) ** (-1.0 / p)
    h = rng.integers(0, B, size=(D, reps, n), dtype=np.int32)
    sgn = rng.integers(0, 2, size=(D, reps, n), dtype=np.int8) * 2.0 - 1.0
    Z = Y * scale
    flat = (np.arange(D)[:, None, None] * (reps * B) + np.arange(reps)[None, :, None] * B + h)
    cs = np.bincount(flat.ravel(), weights=(sgn * Z[:, None, :]).ravel(), minlength=D * reps * B)
    cs = cs.reshape(D, reps * B)
    gathered = np.take_along_axis(cs, (np.arange(reps)[None, :, None] * B + h).reshape(D, -1),
                                  axis=1).reshape(D, reps, n)
    est = np.median(sgn * gathered, axis=1)
    return np.argmax(np.abs(est), axis=1)


def lp_sample_many(x, p: float, draws: int, seed=0, nu: float = 0.1):
    """``draws`` independent l_p samples (vectorized); returns (indices, probability estimates)."""
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        raise ZeroVector("cannot sample from the zero vector")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = _batched_indices(np.broadcast_to(x, (draws, x.size)), p, rng)
    nrm = lp_norm_estimate(x, p, nu / (2 * p), 0.05, rng)
    probs = np.abs(x[idx]) ** p / nrm ** p
    return idx, probs


# ---------------------------------------------------------------------------
# l_{p,2} procedures between one machine (holding X) and the coordinator (holding M)
# ---------------------------------------------------------------------------

def _rows_r(n: int, eps: float, delta: float) -> int:
    return max(1, math.ceil(eps ** -2 * (math.log(max(n, 2)) + math.log(1.0 / delta))))


def _ensure_net(net: Optional[Network], seed) -> Network:
    return net if net is not None else Network(1, seed=seed if isinstance(seed, int) else 0)


def lp2_norm_estimate(X, M, p: float, eps: float, delta: float, net: Optional[Network] = None,
                      machine: int = 0, L: int = 16, seed=0, tag: str = "lp2norm",
                      const: float = 6.0) -> float:
    """Estimate ``||X M||_{p,2}^p`` (sum over rows of ``||x_i^T M||_2^p``).

    The machine sends ``S X`` for a rounded p-stable sketch S; the
    coordinator averages the norm estimates of ``X M g_j`` over Gaussian
    ``g_j ~ c_p^{1/p} N(0, I)``.
    """
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=float)
    net = _ensure_net(net, seed)
    n, d = X.shape
    if n == 0:
        return 0.0
    r = _rows_r(n, eps, delta)
    # the sketch error is shared by all r estimates, so it gets half the budget
    sk = LpNormSketch(n, p, eps / 2.0, delta, net.shared_rng(tag + ":S", machine), const)
    SX = sk.apply(X)
    frac = L + sk.frac_bits
    msg = Message.fitted(tag + ":SX", SX, frac)
    SX = np.asarray(net.upload(machine, msg)).reshape(sk.m, d)
    G = net.rng(tag + ":g").standard_normal((d, r)) * c_p(p) ** (1.0 / p)
    ests = sk.estimate(SX @ (M @ G))
    return float(np.mean(ests ** p))


def _sampler_sketch_bits(n_lift: int, d_lift: int, frac: int, int_bits: int) -> int:
    reps, B = sampler_shape(n_lift)
    rows = reps * B
    return uvarint_bits(rows) + uvarint_bits(d_lift) + rows * d_lift * (1 + int_bits + frac)


def sketch_draw_bits(n: int, d: int, eps: float, delta: float, L: int, entry_bound: float) -> int:
    """Bits of the sampler sketch ``S X'`` that one l_{p,2} draw sends for an n x d block."""
    r = _rows_r(n, eps, delta)
    frac = L + math.ceil(math.log2(n * r / eps)) + 1
    int_bits = max(1, math.ceil(math.log2(1 + entry_bound * n * r)) + 8)
    return _sampler_sketch_bits(n * r, d * r, frac, int_bits)


def sample_from_block_many(X, M, p: float, eps: float, delta: float, draws: int,
                           net: Optional[Network] = None, machine: int = 0, L: int = 16,
                           norm_estimate: Optional[float] = None, seed=0, tag: str = "sfb",
                           const: float = 6.0, n_total: Optional[int] = None,
                           entry_bound: Optional[float] = None):
    """Run the l_{p,2} sampling procedure ``draws`` times.

    Each draw lifts X to ``X (x) I_r``, sketches it with a fresh l_p sampler,
    lets the coordinator multiply by ``(M (x) I_r) g`` and recovers an index
    of the lifted vector; the row owning that index is then requested.  The
    row's probability estimate uses ``norm_estimate`` (or a fresh
    :func:`lp2_norm_estimate`).  ``n_total`` sizes the lift and the sampler
    for a matrix of that many rows (the whole partitioned matrix), so that
    the per-draw cost does not depend on how rows are split over machines.
    ``entry_bound`` is a public bound on ``|X_ij|`` that fixes the integer
    width of the sketch (default: the largest entry of X).

    Returns
    -------
    idx : (draws,) int array
    rows : (draws, d) array of the rows as received
    p_hat : (draws,) array of probability estimates
    """
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=float)
    net = _ensure_net(net, seed)
    n, d = X.shape
    XM = X @ M
    if not np.any(XM):
        raise ZeroProductMatrix("X M is zero")
    n_dim = max(n, n_total or 0)
    r = _rows_r(n_dim, eps, delta)
    if norm_estimate is None:
        norm_estimate = lp2_norm_estimate(X, M, p, eps, delta, net, machine, L, tag=tag + ":norm",
                                          const=const)
    rng = net.rng(tag + ":draw")
    G = rng.standard_normal((draws, d, r)) * c_p(p) ** (1.0 / p)
    # X' M' g evaluated blockwise: entry (i, j) of the lifted vector is (X M G)_{ij}
    Y = np.einsum("ik,bkr->bir", XM, G).reshape(draws, n * r)
    lifted = _batched_indices(Y, p, rng)
    idx = lifted // r
    # wire accounting: S X' per draw, then the row request and the row itself
    bound = float(np.max(np.abs(X))) if entry_bound is None else float(entry_bound)
    sk_bits = sketch_draw_bits(n_dim, d, eps, delta, L, bound)
    rows = np.empty((draws, d))
    for b in range(draws):
        net.upload(machine, Message.raw(tag + ":SX'", None, sk_bits))
        net.download(machine, Message.indices(tag + ":req", [int(idx[b])]))
        rows[b] = net.upload(machine, Message.vector(tag + ":row", X[idx[b]], L))
    p_hat = np.linalg.norm(rows @ M, axis=1) ** p / norm_estimate
    return idx, rows, p_hat


def sample_from_block(X, M, p: float, eps: float, delta: float, net: Optional[Network] = None,
                      machine: int = 0, L: int = 16, norm_estimate: Optional[float] = None,
                      seed=0, tag: str = "sfb"):
    """Single draw of :func:`sample_from_block_many`; returns (k, x_k, p_hat)."""
    idx, rows, ph = sample_from_block_many(X, M, p, eps, delta, 1, net, machine, L,
                                           norm_estimate, seed, tag)
    return int(idx[0]), rows[0], float(ph[0])


def row_distribution(X, M, p: float) -> np.ndarray:
    """Exact target distribution ``||x_i^T M||^p / ||X M||_{p,2}^p``."""
    v = np.linalg.norm(np.asarray(X) @ np.asarray(M), axis=1) ** p
    return v / v.sum()
