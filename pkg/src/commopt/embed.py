"""Distributed subspace-embedding protocols over the metered network.

* block leverage estimation and block leverage sampling,
* relative Lewis weight sampling with outlier handling, and the recursive
  ``ApproxLewisForm`` built on it,
* refinement sampling for leverage score overestimates, with rounded JL
  sketches and a modular kernel-membership test.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .commsim import (COORDINATOR, Message, Network, RowPartitionedMatrix, quantize,
                      uvarint_bits)
from .config import Preset, get_preset
from .leverage import (block_leverage, generalized_leverage, leverage_exact, lewis_quadratic_form,
                       lewis_weights, log_d, pencil_bounds, psd_pinv, psd_sqrt, ridge_leverage,
                       sample_probabilities)
from .sketching import (lp2_norm_estimate, rademacher, sample_from_block_many,
                        sketch_draw_bits)


class InvalidDistribution(ValueError):
    pass


class NoMass(ValueError):
    pass


class OutlierOverflow(RuntimeError):
    pass


class RankCollapse(RuntimeError):
    pass


class KernelTestInconclusive(RuntimeError):
    pass


@dataclass
class SpectralApprox:
    """Rescaled sampled rows with the factor they are claimed to satisfy."""

    rows: np.ndarray
    lam: float
    index: Optional[np.ndarray] = None

    def gram(self) -> np.ndarray:
        return self.rows.T @ self.rows

    def bounds(self, A) -> tuple[float, float]:
        """Extreme generalized eigenvalues of (rows^T rows, A^T A)."""
        A = np.asarray(A, dtype=float)
        return pencil_bounds(self.gram(), A.T @ A)


# ---------------------------------------------------------------------------
# block leverage scores
# ---------------------------------------------------------------------------

@dataclass
class BlockScoreList:
    L: np.ndarray
    active_sets: list
    rounds: int
    rows_sent: int


def estimate_block_leverages(A: RowPartitionedMatrix, net: Network, preset=None,
                             C: Optional[float] = None, tag: str = "blkest") -> BlockScoreList:
    """Block leverage overestimates from sketches of doubling size.

    In round r every still-active machine sends ``S_{r,i} A^(i)`` with
    ``ceil(c k_r)`` rows (``k_r = 2^r``), or its block itself when that is
    smaller.  Blocks whose score in the stacked sketch drops below ``C k_r``
    are finalized; blocks that are never finalized get ``d``.
    """
    preset = get_preset(preset)
    C = preset.block_C if C is None else C
    s, d = A.s, A.d
    L = np.full(s, np.nan)
    active = list(range(s))
    sets = [list(active)]
    rows_sent = 0
    rounds = 0
    for r in range(math.ceil(math.log2(d)) + 1 if d > 1 else 1):
        if not active:
            break
        k = 2 ** r
        m = math.ceil(preset.block_sketch_c * k)
        parts = []
        for i in active:
            Ai = A.blocks[i]
            if Ai.shape[0] <= m:
                SA = Ai
                frac = A.L
            else:
                S = net.rng(tag + ":S", i).standard_normal((m, Ai.shape[0])) / math.sqrt(m)
                SA = S @ Ai
                frac = A.L + 8
            got = net.upload(i, Message.fitted(tag + ":SA", SA, frac))
            got = np.asarray(got).reshape(-1, d)
            rows_sent += got.shape[0]
            parts.append(got)
        est = block_leverage(np.vstack(parts), [p.shape[0] for p in parts])
        nxt = []
        for i, e in zip(active, est):
            if e >= C * k:
                nxt.append(i)
            else:
                L[i] = e
        # at most d / (C k_r) blocks can stay active
        assert len(nxt) <= d / (C * k) + 1e-9
        active = nxt
        sets.append(list(active))
        net.round_barrier()
        rounds += 1
    L[np.isnan(L)] = d
    return BlockScoreList(L, sets, rounds, rows_sent)


def block_sample_size(d: int, beta: float, eps: float, const: float = 1.0) -> int:
    """``const * d/(beta eps^2) * log(d/(beta eps)) * log d`` samples."""
    return max(1, math.ceil(const * d / (beta * eps ** 2) * max(1.0, math.log(d / (beta * eps)))
                            * log_d(d)))


def block_lev_sample(A: RowPartitionedMatrix, net: Network, p, N: int, eps: float = 0.5,
                     tag: str = "blksmp") -> SpectralApprox:
    """Sample N Rademacher combinations ``g^T A^(j)/sqrt(N p_j)`` with j ~ p."""
    p = np.asarray(p, dtype=float)
    if p.shape != (A.s,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
        raise InvalidDistribution("block probabilities must be a distribution over machines")
    rng = net.rng(tag + ":j")
    js = rng.choice(A.s, size=N, p=p)
    rows = np.zeros((N, A.d))
    for j in range(A.s):
        where = np.flatnonzero(js == j)
        if where.size == 0:
            continue
        net.download(j, Message.varint(tag + ":count", where.size))
        g = rademacher(where.size, A.blocks[j].shape[0], net.rng(tag + ":g", j), normalize=False)
        got = net.upload(j, Message.fitted(tag + ":gA", g @ A.blocks[j], A.L))
        rows[where] = np.asarray(got).reshape(-1, A.d) / math.sqrt(N * p[j])
    net.round_barrier()
    return SpectralApprox(rows, (1 + eps) / (1 - eps))


# ---------------------------------------------------------------------------
# relative Lewis weight sampling
# ---------------------------------------------------------------------------

@dataclass
class RelativeSample:
    rows: np.ndarray           # rescaled rows
    index: np.ndarray          # global row indices
    prob: np.ndarray           # estimated sampling probability of each draw
    raw_rows: np.ndarray       # rows before rescaling
    outliers: list             # global indices of outlying rows
    q: float
    F: np.ndarray


def _active_blocks(A: RowPartitionedMatrix, active) -> list[np.ndarray]:
    if active is None:
        return [np.arange(B.shape[0]) for B in A.blocks]
    return [np.asarray(a, dtype=int) for a in active]


def relative_lewis_sampling(A: RowPartitionedMatrix, net: Network, M, p: float, delta: float,
                            N: int, T: int, eps: float = 0.5, active=None, preset=None,
                            tag: str = "rls", sampler: str = "auto") -> RelativeSample:
    """Draw N rows with probability ~ ``v_i = min(||M a_i||^p, 1)`` and rescale them.

    ``active`` optionally restricts each machine to a subset of its local rows.
    Rows with ``||M a||_2 >= 1`` are located by repeated l_{p,2} sampling and
    then sampled uniformly with total mass equal to their count.

    Each machine either answers every draw with an l_{p,2} sampler sketch, or
    receives M once and samples its rows exactly.  The coordinator picks the
    cheaper option per machine from the estimated mass ``F_j`` and the public
    message sizes, so the total never exceeds the sketch-only protocol.
    ``sampler`` forces one option (``"sketch"`` or ``"direct"``) instead.
    """
    if sampler not in ("auto", "sketch", "direct"):
        raise ValueError("sampler must be 'auto', 'sketch' or 'direct'")
    preset = get_preset(preset)
    M = np.asarray(M, dtype=float)
    act = [a.copy() for a in _active_blocks(A, active)]
    offs = A.offsets
    s, L = A.s, A.L
    # public magnitude bound of the fixed-point entries; it fixes sketch widths
    bound = 2.0 ** (L if A.int_bits is None else A.int_bits)

    def F_of(j):
        X = A.blocks[j][act[j]]
        if X.shape[0] == 0 or not np.any(X @ M):
            return 0.0
        return lp2_norm_estimate(X, M, p, eps, 0.5, net, j, L, tag=f"{tag}:F")

    F = np.array([F_of(j) for j in range(s)])
    net.round_barrier()
    loops = math.ceil(preset.outlier_const * T * math.log(T + 1) * math.log(1.0 / delta))
    # per machine, the cheaper of a sampler sketch per draw and one copy of M
    sk_bits = sketch_draw_bits(A.n, A.d, 0.5, 0.5, L, bound)
    m_bits = 64 * M.size
    expected = (loops + N) * F / F.sum() if F.sum() > 0 else np.zeros(s)
    direct = expected * sk_bits > m_bits
    if sampler != "auto":
        direct[:] = sampler == "direct"
    has_M = np.zeros(s, dtype=bool)

    def exact_F(j):
        X = A.blocks[j][act[j]]
        v = float(np.sum(np.linalg.norm(X @ M, axis=1) ** p)) if X.shape[0] else 0.0
        return float(net.upload(j, Message.float64(f"{tag}:Fx", [v]))[0])

    def draw(j, count, name):
        """``count`` rows of machine j; returns (positions in act[j], rows, within-block prob)."""
        X = A.blocks[j][act[j]]
        if not direct[j]:
            return sample_from_block_many(X, M, p, 0.5, 0.5, count, net, j, L, F[j],
                                          tag=f"{tag}:{name}", n_total=A.n, entry_bound=bound)
        if not has_M[j]:
            net.download(j, Message.float64(f"{tag}:M", M))
            has_M[j] = True
            F[j] = exact_F(j)
        v = np.linalg.norm(X @ M, axis=1) ** p
        k = net.rng(f"{tag}:{name}:local", j).choice(X.shape[0], size=count, p=v / v.sum())
        net.upload(j, Message.indices(f"{tag}:{name}:idx", k.tolist()))
        got = np.asarray(net.upload(j, Message.matrix(f"{tag}:{name}:rows", X[k], L, A.int_bits)))
        return k, got.reshape(count, A.d), v[k] / F[j]

    outliers: list[tuple[int, int]] = []
    out_rows: list[np.ndarray] = []
    rng = net.rng(tag + ":loop")
    for _ in range(loops):
        if F.sum() <= 0:
            break
        j = int(rng.choice(s, p=F / F.sum()))
        k, got, _ = draw(j, 1, "loop")
        k, row = int(k[0]), got[0]
        if float(row @ M @ M.T @ row) >= 1.0:
            outliers.append((j, int(act[j][k])))
            out_rows.append(row)
            if len(outliers) > T:
                raise OutlierOverflow(f"more than T={T} outlying rows")
            net.download(j, Message.indices(f"{tag}:drop", [int(act[j][k])]))
            act[j] = np.delete(act[j], k)
            F[j] = exact_F(j) if has_M[j] else F_of(j)
    net.round_barrier()
    n_out = len(outliers)
    if n_out == 0 and F.sum() <= 0:
        raise NoMass("every row has zero weight")
    q = n_out / (n_out + F.sum())
    is_out = rng.random(N) < q
    rows = np.zeros((N, A.d))
    prob = np.zeros(N)
    gidx = np.zeros(N, dtype=int)
    if n_out:
        pick = rng.integers(0, n_out, size=int(is_out.sum()))
        where = np.flatnonzero(is_out)
        rows[where] = np.asarray(out_rows)[pick]
        prob[where] = q / n_out
        gidx[where] = [offs[outliers[t][0]] + outliers[t][1] for t in pick]
    rest = np.flatnonzero(~is_out)
    if rest.size:
        servers = rng.choice(s, size=rest.size, p=F / F.sum())
        for j in range(s):
            where = rest[servers == j]
            if where.size == 0:
                continue
            k, got, ph = draw(j, where.size, "draw")
            rows[where] = got
            prob[where] = (1 - q) * F[j] / F.sum() * ph
            gidx[where] = offs[j] + act[j][k]
    net.round_barrier()
    scaled = rows * (N * prob)[:, None] ** (-1.0 / p)
    return RelativeSample(scaled, gidx, prob, rows, [int(offs[j] + i) for j, i in outliers], q, F)


def relative_target(A, M, p: float) -> np.ndarray:
    """Exact distribution ``v / sum(v)`` with ``v_i = min(||M a_i||^p, 1)``."""
    v = np.minimum(np.linalg.norm(np.asarray(A) @ np.asarray(M), axis=1) ** p, 1.0)
    return v / v.sum()


# ---------------------------------------------------------------------------
# ApproxLewisForm
# ---------------------------------------------------------------------------

@dataclass
class LewisFormResult:
    Q: np.ndarray
    levels: int
    rows: np.ndarray


def _restrict(A: RowPartitionedMatrix, gidx: np.ndarray) -> list[np.ndarray]:
    offs = A.offsets
    return [gidx[(gidx >= offs[j]) & (gidx < offs[j + 1])] - offs[j] for j in range(A.s)]


def approx_lewis_form(A: RowPartitionedMatrix, net: Network, p: float, preset=None,
                      N: Optional[int] = None, tag: str = "alf") -> LewisFormResult:
    """Constant-factor approximation of the Lewis quadratic form ``A^T W^{1-2/p} A``.

    Rows are halved uniformly (a shared random permutation, so the halving
    costs no communication) until fewer than 2d remain, so that every half
    still holds at least d rows; on the way back up each
    level samples ``N = O(d log d)`` rows relative to the form of the level below.
    """
    if not 1 <= p <= 2:
        raise ValueError("ApproxLewisForm is provided for 1 <= p <= 2")
    preset = get_preset(preset)
    d = A.d
    N = N or math.ceil(preset.lewis_rows_const * d * log_d(d))

    def base(gidx):
        rows = []
        for j, loc in enumerate(_restrict(A, gidx)):
            if loc.size:
                net.download(j, Message.indices(f"{tag}:req", loc.tolist()))
                rows.append(np.asarray(net.upload(j, Message.matrix(f"{tag}:rows",
                                                                    A.blocks[j][loc], A.L, A.int_bits))))
        R = np.vstack(rows) if rows else np.zeros((0, d))
        return R

    def form(R):
        if R.shape[0] == 0 or not np.any(R):
            return np.zeros((d, d))
        nz = np.linalg.norm(R, axis=1) > 0
        w = np.zeros(R.shape[0])
        # a constant-factor form is all that is needed; 1e-6 stays above the
        # round-off floor of nearly dependent rows (e.g. [A | b] with b in range(A))
        w[nz] = lewis_weights(R[nz], p, eps=1e-6)
        return lewis_quadratic_form(R[nz], w[nz], p)

    def rec(gidx, depth):
        if gidx.size < 2 * d:
            R = base(gidx)
            return form(R), depth, R
        for attempt in range(2):
            perm = net.shared_rng(f"{tag}:half:{depth}:{attempt}").permutation(gidx.size)
            half = np.sort(gidx[perm[: (gidx.size + 1) // 2]])
            Qh, lv, _ = rec(half, depth + 1)
            if np.linalg.matrix_rank(Qh) == d or attempt == 1:
                break
        if np.linalg.matrix_rank(Qh) < d:
            raise RankCollapse("a uniform half lost rank twice")
        Mh = psd_sqrt(psd_pinv(Qh))
        res = relative_lewis_sampling(A, net, Mh, p, 0.5, N, 2 * d, 0.5, _restrict(A, gidx),
                                      preset, tag=f"{tag}:{depth}")
        return form(res.rows), lv, res.rows

    Q, levels, rows = rec(np.arange(A.n), 0)
    return LewisFormResult(Q, levels, rows)


def lewis_embedding(A: RowPartitionedMatrix, net: Network, p: float, eps: float, delta: float,
                    preset=None, const: float = 2.0, tag: str = "lemb") -> RelativeSample:
    """l_p subspace embedding: ApproxLewisForm, then ``O(eps^-2 d log(d/delta))`` Lewis samples."""
    preset = get_preset(preset)
    d = A.d
    Q = approx_lewis_form(A, net, p, preset, tag=tag + ":alf").Q
    Mh = psd_sqrt(psd_pinv(Q))
    N = math.ceil(const * d * math.log(max(d, 2) / delta) / eps ** 2)
    return relative_lewis_sampling(A, net, Mh, p, 0.5, N, 2 * d, 0.5, None, preset,
                                   tag=tag + ":final")


# ---------------------------------------------------------------------------
# kernel tests
# ---------------------------------------------------------------------------

def integer_kernel_basis(rows: Sequence[Sequence[int]], d: int) -> list[list[int]]:
    """Integer basis of ``{x : R x = 0}`` for an integer matrix R (exact elimination)."""
    pivots: dict[int, list[Fraction]] = {}
    for row in rows:
        v = [Fraction(int(x)) for x in row]
        for col, prow in pivots.items():
            if v[col] != 0:
                f = v[col]
                v = [a - f * b for a, b in zip(v, prow)]
        nz = [k for k in range(d) if v[k] != 0]
        if not nz:
            continue
        col = nz[0]
        f = v[col]
        v = [a / f for a in v]
        for c2 in list(pivots):
            pr = pivots[c2]
            if pr[col] != 0:
                g = pr[col]
                pivots[c2] = [a - g * b for a, b in zip(pr, v)]
        pivots[col] = v
        if len(pivots) == d:
            return []
    free = [k for k in range(d) if k not in pivots]
    basis = []
    for fcol in free:
        x = [Fraction(0)] * d
        x[fcol] = Fraction(1)
        for col, pr in pivots.items():
            x[col] = -pr[fcol]
        den = 1
        for a in x:
            den = den * a.denominator // math.gcd(den, a.denominator)
        basis.append([int(a * den) for a in x])
    return basis


@lru_cache(maxsize=None)
def primes_below(m: int) -> tuple[int, ...]:
    """Sieve of Eratosthenes."""
    if m <= 2:
        return ()
    sieve = np.ones(m, dtype=bool)
    sieve[:2] = False
    for i in range(2, int(m ** 0.5) + 1):
        if sieve[i]:
            sieve[i * i::i] = False
    return tuple(int(x) for x in np.flatnonzero(sieve))


def _random_int(rng: np.random.Generator, bound_bits: int) -> int:
    """Uniform integer in ``[-2^bound_bits, 2^bound_bits]``."""
    span = 2 ** (bound_bits + 1) + 1
    nbytes = (span.bit_length() + 7) // 8 + 8
    return int.from_bytes(rng.bytes(nbytes), "big") % span - 2 ** bound_bits


@dataclass
class KernelTest:
    primes: list
    residues: list            # v mod y_k for each k
    v: list                   # exact combination (coordinator only, for audits)
    trivial: bool


def make_kernel_test(sub_rows: Sequence[Sequence[int]], d: int, L: int, z: int,
                     rng: np.random.Generator) -> KernelTest:
    """Random combination of an integer kernel basis, reduced modulo z random primes."""
    sub_rows = [list(map(int, r)) for r in sub_rows]
    basis = integer_kernel_basis(sub_rows, d) if _maybe_deficient(sub_rows, d) else []
    if not basis:
        return KernelTest([], [], [0] * d, True)
    v = [0] * d
    for b in basis:
        c = _random_int(rng, d * L)
        v = [a + c * x for a, x in zip(v, b)]
    pool = primes_below(max(3, (d * L) ** 2))
    ys = [int(pool[i]) for i in rng.integers(0, len(pool), size=z)]
    return KernelTest(ys, [[a % y for a in v] for y in ys], v, False)


def _maybe_deficient(rows, d) -> bool:
    if len(rows) < d:
        return True
    R = np.asarray(rows, dtype=float)
    sv = np.linalg.svd(R, compute_uv=False)
    return not (sv.size >= d and sv[d - 1] > 1e-8 * sv[0])


def kernel_membership(rows_int: np.ndarray, test: KernelTest, audit: bool = False) -> np.ndarray:
    """True where a row is orthogonal to the kernel (passes every modular check).

    With ``audit`` set, a row whose exact inner product with v is nonzero but
    vanishes modulo every prime raises :class:`KernelTestInconclusive`.
    """
    n = len(rows_int)
    if test.trivial:
        return np.ones(n, dtype=bool)
    R = np.asarray(rows_int, dtype=object)
    ok = np.ones(n, dtype=bool)
    for y, vk in zip(test.primes, test.residues):
        Ry = np.asarray([[int(a) % y for a in row] for row in R], dtype=np.int64)
        ok &= (Ry @ np.asarray(vk, dtype=np.int64)) % y == 0
    if audit:
        exact = np.array([sum(int(a) * b for a, b in zip(row, test.v)) != 0 for row in R])
        if np.any(exact & ok):
            raise KernelTestInconclusive("a nonzero inner product vanished modulo every prime")
    return ok


# ---------------------------------------------------------------------------
# refinement sampling for leverage score overestimates
# ---------------------------------------------------------------------------

@dataclass
class OverestimateResult:
    tau_hat: np.ndarray              # final overestimates, global order
    exponents: np.ndarray            # tau_hat = 1.01 * 2^exponents
    blocks: list                     # per-machine slices of tau_hat
    sums: list                       # ||tau_hat||_1 before each iteration and at the end
    ridge_ok: list = field(default_factory=list)   # per iteration, test mode only
    alphas: list = field(default_factory=list)


def _pow2_ceil_exponent(x: np.ndarray) -> np.ndarray:
    """Smallest k with 2^k >= x (exact for positive finite x)."""
    m, e = np.frexp(x)
    return np.where(m == 0.5, e - 1, e).astype(int)


def refinement_overestimates(A: RowPartitionedMatrix, net: Network, c: Optional[float] = None,
                             kappa: float = 1e3, preset=None, test_mode: bool = False,
                             audit: bool = False, tag: str = "refine") -> OverestimateResult:
    """Leverage score overestimates with ``||tau_hat||_1 <= 9d`` by refinement sampling.

    Works on the integer numerators of A (leverage scores are invariant under
    the common scale ``2^L``), which makes the kernel test exact.
    """
    preset = get_preset(preset)
    c = preset.sample_c if c is None else c
    n, d, s, L = A.n, A.d, A.s, A.L
    if n < 5:
        raise ValueError("the refinement protocol needs n >= 5")
    Xint = np.vstack(A.blocks) * 2.0 ** L          # integer-valued floats
    num = A.numerators()
    offs = A.offsets
    T = max(0, math.ceil(math.log2(n / d))) if n > d else 0
    r = math.ceil(preset.refine_r_const * math.log(n))
    z = math.ceil(preset.prime_count_const * math.log(n))
    lam = 1.0 / (100.0 * kappa ** 2)
    lam_int = lam * 4.0 ** L                         # ridge term at integer scale
    expo = np.zeros(n, dtype=int)
    floor_exp = _pow2_ceil_exponent(np.array([1.0 / (2 * n * n)]))[0]
    sums = [float(np.sum(2.0 ** expo))]
    ridge_ok, alphas = [], []
    tbits = math.ceil(math.log2(2 * n * n)) + 1
    for it in range(T):
        # (a)-(b): sums of the overestimates
        t = 0.0
        for i in range(s):
            ti = float(np.sum(2.0 ** expo[offs[i]:offs[i + 1]]))
            t += net.upload(i, Message.scalar(f"{tag}:t", ti, tbits, math.ceil(math.log2(n + 1))))
        net.broadcast(Message.scalar(f"{tag}:t", t, tbits, math.ceil(math.log2(n + 1))))
        net.round_barrier()
        # (c) sampling
        ratio = 25.0 * d * log_d(d) / t
        alpha_hat = 2.0 ** math.ceil(math.log2(ratio))
        alpha = min(1.0, alpha_hat / log_d(d))
        alphas.append(alpha)
        u = 1.01 * 2.0 ** expo
        sel_global = []
        for i in range(s):
            ui = u[offs[i]:offs[i + 1]]
            pi = sample_probabilities(ui, 9 * alpha, c, d)
            keep = np.flatnonzero(net.rng(f"{tag}:S", i).random(ui.size) < pi)
            net.upload(i, Message.fitted(f"{tag}:rows", A.blocks[i][keep], L)
                       if keep.size else Message.indices(f"{tag}:rows", []))
            net.upload(i, Message.varints(f"{tag}:exp", expo[offs[i] + keep]))
            sel_global.extend((offs[i] + keep).tolist())
        sel = np.asarray(sel_global, dtype=int)
        net.round_barrier()
        # (d) coordinator: A_tilde and B at integer scale
        psel = sample_probabilities(u[sel], 9 * alpha, c, d)
        At = math.sqrt(3 * alpha / 4) * Xint[sel] / np.sqrt(psel)[:, None]
        B = np.vstack([At, math.sqrt(lam_int) * np.eye(d)])
        BtB_inv = np.linalg.inv(B.T @ B)
        # (e) rounded JL sketch of B (B^T B)^-1
        G = rademacher(r, B.shape[0], net.rng(f"{tag}:G"), normalize=False)
        Ghat = math.sqrt(1.01) / (0.99 * math.sqrt(r)) * (G @ B @ BtB_inv)
        tol = 1.0 / (1e4 * n * n * d * math.sqrt(r) * 2.0 ** L)
        F = math.ceil(math.log2(1.0 / tol))
        J = np.asarray(net.broadcast(Message.fitted(f"{tag}:J", Ghat, F))).reshape(r, d)
        # (f) kernel test
        test = make_kernel_test([num[j] for j in sel], d, L, z, net.rng(f"{tag}:ker"))
        if not test.trivial:
            kbits = sum(uvarint_bits(y) + d * max(1, y.bit_length()) for y in test.primes)
            net.broadcast(Message.raw(f"{tag}:kernel", test.residues, kbits))
        net.round_barrier()
        # (g) machines update their overestimates
        inperp = kernel_membership(num, test, audit)
        tau_A = np.where(inperp, np.sum((Xint @ J.T) ** 2, axis=1), np.inf)
        cand = np.maximum(np.minimum(2.0 ** expo, tau_A), 1.0 / (2 * n * n))
        expo = np.maximum(_pow2_ceil_exponent(cand), floor_exp)
        sums.append(float(np.sum(2.0 ** expo)))
        if test_mode:
            ridge = ridge_leverage(Xint, lam_int).tau
            ridge_ok.append(bool(np.all(1.01 * 2.0 ** expo >= ridge * (1 - 1e-12))))
    tau_hat = 1.01 * 2.0 ** expo
    sums.append(float(tau_hat.sum()))
    blocks = [tau_hat[offs[i]:offs[i + 1]] for i in range(s)]
    return OverestimateResult(tau_hat, expo, blocks, sums, ridge_ok, alphas)
