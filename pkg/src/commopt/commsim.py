"""Bit-metered simulator of the coordinator and blackboard communication models.

Every protocol in this package talks through a :class:`Network`.  Numeric
payloads are quantized to a fixed-point grid when they are put on a channel,
and the exact wire size of every message is charged to a :class:`CommLedger`.
Local (non-communicated) arithmetic stays in double precision.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

COORDINATOR = -1
MODES = ("coordinator", "blackboard")


class CommError(Exception):
    """Base class for simulator errors."""


class Overflow(CommError, ValueError):
    """A value does not fit the fixed-point range of its channel."""


class ModelViolation(CommError):
    """A message does not respect the communication model."""


# ---------------------------------------------------------------------------
# fixed-point numbers
# ---------------------------------------------------------------------------

def round_half_away(x):
    """Round to the nearest integer, ties away from zero (vectorized)."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def max_numerator(frac_bits: int, int_bits: Optional[int] = None) -> int:
    """Largest admissible numerator for ``int_bits`` + ``frac_bits`` magnitude bits."""
    if int_bits is None:
        int_bits = frac_bits
    return 2 ** (int_bits + frac_bits) - 1


@dataclass(frozen=True)
class FixedPointScalar:
    """A number ``numerator * 2**-scale_bits`` with a bounded numerator.

    ``int_bits`` defaults to ``scale_bits`` so that the default format has
    L bits before and L bits after the binary point.
    """

    numerator: int
    scale_bits: int
    int_bits: Optional[int] = None

    def __post_init__(self):
        if abs(self.numerator) > max_numerator(self.scale_bits, self.int_bits):
            raise Overflow(f"numerator {self.numerator} exceeds the {self.width}-bit range")

    @property
    def width(self) -> int:
        """Wire width in bits (sign plus magnitude)."""
        ib = self.scale_bits if self.int_bits is None else self.int_bits
        return 1 + ib + self.scale_bits

    @property
    def value(self) -> float:
        return self.numerator * 2.0 ** (-self.scale_bits)

    def bits(self) -> str:
        """Canonical serialization: sign bit followed by big-endian magnitude."""
        mag = abs(self.numerator)
        sign = "1" if self.numerator < 0 else "0"
        return sign + format(mag, "0{}b".format(self.width - 1))


def encode_fixed(v: float, L: int, int_bits: Optional[int] = None) -> FixedPointScalar:
    """Encode ``v`` on the grid ``2**-L`` (round to nearest, ties away from zero).

    Raises
    ------
    Overflow
        If ``|v|`` is larger than the largest representable value.
    """
    num = int(round_half_away(float(v) * 2.0 ** L))
    if abs(num) > max_numerator(L, int_bits):
        raise Overflow(f"|{v}| exceeds the fixed-point range for L={L}")
    return FixedPointScalar(num, L, int_bits)


def decode_fixed(bits: str, L: int, int_bits: Optional[int] = None) -> FixedPointScalar:
    """Inverse of :meth:`FixedPointScalar.bits`."""
    mag = int(bits[1:], 2)
    return FixedPointScalar(-mag if bits[0] == "1" else mag, L, int_bits)


def quantize(x, frac_bits: int, int_bits: Optional[int] = None) -> np.ndarray:
    """Vectorized :func:`encode_fixed` returning the decoded float values.

    Scaling by a power of two is exact in floating point, so the returned
    values are exactly the grid points a receiver would decode.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise Overflow("non-finite value on a channel")
    scale = 2.0 ** frac_bits
    num = round_half_away(x * scale)
    limit = float(max_numerator(frac_bits, int_bits))
    if num.size and np.max(np.abs(num)) > limit:
        raise Overflow(f"value {np.max(np.abs(x))} exceeds the fixed-point range")
    return num / scale


def bits_needed(x, frac_bits: int) -> int:
    """Smallest integer-part width that holds every entry of ``x`` at ``frac_bits``."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return 0
    m = float(np.max(np.abs(round_half_away(x * 2.0 ** frac_bits))))
    if m == 0:
        return 0
    return max(0, int(m).bit_length() - frac_bits)


# ---------------------------------------------------------------------------
# variable-length integers (Elias gamma)
# ---------------------------------------------------------------------------

def gamma_length(n: int) -> int:
    """Length of the Elias-gamma code of a positive integer."""
    if n < 1:
        raise ValueError("Elias gamma encodes positive integers only")
    return 2 * int(n).bit_length() - 1


def encode_gamma(n: int) -> str:
    if n < 1:
        raise ValueError("Elias gamma encodes positive integers only")
    b = format(int(n), "b")
    return "0" * (len(b) - 1) + b


def decode_gamma(bits: str, pos: int = 0) -> tuple[int, int]:
    """Decode one gamma code starting at ``pos``; returns (value, next position)."""
    zeros = 0
    while bits[pos + zeros] == "0":
        zeros += 1
    end = pos + 2 * zeros + 1
    return int(bits[pos + zeros:end], 2), end


def _zigzag(k: int) -> int:
    return 2 * k if k >= 0 else -2 * k - 1


def _unzigzag(z: int) -> int:
    return z // 2 if z % 2 == 0 else -(z + 1) // 2


def varint_bits(k: int) -> int:
    """Wire size of a signed variable-length integer (zigzag, then gamma of z+1)."""
    return gamma_length(_zigzag(int(k)) + 1)


def encode_varint(k: int) -> str:
    return encode_gamma(_zigzag(int(k)) + 1)


def decode_varint(bits: str, pos: int = 0) -> tuple[int, int]:
    z, pos = decode_gamma(bits, pos)
    return _unzigzag(z - 1), pos


def uvarint_bits(k: int) -> int:
    """Wire size of a non-negative variable-length integer (gamma of k+1)."""
    return gamma_length(int(k) + 1)


# multiplicative grid codec: values snapped to +-(1 + 1/kappa)^j, one varint each
def multiplicative_encode(x, kappa: float) -> tuple[np.ndarray, np.ndarray]:
    """Snap entries to the grid ``{0} U {+-(1+1/kappa)**j}`` (nearest in log scale).

    Returns the integer exponents (with a sign array) from which
    :func:`multiplicative_decode` recovers the grid values.  Zero is encoded
    with sign 0.
    """
    x = np.asarray(x, dtype=float)
    base = np.log1p(1.0 / kappa)
    sign = np.sign(x).astype(int)
    expo = np.zeros(x.shape, dtype=np.int64)
    nz = x != 0
    expo[nz] = np.round(np.log(np.abs(x[nz])) / base).astype(np.int64)
    return sign, expo


def multiplicative_decode(sign, expo, kappa: float) -> np.ndarray:
    base = np.log1p(1.0 / kappa)
    return np.asarray(sign) * np.exp(np.asarray(expo) * base)


def multiplicative_bits(sign, expo) -> int:
    """Wire size: two bits of sign/zero flag plus an exponent varint per nonzero entry."""
    sign = np.asarray(sign).ravel()
    expo = np.asarray(expo).ravel()
    return int(sum(2 + (varint_bits(int(e)) if s != 0 else 0) for s, e in zip(sign, expo)))


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------

@dataclass
class Message:
    """A payload together with its wire format.

    kind is one of ``scalar``, ``vector``, ``matrix``, ``indices``, ``varint``,
    ``varints``, ``float64`` or ``raw``.  Numeric payloads are quantized at
    construction, so ``payload`` is exactly what the receiver decodes.  The
    ``raw`` kind carries a payload whose framing is computed by the caller
    (``raw_bits``); it is used for protocol-specific codecs such as the
    middle-bit updates of Richardson's iteration.
    """

    tag: str
    kind: str
    payload: Any
    frac_bits: int = 0
    int_bits: Optional[int] = None
    raw_bits: int = 0

    # -- constructors -----------------------------------------------------
    @classmethod
    def scalar(cls, tag, v, L, int_bits=None):
        return cls(tag, "scalar", float(quantize(v, L, int_bits)), L, int_bits)

    @classmethod
    def vector(cls, tag, x, L, int_bits=None):
        x = np.asarray(x, dtype=float).ravel()
        return cls(tag, "vector", quantize(x, L, int_bits), L, int_bits)

    @classmethod
    def matrix(cls, tag, X, L, int_bits=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(tag, "matrix", quantize(X, L, int_bits), L, int_bits)

    @classmethod
    def fitted(cls, tag, X, frac_bits):
        """Matrix or vector message whose integer width is the smallest that fits."""
        X = np.asarray(X, dtype=float)
        ib = bits_needed(X, frac_bits)
        kind = "vector" if X.ndim <= 1 else "matrix"
        data = quantize(X.ravel() if kind == "vector" else X, frac_bits, ib)
        return cls(tag, kind, data, frac_bits, ib)

    @classmethod
    def indices(cls, tag, idx):
        return cls(tag, "indices", [int(i) for i in idx])

    @classmethod
    def varint(cls, tag, k):
        return cls(tag, "varint", int(k))

    @classmethod
    def varints(cls, tag, ks):
        return cls(tag, "varints", [int(k) for k in ks])

    @classmethod
    def float64(cls, tag, x):
        return cls(tag, "float64", np.array(x, dtype=float))

    @classmethod
    def raw(cls, tag, payload, bits):
        return cls(tag, "raw", payload, raw_bits=int(bits))

    # -- sizing -------------------------------------------------------------
    @property
    def entry_bits(self) -> int:
        ib = self.frac_bits if self.int_bits is None else self.int_bits
        return 1 + ib + self.frac_bits

    def shape(self) -> tuple[int, int]:
        if self.kind == "vector":
            return (len(self.payload), 1)
        if self.kind == "matrix":
            return tuple(np.shape(self.payload))  # type: ignore[return-value]
        if self.kind == "float64":
            arr = np.atleast_1d(self.payload)
            return (arr.shape[0], int(np.prod(arr.shape[1:])) if arr.ndim > 1 else 1)
        raise ValueError(f"{self.kind} messages have no shape header")

    def bit_size(self) -> int:
        k = self.kind
        if k == "scalar":
            return self.entry_bits
        if k in ("vector", "matrix", "float64"):
            r, c = self.shape()
            per = 64 if k == "float64" else self.entry_bits
            return uvarint_bits(r) + uvarint_bits(c) + r * c * per
        if k == "indices":
            return uvarint_bits(len(self.payload)) + sum(uvarint_bits(i) for i in self.payload)
        if k == "varint":
            return varint_bits(self.payload)
        if k == "varints":
            return uvarint_bits(len(self.payload)) + sum(varint_bits(v) for v in self.payload)
        if k == "raw":
            return self.raw_bits
        raise ValueError(f"unknown message kind {k}")

    def serialize(self) -> str:
        """Canonical bit string; its length always equals :meth:`bit_size`."""
        k = self.kind
        if k == "scalar":
            return encode_fixed(self.payload, self.frac_bits, self.int_bits).bits()
        if k in ("vector", "matrix"):
            r, c = self.shape()
            head = encode_gamma(r + 1) + encode_gamma(c + 1)
            body = "".join(
                encode_fixed(v, self.frac_bits, self.int_bits).bits()
                for v in np.asarray(self.payload).ravel()
            )
            return head + body
        if k == "float64":
            r, c = self.shape()
            head = encode_gamma(r + 1) + encode_gamma(c + 1)
            raw = np.asarray(self.payload, dtype=">f8").tobytes()
            return head + "".join(format(b, "08b") for b in raw)
        if k == "indices":
            return encode_gamma(len(self.payload) + 1) + "".join(
                encode_gamma(i + 1) for i in self.payload
            )
        if k == "varint":
            return encode_varint(self.payload)
        if k == "varints":
            return encode_gamma(len(self.payload) + 1) + "".join(
                encode_varint(v) for v in self.payload
            )
        raise ValueError(f"{k} messages use caller-defined framing")


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    tag: str
    direction: str  # "up" (machine to coordinator) or "down"
    machine: int
    bits: int
    round: int


@dataclass
class CommLedger:
    """Exact per-machine, per-direction bit counters and round count."""

    s: int
    mode: str = "coordinator"
    bits_up: list = field(default_factory=list)
    bits_down: list = field(default_factory=list)
    rounds: int = 0
    per_step: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.bits_up:
            self.bits_up = [0] * self.s
        if not self.bits_down:
            self.bits_down = [0] * self.s

    def record(self, tag: str, direction: str, machine: int, bits: int) -> None:
        if direction == "down" and self.mode == "blackboard":
            bits = 0
        if direction == "up":
            self.bits_up[machine] += bits
        else:
            self.bits_down[machine] += bits
        self.per_step.append(StepRecord(tag, direction, machine, int(bits), self.rounds))

    @property
    def total_up(self) -> int:
        return int(sum(self.bits_up))

    @property
    def total_down(self) -> int:
        return int(sum(self.bits_down))

    @property
    def total_bits(self) -> int:
        return self.total_up + self.total_down

    def per_step_total(self) -> int:
        return int(sum(r.bits for r in self.per_step))

    def check_additivity(self) -> bool:
        return self.per_step_total() == self.total_bits

    def bits_by_tag(self, prefix: str = "") -> int:
        return int(sum(r.bits for r in self.per_step if r.tag.startswith(prefix)))

    def mark(self) -> int:
        """Position in ``per_step``; pass it to :meth:`bits_since`."""
        return len(self.per_step)

    def bits_since(self, mark: int, direction: Optional[str] = None,
                   machine: Optional[int] = None) -> int:
        tot = 0
        for r in self.per_step[mark:]:
            if direction is not None and r.direction != direction:
                continue
            if machine is not None and r.machine != machine:
                continue
            tot += r.bits
        return tot

    def report(self, protocol: str) -> dict:
        return {
            "protocol": protocol,
            "mode": self.mode,
            "bits_up": list(map(int, self.bits_up)),
            "bits_down": list(map(int, self.bits_down)),
            "rounds": int(self.rounds),
            "per_step": [
                {"tag": r.tag, "direction": r.direction, "machine": r.machine,
                 "bits": r.bits, "round": r.round}
                for r in self.per_step
            ],
        }

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON report (used for determinism checks)."""
        blob = json.dumps(self.report(""), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# shared randomness and the network
# ---------------------------------------------------------------------------

def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


class SharedRandomness:
    """Keyed random streams derived from one 64-bit master seed.

    The stream for key ``(tag, round, machine)`` is identical wherever it is
    requested, and distinct keys give independent streams.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed) % (2 ** 64)

    def generator(self, tag: str, round: int = 0, machine: int = COORDINATOR,
                  counter: int = 0) -> np.random.Generator:
        key = (_tag_key(tag), int(round), int(machine) + 1, int(counter))
        ss = np.random.SeedSequence(entropy=self.master_seed, spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))


class Network:
    """Coordinator plus ``s`` machines with a shared ledger.

    Parameters
    ----------
    s : int
        Number of machines.
    mode : {"coordinator", "blackboard"}
        Charging rule.  In blackboard mode coordinator-to-machine traffic is
        free (it models reading the board).
    seed : int
        Master seed of the shared randomness.
    sever_private : bool
        When true the coordinator may not draw from machine-private streams.
    """

    def __init__(self, s: int, mode: str = "coordinator", seed: int = 0,
                 sever_private: bool = False):
        self.s = int(s)
        self.mode = mode
        self.ledger = CommLedger(self.s, mode)
        self.shared = SharedRandomness(seed)
        self.seed = seed
        self.sever_private = sever_private
        self._counters: dict = {}

    # -- randomness -----------------------------------------------------------
    def rng(self, tag: str, machine: int = COORDINATOR) -> np.random.Generator:
        """Shared stream keyed by (tag, current round, machine).

        Repeated requests with the same key inside one round return fresh,
        reproducible streams (a per-key counter is part of the key).
        """
        key = (tag, self.ledger.rounds, machine)
        c = self._counters.get(key, 0)
        self._counters[key] = c + 1
        return self.shared.generator(tag, self.ledger.rounds, machine, c)

    def shared_rng(self, tag: str, machine: int = COORDINATOR) -> np.random.Generator:
        """Stream keyed only by (tag, round, machine); every party gets the same one."""
        return self.shared.generator(tag, self.ledger.rounds, machine, 0)

    def private_rng(self, machine: int, tag: str, requester: int) -> np.random.Generator:
        if self.sever_private and requester != machine:
            raise ModelViolation("machine-private randomness is severed from other parties")
        return self.shared.generator("private:" + tag, self.ledger.rounds, machine, 0)

    # -- channels -------------------------------------------------------------
    def send(self, src: int, dst: int, msg: Message):
        """Deliver ``msg`` and charge its bits; returns the decoded payload."""
        if src == dst:
            raise ModelViolation("an endpoint cannot send to itself")
        if src != COORDINATOR and dst != COORDINATOR:
            raise ModelViolation("machine-to-machine messages are not part of the model")
        m = dst if src == COORDINATOR else src
        if not 0 <= m < self.s:
            raise ModelViolation(f"unknown machine {m}")
        bits = msg.bit_size()
        if src == COORDINATOR:
            self.ledger.record(msg.tag, "down", m, bits)
        else:
            self.ledger.record(msg.tag, "up", m, bits)
        return msg.payload

    def upload(self, machine: int, msg: Message):
        return self.send(machine, COORDINATOR, msg)

    def download(self, machine: int, msg: Message):
        return self.send(COORDINATOR, machine, msg)

    def broadcast(self, msg: Message, machines: Optional[Sequence[int]] = None):
        """Coordinator sends ``msg`` to every machine (or to ``machines``)."""
        targets = range(self.s) if machines is None else machines
        for m in targets:
            self.send(COORDINATOR, m, msg)
        return msg.payload

    def round_barrier(self) -> None:
        self.ledger.rounds += 1


# ---------------------------------------------------------------------------
# row-partitioned matrices and instance files
# ---------------------------------------------------------------------------

def even_partition(n: int, s: int) -> list[int]:
    """Split ``n`` rows over ``s`` machines as evenly as possible."""
    base, extra = divmod(n, s)
    return [base + (1 if i < extra else 0) for i in range(s)]


class RowPartitionedMatrix:
    """Matrix ``A = [A^(1); ...; A^(s)]`` with entries on the ``2**-L`` grid."""

    def __init__(self, blocks: Sequence[np.ndarray], L: int, int_bits: Optional[int] = None):
        self.L = int(L)
        self.int_bits = int_bits
        self.blocks = []
        for B in blocks:
            B = np.asarray(B, dtype=float)
            if B.ndim != 2:
                raise ValueError("blocks must be two-dimensional")
            self.blocks.append(quantize(B, L, int_bits))
        ds = {B.shape[1] for B in self.blocks}
        if len(ds) != 1:
            raise ValueError("all blocks must have the same number of columns")
        self.d = ds.pop()

    @classmethod
    def from_dense(cls, A, partition: Sequence[int], L: int,
                   int_bits: Optional[int] = None) -> "RowPartitionedMatrix":
        A = np.asarray(A, dtype=float)
        if sum(partition) != A.shape[0]:
            raise ValueError("partition sizes must sum to the number of rows")
        offs = np.concatenate([[0], np.cumsum(partition)]).astype(int)
        return cls([A[offs[i]:offs[i + 1]] for i in range(len(partition))], L, int_bits)

    @property
    def s(self) -> int:
        return len(self.blocks)

    @property
    def partition(self) -> list[int]:
        return [B.shape[0] for B in self.blocks]

    @property
    def n(self) -> int:
        return int(sum(self.partition))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.partition)]).astype(int)

    def dense(self) -> np.ndarray:
        return np.vstack(self.blocks) if self.blocks else np.zeros((0, self.d))

    def numerators(self) -> np.ndarray:
        """Integer numerators (object dtype so that large L stays exact)."""
        return np.vectorize(lambda v: int(round_half_away(v * 2.0 ** self.L)), otypes=[object])(
            self.dense())

    def locate(self, g: int) -> tuple[int, int]:
        """Map a global row index to (machine, local index)."""
        offs = self.offsets
        m = int(np.searchsorted(offs, g, side="right") - 1)
        return m, int(g - offs[m])

    def split_vector(self, v) -> list[np.ndarray]:
        v = np.asarray(v, dtype=float)
        offs = self.offsets
        return [v[offs[i]:offs[i + 1]] for i in range(self.s)]


def save_instance(path: str, A: RowPartitionedMatrix, kind: str, extra: Optional[dict] = None,
                  vectors: Optional[dict] = None) -> dict:
    """Write the JSON instance format: header plus row-major integer numerators.

    ``vectors`` maps names (e.g. ``b``) to real vectors stored as numerators at
    the same scale; ``extra`` holds further header fields (R, r, kappa, ...).
    """
    doc = {
        "n": A.n, "d": A.d, "s": A.s, "L": A.L, "partition": A.partition, "kind": kind,
        "entries": [int(v) for v in A.numerators().ravel()],
    }
    for name, vec in (vectors or {}).items():
        doc[name] = [int(round_half_away(v * 2.0 ** A.L)) for v in np.ravel(vec)]
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
    return doc


def load_instance(path: str, vector_names: Sequence[str] = ("b", "c")):
    """Read an instance file; returns (matrix, header dict, vectors dict)."""
    with open(path) as fh:
        doc = json.load(fh)
    L = int(doc["L"])
    nums = [int(v) for v in doc["entries"]]
    A = np.asarray(nums, dtype=float).reshape(doc["n"], doc["d"]) * 2.0 ** (-L)
    width = max((abs(v).bit_length() for v in nums), default=0)
    int_bits = max(L, width - L) if width > 2 * L else None
    rpm = RowPartitionedMatrix.from_dense(A, doc["partition"], L, int_bits)
    vecs = {k: np.asarray(doc[k], dtype=float) * 2.0 ** (-L) for k in vector_names if k in doc}
    return rpm, doc, vecs


def write_ledger_report(path: str, ledger: CommLedger, protocol: str) -> None:
    rep = ledger.report(protocol)
    out = {"protocol": protocol, "bits_up": ledger.total_up, "bits_down": ledger.total_down,
           "rounds": ledger.rounds, "per_step": rep["per_step"]}
    with open(path, "w") as fh:
        json.dump(out, fh)
