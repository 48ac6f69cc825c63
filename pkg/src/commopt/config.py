"""Constant presets.

The ``paper`` preset keeps the constants of the analysis; most of them are far
too large to run.  The ``desk`` preset shrinks the union-bound constants so
that the protocols finish in seconds while the invariants stay testable.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, replace

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Preset:
    name: str
    # embed: refinement protocol uses r = refine_r_const * log(n) JL rows
    refine_r_const: float
    # embed: primes are drawn z = ceil(prime_count_const * log(n)) times
    prime_count_const: float
    # embed: block leverage threshold constant C and sketch rows c * k_r
    block_C: float
    block_sketch_c: float
    # leverage: constant c of the Sample function
    sample_c: float
    # sketching: rows of the norm sketch are norm_sketch_const * eps^-2 * log(2/delta)
    norm_sketch_const: float
    # embed: outlier loop repeats outlier_const * T * log(T+1) * log(1/delta) times
    outlier_const: float
    # embed: samples per ApproxLewisForm level are lewis_rows_const * d * log(d)
    lewis_rows_const: float
    # lp: use the analysis step size and mu rate (True) or the desk schedule
    lp_paper_schedule: bool
    lp_max_iters: int
    lp_desk_gamma: float
    lp_desk_mu_rate: float
    lp_desk_lambda: float
    # lp: inverse maintenance oversampling gamma_im = im_C * 1000 * log d
    im_C: float
    # lp: multiplier on the predicted Lewis iteration count for the warm start
    lewis_iter_C: float

    def to_dict(self) -> dict:
        return asdict(self)


PAPER = Preset(
    name="paper",
    refine_r_const=1e6,
    prime_count_const=100.0,
    block_C=0.25,
    block_sketch_c=8.0,
    sample_c=3.0,
    norm_sketch_const=6.0,
    outlier_const=4.0,
    lewis_rows_const=20.0,
    lp_paper_schedule=True,
    lp_max_iters=10 ** 9,
    lp_desk_gamma=0.5,
    lp_desk_mu_rate=0.2,
    lp_desk_lambda=2.0,
    im_C=1.0,
    lewis_iter_C=1.0,
)

DESK = replace(
    PAPER,
    name="desk",
    refine_r_const=200.0,
    lp_paper_schedule=False,
    lp_max_iters=2000,
    lewis_iter_C=2.0,
)

PRESETS = {"paper": PAPER, "desk": DESK}


def get_preset(name: str | None = None) -> Preset:
    """Resolve a preset by name; defaults to ``$COMMOPT_PRESET`` or ``desk``."""
    if isinstance(name, Preset):
        return name
    if name is None:
        name = os.environ.get("COMMOPT_PRESET", "desk")
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
