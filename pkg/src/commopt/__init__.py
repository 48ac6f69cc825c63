"""Communication-metered distributed convex optimization protocols."""
__version__ = "0.1.0"

from .commsim import (
    COORDINATOR,
    CommLedger,
    FixedPointScalar,
    Message,
    Network,
    RowPartitionedMatrix,
    SharedRandomness,
    encode_fixed,
)
from .config import get_preset
from .embed import block_lev_sample, estimate_block_leverages, refinement_overestimates
from .hardgen import gen_feasibility, gen_high_precision, gen_inner_product, gen_regression_gap
from .leverage import lewis_weights, leverage_exact
from .lowrank import low_rank_projection
from .lp import LpInstance, ipm_solve, random_feasible_lp
from .regression import build_preconditioner, solve_l2_high_accuracy, solve_lp_constant
from .checks import ALL_CHECKS

__all__ = [
    "ALL_CHECKS",
    "COORDINATOR",
    "CommLedger",
    "FixedPointScalar",
    "LpInstance",
    "Message",
    "Network",
    "RowPartitionedMatrix",
    "SharedRandomness",
    "block_lev_sample",
    "build_preconditioner",
    "encode_fixed",
    "estimate_block_leverages",
    "gen_feasibility",
    "gen_high_precision",
    "gen_inner_product",
    "gen_regression_gap",
    "get_preset",
    "ipm_solve",
    "lewis_weights",
    "leverage_exact",
    "low_rank_projection",
    "random_feasible_lp",
    "refinement_overestimates",
    "solve_l2_high_accuracy",
    "solve_lp_constant",
    "__version__",
]
