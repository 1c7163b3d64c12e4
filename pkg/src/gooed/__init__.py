"""Goal-oriented optimal sensor placement for linear Bayesian inverse problems."""
from .design import (
    OptimizerTrace,
    exhaustive_search,
    leverage_init,
    random_design_sample,
    standard_greedy,
    swapping_greedy,
)
from .eig import EigEvaluator, eig_goal_direct, eig_goal_online, eig_parameter
from .exceptions import ConfigError, DimensionMismatch, GooedError, NumericalError
from .lowrank import RandEigConfig, SpectralFactor, eig_error_bound, randomized_eig
from .model import (
    Design,
    GaussianPrior,
    GoalSetup,
    LinearModel,
    LinearOperatorHandle,
    NoiseModel,
    assemble_offline,
)

__version__ = "0.1.0"
