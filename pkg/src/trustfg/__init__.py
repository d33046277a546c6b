"""Multi-agent trajectory optimization with Gaussian-process factor graphs and trust factors."""

from .graph import (
    AffineFactor,
    Factor,
    FactorGraph,
    LinearSystem,
    NoiseModel,
    StateVariable,
    VarKey,
    linearize,
    total_cost,
    whiten,
)
from .gp import GPPriorParams, Trajectory, constant_velocity_transition, make_gp_prior_factors, resample_polyline
from .solver import SolverConfig, SolveResult, gauss_newton, levenberg_marquardt, solve_linear
from .scenario import ScenarioConfig, load_config, reference_scenario, run_decentralized, run_joint

__version__ = "0.1.0"
