"""Adaptive stochastic MPC for FIR systems with sparse impulse responses."""
from .config import BASELINE, SPARSE, ExperimentConfig
from .conic import ConicProgram, SocBlock, Solution, SolverTolerances, Status, solve, verify
from .controller import AppendedCovariance, ControlSolution, MpcConfig, SmpcController, build_gamma, build_mpc
from .errors import *  # noqa: F401,F403
from .estimator import PointEstimateDomain, RlsState, point_estimate_domain, project_mean, rls_update
from .harness import MonteCarloSummary, TrajectoryLog, closed_loop_cost, monte_carlo, run_closed_loop, summarize
from .plant import DisturbanceModel, ImpulseResponse, ShiftOperators, build_shift_operators, step
from .polytope import Polytope, add_measurement_cut, init_fps, prune_redundant, support_function
from .sparse_recovery import Fsps, bpdn_recover, required_sample_count, run_offline

__version__ = "0.1.0"
