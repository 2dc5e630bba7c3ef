"""Decentralized solver and Monte Carlo verifier for linear-quadratic
leader/follower mean-field games (competitive followers) and teams
(cooperative followers), exact for any finite follower count."""

__version__ = "0.1.0"

from .model import (
    Mode,
    Scenario,
    ScenarioError,
    TimeGrid,
    load_scenario,
    load_scenario_file,
    scenario_to_text,
    validate,
)
from .integrators import BlowUpError, GridFunction, expm, integrate_backward, integrate_forward
from .follower import FollowerGains, follower_feedback, solve_follower_gains
from .leader import ExtendedSystem, LeaderGains, assemble_extended, leader_feedback, solve_leader_gains
from .simulation import EnsembleResult, NoiseModel, estimate_costs, lln_diagnostic, simulate
from .equilibrium import (
    VerificationReport,
    dp_gain_oracle,
    follower_deviation_test,
    leader_deviation_test,
    run_verification,
    stationarity_residuals,
)

__all__ = [
    "Mode",
    "Scenario",
    "ScenarioError",
    "TimeGrid",
    "load_scenario",
    "load_scenario_file",
    "scenario_to_text",
    "validate",
    "BlowUpError",
    "GridFunction",
    "expm",
    "integrate_backward",
    "integrate_forward",
    "FollowerGains",
    "follower_feedback",
    "solve_follower_gains",
    "ExtendedSystem",
    "LeaderGains",
    "assemble_extended",
    "leader_feedback",
    "solve_leader_gains",
    "EnsembleResult",
    "NoiseModel",
    "estimate_costs",
    "lln_diagnostic",
    "simulate",
    "VerificationReport",
    "dp_gain_oracle",
    "follower_deviation_test",
    "leader_deviation_test",
    "run_verification",
    "stationarity_residuals",
    "__version__",
]
