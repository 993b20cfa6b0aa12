"""Numerical laboratory for stochastic linear-quadratic control.

Solvers for the backward Riccati equation (matrix ODE for deterministic
coefficients, a lifted parabolic field for Brownian-functional ones), a
binomial-tree exact dynamic programming oracle, seeded Euler-Maruyama
simulation of the controlled state and its fundamental flows, and Monte
Carlo verifiers for the structural identities of the problem (quadratic
value field, completion of squares, dynamic programming drift tests).
"""

from .bsre_pde import RiccatiField, sample_solution, solve_field, stability_steps
from .errors import (BlowUpError, ConfigurationError, DimensionError, DomainError,
                     SingularWeightError, SlqError)
from .evaluator import (CostEstimate, KappaProcess, VerificationReport, estimate_cost,
                        estimate_cost_mc, kappa_process, verify_completion_of_squares,
                        verify_dpp, verify_quadratic_laws, verify_value_match)
from .model import (CoefficientMode, CoefficientProcess, CoefficientSnapshot,
                    Dimensions, ProblemInstance, ProblemSpec, ValidationReport,
                    evaluate_coefficients, load_instance, validate)
from .oracle_dp import TreeMode, TreeValue, replay_policy, solve_tree, tree_policy_value
from .riccati_core import (RiccatiPoint, eval_G, eval_M, eval_N, feedback_gain,
                           hamiltonian, running_cost)
from .riccati_ode import RiccatiPath, interpolate, solve_backward
from .sde_sim import (FeedbackPolicy, OpenLoopPolicy, SimConfig, TrajectoryBatch,
                      ZeroPolicy, simulate, simulate_flows)

__version__ = "0.1.0"

__all__ = [
    "BlowUpError", "CoefficientMode", "CoefficientProcess", "CoefficientSnapshot",
    "ConfigurationError", "CostEstimate", "DimensionError", "Dimensions",
    "DomainError", "FeedbackPolicy", "KappaProcess", "OpenLoopPolicy",
    "ProblemInstance", "ProblemSpec", "RiccatiField", "RiccatiPath", "RiccatiPoint",
    "SimConfig", "SingularWeightError", "SlqError", "TrajectoryBatch", "TreeMode",
    "TreeValue", "ValidationReport", "VerificationReport", "ZeroPolicy",
    "estimate_cost", "estimate_cost_mc", "eval_G", "eval_M", "eval_N",
    "evaluate_coefficients", "feedback_gain", "hamiltonian", "interpolate",
    "kappa_process", "load_instance", "replay_policy", "running_cost",
    "sample_solution", "simulate", "simulate_flows", "solve_backward",
    "solve_field", "solve_tree", "stability_steps", "tree_policy_value",
    "validate", "verify_completion_of_squares", "verify_dpp",
    "verify_quadratic_laws", "verify_value_match",
]
