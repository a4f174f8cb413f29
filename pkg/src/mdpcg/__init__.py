"""Wardrop equilibria and constraint-enforcing tolls for finite-horizon MDP congestion games."""
from .errors import CapabilityError, DimensionError, InfeasibleError, ValidationError
from .game import (CostModel, EquilibriumResult, StopRule, eval_costs, eval_potential,
                   solve_equilibrium_fw, wardrop_violation)
from .mdp import (Dimensions, InitialDistribution, TransitionKernel, best_response,
                  check_feasibility, q_values, rollout_policy)
from .tolling import (ConstraintSet, EpsSchedule, TollConfig, TollTrajectory, augment_costs,
                      convergence_report, dual_value_and_gradient, lagrangian,
                      penalized_subgradient, project_nonneg, residue_inequality_check,
                      synthesize_tolls)

__all__ = [
    "CapabilityError", "ConstraintSet", "CostModel", "Dimensions", "DimensionError",
    "EpsSchedule", "EquilibriumResult", "InfeasibleError", "InitialDistribution", "StopRule",
    "TollConfig", "TollTrajectory", "TransitionKernel", "ValidationError", "augment_costs",
    "best_response", "check_feasibility", "convergence_report", "dual_value_and_gradient",
    "eval_costs", "eval_potential", "lagrangian", "penalized_subgradient", "project_nonneg",
    "q_values", "residue_inequality_check", "rollout_policy", "solve_equilibrium_fw",
    "synthesize_tolls", "wardrop_violation",
]
