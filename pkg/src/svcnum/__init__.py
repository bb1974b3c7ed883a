"""Rate allocation for layered video streams over capacitated networks."""

from .utility import (QualityProfile, ProfileError, build_profile, check_concavity_conditions,
                      ideal_utility, attained_level, sigmoid, approx_utility, interval_index,
                      transformed_utility, transformed_utility_derivative, numerical_concavity)
from .topology import (Network, Scenario, ScenarioError, make_network, link_flows, is_feasible,
                       initial_feasible_point, load_scenario)
from .scp_solver import (SolverConfig, Solution, IterationTrace, dc_constraint, linearized_constraint,
                         aggregate_price, segment_bounds, select_interval, primal_step, dual_step,
                         log_dual_step, solve_subproblem, run_two_tier, run_simplified, kkt_residual,
                         objective)

__version__ = "0.1.0"
