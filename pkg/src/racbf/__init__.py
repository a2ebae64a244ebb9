"""Responsibility-aware control barrier functions for multi-vehicle scenes.

Submodules: dynamics (unicycle model and flows), barrier (flow-projected
pairwise barriers), responsibility (allocation models and constraint
terms), qp / safety_filter (active-set QP and the input filter), learning
(allocation training from demonstrations), sim (scenarios, closed loop,
metrics), forensics (trajectory attribution), cli (command-line tools).
"""

from .barrier import BarrierConfig, BarrierEval, barrier_eval, barrier_value, global_barrier, pairwise_distance, softmin
from .dynamics import (
    AgentState,
    ControlInput,
    InputBounds,
    InputGrid,
    idle_flow,
    idle_flow_jacobian,
    step_rk4,
    unicycle_deriv,
    wrap_angle,
)
from .qp import QPProblem, QPSolution, solve_qp
from .responsibility import (
    ConstraintTerms,
    GammaModel,
    c_term,
    features,
    gamma_eval,
    load_model,
    racbf_margin,
    save_model,
    worst_case_margin,
)
from .safety_filter import FilterResult, MODES, brute_force_filter, mode_margins, safety_filter

__all__ = [
    "AgentState", "ControlInput", "InputBounds", "InputGrid",
    "unicycle_deriv", "step_rk4", "idle_flow", "idle_flow_jacobian", "wrap_angle",
    "BarrierConfig", "BarrierEval", "pairwise_distance", "softmin",
    "barrier_value", "barrier_eval", "global_barrier",
    "GammaModel", "ConstraintTerms", "features", "gamma_eval", "c_term",
    "racbf_margin", "worst_case_margin", "save_model", "load_model",
    "QPProblem", "QPSolution", "solve_qp",
    "FilterResult", "MODES", "safety_filter", "brute_force_filter", "mode_margins",
]
