"""Simulation and optimality checks for controlled FBSDEs with regular and singular controls."""
from .model import (ControlRegion, CoefficientSet, Problem, RegularControl, SingularControlPath,
                    TimeGrid, builtin_problem, load_problem, validate_coefficients)
from .simulate import McConfig, evaluate_cost, simulate_forward, solve_bsde
from .hjb import SpatialGrid, ValueGrid, solve_hjb_vi

__all__ = [
    "ControlRegion", "CoefficientSet", "Problem", "RegularControl", "SingularControlPath",
    "TimeGrid", "builtin_problem", "load_problem", "validate_coefficients",
    "McConfig", "evaluate_cost", "simulate_forward", "solve_bsde",
    "SpatialGrid", "ValueGrid", "solve_hjb_vi",
]
