"""Controlled diffusions up to the exit time from a cylinder [0,T) x G.

Simulation, Monte Carlo values, a monotone grid solver for the value
function, and numerical checks of the dynamic programming principle.
"""

__version__ = "0.1.0"

from .dp import SpaceGrid, ValueFunctionSolver, ValueGrid, extract_policy, solve
from .dpp import (Constant, Cover, DppReport, FirstHit, HalfOpenCell, LscMinorant, MinOf,
                  ToleranceModel, build_cover, lsc_minorant, stitch, stitching_improvement_test,
                  verify_dpp)
from .exittime import exit_time, exit_time_bridge_corrected, semicontinuity_certificate
from .montecarlo import Estimate, MonteCarloValue, estimate_conditional_J, estimate_J, lsc_envelope
from .paths import (BrownianPath, Feedback, OpenLoop, SamplePath, Stitched, TimeMesh,
                    check_flow_property, concatenate, continuity_scaling_test, shift_policy,
                    simulate)
from .problem import ControlSpace, Domain, ProblemSpec, estimate_lipschitz, make_spec, validate

__all__ = [
    "BrownianPath", "Constant", "ControlSpace", "Cover", "Domain", "DppReport", "Estimate",
    "Feedback", "FirstHit", "HalfOpenCell", "LscMinorant", "MinOf", "MonteCarloValue", "OpenLoop",
    "ProblemSpec", "SamplePath", "SpaceGrid", "Stitched", "TimeMesh", "ToleranceModel",
    "ValueFunctionSolver", "ValueGrid", "build_cover", "check_flow_property", "concatenate",
    "continuity_scaling_test", "estimate_J", "estimate_conditional_J", "estimate_lipschitz",
    "exit_time", "exit_time_bridge_corrected", "extract_policy", "lsc_envelope", "lsc_minorant",
    "make_spec", "semicontinuity_certificate", "shift_policy", "simulate", "solve", "stitch",
    "stitching_improvement_test", "validate", "verify_dpp",
]
