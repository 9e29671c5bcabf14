"""Certified nonparametric lookup policies for constrained optimal control.

Offline, a conservatively constrained finite-horizon problem is solved from
many start states; the solutions become a dataset of (state, control, cost)
triples. Online, the policy replays the control of the score-minimizing
datapoint, which carries feasibility and suboptimality certificates under
Lipschitz assumptions. Modules: systems (benchmark plants), solver (offline
and receding-horizon solves), dataset, policy (the lookup index), certify
(certificates and closed forms), oracle (value-table ground truth),
collector, verifier (cell-splitting domain certification), evaluator
(closed-loop benchmark harness), cli.
"""

from . import (certify, collector, dataset, errors, evaluator, geometry,
               oracle, policy, solver, systems, verifier)
from .dataset import Dataset, Transition
from .errors import (Assumption3Violated, BetaEtaEpsIncompatible,
                     EtaTooSmall, GammaLfConditionFailed, NotOneStepFeasible,
                     NpmpcError)
from .geometry import Box
from .policy import NppPolicy, act, j_lower, j_upper, lambda_min, make_policy
from .solver import SolveResult, SolverOptions, mpc_solve, solve_conservative
from .systems import (System, load_system, make_clqr, make_min_time,
                      make_pendulum, save_system)

__version__ = "0.1.0"

__all__ = [
    "Assumption3Violated", "BetaEtaEpsIncompatible", "Box", "Dataset",
    "EtaTooSmall", "GammaLfConditionFailed", "NotOneStepFeasible",
    "NppPolicy", "NpmpcError", "SolveResult", "SolverOptions", "System",
    "Transition", "__version__", "act", "certify", "collector", "dataset",
    "errors", "evaluator", "geometry", "j_lower", "j_upper", "lambda_min",
    "load_system", "make_clqr", "make_min_time", "make_pendulum",
    "make_policy", "mpc_solve", "oracle", "policy", "save_system", "solver",
    "solve_conservative", "systems", "verifier",
]
