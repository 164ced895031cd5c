"""Min-max bilevel optimization over many tasks with verified hypergradients."""

from .core import (FULL_BATCH, Ball, BatchHandle, Box, IterateState, ProblemOracles,
                   RegularityConstants, Unconstrained, derive_lemma0_constants, make_streams)
from .diagnostics import (RateFit, TrajectoryRecord, inner_solution, is_decreasing_trend,
                          lambda_gap, max_inner_gap, prox_stationarity, rate_fit, running_min,
                          task_losses, unseen_task_eval, window_means, y_gap)
from .estimator import MORBiT
from .exceptions import (ConfigError, DomainError, InnerSolveBudgetExceeded, MorbitError,
                         NotStronglyConvex, NumericalDivergence, ParseError, ProxBudgetExceeded,
                         ShapeError, SolveDiverged, UnsupportedProblem)
from .hypergrad import (CG, ExactSolve, FirstOrder, HypergradEstimate, conjugate_gradient,
                        fd_check, task_hypergrad, weighted_hypergrad)
from .projections import distance_to_set, project_set, project_simplex
from .solver import (MINAVG, MINMAX, PlateauScheduler, SolverConfig, SolverOutput, StepSchedule,
                     morbit_step, run, theorem1_schedule)

__version__ = "0.1.0"

__all__ = [
    "FULL_BATCH", "Ball", "BatchHandle", "Box", "IterateState", "ProblemOracles",
    "RegularityConstants", "Unconstrained", "derive_lemma0_constants", "make_streams",
    "RateFit", "TrajectoryRecord", "inner_solution", "is_decreasing_trend", "lambda_gap",
    "max_inner_gap", "prox_stationarity", "rate_fit", "running_min", "task_losses",
    "unseen_task_eval", "window_means", "y_gap", "MORBiT", "ConfigError", "DomainError",
    "InnerSolveBudgetExceeded", "MorbitError", "NotStronglyConvex", "NumericalDivergence",
    "ParseError", "ProxBudgetExceeded", "ShapeError", "SolveDiverged", "UnsupportedProblem",
    "CG", "ExactSolve", "FirstOrder", "HypergradEstimate", "conjugate_gradient", "fd_check",
    "task_hypergrad", "weighted_hypergrad", "distance_to_set", "project_set", "project_simplex",
    "MINAVG", "MINMAX", "PlateauScheduler", "SolverConfig", "SolverOutput", "StepSchedule",
    "morbit_step", "run", "theorem1_schedule",
]
