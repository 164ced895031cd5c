"""scikit-learn style front end to the solver."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .core import ProblemOracles, RegularityConstants, Unconstrained
from .exceptions import DomainError
from .hypergrad import ExactSolve
from .solver import MINMAX, PAPER_SHIFTED, SolverConfig, StepSchedule, run, theorem1_schedule


class MORBiT(BaseEstimator):
    """Min-max bilevel solver with an estimator interface.

    ``fit`` takes a :class:`~morbit.core.ProblemOracles` instead of a data
    matrix: the data live inside the problem's oracles.  Step sizes come from
    ``alpha``/``beta``/``gamma`` when all three are given, otherwise from the
    theorem-based schedule built from ``constants``.

    Attributes set by ``fit``: ``x_``, ``y_``, ``lambda_``, ``tau_``,
    ``trajectory_``, ``schedule_`` and ``n_iter_``.
    """

    def __init__(self, K=1000, alpha=None, beta=None, gamma=None, constants=None,
                 mode=MINMAX, hypergrad_mode=None, inner_steps_per_outer=1,
                 lambda_reg_eps=0.0, weight_reg_eps=0.0, g_batch_size=None,
                 f_batch_size=None, plateau=None, return_index_rule=PAPER_SHIFTED,
                 constraint=None, track_gaps=False, n_jobs=1, random_state=None):
        self.K = K
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.constants = constants
        self.mode = mode
        self.hypergrad_mode = hypergrad_mode
        self.inner_steps_per_outer = inner_steps_per_outer
        self.lambda_reg_eps = lambda_reg_eps
        self.weight_reg_eps = weight_reg_eps
        self.g_batch_size = g_batch_size
        self.f_batch_size = f_batch_size
        self.plateau = plateau
        self.return_index_rule = return_index_rule
        self.constraint = constraint
        self.track_gaps = track_gaps
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _schedule(self, n):
        manual = (self.alpha, self.beta, self.gamma)
        if all(v is not None for v in manual):
            return StepSchedule(alpha=float(self.alpha), beta=float(self.beta),
                                gamma=float(self.gamma))
        if any(v is not None for v in manual):
            raise DomainError("give all of alpha, beta, gamma or none of them")
        if not isinstance(self.constants, RegularityConstants):
            raise DomainError("without manual step sizes, constants must be RegularityConstants")
        return theorem1_schedule(self.constants, n, self.K)

    def fit(self, problem, y=None):
        if not isinstance(problem, ProblemOracles):
            raise TypeError(f"fit expects a ProblemOracles instance, got {type(problem).__name__}")
        schedule = self._schedule(problem.n)
        config = SolverConfig(
            K=self.K, schedule=schedule, mode=self.mode,
            hypergrad_mode=ExactSolve() if self.hypergrad_mode is None else self.hypergrad_mode,
            inner_steps_per_outer=self.inner_steps_per_outer,
            lambda_reg_eps=self.lambda_reg_eps, weight_reg_eps=self.weight_reg_eps,
            g_batch_size=self.g_batch_size, f_batch_size=self.f_batch_size,
            plateau=self.plateau, return_index_rule=self.return_index_rule,
            constraint=Unconstrained() if self.constraint is None else self.constraint,
            track_gaps=self.track_gaps, n_jobs=self.n_jobs,
        )
        out = run(problem, config, seed=self.random_state)
        self.x_ = out.x_bar
        self.y_ = out.y_bar
        self.lambda_ = out.lambda_bar
        self.tau_ = out.tau
        self.trajectory_ = out.trajectory
        self.schedule_ = schedule
        self.n_iter_ = len(out.trajectory)
        return self

    def task_losses(self, problem):
        """Reporting loss of every task at the fitted ``(x_, y_)``."""
        if not hasattr(self, "x_"):
            raise NotFittedError("call fit before task_losses")
        return np.array([problem.true_loss(i, self.x_, self.y_[i]) for i in range(problem.n)])

    def score(self, problem, y=None):
        """Negative worst-task loss, so that larger is better."""
        return -float(self.task_losses(problem).max())
