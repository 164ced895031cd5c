"""Bilevel tasks whose inner objective is a proximal step on a task loss."""

from __future__ import annotations

import numpy as np

from .._validation import check_positive
from ..core import FULL_BATCH, ProblemOracles
from ..exceptions import ShapeError, UnsupportedProblem


class QuadraticLosses:
    """Per-task losses ``ell_i(y) = 1/2 y^T Q_i y - b_i^T y``."""

    def __init__(self, Q, b=None):
        self.Q = [np.atleast_2d(np.asarray(q, dtype=np.float64)) for q in Q]
        self.n = len(self.Q)
        self.dim = self.Q[0].shape[0]
        for q in self.Q:
            if q.shape != (self.dim, self.dim):
                raise ShapeError("all Q_i must be square with a common dimension")
        if b is None:
            b = [np.zeros(self.dim)] * self.n
        self.b = [np.asarray(v, dtype=np.float64) for v in b]
        if len(self.b) != self.n or any(v.shape != (self.dim,) for v in self.b):
            raise ShapeError(f"need {self.n} linear terms of length {self.dim}")

    def value(self, i, y, batch=FULL_BATCH):
        return 0.5 * float(y @ self.Q[i] @ y) - float(self.b[i] @ y)

    def grad(self, i, y, batch=FULL_BATCH):
        return self.Q[i] @ y - self.b[i]

    def hvp(self, i, y, v, batch=FULL_BATCH):
        return self.Q[i] @ v

    def prox_solve(self, i, x, eta):
        """``argmin_y ell_i(y) + eta/2 ||x - y||^2 = (Q_i + eta I)^{-1} (eta x + b_i)``."""
        # solved for the offset from x so that Q = 0, b = 0 returns x bit-exactly
        x = np.asarray(x, dtype=np.float64)
        M = self.Q[i] + eta * np.eye(self.dim)
        return x + np.linalg.solve(M, self.b[i] - self.Q[i] @ x)


class ProximalInnerProblem(ProblemOracles):
    """``g_i(x, y) = ell_i(y) + eta/2 ||x - y||^2`` and ``f_i(x, y) = ell_i(y)``.

    ``losses`` needs ``n``, ``dim`` and ``value/grad/hvp(i, y, ...)``; if it
    also has ``prox_solve(i, x, eta)`` the inner optimum is available exactly.
    """

    def __init__(self, losses, eta):
        self.losses = losses
        self.eta = check_positive(float(eta), "eta")
        self.n = losses.n
        self.outer_dim = losses.dim
        self.inner_dims = [losses.dim] * losses.n

    def f_value(self, i, x, y, batch=FULL_BATCH):
        return self.losses.value(i, y, batch)

    def grad_x_f(self, i, x, y, batch=FULL_BATCH):
        return np.zeros(self.outer_dim)

    def grad_y_f(self, i, x, y, batch=FULL_BATCH):
        return self.losses.grad(i, y, batch)

    def g_value(self, i, x, y, batch=FULL_BATCH):
        d = y - x
        return self.losses.value(i, y, batch) + 0.5 * self.eta * float(d @ d)

    def grad_y_g(self, i, x, y, batch=FULL_BATCH):
        return self.losses.grad(i, y, batch) + self.eta * (y - x)

    def hvp_yy_g(self, i, x, y, v, batch=FULL_BATCH):
        return self.losses.hvp(i, y, v, batch) + self.eta * v

    def hvp_xy_g(self, i, x, y, v, batch=FULL_BATCH):
        return -self.eta * np.asarray(v, dtype=np.float64)

    def initial_y(self, i):
        return np.zeros(self.outer_dim)

    def exact_inner_opt(self, i, x):
        if not hasattr(self.losses, "prox_solve"):
            raise UnsupportedProblem("losses do not provide a closed-form proximal step")
        return self.losses.prox_solve(i, x, self.eta)

    @property
    def provides_exact(self):
        return hasattr(self.losses, "prox_solve")
