"""Small hand-checkable problems and reference oracles used across the tests."""

import itertools

import numpy as np

from morbit.core import FULL_BATCH, ProblemOracles
from morbit.problems import QuadraticBilevel, QuadraticBilevelSpec


class LinearInner(ProblemOracles):
    """``g = 1/2 y^T M y - y^T x`` and ``f = 1/2 ||y||^2 + c``, one or more copies.

    With ``M = I`` the inner optimum is ``x`` and the outer loss ``1/2 ||x||^2``.
    ``offsets`` adds a constant to each task's outer loss.
    """

    def __init__(self, M, offsets=(0.0,)):
        self.M = np.atleast_2d(np.asarray(M, dtype=np.float64))
        self.offsets = list(offsets)
        self.n = len(self.offsets)
        self.outer_dim = self.M.shape[0]
        self.inner_dims = [self.M.shape[0]] * self.n

    def f_value(self, i, x, y, batch=FULL_BATCH):
        return 0.5 * float(y @ y) + self.offsets[i]

    def g_value(self, i, x, y, batch=FULL_BATCH):
        return 0.5 * float(y @ self.M @ y) - float(y @ x)

    def grad_x_f(self, i, x, y, batch=FULL_BATCH):
        return np.zeros(self.outer_dim)

    def grad_y_f(self, i, x, y, batch=FULL_BATCH):
        return np.array(y, dtype=np.float64)

    def grad_y_g(self, i, x, y, batch=FULL_BATCH):
        return self.M @ y - x

    def hvp_yy_g(self, i, x, y, v, batch=FULL_BATCH):
        return self.M @ v

    def hvp_xy_g(self, i, x, y, v, batch=FULL_BATCH):
        return -np.asarray(v, dtype=np.float64)

    def exact_inner_opt(self, i, x):
        return np.linalg.solve(self.M, x)


class OuterOnly(LinearInner):
    """Outer loss independent of the inner variable: ``f = 1/2 ||x||^2``."""

    def f_value(self, i, x, y, batch=FULL_BATCH):
        return 0.5 * float(x @ x)

    def grad_x_f(self, i, x, y, batch=FULL_BATCH):
        return np.array(x, dtype=np.float64)

    def grad_y_f(self, i, x, y, batch=FULL_BATCH):
        return np.zeros_like(y)


class Indefinite(LinearInner):
    """Inner Hessian with a negative eigenvalue, for error paths."""

    def __init__(self):
        super().__init__(np.diag([1.0, -1.0]))


class ScaledGrad:
    """Delegates to ``inner`` but multiplies one oracle's output by ``factor``."""

    def __init__(self, inner, oracle="grad_y_g", factor=2.0):
        self._inner = inner
        self._oracle = oracle
        self._factor = factor

    def __getattr__(self, name):
        attr = getattr(self._inner, name)
        if name == self._oracle:
            return lambda *args, **kwargs: self._factor * attr(*args, **kwargs)
        return attr


def quadratic_problem(n=2, d1=3, d2=4, seed=0, **kw):
    from morbit.problems import random_quadratic_spec
    return QuadraticBilevel(random_quadratic_spec(n, d1, d2, seed=seed, **kw))


def single_quadratic(A, B, c=None, t=None):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    d2 = A.shape[0]
    c = np.zeros(d2) if c is None else np.asarray(c, dtype=np.float64)
    t = np.zeros(d2) if t is None else np.asarray(t, dtype=np.float64)
    return QuadraticBilevel(QuadraticBilevelSpec(A=[A], B=[B], c=[c], t=[t]))


def simplex_qp_oracle(v):
    """Exact simplex projection by enumerating every support set."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    best, best_val = None, np.inf
    for size in range(1, n + 1):
        for support in itertools.combinations(range(n), size):
            s = list(support)
            w = np.zeros(n)
            # minimize ||w_S - v_S||^2 subject to sum w_S = 1
            w[s] = v[s] + (1.0 - v[s].sum()) / size
            if w.min() < -1e-12:
                continue
            val = float((w - v) @ (w - v))
            if val < best_val:
                best, best_val = w, val
    return best


def central_diff(fun, z, eps=1e-6):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    for j in range(z.shape[0]):
        e = np.zeros_like(z)
        e[j] = eps
        out[j] = (fun(z + e) - fun(z - e)) / (2 * eps)
    return out


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
