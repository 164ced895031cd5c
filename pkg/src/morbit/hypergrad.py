"""Per-task hypergradients via implicit differentiation.

For task ``i`` the outer gradient through the inner argmin is

    grad_x f_i(x, y) - H_xy(x, y) [H_yy(x, y)]^{-1} grad_y f_i(x, y)

evaluated at the current inner iterate ``y`` (exact when ``y = y_i*(x)``).
Three ways of handling the inverse-Hessian-vector product are offered; the
bias each one introduces is reported alongside the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
import scipy.linalg

from ._validation import check_positive, check_positive_int, check_vector
from .core import FULL_BATCH
from .exceptions import (DomainError, MorbitError, NotStronglyConvex, SolveDiverged,
                         UnsupportedProblem)

DENSE_CUTOFF = 512
_ABS_TOL_FLOOR = 1e-12


@dataclass(frozen=True)
class ExactSolve:
    """Dense symmetric factorization of the inner Hessian."""

    dense_cutoff: int = DENSE_CUTOFF


@dataclass(frozen=True)
class CG:
    """Matrix-free conjugate gradient on Hessian-vector products."""

    tol: float = 1e-10
    max_iter: int = 1000

    def __post_init__(self):
        check_positive(self.tol, "CG.tol")
        check_positive_int(self.max_iter, "CG.max_iter")


@dataclass(frozen=True)
class FirstOrder:
    """Drop the implicit correction term; ``bias_bound`` is the declared b_k."""

    bias_bound: float = 0.0

    def __post_init__(self):
        check_positive(self.bias_bound, "FirstOrder.bias_bound", strict=False)


HypergradMode = Union[ExactSolve, CG, FirstOrder]


@dataclass
class HypergradEstimate:
    grad: np.ndarray
    mode: HypergradMode
    solve_residual: float = 0.0
    bias_bound: float = 0.0
    per_task: list = field(default_factory=list, repr=False)


def conjugate_gradient(matvec, b, tol=1e-10, max_iter=1000):
    """Solve ``A z = b`` for symmetric positive definite ``A``.

    Starts from zero and stops once ``||b - A z|| <= max(tol * ||b||, 1e-12)``.

    Returns
    -------
    z : ndarray
    residual : float
        Final residual norm.

    Raises
    ------
    NotStronglyConvex
        A search direction with non-positive curvature was met.
    SolveDiverged
        ``max_iter`` iterations did not reach the tolerance.
    """
    b = np.asarray(b, dtype=np.float64)
    z = np.zeros_like(b)
    r = b.copy()
    rr = float(r @ r)
    target = max(tol * np.sqrt(rr), _ABS_TOL_FLOOR)
    if np.sqrt(rr) <= target:
        return z, float(np.sqrt(rr))
    p = r.copy()
    for _ in range(max_iter):
        Ap = matvec(p)
        curv = float(p @ Ap)
        if not curv > 0.0:
            raise NotStronglyConvex(
                f"non-positive curvature {curv:.3e} met in conjugate gradient")
        step = rr / curv
        z += step * p
        r -= step * Ap
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= target:
            return z, float(np.sqrt(rr_new))
        p = r + (rr_new / rr) * p
        rr = rr_new
    residual = float(np.sqrt(rr))
    raise SolveDiverged(
        f"conjugate gradient did not reach tolerance in {max_iter} iterations "
        f"(residual {residual:.3e})", residual=residual)


def dense_inner_hessian(problem, i, x, y, batch=FULL_BATCH, cutoff=DENSE_CUTOFF):
    H = problem.hessian_yy_g(i, x, y, batch)
    if H is not None:
        return np.asarray(H, dtype=np.float64)
    d = y.shape[0]
    if d > cutoff:
        raise DomainError(
            f"inner dimension {d} exceeds the dense cutoff {cutoff}; use CG mode")
    cols = [problem.hvp_yy_g(i, x, y, e, batch) for e in np.eye(d)]
    H = np.column_stack(cols)
    return 0.5 * (H + H.T)


def _solve_dense(H, rhs):
    try:
        if not (np.isfinite(H).all() and np.isfinite(rhs).all()):
            raise np.linalg.LinAlgError("non-finite entries")
        factor = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotStronglyConvex(f"inner Hessian is not positive definite: {exc}") from None
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


def task_hypergrad(problem, i, x, y, batch=FULL_BATCH, mode=None, g_batch=None):
    """Approximate outer gradient of task ``i`` at the inner iterate ``y``.

    Parameters
    ----------
    problem : ProblemOracles
    i : int
        Task index.
    x, y : ndarray
        Outer variable and task-``i`` inner variable.
    batch : BatchHandle
        Batch for the outer (f) oracles.
    mode : ExactSolve, CG or FirstOrder
        Defaults to ``ExactSolve()``.
    g_batch : BatchHandle, optional
        Batch for the inner Hessian products; defaults to ``batch``.

    Returns
    -------
    HypergradEstimate
    """
    mode = ExactSolve() if mode is None else mode
    g_batch = batch if g_batch is None else g_batch
    x = check_vector(x, problem.outer_dim, name="x")
    y = check_vector(y, problem.inner_dims[i], name=f"y[{i}]")

    gx = np.asarray(problem.grad_x_f(i, x, y, batch), dtype=np.float64)
    if isinstance(mode, FirstOrder):
        return HypergradEstimate(grad=gx, mode=mode, bias_bound=mode.bias_bound)

    gy = np.asarray(problem.grad_y_f(i, x, y, batch), dtype=np.float64)
    residual = 0.0
    if isinstance(mode, ExactSolve):
        H = dense_inner_hessian(problem, i, x, y, g_batch, mode.dense_cutoff)
        z = _solve_dense(H, gy)
    elif isinstance(mode, CG):
        z, residual = conjugate_gradient(
            lambda v: problem.hvp_yy_g(i, x, y, v, g_batch), gy,
            tol=mode.tol, max_iter=mode.max_iter)
    else:
        raise TypeError(f"unknown hypergradient mode {mode!r}")

    if not np.any(z):
        correction = np.zeros_like(gx)
    else:
        correction = np.asarray(problem.hvp_xy_g(i, x, y, z, g_batch), dtype=np.float64)
    return HypergradEstimate(grad=gx - correction, mode=mode, solve_residual=residual)


def weighted_hypergrad(problem, x, ys, lam, batches=None, mode=None, g_batches=None,
                       executor=None):
    """``sum_i lam_i * task_hypergrad(i)``, reduced in task order.

    Tasks with zero weight are not evaluated.  Errors from a task are
    re-raised with ``exc.task`` set to its index.
    """
    n = problem.n
    lam = check_vector(lam, n, name="lambda")
    batches = [FULL_BATCH] * n if batches is None else batches
    g_batches = [None] * n if g_batches is None else g_batches
    active = [i for i in range(n) if lam[i] != 0.0]

    def one(i):
        try:
            return task_hypergrad(problem, i, x, ys[i], batches[i], mode, g_batches[i])
        except MorbitError as exc:
            exc.task = i
            raise

    if executor is not None and len(active) > 1:
        ests = list(executor.map(one, active))
    else:
        ests = [one(i) for i in active]

    grad = np.zeros(problem.outer_dim)
    bias = 0.0
    residual = 0.0
    per_task = [None] * n
    for i, est in zip(active, ests):
        grad += lam[i] * est.grad
        bias += lam[i] * est.bias_bound
        residual = max(residual, est.solve_residual)
        per_task[i] = est
    mode = ExactSolve() if mode is None else mode
    return HypergradEstimate(grad=grad, mode=mode, solve_residual=residual,
                             bias_bound=bias, per_task=per_task)


def _rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), _ABS_TOL_FLOOR)
    return float(np.linalg.norm(a - b) / scale)


@dataclass
class FDCheck:
    max_rel_err: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def fd_check(problem, i, x, eps=1e-5, mode=None):
    """Compare the hypergradient at ``y_i*(x)`` with central differences of ``ell_i``.

    Returns the worst relative error (infinity norm of the difference over
    the infinity norm of the larger side).
    """
    if not problem.provides_exact:
        raise UnsupportedProblem("fd_check needs a problem with exact_inner_opt")
    if not 1e-8 <= eps <= 1e-2:
        raise DomainError(f"eps must lie in [1e-8, 1e-2], got {eps}")
    x = check_vector(x, problem.outer_dim, name="x")
    y_star = problem.exact_inner_opt(i, x)
    analytic = task_hypergrad(problem, i, x, y_star, FULL_BATCH, mode).grad

    numeric = np.empty_like(x)
    for j in range(x.shape[0]):
        step = np.zeros_like(x)
        step[j] = eps
        up = problem.exact_ell(i, x + step)
        down = problem.exact_ell(i, x - step)
        numeric[j] = (up - down) / (2 * eps)

    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), _ABS_TOL_FLOOR)
    err = float(np.abs(analytic - numeric).max() / scale)
    return FDCheck(max_rel_err=err, analytic=analytic, numeric=numeric)
