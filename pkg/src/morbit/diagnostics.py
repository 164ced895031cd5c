"""Convergence metrics, rate fitting and unseen-task evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_vector
from .core import FULL_BATCH, draw_batch, make_streams
from .exceptions import (DomainError, InnerSolveBudgetExceeded, ProxBudgetExceeded,
                         UnsupportedProblem)
from .hypergrad import ExactSolve, conjugate_gradient, task_hypergrad

_EPS = np.finfo(np.float64).eps


@dataclass
class TrajectoryRecord:
    """Diagnostics for one iteration of the main loop."""

    k: int
    alpha: float
    beta: float
    gamma: float
    f: np.ndarray
    lam: np.ndarray
    grad_norm_x: float
    y_gap: Optional[float] = None
    lambda_gap: Optional[float] = None
    prox_gap: Optional[float] = None

    @property
    def max_f(self):
        return float(np.max(self.f))

    @property
    def mean_f(self):
        return float(np.mean(self.f))


# --------------------------------------------------------------------------
# Inner solutions and task losses
# --------------------------------------------------------------------------

def inner_solution(problem, i, x, tol=1e-10, budget=200, y0=None, allow_fallback=True):
    """``y_i*(x)``, in closed form when available, else by a Newton-CG solve on ``g_i``.

    The fallback minimizes the full-batch inner objective until the gradient
    norm is at most ``tol``; exceeding ``budget`` Newton steps raises
    :class:`InnerSolveBudgetExceeded`.
    """
    if problem.provides_exact:
        return problem.exact_inner_opt(i, x)
    if not allow_fallback:
        raise UnsupportedProblem("no closed-form inner solution and fallback disabled")
    y = problem.initial_y(i) if y0 is None else np.array(y0, dtype=np.float64)
    gnorm = math.inf
    for _ in range(budget):
        grad = problem.grad_y_g(i, x, y, FULL_BATCH)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return y
        forcing = min(0.5, math.sqrt(gnorm))
        try:
            d, _ = conjugate_gradient(lambda v: problem.hvp_yy_g(i, x, y, v, FULL_BATCH),
                                      -grad, tol=forcing, max_iter=10 * y.shape[0] + 50)
        except Exception:
            d = -grad
        slope = float(grad @ d)
        if not slope < 0:
            d, slope = -grad, -gnorm**2
        g0 = problem.g_value(i, x, y, FULL_BATCH)
        t = 1.0
        for _ in range(60):
            if problem.g_value(i, x, y + t * d, FULL_BATCH) <= g0 + 1e-4 * t * slope:
                break
            t *= 0.5
        step = t * d
        if not np.any(step):
            break
        y = y + step
    grad = problem.grad_y_g(i, x, y, FULL_BATCH)
    gnorm = float(np.linalg.norm(grad))
    if gnorm <= tol:
        return y
    raise InnerSolveBudgetExceeded(
        f"inner solve for task {i} stopped at gradient norm {gnorm:.3e}", grad_norm=gnorm)


def task_losses(problem, x, allow_fallback=True):
    """Vector of ``ell_i(x) = f_i(x, y_i*(x))`` over all tasks (full batch)."""
    if problem.provides_exact:
        return np.array([problem.exact_ell(i, x) for i in range(problem.n)])
    return np.array([
        problem.f_value(i, x, inner_solution(problem, i, x, allow_fallback=allow_fallback))
        for i in range(problem.n)])


def y_gap(problem, state, pairing="shifted", allow_fallback=False):
    """``max_i ||y_i - y_i*(x)||^2`` for the paired outer iterate.

    ``"shifted"`` pairs the inner iterates with the previous outer iterate
    (``y_k`` against ``x_{k-1}``); ``"aligned"`` pairs them with the current
    one.  Before the first step both pairings use the current ``x``.
    """
    if pairing not in ("shifted", "aligned"):
        raise DomainError(f"pairing must be 'shifted' or 'aligned', got {pairing!r}")
    x = state.x
    if pairing == "shifted" and state.x_prev is not None:
        x = state.x_prev
    return max_inner_gap(problem, x, state.ys, allow_fallback=allow_fallback)


def max_inner_gap(problem, x, ys, allow_fallback=False):
    worst = 0.0
    for i, y in enumerate(ys):
        d = np.asarray(y) - inner_solution(problem, i, x, allow_fallback=allow_fallback)
        worst = max(worst, float(d @ d))
    return worst


def lambda_gap(problem, x_bar, lambda_bar, losses=None):
    """``max_i ell_i(x) - sum_i lambda_i ell_i(x)``.

    The objective is linear in lambda, so its maximum over the simplex sits
    at a vertex and no optimization is needed.
    """
    lam = check_vector(lambda_bar, problem.n, name="lambda")
    ell = task_losses(problem, x_bar) if losses is None else np.asarray(losses)
    return max(float(ell.max() - lam @ ell), 0.0)


def prox_stationarity(problem, x, lam, rho, budget=10000, tol=1e-8, mode=None):
    """``||x_hat(x) - x||^2`` where ``x_hat`` is the proximal point.

    ``x_hat(x) = argmin_z rho/2 ||z - x||^2 + sum_i lam_i ell_i(z)`` is found
    by gradient descent with backtracking, each ``grad ell_i`` computed from
    the exact inner solution.  ``rho`` must exceed the weak-convexity modulus
    of the losses so that this objective is strongly convex.
    """
    if not rho > 0:
        raise DomainError(f"rho must be positive, got {rho}")
    x = check_vector(x, problem.outer_dim, name="x")
    lam = check_vector(lam, problem.n, name="lambda")
    mode = ExactSolve() if mode is None else mode
    active = [i for i in range(problem.n) if lam[i] != 0.0]

    def objective(z):
        ys = {i: inner_solution(problem, i, z) for i in active}
        val = 0.5 * rho * float((z - x) @ (z - x))
        val += sum(lam[i] * problem.f_value(i, z, ys[i]) for i in active)
        return val, ys

    def gradient(z, ys):
        g = rho * (z - x)
        for i in active:
            g = g + lam[i] * task_hypergrad(problem, i, z, ys[i], FULL_BATCH, mode).grad
        return g

    z = x.copy()
    val, ys = objective(z)
    step = 1.0 / rho
    gap = 0.0
    for _ in range(budget):
        g = gradient(z, ys)
        gnorm = float(np.linalg.norm(g))
        gap = float((z - x) @ (z - x))
        if gnorm <= tol:
            return gap
        while True:
            z_new = z - step * g
            val_new, ys_new = objective(z_new)
            if val_new <= val - 0.5 * step * gnorm**2 or step < 1e-20:
                break
            step *= 0.5
        moved = float(np.linalg.norm(z_new - z))
        z, val, ys = z_new, val_new, ys_new
        # further progress is below what float64 can represent
        if moved <= 4 * _EPS * (1.0 + float(np.linalg.norm(z))):
            return float((z - x) @ (z - x))
        step *= 1.5
    raise ProxBudgetExceeded(
        f"proximal solve did not converge in {budget} iterations", last_gap=gap)


# --------------------------------------------------------------------------
# Rate fitting and trends
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    n_points: int


def running_min(values):
    return np.minimum.accumulate(np.asarray(values, dtype=np.float64))


def rate_fit(series, k_min=1):
    """Least-squares power law ``value ~ C k^slope`` on the running minimum.

    ``series`` is an iterable of ``(k, value)`` pairs, ordered by ``k``.
    Only points with ``k >= k_min`` enter the fit; at least ten are needed.
    """
    pts = [(float(k), float(v)) for k, v in series]
    if not pts:
        raise DomainError("rate_fit needs a non-empty series")
    ks = np.array([p[0] for p in pts])
    vals = np.array([p[1] for p in pts])
    if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
        raise DomainError("rate_fit needs finite positive values")
    if np.any(np.diff(ks) <= 0):
        raise DomainError("series must be ordered by strictly increasing k")
    smooth = running_min(vals)
    keep = ks >= k_min
    if np.any(ks[keep] <= 0):
        raise DomainError("iteration indices must be positive")
    if keep.sum() < 10:
        raise DomainError(f"rate_fit needs at least 10 points with k >= {k_min}, "
                          f"got {int(keep.sum())}")
    lx = np.log(ks[keep])
    ly = np.log(smooth[keep])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_res = float(resid @ resid)
    centered = ly - ly.mean()
    ss_tot = float(centered @ centered)
    r2 = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    return RateFit(slope=float(slope), intercept=float(intercept), r2=float(r2),
                   n_points=int(keep.sum()))


def window_means(values, n_windows=20):
    """Means over ``n_windows`` consecutive, equal-length windows (tail dropped)."""
    values = np.asarray(values, dtype=np.float64)
    width = len(values) // n_windows
    if width < 1:
        raise DomainError(f"need at least {n_windows} values, got {len(values)}")
    return values[: width * n_windows].reshape(n_windows, width).mean(axis=1)


def is_decreasing_trend(values, n_windows=20, atol=0.0, rtol=0.0):
    """True when window means never increase by more than ``atol + rtol * previous``."""
    means = window_means(values, n_windows)
    prev = means[:-1]
    return bool(np.all(means[1:] <= prev + atol + rtol * np.abs(prev)))


# --------------------------------------------------------------------------
# Unseen-task evaluation
# --------------------------------------------------------------------------

@dataclass
class UnseenEvalResult:
    losses: np.ndarray
    max_loss: float
    budget_exhausted: np.ndarray
    worst_history: np.ndarray = field(repr=False)


def fit_head(problem, i, x, steps, lr, batch_size=None, weight_reg_eps=0.0, rng=None,
             record=None):
    """Descent on ``g_i`` in the head with ``x`` frozen; returns the final head."""
    y = problem.initial_y(i)
    for s in range(steps):
        batch = draw_batch(rng, i, batch_size) if batch_size is not None else FULL_BATCH
        h = problem.grad_y_g(i, x, y, batch)
        if weight_reg_eps:
            h = h + weight_reg_eps * problem.penalty_subgrad(i, y)
        y = y - lr * h
        if record is not None:
            record(s, y)
    return y


def unseen_task_eval(problem_factory, x_frozen, new_tasks, inner_budget, lr=0.01,
                     batch_size=None, weight_reg_eps=0.0, seed=0, grad_tol=1e-3):
    """Fit fresh heads on unseen tasks with the shared parameters frozen.

    Parameters
    ----------
    problem_factory : callable
        Maps ``new_tasks`` to a ProblemOracles over those tasks with the same
        outer structure as the training problem.
    x_frozen : ndarray
        Shared parameters learned on the training tasks.
    new_tasks : object
        Task descriptions understood by ``problem_factory``.
    inner_budget : int
        Number of head descent steps per task.

    Returns
    -------
    UnseenEvalResult
        Final true losses per task, their maximum, a per-task flag raised when
        the full-batch head gradient is still above ``grad_tol`` after the
        budget, and the worst-task true loss after every step.
    """
    problem = problem_factory(new_tasks)
    x = check_vector(x_frozen, problem.outer_dim, name="x_frozen")
    streams = make_streams(seed, problem.n)
    history = np.empty((inner_budget, problem.n))
    losses = np.empty(problem.n)
    exhausted = np.zeros(problem.n, dtype=bool)

    for i in range(problem.n):
        def record(s, y, i=i):
            history[s, i] = problem.true_loss(i, x, y)

        y = fit_head(problem, i, x, inner_budget, lr, batch_size, weight_reg_eps,
                     streams[i], record)
        losses[i] = problem.true_loss(i, x, y)
        g = problem.grad_y_g(i, x, y, FULL_BATCH)
        if weight_reg_eps:
            g = g + weight_reg_eps * problem.penalty_subgrad(i, y)
        exhausted[i] = bool(np.linalg.norm(g) > grad_tol)
    worst = history.max(axis=1) if inner_budget else np.empty(0)
    return UnseenEvalResult(losses=losses, max_loss=float(losses.max()),
                            budget_exhausted=exhausted, worst_history=worst)


__all__ = [
    "TrajectoryRecord", "inner_solution", "task_losses", "y_gap", "max_inner_gap",
    "lambda_gap", "prox_stationarity", "RateFit", "rate_fit", "running_min",
    "window_means", "is_decreasing_trend", "UnseenEvalResult", "fit_head",
    "unseen_task_eval",
]
