"""Single-loop two-timescale descent-ascent for min-max bilevel problems.

Each iteration takes one (or a few) stochastic gradient steps on every inner
variable, one projected hypergradient step on the shared variable ``x`` and
one projected ascent step on the task weights ``lambda``.  With ``n = 1`` the
weight update is inert and the loop is two-timescale stochastic
approximation; with proximal inner objectives it is task-robust MAML.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_positive, check_positive_int, check_seed, check_vector
from .core import (Ball, Box, IterateState, RegularityConstants, Unconstrained,
                   draw_batch, make_streams, sample_batch)
from .diagnostics import TrajectoryRecord, lambda_gap, max_inner_gap, prox_stationarity
from .exceptions import DomainError, MorbitError, NumericalDivergence, ShapeError
from .hypergrad import ExactSolve, weighted_hypergrad
from .problems.proximal import ProximalInnerProblem
from .projections import project_set, project_simplex

MINMAX = "minmax"
MINAVG = "minavg"
PAPER_SHIFTED = "paper_shifted"
ALIGNED = "aligned"


# --------------------------------------------------------------------------
# Step sizes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Theorem1Source:
    K: int
    constants: RegularityConstants
    n: int


@dataclass(frozen=True)
class StepSchedule:
    alpha: float
    beta: float
    gamma: float
    nu: float = math.nan
    source: object = "manual"

    def __post_init__(self):
        check_positive(self.alpha, "alpha")
        check_positive(self.beta, "beta")
        check_positive(self.gamma, "gamma", strict=False)


def _kpow(K, num, den):
    """``K ** (num / den)``, exact when ``K`` is a perfect ``den``-th power."""
    root = round(K ** (1.0 / den))
    for r in (root - 1, root, root + 1):
        if r > 0 and r**den == K:
            return float(r) ** num if num >= 0 else 1.0 / float(r) ** (-num)
    return float(K) ** (num / den)


def theorem1_schedule(constants, n, K):
    """Step sizes prescribed by the convergence theorem.

    ``nu = min(mu_g / (L_g^2 (1 + sigma_g^2)), 2 / mu_g)``,
    ``alpha = min(mu_g nu / (16 G_y L), K^{-3/5} / (4 G_y L))``,
    ``beta = min(nu, 4 K^{-2/5} / mu_g)`` and
    ``gamma = 2 K^{-3/5} / (B_ell sqrt(n))``.
    """
    if not isinstance(constants, RegularityConstants):
        raise DomainError("constants must be a RegularityConstants instance")
    n = check_positive_int(n, "n")
    K = check_positive_int(K, "K")
    c = constants
    denom_nu = c.L_g**2 * (1.0 + c.sigma_g**2)
    if denom_nu == 0 or c.mu_g == 0 or c.G_y * c.L == 0 or c.B_ell == 0:
        raise DomainError("zero denominator in step-size formulas")
    nu = min(c.mu_g / denom_nu, 2.0 / c.mu_g)
    k35 = _kpow(K, -3, 5)
    k25 = _kpow(K, -2, 5)
    alpha = min(c.mu_g * nu / (16.0 * c.G_y * c.L), k35 / (4.0 * c.G_y * c.L))
    beta = min(nu, 4.0 * k25 / c.mu_g)
    gamma = 2.0 * k35 / (c.B_ell * math.sqrt(n))
    return StepSchedule(alpha=alpha, beta=beta, gamma=gamma, nu=nu,
                        source=Theorem1Source(K=K, constants=c, n=n))


@dataclass(frozen=True)
class PlateauScheduler:
    """Scale all step sizes by ``factor`` when the worst task loss stalls.

    Every ``window`` iterations the largest per-task outer loss of that
    iteration is compared with the best seen so far; after ``patience``
    checks without relative improvement above ``threshold`` the step sizes
    shrink.
    """

    window: int = 100
    patience: int = 10
    factor: float = 0.1
    threshold: float = 1e-4

    def __post_init__(self):
        check_positive_int(self.window, "plateau.window")
        check_positive_int(self.patience, "plateau.patience")
        if not 0.0 < self.factor < 1.0:
            raise DomainError(f"plateau.factor must lie in (0, 1), got {self.factor}")


# --------------------------------------------------------------------------
# Configuration and output
# --------------------------------------------------------------------------

@dataclass
class SolverConfig:
    K: int
    schedule: StepSchedule
    mode: str = MINMAX
    hypergrad_mode: object = field(default_factory=ExactSolve)
    inner_steps_per_outer: int = 1
    lambda_reg_eps: float = 0.0
    weight_reg_eps: float = 0.0
    g_batch_size: Optional[int] = None
    f_batch_size: Optional[int] = None
    lambda_batch_size: Optional[int] = None
    plateau: Optional[PlateauScheduler] = None
    return_index_rule: str = PAPER_SHIFTED
    constraint: object = field(default_factory=Unconstrained)
    x0: Optional[np.ndarray] = None
    ys0: Optional[list] = None
    lambda0: Optional[np.ndarray] = None
    track_gaps: bool = True
    checkpoint_every: int = 0
    prox_rho: float = 1.0
    prox_budget: int = 10000
    n_jobs: int = 1

    def validate(self):
        check_positive_int(self.K, "K")
        if not isinstance(self.schedule, StepSchedule):
            raise DomainError("schedule must be a StepSchedule")
        if self.mode not in (MINMAX, MINAVG):
            raise DomainError(f"mode must be '{MINMAX}' or '{MINAVG}', got {self.mode!r}")
        if self.return_index_rule not in (PAPER_SHIFTED, ALIGNED):
            raise DomainError(f"unknown return_index_rule {self.return_index_rule!r}")
        check_positive_int(self.inner_steps_per_outer, "inner_steps_per_outer")
        check_positive(self.lambda_reg_eps, "lambda_reg_eps", strict=False)
        check_positive(self.weight_reg_eps, "weight_reg_eps", strict=False)
        if not isinstance(self.constraint, (Unconstrained, Box, Ball)):
            raise DomainError(f"unknown constraint set {self.constraint!r}")
        if self.checkpoint_every < 0:
            raise DomainError("checkpoint_every must be >= 0")
        check_positive_int(self.n_jobs, "n_jobs")
        return self


@dataclass
class SolverOutput:
    x_bar: np.ndarray
    y_bar: list
    lambda_bar: np.ndarray
    tau: int
    trajectory: list
    final_state: IterateState = field(repr=False)


# --------------------------------------------------------------------------
# Main loop
# --------------------------------------------------------------------------

def initial_state(problem, config, seed):
    n = problem.n
    d1 = problem.outer_dim
    if config.x0 is not None:
        x0 = check_vector(config.x0, d1, name="x0")
    else:
        x0 = problem.initial_x()
        x0 = config.constraint.default_point(d1) if x0 is None else check_vector(x0, d1, name="x0")
    x0 = project_set(x0, config.constraint)
    if config.ys0 is not None:
        if len(config.ys0) != n:
            raise ShapeError(f"ys0 must list {n} vectors")
        ys0 = [check_vector(y, problem.inner_dims[i], name=f"ys0[{i}]")
               for i, y in enumerate(config.ys0)]
    else:
        ys0 = [np.asarray(problem.initial_y(i), dtype=np.float64) for i in range(n)]
    if config.lambda0 is not None:
        lam0 = check_vector(config.lambda0, n, name="lambda0")
        if lam0.min() < 0 or abs(lam0.sum() - 1.0) > 1e-12:
            raise DomainError("lambda0 must lie on the simplex")
    else:
        lam0 = np.full(n, 1.0 / n)
    return IterateState(x=x0, ys=ys0, lam=lam0, k=0, rng_streams=make_streams(seed, n))


def _check_finite(name, arr, k):
    if not np.isfinite(arr).all():
        raise NumericalDivergence(f"non-finite {name} at iteration {k}", k=k)


def morbit_step(problem, state, config, executor=None):
    """One iteration; returns ``(successor_state, TrajectoryRecord)``.

    Order of operations:

    1. every inner iterate takes ``inner_steps_per_outer`` steps
       ``y <- y - beta * (h_g + eps_w * penalty subgradient)``;
    2. ``x <- proj_X(x - alpha * h_x)`` with ``h_x`` the lambda-weighted
       hypergradient at the old ``x`` and the new inner iterates;
    3. ``lambda <- proj(lambda + gamma * (h_lambda - eps_lambda (lambda - 1/n)))``
       with ``h_lambda`` the per-task outer losses (skipped in min-avg mode).
    """
    n = problem.n
    k = state.k + 1
    sched = config.schedule
    scale = state.step_scale
    alpha = sched.alpha * scale
    beta = sched.beta * scale
    gamma = 0.0 if config.mode == MINAVG else sched.gamma * scale
    x = state.x
    eps_w = config.weight_reg_eps

    def inner(i):
        y = state.ys[i]
        for _ in range(config.inner_steps_per_outer):
            batch = sample_batch(i, state, config.g_batch_size)
            h = np.asarray(problem.grad_y_g(i, x, y, batch), dtype=np.float64)
            if eps_w:
                h = h + eps_w * problem.penalty_subgrad(i, y)
            y = y - beta * h
        return y

    if executor is not None and n > 1:
        ys = list(executor.map(inner, range(n)))
    else:
        ys = [inner(i) for i in range(n)]
    for i, y in enumerate(ys):
        _check_finite(f"y[{i}]", y, k)

    x_stream = state.rng_streams[n]
    f_batches = [draw_batch(x_stream, i, config.f_batch_size) for i in range(n)]
    l_batches = [draw_batch(x_stream, i, config.lambda_batch_size) for i in range(n)]

    est = weighted_hypergrad(problem, x, ys, state.lam, f_batches, config.hypergrad_mode,
                             executor=executor)
    _check_finite("hypergradient", est.grad, k)
    x_new = project_set(x - alpha * est.grad, config.constraint)
    _check_finite("x", x_new, k)

    # h_lambda is needed for the record in both modes; computing it always keeps
    # the random streams aligned between min-max and min-avg runs
    h_lam = np.array([problem.f_value(i, x, ys[i], l_batches[i]) for i in range(n)])
    _check_finite("task losses", h_lam, k)
    if config.mode == MINMAX:
        lam = state.lam
        ascent = lam + gamma * (h_lam - config.lambda_reg_eps * (lam - 1.0 / n))
        _check_finite("lambda ascent step", ascent, k)
        try:
            lam_new = project_simplex(ascent)
        except DomainError as exc:
            raise NumericalDivergence(f"{exc} at iteration {k}", k=k) from None
    else:
        lam_new = state.lam

    new_state = IterateState(x=x_new, ys=ys, lam=lam_new, k=k,
                             rng_streams=state.rng_streams, x_prev=x,
                             step_scale=state.step_scale, best_metric=state.best_metric,
                             stale_checks=state.stale_checks)

    if config.plateau is not None and k % config.plateau.window == 0:
        _plateau_update(new_state, config.plateau, float(h_lam.max()))

    record = TrajectoryRecord(k=k, alpha=alpha, beta=beta, gamma=gamma, f=h_lam, lam=lam_new,
                              grad_norm_x=float(np.linalg.norm(est.grad)))
    if config.track_gaps and problem.provides_exact:
        record.y_gap = max_inner_gap(problem, x, ys)
        record.lambda_gap = lambda_gap(problem, x_new, lam_new)
    if config.checkpoint_every and k % config.checkpoint_every == 0:
        record.prox_gap = prox_stationarity(problem, x_new, lam_new, config.prox_rho,
                                            budget=config.prox_budget)
    return new_state, record


def _plateau_update(state, plateau, metric):
    if metric < state.best_metric * (1.0 - plateau.threshold) or math.isinf(state.best_metric):
        state.best_metric = metric
        state.stale_checks = 0
        return
    state.stale_checks += 1
    if state.stale_checks >= plateau.patience:
        state.step_scale *= plateau.factor
        state.stale_checks = 0


def run(problem, config, seed=0):
    """Run ``config.K`` iterations and return the randomly indexed iterate.

    The return index ``tau`` is drawn uniformly from ``{1..K}`` on its own
    stream before the loop starts; the output is ``x_tau``, ``lambda_tau``
    and either ``y_{tau-1}`` (``paper_shifted``, with ``y_0`` read as the
    initial inner iterate) or ``y_tau`` (``aligned``).

    A failing iteration re-raises its error with ``exc.k`` and the partial
    ``exc.trajectory`` attached.
    """
    config.validate()
    seed = check_seed(seed)
    state = initial_state(problem, config, seed)
    n = problem.n
    tau = int(state.rng_streams[n + 1].integers(1, config.K + 1))
    trajectory = []
    prev_ys = state.ys
    snap = None
    executor = ThreadPoolExecutor(config.n_jobs) if config.n_jobs > 1 else None
    try:
        for k in range(1, config.K + 1):
            # state holds x_k, y_k, lambda_k here
            if k == tau:
                y_bar = prev_ys if config.return_index_rule == PAPER_SHIFTED else state.ys
                snap = (state.x.copy(), [y.copy() for y in y_bar], state.lam.copy())
            prev_ys = state.ys
            try:
                state, record = morbit_step(problem, state, config, executor)
            except MorbitError as exc:
                exc.k = k
                exc.trajectory = trajectory
                raise
            trajectory.append(record)
    finally:
        if executor is not None:
            executor.shutdown()
    x_bar, y_bar, lam_bar = snap
    return SolverOutput(x_bar=x_bar, y_bar=y_bar, lambda_bar=lam_bar, tau=tau,
                        trajectory=trajectory, final_state=state)


def trmaml_inner(problem_ell, eta):
    """Wrap per-task losses into bilevel oracles with a proximal inner objective.

    ``g_i(x, y) = ell_i(y) + eta/2 ||x - y||^2`` and ``f_i(x, y) = ell_i(y)``.
    """
    return ProximalInnerProblem(problem_ell, eta)


__all__ = [
    "MINMAX", "MINAVG", "PAPER_SHIFTED", "ALIGNED", "StepSchedule", "Theorem1Source",
    "theorem1_schedule", "PlateauScheduler", "SolverConfig", "SolverOutput",
    "initial_state", "morbit_step", "run", "trmaml_inner",
]
