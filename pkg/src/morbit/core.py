"""Domain types shared by every other module.

A bilevel problem with ``n`` tasks is exposed through :class:`ProblemOracles`:
per-task outer objectives ``f_i(x, y_i)`` and strongly convex inner
objectives ``g_i(x, y_i)``, with first-order oracles and Hessian-vector
products.  Stochasticity enters only through :class:`BatchHandle` values, so
deterministic (full batch) and sampled evaluations share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from ._validation import check_positive, check_positive_int, check_seed, check_task, check_vector
from .exceptions import DomainError, UnsupportedProblem


# --------------------------------------------------------------------------
# Batches and random streams
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchHandle:
    """Opaque identifier of a minibatch.

    ``size=None`` is the full batch: oracles evaluated with it carry no
    sampling noise.  Otherwise ``key`` seeds whatever the problem uses to
    realize the batch (sample indices, fresh inputs, gradient noise).
    """

    task: Optional[int]
    size: Optional[int]
    key: int = 0

    @property
    def is_full(self):
        return self.size is None


FULL_BATCH = BatchHandle(task=None, size=None, key=0)


def make_streams(seed, n):
    """Spawn the ``n + 2`` independent generators used by a run.

    Streams ``0..n-1`` sample inner batches for each task, stream ``n``
    samples outer (f) batches and stream ``n + 1`` draws the return index.
    """
    ss = np.random.SeedSequence(check_seed(seed))
    return [np.random.default_rng(child) for child in ss.spawn(n + 2)]


def draw_batch(rng, task, batch_size):
    if batch_size is None or batch_size == "full":
        return BatchHandle(task=task, size=None)
    batch_size = check_positive_int(batch_size, "batch_size")
    key = int(rng.integers(0, 2**63 - 1))
    return BatchHandle(task=task, size=batch_size, key=key)


def sample_batch(task, state, batch_size):
    """Draw a batch handle for ``task`` from that task's own stream."""
    check_task(task, len(state.ys))
    return draw_batch(state.rng_streams[task], task, batch_size)


# --------------------------------------------------------------------------
# Problem oracles
# --------------------------------------------------------------------------

class ProblemOracles:
    """Interface every bilevel problem implements.

    Subclasses set ``n``, ``outer_dim`` and ``inner_dims`` and implement the
    oracle methods.  ``exact_inner_opt`` / ``exact_ell`` are optional; the
    default implementations raise :class:`UnsupportedProblem`.

    Oracles must be pure: no state is mutated by evaluating them, so they can
    be called concurrently on shared arrays.
    """

    n: int
    outer_dim: int
    inner_dims: list

    # --- required oracles -------------------------------------------------
    def f_value(self, i, x, y, batch=FULL_BATCH):
        raise NotImplementedError

    def g_value(self, i, x, y, batch=FULL_BATCH):
        raise NotImplementedError

    def grad_x_f(self, i, x, y, batch=FULL_BATCH):
        raise NotImplementedError

    def grad_y_f(self, i, x, y, batch=FULL_BATCH):
        raise NotImplementedError

    def grad_y_g(self, i, x, y, batch=FULL_BATCH):
        raise NotImplementedError

    def hvp_yy_g(self, i, x, y, v, batch=FULL_BATCH):
        raise NotImplementedError

    def hvp_xy_g(self, i, x, y, v, batch=FULL_BATCH):
        """Return ``d/dx <grad_y g_i(x, y), v>``, a vector of length ``outer_dim``."""
        raise NotImplementedError

    # --- optional oracles -------------------------------------------------
    def hessian_yy_g(self, i, x, y, batch=FULL_BATCH):
        """Dense inner Hessian, or ``None`` to let callers assemble it from HVPs."""
        return None

    def exact_inner_opt(self, i, x):
        raise UnsupportedProblem(f"{type(self).__name__} has no closed-form inner solution")

    def exact_ell(self, i, x):
        return self.f_value(i, x, self.exact_inner_opt(i, x))

    @property
    def provides_exact(self):
        return type(self).exact_inner_opt is not ProblemOracles.exact_inner_opt

    def true_loss(self, i, x, y):
        """Loss used for reporting; problems with held-out data override this."""
        return self.f_value(i, x, y)

    def initial_x(self):
        return None

    def initial_y(self, i):
        return np.zeros(self.inner_dims[i])

    def penalty_subgrad(self, i, y):
        """Subgradient of the weight penalty ``sum_blocks ||w||_2`` at ``y``.

        The default treats the whole head as one block.
        """
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return np.zeros_like(y)
        return y / nrm


# --------------------------------------------------------------------------
# Constraint sets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Unconstrained:
    def default_point(self, dim):
        return np.zeros(dim)


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = check_vector(self.lo, name="Box.lo", allow_nonfinite=True)
        hi = check_vector(self.hi, name="Box.hi", allow_nonfinite=True)
        if lo.shape != hi.shape:
            lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise DomainError("Box bounds must not be NaN")
        if np.any(lo > hi):
            raise DomainError("Box requires lo <= hi elementwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def default_point(self, dim):
        lo, hi = np.broadcast_to(self.lo, dim), np.broadcast_to(self.hi, dim)
        c = np.zeros(dim)
        both = np.isfinite(lo) & np.isfinite(hi)
        c[both] = 0.5 * (lo[both] + hi[both])
        return np.clip(c, lo, hi)


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", check_vector(self.center, name="Ball.center"))
        object.__setattr__(self, "radius", check_positive(self.radius, "Ball.radius"))

    def default_point(self, dim):
        return np.broadcast_to(self.center, dim).astype(np.float64)


ConstraintSet = (Unconstrained, Box, Ball)


# --------------------------------------------------------------------------
# Iterate state
# --------------------------------------------------------------------------

@dataclass
class IterateState:
    """Everything the main loop carries between iterations."""

    x: np.ndarray
    ys: list
    lam: np.ndarray
    k: int
    rng_streams: list
    x_prev: Optional[np.ndarray] = None
    step_scale: float = 1.0
    best_metric: float = math.inf
    stale_checks: int = 0

    @property
    def n(self):
        return len(self.ys)


# --------------------------------------------------------------------------
# Regularity constants
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RegularityConstants:
    """Problem constants that parametrize the step-size schedule.

    These are supplied by the user; nothing in the package estimates them.
    """

    mu_g: float
    L_g: float
    G_y: float
    L: float
    B_ell: float
    sigma_g: float = 0.0
    sigma_f: float = 0.0
    G_f: float = 1.0
    mu_ell: float = 0.0
    C_ell: float = 1.0
    rho: float = 1.0
    b0: float = 0.0

    def __post_init__(self):
        for name in ("mu_g", "L_g", "G_y", "L", "B_ell", "G_f", "C_ell", "rho"):
            check_positive(getattr(self, name), name)
        for name in ("sigma_g", "sigma_f", "b0"):
            check_positive(getattr(self, name), name, strict=False)
        if not np.isfinite(self.mu_ell):
            raise DomainError("mu_ell must be finite")
        if not self.rho > -self.mu_ell:
            raise DomainError(f"rho must exceed -mu_ell ({-self.mu_ell}), got {self.rho}")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class DerivedConstants:
    L: float
    L_f: float
    G_y: float


_AUX_KEYS = ("L_fx", "L_fy", "Lbar_fy", "C_fy", "C_gxy", "L_gxy", "L_gyy",
                "Lbar_gxy", "Lbar_gyy", "C_g")


def derive_lemma0_constants(mu_g, aux):
    """Closed-form smoothness constants of the hypergradient.

    Parameters
    ----------
    mu_g : float or RegularityConstants
        Inner strong-convexity modulus (or a constants object carrying it).
    aux : dict
        Lipschitz and boundedness constants keyed by ``L_fx, L_fy, Lbar_fy,
        C_fy, C_gxy, L_gxy, L_gyy, Lbar_gxy, Lbar_gyy, C_g``.

    Returns
    -------
    DerivedConstants
        ``L`` bounds the hypergradient error per unit inner error, ``L_f`` is
        the smoothness of ``ell_i`` and ``G_y`` the Lipschitz constant of the
        inner solution map.
    """
    if isinstance(mu_g, RegularityConstants):
        mu_g = mu_g.mu_g
    if not isinstance(mu_g, (int, float)) or not mu_g > 0:
        raise DomainError(f"mu_g must be positive, got {mu_g!r}")
    missing = [k for k in _AUX_KEYS if k not in aux]
    if missing:
        raise DomainError(f"missing constants: {', '.join(missing)}")
    a = {k: float(aux[k]) for k in _AUX_KEYS}
    for k, v in a.items():
        if not (np.isfinite(v) and v >= 0):
            raise DomainError(f"{k} must be a finite non-negative number, got {v}")

    L = (a["L_fx"] + a["L_fy"] * a["C_gxy"] / mu_g
         + a["C_fy"] * (a["L_gxy"] / mu_g + a["L_gyy"] * a["C_gxy"] / mu_g**2))
    L_f = (a["L_fx"] + (a["Lbar_fy"] + L) * a["C_gxy"] / mu_g
           + a["C_fy"] * (a["Lbar_gxy"] / mu_g + a["Lbar_gyy"] * a["C_gxy"] / mu_g**2))
    G_y = a["C_g"] / mu_g
    return DerivedConstants(L=L, L_f=L_f, G_y=G_y)
