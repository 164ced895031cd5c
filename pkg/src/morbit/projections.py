"""Euclidean projections onto the probability simplex and the outer set."""

import numpy as np

from ._validation import check_vector
from .core import Ball, Box, Unconstrained
from .exceptions import DomainError, ShapeError

_EPS = np.finfo(np.float64).eps
SIMPLEX_TOL = 1e-12


def project_simplex(v):
    """Project ``v`` onto ``{w : w >= 0, sum(w) = 1}``.

    Sort-and-threshold: with ``u`` sorted in decreasing order, find the
    largest ``j`` such that ``u_j - (sum_{r<=j} u_r - 1) / j > 0`` and shift
    every entry by that threshold before clamping at zero.
    """
    v = check_vector(v, name="v")
    n = v.shape[0]
    if n == 0:
        raise ShapeError("cannot project an empty vector onto the simplex")
    if n == 1:
        return np.ones(1)
    # feasible within the simplex tolerance: returning v keeps projection idempotent
    with np.errstate(over="ignore"):
        if v.min() >= 0.0 and abs(v.sum() - 1.0) <= SIMPLEX_TOL:
            return v.copy()
        # the projection is shift invariant; centring on the max keeps the
        # cumulative sums finite for huge inputs
        top = v.max()
        if abs(top) > 1.0:
            v = v - top
    if not np.isfinite(v).all():
        raise DomainError("entries too far apart to project in float64")
    # stable sort keeps ties in original index order
    u = -np.sort(-v, kind="stable")
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    j = ind[cond][-1]
    theta = css[j - 1] / j
    return np.maximum(v - theta, 0.0)


def project_set(v, X, dim=None):
    """Euclidean projection of ``v`` onto a constraint set.

    Identity for :class:`Unconstrained`, a clamp for :class:`Box` and a
    radial rescale toward the center for :class:`Ball`.
    """
    v = check_vector(v, dim=dim, name="v")
    d = v.shape[0]
    if isinstance(X, Unconstrained) or X is None:
        return v.copy()
    if isinstance(X, Box):
        lo, hi = X.lo, X.hi
        if lo.shape[0] not in (1, d):
            raise ShapeError(f"Box has dimension {lo.shape[0]}, vector has {d}")
        return np.minimum(np.maximum(v, lo), hi)
    if isinstance(X, Ball):
        c = X.center
        if c.shape[0] not in (1, d):
            raise ShapeError(f"Ball center has dimension {c.shape[0]}, vector has {d}")
        diff = v - c
        nrm = np.linalg.norm(diff)
        if nrm <= X.radius * (1.0 + 4 * _EPS):
            return v.copy()
        return c + diff * (X.radius / nrm)
    raise TypeError(f"unknown constraint set {X!r}")


def distance_to_set(v, X):
    v = np.asarray(v, dtype=np.float64)
    return float(np.linalg.norm(v - project_set(v, X)))
