"""Input validation helpers shared by the public entry points."""

import numbers

import numpy as np

from .exceptions import DomainError, ShapeError


def check_vector(v, dim=None, name="vector", allow_nonfinite=False):
    """Return ``v`` as a 1-d float64 array, checking length and finiteness."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-d, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ShapeError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not allow_nonfinite and not np.isfinite(arr).all():
        raise DomainError(f"{name} contains NaN or Inf")
    return arr


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise DomainError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise DomainError(f"{name} must be > 0, got {value}")
    if not strict and value < 0:
        raise DomainError(f"{name} must be >= 0, got {value}")
    return float(value)


def check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise DomainError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_task(i, n):
    if isinstance(i, bool) or not isinstance(i, numbers.Integral):
        raise IndexError(f"task index must be an integer, got {i!r}")
    if not 0 <= i < n:
        raise IndexError(f"task index {i} out of range for {n} tasks")
    return int(i)


def check_seed(random_state):
    """Normalize a seed argument to a non-negative int.

    ``None`` maps to 0 so that default runs stay reproducible.
    """
    if random_state is None:
        return 0
    if isinstance(random_state, bool) or not isinstance(random_state, numbers.Integral):
        raise DomainError(f"seed must be an integer, got {random_state!r}")
    if random_state < 0:
        raise DomainError(f"seed must be non-negative, got {random_state}")
    return int(random_state)
