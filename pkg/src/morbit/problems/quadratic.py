"""Quadratic bilevel tasks with closed-form inner solutions.

Task ``i`` has

    g_i(x, y) = 1/2 y^T A_i y - y^T (B_i x + c_i)
    f_i(x, y) = 1/2 ||y - t_i||^2

so ``y_i*(x) = A_i^{-1} (B_i x + c_i)`` and every oracle is available in
closed form.  Used to verify the hypergradient and convergence metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .._validation import check_positive, check_seed, check_vector
from ..core import FULL_BATCH, Ball, Box, ProblemOracles, RegularityConstants, Unconstrained
from ..exceptions import DomainError, NotStronglyConvex, ShapeError


@dataclass
class QuadraticBilevelSpec:
    A: list
    B: list
    c: list
    t: list
    noise_sigma: float = 0.0

    @property
    def n(self):
        return len(self.A)


class QuadraticBilevel(ProblemOracles):
    """Closed-form oracles for a :class:`QuadraticBilevelSpec`."""

    def __init__(self, spec):
        if not spec.A:
            raise ShapeError("need at least one task")
        if not (len(spec.A) == len(spec.B) == len(spec.c) == len(spec.t)):
            raise ShapeError("A, B, c, t must list the same number of tasks")
        self.spec = spec
        self.noise_sigma = check_positive(float(spec.noise_sigma), "noise_sigma", strict=False)
        self.A, self.B, self.c, self.t = [], [], [], []
        self._chol = []
        self._Ainv = []
        d1 = None
        for i, (A, B, c, t) in enumerate(zip(spec.A, spec.B, spec.c, spec.t)):
            A = np.atleast_2d(np.asarray(A, dtype=np.float64))
            B = np.atleast_2d(np.asarray(B, dtype=np.float64))
            d2 = A.shape[0]
            if A.shape != (d2, d2):
                raise ShapeError(f"A[{i}] must be square, got {A.shape}")
            if B.shape[0] != d2:
                raise ShapeError(f"B[{i}] must have {d2} rows, got {B.shape}")
            if d1 is None:
                d1 = B.shape[1]
            elif B.shape[1] != d1:
                raise ShapeError(f"B[{i}] has {B.shape[1]} columns, expected {d1}")
            if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
                raise NotStronglyConvex(f"A[{i}] is not symmetric")
            try:
                chol = scipy.linalg.cho_factor(A, lower=True)
            except np.linalg.LinAlgError:
                raise NotStronglyConvex(f"A[{i}] is not positive definite") from None
            self.A.append(A)
            self.B.append(B)
            self.c.append(check_vector(c, d2, name=f"c[{i}]"))
            self.t.append(check_vector(t, d2, name=f"t[{i}]"))
            self._chol.append(chol)
            # explicit inverse: d2 is small and the closed forms run every iteration
            Ainv = scipy.linalg.cho_solve(chol, np.eye(d2))
            self._Ainv.append(0.5 * (Ainv + Ainv.T))
        self.n = len(self.A)
        self.outer_dim = d1
        self.inner_dims = [A.shape[0] for A in self.A]

    # f ---------------------------------------------------------------------
    def f_value(self, i, x, y, batch=FULL_BATCH):
        r = y - self.t[i]
        return 0.5 * float(r @ r)

    def grad_x_f(self, i, x, y, batch=FULL_BATCH):
        return np.zeros(self.outer_dim)

    def grad_y_f(self, i, x, y, batch=FULL_BATCH):
        return y - self.t[i]

    # g ---------------------------------------------------------------------
    def g_value(self, i, x, y, batch=FULL_BATCH):
        return 0.5 * float(y @ self.A[i] @ y) - float(y @ (self.B[i] @ x + self.c[i]))

    def grad_y_g(self, i, x, y, batch=FULL_BATCH):
        grad = self.A[i] @ y - (self.B[i] @ x + self.c[i])
        if self.noise_sigma > 0 and not batch.is_full:
            rng = np.random.default_rng(batch.key)
            scale = self.noise_sigma * (1.0 + np.linalg.norm(grad))
            grad = grad + scale * rng.standard_normal(grad.shape[0])
        return grad

    def hvp_yy_g(self, i, x, y, v, batch=FULL_BATCH):
        return self.A[i] @ v

    def hvp_xy_g(self, i, x, y, v, batch=FULL_BATCH):
        return -(self.B[i].T @ v)

    def hessian_yy_g(self, i, x, y, batch=FULL_BATCH):
        return self.A[i]

    # closed forms ----------------------------------------------------------
    def exact_inner_opt(self, i, x):
        return self._Ainv[i] @ (self.B[i] @ x + self.c[i])

    def exact_ell(self, i, x):
        return self.f_value(i, x, self.exact_inner_opt(i, x))

    def exact_grad_ell(self, i, x):
        """``B_i^T A_i^{-1} (y_i*(x) - t_i)``."""
        r = self.exact_inner_opt(i, x) - self.t[i]
        return self.B[i].T @ (self._Ainv[i] @ r)

    def ell_hessian(self, i):
        """Hessian of ``ell_i``: ``M^T M`` with ``M = A_i^{-1} B_i``."""
        M = scipy.linalg.cho_solve(self._chol[i], self.B[i])
        return M.T @ M

    def hypergrad_error_constant(self):
        """Largest ``||B_i^T A_i^{-1}||_2``: the hypergradient error per unit inner error."""
        return max(np.linalg.norm(scipy.linalg.cho_solve(ch, B), 2)
                   for ch, B in zip(self._chol, self.B))

    def loss_bound(self, constraint):
        """Upper bound on every ``ell_i`` over a bounded constraint set.

        ``y_i*(x) - t_i = M_i x + r_i`` with ``M_i = A_i^{-1} B_i``, so on a
        ball of radius ``R`` around ``x_c`` the loss is at most
        ``1/2 (||M_i|| R + ||M_i x_c + r_i||)^2``.  Boxes use their
        circumscribed ball.
        """
        if isinstance(constraint, Ball):
            center = np.broadcast_to(constraint.center, self.outer_dim)
            radius = constraint.radius
        elif isinstance(constraint, Box):
            lo = np.broadcast_to(constraint.lo, self.outer_dim)
            hi = np.broadcast_to(constraint.hi, self.outer_dim)
            if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
                raise DomainError("losses are unbounded on an unbounded box")
            center = 0.5 * (lo + hi)
            radius = 0.5 * float(np.linalg.norm(hi - lo))
        else:
            raise DomainError("losses are unbounded without a bounded constraint set")
        bound = 0.0
        for i in range(self.n):
            M = self._Ainv[i] @ self.B[i]
            offset = np.linalg.norm(self.exact_inner_opt(i, center) - self.t[i])
            bound = max(bound, 0.5 * (np.linalg.norm(M, 2) * radius + offset) ** 2)
        return float(bound)

    def regularity_constants(self, x_ref=None, constraint=None, **overrides):
        """Constants for the step-size schedule computed from the instance.

        With a bounded ``constraint`` ``B_ell`` is the certified
        :meth:`loss_bound`; otherwise it is the largest task loss at ``x_ref``
        (default: the origin).
        """
        eigs = [np.linalg.eigvalsh(A) for A in self.A]
        mu_g = min(e[0] for e in eigs)
        L_g = max(e[-1] for e in eigs)
        L = self.hypergrad_error_constant()
        if constraint is not None and not isinstance(constraint, Unconstrained):
            B_ell = self.loss_bound(constraint)
        else:
            x_ref = np.zeros(self.outer_dim) if x_ref is None else x_ref
            B_ell = max(self.exact_ell(i, x_ref) for i in range(self.n))
        sigma_g = 2.0 * self.noise_sigma * np.sqrt(max(self.inner_dims))
        values = dict(mu_g=mu_g, L_g=L_g, G_y=L, L=L, B_ell=max(B_ell, 1e-12), sigma_g=sigma_g)
        values.update(overrides)
        return RegularityConstants(**values)


def quadratic_oracles(spec):
    return QuadraticBilevel(spec)


def random_quadratic_spec(n, d1, d2, seed=0, noise_sigma=0.0, eig_range=(1.0, 2.0),
                          coupling=1.0, target_scale=1.0, coupling_kind="gaussian"):
    """Random well-conditioned instance.

    ``A_i`` has eigenvalues uniform in ``eig_range``.  ``B_i`` is Gaussian
    with entries of variance ``coupling**2 / d1`` (``coupling_kind="gaussian"``)
    or ``coupling`` times a random matrix with orthonormal columns or rows
    (``"orthogonal"``, every singular value equal to ``coupling``).  ``c_i``
    and ``t_i`` are standard Gaussian scaled by ``target_scale / sqrt(d2)``.
    """
    if coupling_kind not in ("gaussian", "orthogonal"):
        raise DomainError(f"unknown coupling_kind {coupling_kind!r}")
    rng = np.random.default_rng(check_seed(seed))
    d2s = [d2] * n if np.isscalar(d2) else list(d2)
    A, B, c, t = [], [], [], []
    lo, hi = eig_range
    for i in range(n):
        d = d2s[i]
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        ev = rng.uniform(lo, hi, size=d)
        Ai = (Q * ev) @ Q.T
        A.append(0.5 * (Ai + Ai.T))
        if coupling_kind == "gaussian":
            B.append(coupling * rng.standard_normal((d, d1)) / np.sqrt(d1))
        else:
            G = rng.standard_normal((max(d, d1), min(d, d1)))
            U, _ = np.linalg.qr(G)
            B.append(coupling * (U if d >= d1 else U.T))
        c.append(target_scale * rng.standard_normal(d) / np.sqrt(d))
        t.append(target_scale * rng.standard_normal(d) / np.sqrt(d))
    return QuadraticBilevelSpec(A=A, B=B, c=c, t=t, noise_sigma=noise_sigma)


def quadratic_benchmark(seed=0, n=5, d1=8, d2=8, radius=3.0, noise_sigma=0.0):
    """Convergence benchmark: orthogonal coupling on a ball of feasible ``x``.

    Returns ``(problem, constraint, constants)`` with the constants ready for
    the theorem-based step sizes.  Orthogonal coupling keeps every ``ell_i``
    well conditioned; the ball makes the task losses bounded so ``B_ell`` is
    a certified bound rather than a guess.
    """
    spec = random_quadratic_spec(n, d1, d2, seed=seed, noise_sigma=noise_sigma,
                                 coupling_kind="orthogonal")
    problem = QuadraticBilevel(spec)
    constraint = Ball(center=np.zeros(d1), radius=radius)
    return problem, constraint, problem.regularity_constants(constraint=constraint)
