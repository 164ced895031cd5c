import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from morbit import (CG, DomainError, ExactSolve, FirstOrder, NotStronglyConvex, SolveDiverged,
                    UnsupportedProblem, conjugate_gradient, fd_check, task_hypergrad,
                    weighted_hypergrad)
from morbit.problems import quadratic_benchmark
from helpers import (Indefinite, LinearInner, OuterOnly, central_diff, quadratic_problem,
                     rel_err, single_quadratic)


# --- frozen examples --------------------------------------------------------

def test_identity_inner_map():
    p = LinearInner(np.eye(2))
    x = np.array([1.0, 2.0])
    est = task_hypergrad(p, 0, x, p.exact_inner_opt(0, x))
    np.testing.assert_allclose(est.grad, [1.0, 2.0], rtol=0, atol=1e-15)
    assert est.bias_bound == 0.0


def test_scaled_inner_map():
    A = np.diag([2.0, 1.0])
    p = LinearInner(A)
    x = np.array([2.0, 1.0])
    ys = p.exact_inner_opt(0, x)
    np.testing.assert_allclose(ys, [1.0, 1.0], atol=1e-15)
    grad = task_hypergrad(p, 0, x, ys).grad
    np.testing.assert_allclose(grad, [0.5, 1.0], rtol=0, atol=1e-15)

    def ell(z):
        w = np.linalg.solve(A, z)
        return 0.5 * w @ w
    np.testing.assert_allclose(central_diff(ell, x), grad, rtol=1e-8)


def test_first_order_drops_correction():
    p = LinearInner(np.eye(3))
    est = task_hypergrad(p, 0, np.ones(3), np.arange(3.0), mode=FirstOrder(bias_bound=0.25))
    np.testing.assert_array_equal(est.grad, np.zeros(3))
    assert est.bias_bound == 0.25


def test_weighted_single_task():
    p = quadratic_problem(n=1)
    x, y = np.ones(3), np.ones(4)
    np.testing.assert_array_equal(weighted_hypergrad(p, x, [y], [1.0]).grad,
                                  task_hypergrad(p, 0, x, y).grad)


def test_weighted_skips_zero_weight_task():
    class Mixed(LinearInner):
        def grad_x_f(self, i, x, y, batch=None):
            if i == 0:
                raise AssertionError("task 0 must not be evaluated")
            return super().grad_x_f(i, x, y)

    p = Mixed(np.eye(2), offsets=(0.0, 0.0))
    x, y = np.array([1.0, -1.0]), np.array([0.5, 2.0])
    np.testing.assert_array_equal(weighted_hypergrad(p, x, [y, y], [0.0, 1.0]).grad,
                                  task_hypergrad(p, 1, x, y).grad)


def test_weighted_average_of_two_quadratics():
    p = quadratic_problem(n=2, seed=3)
    x = np.array([0.3, -0.2, 0.9])
    ys = [p.exact_inner_opt(i, x) for i in range(2)]
    got = weighted_hypergrad(p, x, ys, [0.5, 0.5]).grad

    def avg(z):
        return 0.5 * p.exact_ell(0, z) + 0.5 * p.exact_ell(1, z)
    np.testing.assert_allclose(got, central_diff(avg, x), rtol=1e-7)
    np.testing.assert_allclose(got, 0.5 * (p.exact_grad_ell(0, x) + p.exact_grad_ell(1, x)),
                               rtol=1e-12)


def test_fd_check_quadratic():
    p = quadratic_problem(n=2, seed=1)
    assert fd_check(p, 1, np.array([0.2, -1.0, 0.4]), eps=1e-5).max_rel_err <= 1e-6


def test_fd_check_exposes_first_order_bias():
    p = LinearInner(np.diag([2.0, 1.0]))
    assert fd_check(p, 0, np.array([2.0, 1.0]), mode=FirstOrder()).max_rel_err >= 0.1


def test_outer_only_modes_agree():
    p = OuterOnly(np.diag([3.0, 1.0]))
    x = np.array([0.7, -1.1])
    y = p.exact_inner_opt(0, x)
    exact = task_hypergrad(p, 0, x, y, mode=ExactSolve()).grad
    first = task_hypergrad(p, 0, x, y, mode=FirstOrder()).grad
    np.testing.assert_array_equal(exact, first)
    assert fd_check(p, 0, x).max_rel_err <= 1e-9


# --- errors ------------------------------------------------------------------

def test_cg_budget_exhausted_carries_residual():
    M = np.diag(np.linspace(1, 100, 30))
    with pytest.raises(SolveDiverged) as info:
        conjugate_gradient(lambda v: M @ v, np.ones(30), tol=1e-12, max_iter=3)
    assert info.value.residual > 0


@pytest.mark.parametrize("mode", [ExactSolve(), CG()])
def test_negative_curvature_is_loud(mode):
    p = Indefinite()
    with pytest.raises(NotStronglyConvex):
        task_hypergrad(p, 0, np.ones(2), np.array([0.0, 1.0]), mode=mode)


def test_weighted_annotates_failing_task():
    class Bad(LinearInner):
        def hvp_yy_g(self, i, x, y, v, batch=None):
            return -v if i == 1 else v

    p = Bad(np.eye(2), offsets=(0.0, 0.0))
    with pytest.raises(NotStronglyConvex) as info:
        weighted_hypergrad(p, np.ones(2), [np.ones(2)] * 2, [0.5, 0.5], mode=CG())
    assert info.value.task == 1


def test_fd_check_needs_exact_solution():
    class NoExact(LinearInner):
        exact_inner_opt = LinearInner.__mro__[1].exact_inner_opt

    with pytest.raises(UnsupportedProblem):
        fd_check(NoExact(np.eye(2)), 0, np.ones(2))
    with pytest.raises(DomainError):
        fd_check(LinearInner(np.eye(2)), 0, np.ones(2), eps=1.0)


def test_dense_cutoff_enforced():
    p = quadratic_problem(n=1, d1=2, d2=6)

    class NoDense(type(p)):
        def hessian_yy_g(self, *a, **k):
            return None

    q = NoDense(p.spec)
    with pytest.raises(DomainError):
        task_hypergrad(q, 0, np.ones(2), np.ones(6), mode=ExactSolve(dense_cutoff=4))


# --- properties --------------------------------------------------------------

def _spd(rng, d, cond):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (Q * np.geomspace(1.0, cond, d)) @ Q.T


@given(st.integers(1, 50), st.integers(0, 2**31), st.floats(1.0, 1e3))
def test_cg_matches_dense_solve(d, seed, cond):
    rng = np.random.default_rng(seed)
    M = _spd(rng, d, cond)
    b = rng.standard_normal(d)
    z, res = conjugate_gradient(lambda v: M @ v, b, tol=1e-10, max_iter=10 * d + 50)
    assert res <= max(1e-10 * np.linalg.norm(b), 1e-12)
    assert rel_err(z, np.linalg.solve(M, b)) <= 1e-8 * cond


@given(st.integers(1, 50), st.integers(0, 2**31))
def test_cg_mode_matches_exact_mode(d2, seed):
    p = quadratic_problem(n=1, d1=4, d2=d2, seed=seed)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(4), rng.standard_normal(d2)
    dense = task_hypergrad(p, 0, x, y, mode=ExactSolve()).grad
    cg = task_hypergrad(p, 0, x, y, mode=CG(tol=1e-10, max_iter=500))
    assert cg.solve_residual <= max(1e-10 * np.linalg.norm(p.grad_y_f(0, x, y)), 1e-12)
    assert rel_err(cg.grad, dense) <= 1e-8


@given(st.integers(0, 2**31))
def test_estimator_distance_bound(seed):
    p, _, constants = quadratic_benchmark(seed=seed % 1000, n=2, d1=4, d2=5)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(4)
    for i in range(p.n):
        ys = p.exact_inner_opt(i, x)
        y = ys + rng.standard_normal(5) * rng.uniform(0.01, 10)
        gap = np.linalg.norm(task_hypergrad(p, i, x, y).grad - p.exact_grad_ell(i, x))
        assert gap / np.linalg.norm(y - ys) <= constants.L + 1e-9


@given(st.integers(0, 2**31))
def test_weighted_linear_in_weights(seed):
    rng = np.random.default_rng(seed)
    p = quadratic_problem(n=3, seed=seed % 997)
    x = rng.standard_normal(3)
    ys = [rng.standard_normal(4) for _ in range(3)]
    lams = rng.dirichlet(np.ones(3), size=3)
    grads = [weighted_hypergrad(p, x, ys, lam).grad for lam in lams]
    mix = rng.dirichlet(np.ones(3))
    combined = weighted_hypergrad(p, x, ys, mix @ lams).grad
    np.testing.assert_allclose(combined, sum(m * g for m, g in zip(mix, grads)),
                               rtol=1e-10, atol=1e-12)


@given(st.integers(0, 2**31))
def test_exact_mode_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    p = quadratic_problem(n=2, d1=5, d2=6, seed=seed % 991)
    x = rng.standard_normal(5)
    for i in range(2):
        got = task_hypergrad(p, i, x, p.exact_inner_opt(i, x)).grad
        want = p.B[i].T @ np.linalg.solve(p.A[i], p.exact_inner_opt(i, x) - p.t[i])
        assert rel_err(got, want) <= 1e-10


def test_scalar_problem_uses_hvp_path():
    p = single_quadratic([[2.0]], [[3.0]], c=[1.0], t=[0.5])
    x = np.array([1.0])
    # y* = (3 + 1) / 2 = 2, grad = 3 * (2 - 0.5) / 2 = 2.25
    np.testing.assert_allclose(task_hypergrad(p, 0, x, p.exact_inner_opt(0, x)).grad, [2.25],
                               rtol=1e-15)
