import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from morbit import MINAVG, DomainError, MORBiT, SolverConfig, run, theorem1_schedule
from morbit.problems import quadratic_benchmark
from helpers import quadratic_problem


def test_params_round_trip_and_clone():
    est = MORBiT(K=50, alpha=0.01, beta=0.1, gamma=0.001, mode=MINAVG, random_state=3)
    params = est.get_params()
    assert params["K"] == 50 and params["mode"] == MINAVG and params["random_state"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(K=75)
    assert est.K == 75


def test_fit_sets_attributes_and_matches_solver():
    p, ball, c = quadratic_benchmark(seed=0, n=3, d1=4, d2=4)
    est = MORBiT(K=300, constants=c, constraint=ball, track_gaps=True, random_state=7).fit(p)
    assert est.n_iter_ == 300 and 1 <= est.tau_ <= 300
    assert est.x_.shape == (4,) and len(est.y_) == 3
    assert est.lambda_.min() >= 0 and est.lambda_.sum() == pytest.approx(1.0, abs=1e-12)
    assert est.trajectory_[-1].y_gap is not None
    schedule = theorem1_schedule(c, 3, 300)
    assert est.schedule_.alpha == schedule.alpha
    ref = run(p, SolverConfig(K=300, schedule=schedule, constraint=ball), seed=7)
    np.testing.assert_array_equal(est.x_, ref.x_bar)


def test_score_is_negative_worst_loss():
    p = quadratic_problem(n=3, seed=1)
    est = MORBiT(K=100, alpha=0.02, beta=0.2, gamma=0.01, random_state=0).fit(p)
    losses = est.task_losses(p)
    assert est.score(p) == -losses.max()
    assert losses.shape == (3,)


def test_refit_is_deterministic():
    p = quadratic_problem(n=2, seed=2)
    est = MORBiT(K=80, alpha=0.02, beta=0.2, gamma=0.01, random_state=5)
    a = est.fit(p).x_.copy()
    np.testing.assert_array_equal(clone(est).fit(p).x_, a)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MORBiT().score(quadratic_problem())


def test_invalid_inputs():
    p = quadratic_problem()
    with pytest.raises(DomainError):
        MORBiT(K=10, alpha=0.1).fit(p)
    with pytest.raises(DomainError):
        MORBiT(K=10).fit(p)
    with pytest.raises(TypeError):
        MORBiT(K=10, alpha=0.1, beta=0.1, gamma=0.1).fit(np.zeros((3, 3)))
