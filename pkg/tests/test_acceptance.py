"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import csv
import os
import time

import numpy as np
import pytest

import morbit.cli as cli
from morbit import (CG, MINAVG, MINMAX, ExactSolve, FirstOrder, SolverConfig, StepSchedule,
                    conjugate_gradient, is_decreasing_trend, lambda_gap, project_simplex,
                    rate_fit, run, running_min, task_hypergrad, theorem1_schedule,
                    unseen_task_eval, window_means)
from morbit.core import RegularityConstants
from morbit.diagnostics import max_inner_gap
from morbit.problems import (QuadraticBilevel, QuadraticLosses, quadratic_benchmark,
                             random_quadratic_spec, sinusoid_suite, unseen_sinusoid_tasks)
from morbit.solver import initial_state, morbit_step, trmaml_inner
from helpers import LinearInner, central_diff, rel_err, simplex_qp_oracle

SEEDS = range(5)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return emit


# --- 1: hypergradient exactness -----------------------------------------------------------

def test_criterion_01_hypergradient_exactness(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_fd = worst_closed = 0.0
    for inst in range(100):
        d1, d2 = rng.integers(1, 11, size=2)
        p = QuadraticBilevel(random_quadratic_spec(2, int(d1), int(d2), seed=inst))
        x = rng.standard_normal(d1)
        for i in range(p.n):
            ys = p.exact_inner_opt(i, x)
            grad = task_hypergrad(p, i, x, ys, mode=ExactSolve()).grad
            fd = central_diff(lambda z: p.exact_ell(i, z), x, eps=1e-5)
            closed = p.B[i].T @ np.linalg.solve(p.A[i], ys - p.t[i])
            worst_fd = max(worst_fd, rel_err(grad, fd))
            worst_closed = max(worst_closed, rel_err(grad, closed))
    elapsed = time.perf_counter() - start
    ok = worst_fd <= 1e-6 and worst_closed <= 1e-10 and elapsed < 5.0
    report(1, ok, f"max rel err vs finite differences {worst_fd:.2e} (tol 1e-6), vs closed "
                  f"form {worst_closed:.2e} (tol 1e-10), {elapsed:.2f}s (limit 5s)")
    assert ok


# --- 2: CG fidelity --------------------------------------------------------------------

def test_criterion_02_cg_fidelity(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for d in range(1, 51):
        # a random SPD system and the inner Hessian of a random quadratic instance
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        M = (Q * np.geomspace(1.0, 100.0, d)) @ Q.T
        b = rng.standard_normal(d)
        z, _ = conjugate_gradient(lambda v: M @ v, b, tol=1e-10, max_iter=20 * d + 50)
        worst = max(worst, rel_err(z, np.linalg.solve(M, b)))
        p = QuadraticBilevel(random_quadratic_spec(1, 5, d, seed=d))
        x, y = rng.standard_normal(5), rng.standard_normal(d)
        dense = task_hypergrad(p, 0, x, y, mode=ExactSolve()).grad
        cg = task_hypergrad(p, 0, x, y, mode=CG(tol=1e-10, max_iter=20 * d + 50)).grad
        worst = max(worst, rel_err(cg, dense))
    ok = worst <= 1e-8
    report(2, ok, f"max rel diff CG vs dense over d2 = 1..50: {worst:.2e} (tol 1e-8)")
    assert ok


# --- 3: simplex projection -----------------------------------------------------------------

def test_criterion_03_simplex_projection(report):
    rng = np.random.default_rng(3)
    by_dim = {}
    worst_oracle = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        v = rng.standard_normal(n) * 10.0 ** rng.uniform(-2, 2)
        got = project_simplex(v)
        worst_oracle = max(worst_oracle, float(np.abs(got - simplex_qp_oracle(v)).max()))
        by_dim.setdefault(n, []).append((v, got))
    idempotent = all(np.array_equal(project_simplex(g), g) for vs in by_dim.values()
                     for _, g in vs)
    worst_ratio, pairs = 0.0, 0
    for vs in by_dim.values():
        V = np.array([v for v, _ in vs])
        P = np.array([g for _, g in vs])
        dv = np.linalg.norm(V[:, None] - V[None], axis=2)
        dp = np.linalg.norm(P[:, None] - P[None], axis=2)
        mask = dv > 0
        pairs += int(mask.sum()) // 2
        worst_ratio = max(worst_ratio, float((dp[mask] - dv[mask] * (1 + 1e-12)).max()))
    ok = worst_oracle <= 1e-9 and idempotent and worst_ratio <= 1e-12
    report(3, ok, f"max |proj - QP oracle| {worst_oracle:.2e} (tol 1e-9), idempotent "
                  f"{idempotent}, non-expansive on {pairs} pairs {worst_ratio <= 1e-12}")
    assert ok


# --- 4: algorithm reductions -----------------------------------------------------------------

def _trajectories_match(a, b):
    for ra, rb in zip(a.trajectory, b.trajectory):
        if not (np.array_equal(ra.f, rb.f) and ra.grad_norm_x == rb.grad_norm_x
                and np.array_equal(ra.lam, rb.lam) and ra.y_gap == rb.y_gap):
            return False
    return (len(a.trajectory) == len(b.trajectory)
            and np.array_equal(a.final_state.x, b.final_state.x)
            and np.array_equal(a.final_state.ys[0], b.final_state.ys[0])
            and np.array_equal(a.x_bar, b.x_bar) and a.tau == b.tau)


def test_criterion_04_reductions(report):
    # single task: the weight update has nothing to do
    single_ok = True
    for seed in range(3):
        p = QuadraticBilevel(random_quadratic_spec(1, 4, 6, seed=seed, noise_sigma=0.2))
        c = p.regularity_constants()
        kw = dict(K=500, schedule=theorem1_schedule(c, 1, 500), g_batch_size=4,
                  f_batch_size=4, lambda_reg_eps=0.5)
        single_ok &= _trajectories_match(run(p, SolverConfig(mode=MINMAX, **kw), seed=seed),
                                         run(p, SolverConfig(mode=MINAVG, **kw), seed=seed))
        q = sinusoid_suite(1, 0, seed=seed, widths=(1, 8, 8, 4))
        kw = dict(K=200, schedule=StepSchedule(0.007, 0.005, 0.003),
                  hypergrad_mode=FirstOrder(), weight_reg_eps=0.01, g_batch_size=10,
                  f_batch_size=10, lambda_reg_eps=3.0, track_gaps=False)
        single_ok &= _trajectories_match(run(q, SolverConfig(mode=MINMAX, **kw), seed=seed),
                                         run(q, SolverConfig(mode=MINAVG, **kw), seed=seed))

    # proximal inner objective: inner iterates reach the closed-form proximal point
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 8))
        G = rng.standard_normal((d, d))
        Q = G @ G.T / d + np.eye(d)
        b = rng.standard_normal(d)
        eta = float(rng.uniform(0.5, 5.0))
        p = trmaml_inner(QuadraticLosses([Q], [b]), eta)
        x0 = rng.standard_normal(d)
        want = np.linalg.solve(Q + eta * np.eye(d), eta * x0 + b)
        worst = max(worst, rel_err(p.exact_inner_opt(0, x0), want))
        step = 1.0 / np.linalg.eigvalsh(Q + eta * np.eye(d)).max()
        cfg = SolverConfig(K=1, schedule=StepSchedule(1e-3, step, 0.0),
                           inner_steps_per_outer=3000, x0=x0, track_gaps=False)
        state, _ = morbit_step(p, initial_state(p, cfg, 0), cfg)
        worst = max(worst, rel_err(state.ys[0], want))
    ok = single_ok and worst <= 1e-10
    report(4, ok, f"single-task min-max == min-avg bit-identical: {single_ok}; proximal inner "
                  f"solution max rel err {worst:.2e} (tol 1e-10)")
    assert ok


# --- 5: schedule goldens -------------------------------------------------------------------

def test_criterion_05_schedule_goldens(report):
    ones = RegularityConstants(mu_g=1.0, L_g=1.0, G_y=1.0, L=1.0, B_ell=1.0, sigma_g=1.0)
    s = theorem1_schedule(ones, 4, 10**5)
    got = (s.nu, s.alpha, s.beta, s.gamma)
    ok = got == (0.5, 0.00025, 0.04, 0.001)
    report(5, ok, f"(nu, alpha, beta, gamma) = {got}")
    assert ok


# --- 6 and 7: quadratic benchmark ------------------------------------------------------------

K_QUAD = 20000


@pytest.fixture(scope="module")
def quadratic_runs():
    start = time.perf_counter()
    runs = []
    for seed in SEEDS:
        p, X, c = quadratic_benchmark(seed=seed, radius=3)
        out = run(p, SolverConfig(K=K_QUAD, schedule=theorem1_schedule(c, p.n, K_QUAD),
                                  constraint=X), seed=seed)
        runs.append((p, out))
    return runs, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_06_convergence_metrics(report, quadratic_runs):
    runs, elapsed = quadratic_runs
    final_y = np.median([out.trajectory[-1].y_gap for _, out in runs])
    final_l = np.median([out.trajectory[-1].lambda_gap for _, out in runs])
    win_y = np.median([window_means([r.y_gap for r in out.trajectory]) for _, out in runs], 0)
    win_l = np.median([window_means([r.lambda_gap for r in out.trajectory]) for _, out in runs],
                      0)
    trend_y = is_decreasing_trend(win_y, n_windows=20)
    trend_l = is_decreasing_trend(win_l, n_windows=20)
    tau_y = np.median([max_inner_gap(p, out.x_bar, out.y_bar) for p, out in runs])
    tau_l = np.median([lambda_gap(p, out.x_bar, out.lambda_bar) for p, out in runs])
    ok = (final_y <= 1e-3 and final_l <= 0.05 and trend_y and trend_l and elapsed < 60)
    report(6, ok, f"median final y_gap {final_y:.2e} (tol 1e-3), lambda_gap {final_l:.2e} "
                  f"(tol 0.05), windowed trends decreasing y {trend_y} lambda {trend_l}, "
                  f"{elapsed:.1f}s for 5 runs (limit 60s); at the output index tau: "
                  f"y_gap {tau_y:.2e}, lambda_gap {tau_l:.2e}; lambda_gap windows "
                  f"{np.array2string(win_l, precision=3)}")
    assert ok


@pytest.mark.slow
def test_criterion_07_rate(report, quadratic_runs):
    runs, _ = quadratic_runs
    fits = [rate_fit([(r.k, r.grad_norm_x) for r in out.trajectory], k_min=K_QUAD // 20)
            for _, out in runs]
    slope = float(np.median([f.slope for f in fits]))
    r2 = float(np.median([f.r2 for f in fits]))
    ok = slope <= -0.3 and r2 >= 0.8
    report(7, ok, f"median slope {slope:.3f} (need <= -0.3, reference -0.4), median R^2 "
                  f"{r2:.3f} (need >= 0.8), fit from k = {K_QUAD // 20}")
    assert ok


# --- 8: min-max against min-avg ----------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_minmax_vs_minavg(report):
    start = time.perf_counter()
    seen = {MINMAX: [], MINAVG: []}
    unseen = {MINMAX: [], MINAVG: []}
    for seed in SEEDS:
        for mode, beta in ((MINMAX, 0.005), (MINAVG, 0.011)):
            p = sinusoid_suite(2, 1, 10, seed=seed)
            cfg = SolverConfig(K=2000, schedule=StepSchedule(0.007, beta, 0.003), mode=mode,
                               hypergrad_mode=FirstOrder(), lambda_reg_eps=3.0,
                               weight_reg_eps=0.01, g_batch_size=10, f_batch_size=10)
            out = run(p, cfg, seed=seed)
            seen[mode].append(running_min([r.max_f for r in out.trajectory])[-1])
            ev = unseen_task_eval(p.with_tasks, out.final_state.x,
                                  unseen_sinusoid_tasks(2, 1, seed=seed), 2000, lr=0.01,
                                  batch_size=10, weight_reg_eps=0.01, seed=seed)
            unseen[mode].append(running_min(ev.worst_history)[-1])
    elapsed = time.perf_counter() - start
    s_mm, s_ma = np.median(seen[MINMAX]), np.median(seen[MINAVG])
    u_mm, u_ma = np.median(unseen[MINMAX]), np.median(unseen[MINAVG])
    ok = s_mm <= s_ma and u_mm <= u_ma and elapsed < 300
    report(8, ok, f"median running-min worst-task MSE seen: min-max {s_mm:.4f} vs min-avg "
                  f"{s_ma:.4f} ({'holds' if s_mm <= s_ma else 'fails'}); unseen: min-max "
                  f"{u_mm:.4f} vs min-avg {u_ma:.4f} ({'holds' if u_mm <= u_ma else 'fails'}); "
                  f"{elapsed:.0f}s (limit 300s)")
    assert ok


# --- 9: weight ascent pressure -------------------------------------------------------------------

def test_criterion_09_ascent_pressure(report):
    checked, ok = 0, True
    for offset in (1e-3, 0.1, 2.0):
        for gamma in (1e-3, 0.05):
            for seed in range(3):
                p = LinearInner(np.diag([2.0, 1.0]), offsets=(offset, 0.0))
                x0 = np.random.default_rng(seed).standard_normal(2)
                cfg = SolverConfig(K=400, schedule=StepSchedule(0.01, 0.3, gamma),
                                   x0=x0, lambda_reg_eps=0.0)
                lam = [r.lam[0] for r in run(p, cfg, seed=seed).trajectory]
                hit = next((j for j, v in enumerate(lam) if v == 1.0), len(lam))
                ok &= all(b >= a for a, b in zip(lam[:hit], lam[1:hit + 1]))
                ok &= all(v == 1.0 for v in lam[hit:])
                checked += 1
    report(9, ok, f"lambda of the shifted task nondecreasing until saturation in "
                  f"{checked} runs: {ok}")
    assert ok


# --- 10: determinism through the command line ------------------------------------------------

QUAD_CFG = """
[problem]
family = quadratic
n = 3
d1 = 4
d2 = 4
noise_sigma = 0.1
[solver]
g_batch_size = 4
f_batch_size = 4
[schedule]
kind = theorem1
[run]
seeds = 0, 1, 2, 3
K = 400
checkpoint_every = 100
"""

SINE_CFG = """
[problem]
family = sinusoid
widths = 1, 16, 16, 4
[solver]
hypergrad_mode = first_order
lambda_reg_eps = 3
weight_reg_eps = 0.01
g_batch_size = 10
f_batch_size = 10
[schedule]
kind = manual
alpha = 0.007
beta = 0.005
gamma = 0.003
[run]
seeds = 0, 1, 2, 3
K = 300
[compare]
beta_minavg = 0.011
unseen_budget = 100
unseen_batch_size = 10
"""


def test_criterion_10_determinism(report, tmp_path):
    max_workers = max(os.cpu_count() or 1, 4)
    identical, files = True, 0
    for name, text, command in (("quad", QUAD_CFG, "run"), ("sine", SINE_CFG, "compare")):
        cfg = tmp_path / f"{name}.ini"
        cfg.write_text(text)
        dirs = []
        for tag, workers in (("a", 1), ("b", 1), ("c", max_workers)):
            out = tmp_path / f"{name}_{tag}"
            assert cli.main([command, "--config", str(cfg), "--output-dir", str(out),
                             "--workers", str(workers)]) == 0
            dirs.append(out)
        names = sorted(p.name for p in dirs[0].glob("*.csv"))
        for d in dirs[1:]:
            identical &= names == sorted(p.name for p in d.glob("*.csv"))
            for n in names:
                identical &= (dirs[0] / n).read_bytes() == (d / n).read_bytes()
        files += len(names)
        with open(dirs[0] / names[-1], newline="") as fh:
            assert len(list(csv.reader(fh))) > 1
    report(10, identical, f"{files} CSV files byte-identical across repeated runs and "
                          f"{max_workers} worker processes: {identical}")
    assert identical
