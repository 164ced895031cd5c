"""Command line entry point: ``morbit run|compare|checkgrad|analyze``.

Exit codes: 0 success, 1 a gradient check failed, 2 bad configuration or
input, 3 numerical divergence during a run.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import build_problem, build_solver_config, load_config
from .core import FULL_BATCH
from .diagnostics import rate_fit, running_min, unseen_task_eval
from .exceptions import ConfigError, MorbitError, NumericalDivergence
from .hypergrad import fd_check
from .solver import MINAVG, MINMAX, run

EXIT_OK, EXIT_CHECK_FAILED, EXIT_BAD_INPUT, EXIT_DIVERGED = 0, 1, 2, 3
REFERENCE_SLOPE = -0.4
WORKERS_ENV = "MORBIT_WORKERS"


# --------------------------------------------------------------------------
# CSV helpers
# --------------------------------------------------------------------------

def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def trajectory_header(n):
    return (["k", "alpha", "beta", "gamma"] + [f"f_{i}" for i in range(n)] + ["max_f", "mean_f"]
            + [f"lambda_{i}" for i in range(n)]
            + ["grad_norm_x", "y_gap", "lambda_gap", "prox_gap"])


def trajectory_rows(trajectory):
    for r in trajectory:
        yield ([r.k, float(r.alpha), float(r.beta), float(r.gamma)]
               + [float(v) for v in r.f] + [r.max_f, r.mean_f]
               + [float(v) for v in r.lam]
               + [r.grad_norm_x, r.y_gap, r.lambda_gap, r.prox_gap])


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def write_trajectory(path, n, trajectory):
    write_csv(path, trajectory_header(n), trajectory_rows(trajectory))


def _median(values):
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.median(vals)) if vals else None


def _last(trajectory, attr):
    for r in reversed(trajectory):
        v = getattr(r, attr)
        if v is not None:
            return float(v)
    return None


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------

SUMMARY_HEADER = ["seed", "status", "K", "tau", "final_max_f", "final_mean_f",
                  "running_min_max_f", "final_grad_norm_x", "final_y_gap", "final_lambda_gap",
                  "last_prox_gap", "output_max_loss"]


def _summary_row(seed, status, K, tau, trajectory, output_max_loss):
    last = trajectory[-1] if trajectory else None
    return [seed, status, K, tau,
            last.max_f if last else None, last.mean_f if last else None,
            float(running_min([r.max_f for r in trajectory])[-1]) if trajectory else None,
            last.grad_norm_x if last else None,
            last.y_gap if last else None, last.lambda_gap if last else None,
            _last(trajectory, "prox_gap"), output_max_loss]


def _run_seed(cfg, seed, out_dir):
    """Run one seed, write its trajectory and return its summary row."""
    built = build_problem(cfg, seed)
    problem = built.problem
    sc = build_solver_config(cfg, built)
    path = os.path.join(out_dir, f"trajectory_{seed}.csv")
    try:
        out = run(problem, sc, seed=seed)
    except NumericalDivergence as exc:
        write_trajectory(path, problem.n, exc.trajectory)
        return _summary_row(seed, f"diverged@{exc.k}", sc.K, None, exc.trajectory, None)
    write_trajectory(path, problem.n, out.trajectory)
    losses = [problem.true_loss(i, out.x_bar, out.y_bar[i]) for i in range(problem.n)]
    return _summary_row(seed, "ok", sc.K, out.tau, out.trajectory, float(max(losses)))


def _map_seeds(fn, cfg, seeds, out_dir, workers):
    if workers <= 1 or len(seeds) <= 1:
        return [fn(cfg, s, out_dir) for s in seeds]
    with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
        futures = [pool.submit(fn, cfg, s, out_dir) for s in seeds]
        return [f.result() for f in futures]


def _median_row(rows, header, label_cols):
    med = []
    for j, name in enumerate(header):
        if j == 0:
            med.append("median")
        elif name in label_cols:
            med.append("")
        else:
            med.append(_median([r[j] for r in rows]))
    return med


def _prepare(args):
    cfg = load_config(args.config)
    if args.output_dir is not None:
        cfg.run["output_dir"] = args.output_dir
    if args.seed_override is not None:
        cfg.run["seeds"] = args.seed_override
    out_dir = cfg.run["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_resolved.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_ini())
    return cfg, out_dir


def cmd_run(args):
    cfg, out_dir = _prepare(args)
    seeds = cfg.run["seeds"]
    rows = _map_seeds(_run_seed, cfg, seeds, out_dir, args.workers)
    write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_HEADER,
              rows + [_median_row(rows, SUMMARY_HEADER, {"status", "K", "tau"})])
    for row in rows:
        fields = dict(zip(SUMMARY_HEADER, row))
        print(f"seed {fields['seed']}: {fields['status']} tau={fields['tau']} "
              f"max_f={_cell(fields['final_max_f'])} "
              f"grad_norm_x={_cell(fields['final_grad_norm_x'])}")
    print(f"wrote {os.path.join(out_dir, 'summary.csv')}")
    if any(row[1] != "ok" for row in rows):
        print("numerical divergence in at least one seed", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# --------------------------------------------------------------------------
# compare
# --------------------------------------------------------------------------

COMPARE_HEADER = ["seed", "status", "minmax_seen", "minavg_seen", "minmax_unseen",
                  "minavg_unseen"]


def _compare_seed(cfg, seed, out_dir):
    built = build_problem(cfg, seed)
    problem = built.problem
    cmp = cfg.compare
    result = {"seed": seed, "status": "ok", "curves": {}}
    for mode in (MINMAX, MINAVG):
        beta = cmp["beta_minavg"] if mode == MINAVG else None
        sc = build_solver_config(cfg, built, mode=mode, beta=beta)
        path = os.path.join(out_dir, f"trajectory_{mode}_{seed}.csv")
        try:
            out = run(problem, sc, seed=seed)
        except NumericalDivergence as exc:
            write_trajectory(path, problem.n, exc.trajectory)
            result["status"] = f"{mode} diverged@{exc.k}"
            return result
        write_trajectory(path, problem.n, out.trajectory)
        curve = running_min([r.max_f for r in out.trajectory])
        result["curves"][mode] = curve
        result[f"{mode}_seen"] = float(curve[-1])
        if built.unseen_tasks and cmp["unseen_budget"] > 0:
            ev = unseen_task_eval(built.unseen_factory, out.final_state.x, built.unseen_tasks,
                                  cmp["unseen_budget"], lr=cmp["unseen_lr"],
                                  batch_size=cmp["unseen_batch_size"],
                                  weight_reg_eps=cfg.solver["weight_reg_eps"], seed=seed)
            result[f"{mode}_unseen"] = float(running_min(ev.worst_history)[-1])
    return result


def _verdict(label, mm, ma):
    if mm is None or ma is None:
        return f"{label}: n/a"
    return f"{label}: {'min-max wins' if mm <= ma else 'min-avg wins'} ({mm!r} vs {ma!r})"


def cmd_compare(args):
    cfg, out_dir = _prepare(args)
    seeds = cfg.run["seeds"]
    results = _map_seeds(_compare_seed, cfg, seeds, out_dir, args.workers)
    rows = [[r["seed"], r["status"]] + [r.get(c) for c in COMPARE_HEADER[2:]] for r in results]
    med = _median_row(rows, COMPARE_HEADER, {"status"})
    write_csv(os.path.join(out_dir, "compare.csv"), COMPARE_HEADER, rows + [med])

    done = [r for r in results if r["status"] == "ok"]
    if done:
        curves = {m: np.median(np.stack([r["curves"][m] for r in done]), axis=0)
                  for m in (MINMAX, MINAVG)}
        write_csv(os.path.join(out_dir, "compare_curves.csv"), ["k", "minmax_seen", "minavg_seen"],
                  ([k + 1, float(curves[MINMAX][k]), float(curves[MINAVG][k])]
                   for k in range(len(curves[MINMAX]))))
    summary = dict(zip(COMPARE_HEADER, med))
    print("running-min worst-task loss (median over seeds)")
    print(_verdict("seen", summary["minmax_seen"], summary["minavg_seen"]))
    print(_verdict("unseen", summary["minmax_unseen"], summary["minavg_unseen"]))
    if len(done) != len(results):
        print("numerical divergence in at least one seed", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# --------------------------------------------------------------------------
# checkgrad
# --------------------------------------------------------------------------

def _directions(dim, rng, max_coords=32, n_random=8):
    if dim <= max_coords:
        return np.eye(dim)
    d = rng.standard_normal((n_random, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _rel(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def _fd_directional(fun, z, dirs, eps):
    return np.array([(fun(z + eps * d) - fun(z - eps * d)) / (2 * eps) for d in dirs])


def check_oracles(problem, n_points=20, seed=0, eps=1e-6, grad_tol=1e-5, hvp_tol=1e-4,
                  hyper_tol=1e-6):
    """Finite-difference audit of every derivative oracle at random points.

    Returns rows ``(check, worst relative error, tolerance, passed)``.
    Gradients are probed coordinate-wise up to 32 dimensions and along
    random unit directions beyond that.
    """
    rng = np.random.default_rng(seed)
    base_x = problem.initial_x()
    base_x = np.zeros(problem.outer_dim) if base_x is None else np.asarray(base_x, float)
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for p in range(n_points):
        i = p % problem.n
        scale = max(float(np.std(base_x)), 0.1)
        x = base_x + 0.5 * scale * rng.standard_normal(problem.outer_dim)
        y = problem.initial_y(i) + 0.5 * rng.standard_normal(problem.inner_dims[i])
        dx = _directions(problem.outer_dim, rng)
        dy = _directions(problem.inner_dims[i], rng)
        b = FULL_BATCH

        def f_x(z):
            return problem.f_value(i, z, y, b)

        def f_y(z):
            return problem.f_value(i, x, z, b)

        def g_y(z):
            return problem.g_value(i, x, z, b)

        note("grad_x_f", _rel(dx @ problem.grad_x_f(i, x, y, b), _fd_directional(f_x, x, dx, eps)))
        note("grad_y_f", _rel(dy @ problem.grad_y_f(i, x, y, b), _fd_directional(f_y, y, dy, eps)))
        note("grad_y_g", _rel(dy @ problem.grad_y_g(i, x, y, b), _fd_directional(g_y, y, dy, eps)))

        v = rng.standard_normal(problem.inner_dims[i])
        u = dy[0]
        hv = problem.hvp_yy_g(i, x, y, v, b)
        fd_hv = (problem.grad_y_g(i, x, y + eps * v, b)
                 - problem.grad_y_g(i, x, y - eps * v, b)) / (2 * eps)
        note("hvp_yy_g", _rel(hv, fd_hv))
        hu = problem.hvp_yy_g(i, x, y, u, b)
        note("hvp_yy_g symmetry", abs(float(u @ hv - v @ hu)) / max(abs(float(u @ hv)), 1e-8))

        def gv_x(z):
            return float(problem.grad_y_g(i, z, y, b) @ v)

        note("hvp_xy_g", _rel(dx @ problem.hvp_xy_g(i, x, y, v, b),
                              _fd_directional(gv_x, x, dx, eps)))

    rows = [(name, err, grad_tol if name.startswith("grad") else hvp_tol)
            for name, err in worst.items()]
    if problem.provides_exact:
        hyper = 0.0
        for p in range(min(n_points, 5)):
            i = p % problem.n
            x = base_x + 0.5 * rng.standard_normal(problem.outer_dim)
            hyper = max(hyper, fd_check(problem, i, x, eps=1e-5).max_rel_err)
        rows.append(("hypergradient", hyper, hyper_tol))
    return [(name, err, tol, bool(err <= tol)) for name, err, tol in rows]


def cmd_checkgrad(args):
    cfg = load_config(args.config)
    seed = (args.seed_override or cfg.run["seeds"])[0]
    problem = build_problem(cfg, seed).problem
    rows = check_oracles(problem, n_points=args.points, seed=seed)
    print(f"{'check':<20} {'max_rel_err':>12} {'tol':>8}  result")
    for name, err, tol, ok in rows:
        print(f"{name:<20} {err:>12.3e} {tol:>8.0e}  {'ok' if ok else 'FAIL'}")
    failed = [r[0] for r in rows if not r[3]]
    if failed:
        print(f"offending oracles: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# --------------------------------------------------------------------------
# analyze
# --------------------------------------------------------------------------

def cmd_analyze(args):
    try:
        with open(args.csv, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                print(f"error: {args.csv} is empty", file=sys.stderr)
                return EXIT_BAD_INPUT
            if args.column not in reader.fieldnames or "k" not in reader.fieldnames:
                print(f"error: column {args.column!r} (and 'k') required; found "
                      f"{', '.join(reader.fieldnames)}", file=sys.stderr)
                return EXIT_BAD_INPUT
            series = [(int(row["k"]), float(row[args.column])) for row in reader
                      if row[args.column] not in ("", None)]
    except OSError as exc:
        print(f"error: cannot read {args.csv}: {exc.strerror}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except ValueError as exc:
        print(f"error: malformed value in {args.csv}: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    if not series:
        print(f"error: no values in column {args.column!r}", file=sys.stderr)
        return EXIT_BAD_INPUT
    fit = rate_fit(series, k_min=args.k_min)
    print(f"column {args.column} (running minimum, k >= {args.k_min}, {fit.n_points} points)")
    print(f"slope {fit.slope!r}")
    print(f"intercept {fit.intercept!r}")
    print(f"r2 {fit.r2!r}")
    print(f"reference_slope {REFERENCE_SLOPE!r}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _seed_list(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}")
    return seeds


def _workers(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid worker count {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("worker count must be >= 0")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="morbit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, outputs=True):
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--seed-override", type=_seed_list, default=None,
                       help="comma-separated seeds replacing [run] seeds")
        if outputs:
            p.add_argument("--output-dir", default=None, help="replaces [run] output_dir")
            p.add_argument("--workers", type=_workers, default=None,
                           help=f"processes over seeds (0 = all cores; default ${WORKERS_ENV} or 1)")

    add_common(sub.add_parser("run", help="run the solver for every seed"))
    add_common(sub.add_parser("compare", help="min-max against min-avg on the same seeds"))
    p = sub.add_parser("checkgrad", help="finite-difference audit of the problem oracles")
    add_common(p, outputs=False)
    p.add_argument("--points", type=int, default=20, help="random points to probe")
    p = sub.add_parser("analyze", help="power-law rate fit on a trajectory column")
    p.add_argument("csv", help="trajectory CSV")
    p.add_argument("--column", default="grad_norm_x")
    p.add_argument("--k-min", type=int, default=1)
    return parser


def _resolve_workers(value):
    if value is None:
        env = os.environ.get(WORKERS_ENV, "").strip()
        value = _workers(env) if env else 1
    return value if value > 0 else (os.cpu_count() or 1)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"run": cmd_run, "compare": cmd_compare, "checkgrad": cmd_checkgrad,
                "analyze": cmd_analyze}
    try:
        if hasattr(args, "workers"):
            args = replace_namespace(args, workers=_resolve_workers(args.workers))
        return handlers[args.command](args)
    except argparse.ArgumentTypeError as exc:
        print(f"error: {WORKERS_ENV}: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except NumericalDivergence as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MorbitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


def replace_namespace(ns, **changes):
    values = vars(ns).copy()
    values.update(changes)
    return argparse.Namespace(**values)


if __name__ == "__main__":
    sys.exit(main())
