"""Experiment configuration files.

Grammar: an INI file (``configparser`` syntax, ``#`` or ``;`` comments) with
sections ``[problem]``, ``[solver]``, ``[schedule]``, ``[run]`` and an optional
``[compare]``.  Every key is typed; unknown sections or keys are rejected with
the offending line number.  The accepted keys, their types and defaults are
the ``*_KEYS`` tables below; ``[problem]`` keys depend on ``family``.

Lists are comma separated (``seeds = 0, 1, 2``); label pairs are written
``0-6, 2-4``; batch sizes accept ``full``.
"""

from __future__ import annotations

import configparser
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .core import Ball, RegularityConstants, Unconstrained
from .exceptions import ConfigError, MorbitError
from .hypergrad import CG, ExactSolve, FirstOrder
from .solver import (ALIGNED, MINAVG, MINMAX, PAPER_SHIFTED, PlateauScheduler, SolverConfig,
                     StepSchedule, theorem1_schedule)

FAMILIES = ("quadratic", "sinusoid", "linrep")


# --------------------------------------------------------------------------
# Value parsers
# --------------------------------------------------------------------------

def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _pos_int(s):
    v = int(s)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _float(s):
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _nonneg_float(s):
    v = _float(s)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _pos_float(s):
    v = _float(s)
    if v <= 0:
        raise ValueError("must be > 0")
    return v


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _batch(s):
    if s.strip().lower() == "full":
        return None
    return _pos_int(s)


def _choice(*options):
    def parse(s):
        v = s.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


def _int_list(s):
    items = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    if not items:
        raise ValueError("empty list")
    return [int(p) for p in items]


def _seed_list(s):
    seeds = _int_list(s)
    if any(v < 0 for v in seeds):
        raise ValueError("seeds must be >= 0")
    if len(set(seeds)) != len(seeds):
        raise ValueError("duplicate seeds")
    return seeds


def _pairs(s):
    out = []
    for item in [p for p in re.split(r"[,\s]+", s.strip()) if p]:
        a, _, b = item.partition("-")
        out.append((int(a), int(b)))
    if not out:
        raise ValueError("empty list")
    return out


def _instance_seed(s):
    if s.strip().lower() == "run":
        return "run"
    return _nonneg_int(s)


def _optional_float(s):
    if s.strip().lower() in ("none", ""):
        return None
    return _float(s)


def _str(s):
    return s.strip()


def _fmt(value):
    if value is None:
        return "full"  # only batch keys keep None in the resolved file
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{a}-{b}" for a, b in value)
        return ", ".join(str(v) for v in value)
    return str(value)


# --------------------------------------------------------------------------
# Schema: key -> (parser, default); default None for batch keys means "full"
# --------------------------------------------------------------------------

QUADRATIC_KEYS = {
    "n": (_pos_int, 5),
    "d1": (_pos_int, 8),
    "d2": (_pos_int, 8),
    "coupling": (_choice("orthogonal", "gaussian"), "orthogonal"),
    "coupling_scale": (_pos_float, 1.0),
    "target_scale": (_pos_float, 1.0),
    "eig_min": (_pos_float, 1.0),
    "eig_max": (_pos_float, 2.0),
    "radius": (_nonneg_float, 3.0),
    "noise_sigma": (_nonneg_float, 0.0),
    "instance_seed": (_instance_seed, "run"),
    "identical_tasks": (_bool, False),
}

SINUSOID_KEYS = {
    "n_easy": (_nonneg_int, 2),
    "n_hard": (_nonneg_int, 1),
    "n_easy_unseen": (_nonneg_int, 2),
    "n_hard_unseen": (_nonneg_int, 1),
    "shots": (_pos_int, 10),
    "widths": (_int_list, [1, 80, 80, 10]),
    "frequency": (_pos_float, 1.0),
    "penalty_in_g": (_nonneg_float, 0.0),
    "instance_seed": (_instance_seed, "run"),
    "identical_tasks": (_bool, False),
}

LINREP_KEYS = {
    "source": (_choice("synthetic", "idx"), "synthetic"),
    "input_dim": (_pos_int, 64),
    "rep_dim": (_pos_int, 16),
    "l2": (_pos_float, 0.0005),
    "n_easy": (_nonneg_int, 8),
    "n_hard": (_nonneg_int, 2),
    "easy_sep": (_nonneg_float, 3.0),
    "hard_sep": (_nonneg_float, 0.8),
    "n_train": (_pos_int, 512),
    "n_val": (_pos_int, 512),
    "n_test": (_pos_int, 1024),
    "images": (_str, ""),
    "labels": (_str, ""),
    "pairs": (_pairs, [(0, 6), (2, 4), (4, 6), (2, 6), (0, 2), (1, 3), (5, 7), (7, 9), (5, 9),
                       (3, 8)]),
    "instance_seed": (_instance_seed, "run"),
}

FAMILY_KEYS = {"quadratic": QUADRATIC_KEYS, "sinusoid": SINUSOID_KEYS, "linrep": LINREP_KEYS}

SOLVER_KEYS = {
    "mode": (_choice(MINMAX, MINAVG), MINMAX),
    "hypergrad_mode": (_choice("exact", "cg", "first_order"), "exact"),
    "dense_cutoff": (_pos_int, 512),
    "cg_tol": (_pos_float, 1e-10),
    "cg_max_iter": (_pos_int, 1000),
    "bias_bound": (_nonneg_float, 0.0),
    "inner_steps_per_outer": (_pos_int, 1),
    "lambda_reg_eps": (_nonneg_float, 0.0),
    "weight_reg_eps": (_nonneg_float, 0.0),
    "g_batch_size": (_batch, None),
    "f_batch_size": (_batch, None),
    "lambda_batch_size": (_batch, None),
    "return_index_rule": (_choice(PAPER_SHIFTED, ALIGNED), PAPER_SHIFTED),
    "plateau": (_bool, False),
    "plateau_window": (_pos_int, 100),
    "plateau_patience": (_pos_int, 10),
    "plateau_factor": (_float, 0.1),
    "track_gaps": (_bool, True),
    "prox_rho": (_pos_float, 1.0),
    "prox_budget": (_pos_int, 10000),
    "n_jobs": (_pos_int, 1),
}

_CONSTANT_NAMES = ("mu_g", "L_g", "G_y", "L", "B_ell", "sigma_g", "sigma_f", "G_f", "mu_ell",
                   "C_ell", "rho", "b0")

SCHEDULE_KEYS = {
    "kind": (_choice("theorem1", "manual"), "theorem1"),
    "alpha": (_optional_float, None),
    "beta": (_optional_float, None),
    "gamma": (_optional_float, None),
    "constants": (_choice("auto", "explicit"), "auto"),
    **{name: (_optional_float, None) for name in _CONSTANT_NAMES},
}

RUN_KEYS = {
    "seeds": (_seed_list, [0]),
    "K": (_pos_int, 1000),
    "checkpoint_every": (_nonneg_int, 0),
    "output_dir": (_str, "runs"),
}

COMPARE_KEYS = {
    "beta_minavg": (_optional_float, None),
    "unseen_budget": (_nonneg_int, 2000),
    "unseen_lr": (_pos_float, 0.01),
    "unseen_batch_size": (_batch, None),
}

SECTION_KEYS = {"solver": SOLVER_KEYS, "schedule": SCHEDULE_KEYS, "run": RUN_KEYS,
                "compare": COMPARE_KEYS}
SECTIONS = ("problem", "solver", "schedule", "run", "compare")


@dataclass
class ExperimentConfig:
    problem: dict
    solver: dict
    schedule: dict
    run: dict
    compare: dict = field(default_factory=dict)
    path: str = ""

    @property
    def family(self):
        return self.problem["family"]

    def to_ini(self):
        """Fully defaulted configuration that parses back to the same values."""
        lines = []
        for name in SECTIONS:
            values = getattr(self, name)
            keys = FAMILY_KEYS[self.family] if name == "problem" else SECTION_KEYS[name]
            lines.append(f"[{name}]")
            for key, value in values.items():
                if value is None and key in keys and keys[key][0] is not _batch:
                    continue
                lines.append(f"{key} = {_fmt(value)}")
            lines.append("")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text):
    """Map ``(section, key)`` and ``section`` to 1-based line numbers."""
    index, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            index.setdefault(section, lineno)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[0].isspace():
            index.setdefault((section, m.group(1).strip()), lineno)
    return index


def _parse_section(raw, keys, section, lines):
    out = {}
    for key, value in raw.items():
        if key not in keys:
            raise ConfigError(f"unknown key in [{section}]", field=f"{section}.{key}",
                              line=lines.get((section, key)))
        parser, _ = keys[key]
        try:
            out[key] = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid value {value!r}: {exc}", field=f"{section}.{key}",
                              line=lines.get((section, key))) from None
    resolved = {key: (out[key] if key in out else default) for key, (_, default) in keys.items()}
    return resolved


def parse_config_text(text, path=""):
    lines = _line_index(text)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=path or "<config>")
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        where = (f"{exc.section}.{exc.option}" if isinstance(exc, configparser.DuplicateOptionError)
                 else f"[{exc.section}]")
        raise ConfigError("duplicate entry", field=where, line=exc.lineno) from None
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"syntax error: {exc.message if hasattr(exc, 'message') else exc}",
                          line=line) from None
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError("unknown section", field=f"[{section}]", line=lines.get(section))
    for section in ("problem", "run"):
        if not cp.has_section(section):
            raise ConfigError(f"missing required section [{section}]", field=f"[{section}]")

    raw_problem = dict(cp["problem"])
    if "family" not in raw_problem:
        raise ConfigError("missing problem family", field="problem.family",
                          line=lines.get("problem"))
    family = raw_problem["family"].strip().lower()
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}; expected one of {', '.join(FAMILIES)}",
                          field="problem.family", line=lines.get(("problem", "family")))
    problem = {"family": family}
    rest = {k: v for k, v in raw_problem.items() if k != "family"}
    problem.update(_parse_section(rest, FAMILY_KEYS[family], "problem", lines))

    sections = {}
    for name, keys in SECTION_KEYS.items():
        raw = dict(cp[name]) if cp.has_section(name) else {}
        sections[name] = _parse_section(raw, keys, name, lines)

    cfg = ExperimentConfig(problem=problem, path=path, **sections)
    _validate(cfg, lines)
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", field=str(path)) from None
    return parse_config_text(text, str(path))


def _validate(cfg, lines):
    p, s, sch = cfg.problem, cfg.solver, cfg.schedule

    def fail(section, key, msg):
        raise ConfigError(msg, field=f"{section}.{key}", line=lines.get((section, key)))

    if cfg.family == "quadratic" and p["eig_min"] > p["eig_max"]:
        fail("problem", "eig_min", "eig_min must not exceed eig_max")
    if cfg.family == "sinusoid":
        if p["n_easy"] + p["n_hard"] < 1:
            fail("problem", "n_easy", "need at least one training task")
        if len(p["widths"]) < 2 or p["widths"][0] != 1 or min(p["widths"]) < 1:
            fail("problem", "widths", "widths must start at 1 and be positive")
    if cfg.family == "linrep":
        if p["n_easy"] + p["n_hard"] < 1 and p["source"] == "synthetic":
            fail("problem", "n_easy", "need at least one task")
        if p["source"] == "idx":
            for key in ("images", "labels"):
                if not p[key]:
                    fail("problem", key, "required when source = idx")
                if not os.path.isfile(_resolve_path(cfg, p[key])):
                    fail("problem", key, f"file not found: {p[key]}")
    if s["plateau"] and not 0.0 < s["plateau_factor"] < 1.0:
        fail("solver", "plateau_factor", "must lie in (0, 1)")

    if sch["kind"] == "manual":
        for key in ("alpha", "beta", "gamma"):
            if sch[key] is None:
                fail("schedule", key, "required when kind = manual")
        for key in ("alpha", "beta"):
            if sch[key] <= 0:
                fail("schedule", key, "must be > 0")
        if sch["gamma"] < 0:
            fail("schedule", "gamma", "must be >= 0")
    else:
        if sch["constants"] == "auto" and cfg.family != "quadratic":
            fail("schedule", "constants",
                 "automatic constants are only available for the quadratic family")
        if sch["constants"] == "explicit":
            for key in ("mu_g", "L_g", "G_y", "L", "B_ell"):
                if sch[key] is None:
                    fail("schedule", key, "required when constants = explicit")
    beta_avg = cfg.compare.get("beta_minavg")
    if beta_avg is not None and beta_avg <= 0:
        fail("compare", "beta_minavg", "must be > 0")


def _resolve_path(cfg, path):
    if os.path.isabs(path) or not cfg.path:
        return path
    return os.path.join(os.path.dirname(os.path.abspath(cfg.path)), path)


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------

@dataclass
class BuiltProblem:
    problem: object
    constraint: object
    constants: object = None
    unseen_factory: object = None
    unseen_tasks: object = None


def build_problem(cfg, seed):
    """Instantiate the configured problem for one run seed."""
    from .problems import (IdxDataset, LinRepSpec, QuadraticBilevel, SyntheticGaussian,
                           linrep_suite, random_quadratic_spec, sinusoid_suite,
                           unseen_sinusoid_tasks)
    from .problems.quadratic import QuadraticBilevelSpec

    p = cfg.problem
    inst_seed = seed if p["instance_seed"] == "run" else p["instance_seed"]
    if cfg.family == "quadratic":
        spec = random_quadratic_spec(
            p["n"], p["d1"], p["d2"], seed=inst_seed, noise_sigma=p["noise_sigma"],
            eig_range=(p["eig_min"], p["eig_max"]), coupling=p["coupling_scale"],
            target_scale=p["target_scale"], coupling_kind=p["coupling"])
        if p["identical_tasks"]:
            spec = QuadraticBilevelSpec(A=[spec.A[0]] * p["n"], B=[spec.B[0]] * p["n"],
                                        c=[spec.c[0]] * p["n"], t=[spec.t[0]] * p["n"],
                                        noise_sigma=spec.noise_sigma)
        problem = QuadraticBilevel(spec)
        if p["radius"] > 0:
            constraint = Ball(center=np.zeros(p["d1"]), radius=p["radius"])
        else:
            constraint = Unconstrained()
        constants = problem.regularity_constants(constraint=constraint)
        return BuiltProblem(problem=problem, constraint=constraint, constants=constants)

    if cfg.family == "sinusoid":
        problem = sinusoid_suite(p["n_easy"], p["n_hard"], p["shots"], seed=inst_seed,
                                 widths=tuple(p["widths"]), weight_reg_eps=p["penalty_in_g"],
                                 frequency=p["frequency"])
        if p["identical_tasks"]:
            problem = problem.with_tasks([problem.tasks[0]] * problem.n)
        unseen = unseen_sinusoid_tasks(p["n_easy_unseen"], p["n_hard_unseen"], inst_seed,
                                       p["frequency"])
        return BuiltProblem(problem=problem, constraint=Unconstrained(),
                            unseen_factory=problem.with_tasks, unseen_tasks=unseen or None)

    spec = LinRepSpec(input_dim=p["input_dim"], rep_dim=p["rep_dim"], l2=p["l2"])
    if p["source"] == "synthetic":
        source = SyntheticGaussian(n_easy=p["n_easy"], n_hard=p["n_hard"],
                                   easy_sep=p["easy_sep"], hard_sep=p["hard_sep"],
                                   n_train=p["n_train"], n_val=p["n_val"], n_test=p["n_test"],
                                   seed=inst_seed)
    else:
        source = IdxDataset(images=_resolve_path(cfg, p["images"]),
                            labels=_resolve_path(cfg, p["labels"]), pairs=p["pairs"],
                            n_train=p["n_train"], n_val=p["n_val"], n_test=p["n_test"],
                            seed=inst_seed)
    return BuiltProblem(problem=linrep_suite(spec, source), constraint=Unconstrained())


def build_schedule(cfg, built, K):
    sch = cfg.schedule
    if sch["kind"] == "manual":
        return StepSchedule(alpha=sch["alpha"], beta=sch["beta"], gamma=sch["gamma"])
    if sch["constants"] == "auto":
        constants = built.constants
        overrides = {k: sch[k] for k in _CONSTANT_NAMES if sch[k] is not None}
        if overrides:
            values = constants.as_dict()
            values.update(overrides)
            constants = RegularityConstants(**values)
    else:
        constants = RegularityConstants(**{k: sch[k] for k in _CONSTANT_NAMES
                                           if sch[k] is not None})
    return theorem1_schedule(constants, built.problem.n, K)


def hypergrad_mode(cfg):
    s = cfg.solver
    if s["hypergrad_mode"] == "exact":
        return ExactSolve(dense_cutoff=s["dense_cutoff"])
    if s["hypergrad_mode"] == "cg":
        return CG(tol=s["cg_tol"], max_iter=s["cg_max_iter"])
    return FirstOrder(bias_bound=s["bias_bound"])


def build_solver_config(cfg, built, mode=None, beta=None):
    """SolverConfig for one run; ``mode``/``beta`` override the file (used by compare)."""
    s, r = cfg.solver, cfg.run
    try:
        schedule = build_schedule(cfg, built, r["K"])
        if beta is not None:
            schedule = StepSchedule(alpha=schedule.alpha, beta=beta, gamma=schedule.gamma,
                                    nu=schedule.nu, source=schedule.source)
        plateau = None
        if s["plateau"]:
            plateau = PlateauScheduler(window=s["plateau_window"],
                                       patience=s["plateau_patience"],
                                       factor=s["plateau_factor"])
    except MorbitError as exc:
        raise ConfigError(str(exc), field="schedule") from None
    return SolverConfig(
        K=r["K"], schedule=schedule, mode=mode or s["mode"], hypergrad_mode=hypergrad_mode(cfg),
        inner_steps_per_outer=s["inner_steps_per_outer"], lambda_reg_eps=s["lambda_reg_eps"],
        weight_reg_eps=s["weight_reg_eps"], g_batch_size=s["g_batch_size"],
        f_batch_size=s["f_batch_size"], lambda_batch_size=s["lambda_batch_size"],
        plateau=plateau, return_index_rule=s["return_index_rule"], constraint=built.constraint,
        track_gaps=s["track_gaps"], checkpoint_every=r["checkpoint_every"],
        prox_rho=s["prox_rho"], prox_budget=s["prox_budget"], n_jobs=s["n_jobs"],
    )
