"""Few-shot sinusoid regression with a shared MLP embedding.

The shared variable ``x`` is the flattened parameter vector of a ReLU MLP
mapping a scalar input to an embedding; each task owns a linear head
(embedding weights plus bias).  Task ``i`` regresses ``a_i sin(w x - phi_i)``
on inputs drawn uniformly from [-5, 5].  Gradients are hand-coded
backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._validation import check_positive, check_positive_int, check_seed
from ..core import FULL_BATCH, ProblemOracles
from ..exceptions import DomainError, ShapeError

X_RANGE = (-5.0, 5.0)
EASY_AMPLITUDE = (0.1, 1.05)
HARD_AMPLITUDE = (4.95, 5.0)
PHASE_RANGE = (0.0, np.pi)
GRID_POINTS = 100


@dataclass(frozen=True)
class SinusoidTask:
    amplitude: float
    phase: float
    frequency: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.amplitude <= 5.0:
            raise DomainError(f"amplitude must lie in [0, 5], got {self.amplitude}")
        if not PHASE_RANGE[0] <= self.phase <= PHASE_RANGE[1]:
            raise DomainError(f"phase must lie in [0, pi], got {self.phase}")

    def __call__(self, inputs):
        return self.amplitude * np.sin(self.frequency * inputs - self.phase)


class MlpEmbedding:
    """Fully connected ReLU network on a flat parameter vector.

    ``widths=(1, 80, 80, 10)`` gives two hidden layers of 80 units and a
    10-dimensional linear output.  Parameters are packed layer by layer as
    ``W`` (out x in, row major) followed by ``b``.
    """

    def __init__(self, widths=(1, 80, 80, 10)):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise DomainError(f"invalid layer widths {widths}")
        self.widths = widths
        self.layers = list(zip(widths[:-1], widths[1:]))
        self.size = sum(o * i + o for i, o in self.layers)

    @property
    def out_dim(self):
        return self.widths[-1]

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise ShapeError(f"expected {self.size} parameters, got shape {theta.shape}")
        params, pos = [], 0
        for fan_in, fan_out in self.layers:
            W = theta[pos: pos + fan_in * fan_out].reshape(fan_out, fan_in)
            pos += fan_in * fan_out
            b = theta[pos: pos + fan_out]
            pos += fan_out
            params.append((W, b))
        return params

    def init_params(self, rng):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        chunks = []
        for fan_in, fan_out in self.layers:
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(rng.uniform(-bound, bound, size=fan_out))
        return np.concatenate(chunks)

    def forward(self, theta, inputs):
        """Embed ``inputs`` (shape ``(m,)`` or ``(m, in)``); returns ``(out, cache)``."""
        h = np.asarray(inputs, dtype=np.float64)
        if h.ndim == 1:
            h = h[:, None]
        params = self.unpack(theta)
        cache = [h]
        for li, (W, b) in enumerate(params):
            a = h @ W.T + b
            if li < len(params) - 1:
                h = np.maximum(a, 0.0)
            else:
                h = a
            cache.append(h)
        return h, (params, cache)

    def vjp(self, cache, cotangent):
        """Gradient w.r.t. the flat parameters of ``sum(cotangent * out)``."""
        params, acts = cache
        grads = []
        delta = np.asarray(cotangent, dtype=np.float64)
        for li in range(len(params) - 1, -1, -1):
            W, _ = params[li]
            h_in = acts[li]
            grads.append((delta.T @ h_in, delta.sum(axis=0)))
            if li > 0:
                delta = (delta @ W) * (acts[li] > 0.0)
        flat = []
        for gW, gb in reversed(grads):
            flat.append(gW.ravel())
            flat.append(gb)
        return np.concatenate(flat)


class SinusoidRegression(ProblemOracles):
    """Multi-task sinusoid regression.

    ``f_i`` is the mean squared error of the head on a batch of inputs and
    ``g_i`` the same on an independent batch plus ``weight_reg_eps`` times the
    sum of the 2-norms of the head's weight and bias blocks.  A sampled batch
    draws ``batch.size`` inputs uniformly from [-5, 5] with ``batch.key`` as
    seed; the full batch is the 100-point uniform grid used for true losses.
    """

    def __init__(self, tasks, embedding=None, weight_reg_eps=0.0, init_seed=0):
        if not tasks:
            raise DomainError("need at least one task")
        self.tasks = list(tasks)
        self.embedding = MlpEmbedding() if embedding is None else embedding
        self.weight_reg_eps = check_positive(float(weight_reg_eps), "weight_reg_eps", strict=False)
        self.init_seed = check_seed(init_seed)
        self.n = len(self.tasks)
        self.outer_dim = self.embedding.size
        self.head_dim = self.embedding.out_dim + 1
        self.inner_dims = [self.head_dim] * self.n
        self.grid = np.linspace(X_RANGE[0], X_RANGE[1], GRID_POINTS)

    def with_tasks(self, tasks):
        return SinusoidRegression(tasks, self.embedding, self.weight_reg_eps, self.init_seed)

    def initial_x(self):
        return self.embedding.init_params(np.random.default_rng(self.init_seed))

    # data ------------------------------------------------------------------
    def batch_inputs(self, batch):
        if batch.is_full:
            return self.grid
        rng = np.random.default_rng(batch.key)
        return rng.uniform(X_RANGE[0], X_RANGE[1], size=batch.size)

    def _residual(self, i, x, y, batch):
        inputs = self.batch_inputs(batch)
        phi, cache = self.embedding.forward(x, inputs)
        w, b = y[:-1], y[-1]
        r = phi @ w + b - self.tasks[i](inputs)
        return phi, cache, r

    def _penalty(self, y):
        return np.linalg.norm(y[:-1]) + abs(y[-1])

    def penalty_subgrad(self, i, y):
        """Subgradient of ``||w||_2 + |b|``, zero at a zero block."""
        out = np.zeros_like(y)
        nw = np.linalg.norm(y[:-1])
        if nw > 0:
            out[:-1] = y[:-1] / nw
        out[-1] = np.sign(y[-1])
        return out

    def _penalty_hvp(self, y, v):
        out = np.zeros_like(v)
        w = y[:-1]
        nw = np.linalg.norm(w)
        if nw > 0:
            u = w / nw
            out[:-1] = (v[:-1] - u * (u @ v[:-1])) / nw
        return out

    # oracles ---------------------------------------------------------------
    def f_value(self, i, x, y, batch=FULL_BATCH):
        _, _, r = self._residual(i, x, y, batch)
        return float(r @ r) / r.shape[0]

    def g_value(self, i, x, y, batch=FULL_BATCH):
        val = self.f_value(i, x, y, batch)
        if self.weight_reg_eps:
            val += self.weight_reg_eps * self._penalty(y)
        return val

    def grad_y_f(self, i, x, y, batch=FULL_BATCH):
        phi, _, r = self._residual(i, x, y, batch)
        m = r.shape[0]
        return np.concatenate([phi.T @ r, [r.sum()]]) * (2.0 / m)

    def grad_x_f(self, i, x, y, batch=FULL_BATCH):
        _, cache, r = self._residual(i, x, y, batch)
        cot = (2.0 / r.shape[0]) * np.outer(r, y[:-1])
        return self.embedding.vjp(cache, cot)

    def grad_y_g(self, i, x, y, batch=FULL_BATCH):
        grad = self.grad_y_f(i, x, y, batch)
        if self.weight_reg_eps:
            grad = grad + self.weight_reg_eps * self.penalty_subgrad(i, y)
        return grad

    def hvp_yy_g(self, i, x, y, v, batch=FULL_BATCH):
        inputs = self.batch_inputs(batch)
        phi, _ = self.embedding.forward(x, inputs)
        m = phi.shape[0]
        u = phi @ v[:-1] + v[-1]
        out = np.concatenate([phi.T @ u, [u.sum()]]) * (2.0 / m)
        if self.weight_reg_eps:
            out = out + self.weight_reg_eps * self._penalty_hvp(y, v)
        return out

    def hessian_yy_g(self, i, x, y, batch=FULL_BATCH):
        inputs = self.batch_inputs(batch)
        phi, _ = self.embedding.forward(x, inputs)
        Z = np.hstack([phi, np.ones((phi.shape[0], 1))])
        H = Z.T @ Z * (2.0 / phi.shape[0])
        if self.weight_reg_eps:
            H = H + self.weight_reg_eps * np.column_stack(
                [self._penalty_hvp(y, e) for e in np.eye(self.head_dim)])
        return H

    def hvp_xy_g(self, i, x, y, v, batch=FULL_BATCH):
        phi, cache, r = self._residual(i, x, y, batch)
        m = r.shape[0]
        w, vw, vb = y[:-1], v[:-1], v[-1]
        u = phi @ vw + vb
        cot = (2.0 / m) * (np.outer(u, w) + np.outer(r, vw))
        return self.embedding.vjp(cache, cot)

    def true_loss(self, i, x, y):
        return self.f_value(i, x, y, FULL_BATCH)


def sample_sinusoid_tasks(n_easy, n_hard, rng, frequency=1.0):
    """Easy tasks first, then hard ones; phases uniform on [0, pi]."""
    tasks = []
    for lo_hi, count in ((EASY_AMPLITUDE, n_easy), (HARD_AMPLITUDE, n_hard)):
        for _ in range(count):
            a = rng.uniform(*lo_hi)
            phase = rng.uniform(*PHASE_RANGE)
            tasks.append(SinusoidTask(amplitude=float(a), phase=float(phase),
                                      frequency=frequency))
    return tasks


def _suite_streams(seed):
    # third child is reserved for unseen tasks so they never overlap training draws
    return [np.random.default_rng(s) for s in np.random.SeedSequence(check_seed(seed)).spawn(3)]


def unseen_sinusoid_tasks(n_easy=2, n_hard=1, seed=0, frequency=1.0):
    """Held-out tasks for a suite built with the same ``seed``."""
    return sample_sinusoid_tasks(n_easy, n_hard, _suite_streams(seed)[2], frequency)


def sinusoid_suite(n_easy=2, n_hard=1, shots=10, seed=0, widths=(1, 80, 80, 10),
                   weight_reg_eps=0.0, frequency=1.0):
    """Build a sinusoid benchmark.

    Returns the problem; the sampled tasks are in ``problem.tasks`` and the
    recommended minibatch size in ``problem.shots``.  The MLP initialization
    is drawn from the same seed.
    """
    check_positive_int(shots, "shots")
    if n_easy < 0 or n_hard < 0 or n_easy + n_hard < 1:
        raise DomainError("need at least one task")
    task_rng, init_rng, _ = _suite_streams(seed)
    tasks = sample_sinusoid_tasks(n_easy, n_hard, task_rng, frequency)
    problem = SinusoidRegression(tasks, MlpEmbedding(widths), weight_reg_eps,
                                 init_seed=int(init_rng.integers(2**31)))
    problem.shots = shots
    return problem
