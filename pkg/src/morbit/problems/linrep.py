"""Binary classification tasks on a shared linear representation.

The shared variable is a matrix ``X`` (input_dim x rep_dim); task ``i``
owns a softmax head ``Y_i`` ((rep_dim + 1) x 2, last row the bias).  The inner
objective is cross-entropy on training data plus ``l2 * ||Y_i||^2``; the outer
objective is cross-entropy on validation data.  Held-out test data gives the
reported loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from .._validation import check_positive, check_positive_int, check_seed
from ..core import FULL_BATCH, ProblemOracles
from ..exceptions import DomainError, ParseError, ShapeError
from .idx import parse_idx


@dataclass
class LinRepSpec:
    input_dim: int = 64
    rep_dim: int = 16
    l2: float = 0.0005
    g_batch: int = 8
    f_batch: int = 128

    def __post_init__(self):
        check_positive_int(self.input_dim, "input_dim")
        check_positive_int(self.rep_dim, "rep_dim")
        check_positive(self.l2, "l2")
        check_positive_int(self.g_batch, "g_batch")
        check_positive_int(self.f_batch, "f_batch")

    @classmethod
    def full_scale(cls):
        return cls(input_dim=784, rep_dim=100)


@dataclass
class SyntheticGaussian:
    """Class-conditional Gaussians; mean separation (in noise std units) sets difficulty."""

    n_easy: int = 8
    n_hard: int = 2
    easy_sep: float = 3.0
    hard_sep: float = 0.8
    n_train: int = 512
    n_val: int = 512
    n_test: int = 1024
    seed: int = 0


@dataclass
class IdxDataset:
    """One-vs-one tasks from an IDX image/label pair (e.g. FashionMNIST)."""

    images: str
    labels: str
    pairs: list = field(default_factory=lambda: [(0, 6), (2, 4), (4, 6), (2, 6), (0, 2),
                                                 (1, 3), (5, 7), (7, 9), (5, 9), (3, 8)])
    n_train: int = 512
    n_val: int = 512
    n_test: int = 1024
    seed: int = 0


@dataclass
class _Split:
    A: np.ndarray
    labels: np.ndarray


class LinearRepresentation(ProblemOracles):
    """Oracles for shared-representation classification.

    ``pools[i]`` maps ``"train"``, ``"val"`` and ``"test"`` to data splits.
    g oracles read the train split, f oracles the validation split; a sampled
    batch takes ``batch.size`` rows without replacement (``batch.key`` seeds
    the choice), the full batch the whole split.
    """

    def __init__(self, pools, spec, init_seed=0, difficulty=None):
        if not pools:
            raise DomainError("need at least one task")
        self.pools = pools
        self.spec = spec
        self.difficulty = difficulty
        self.init_seed = check_seed(init_seed)
        self.n = len(pools)
        self.input_dim = pools[0]["train"].A.shape[1]
        self.rep_dim = spec.rep_dim
        for p in pools:
            for split in p.values():
                if split.A.shape[1] != self.input_dim:
                    raise ShapeError("all tasks must share the input dimension")
        self.outer_dim = self.input_dim * self.rep_dim
        self.head_dim = (self.rep_dim + 1) * 2
        self.inner_dims = [self.head_dim] * self.n

    def initial_x(self):
        rng = np.random.default_rng(self.init_seed)
        return rng.standard_normal(self.outer_dim) / np.sqrt(self.input_dim)

    # helpers ---------------------------------------------------------------
    def _data(self, i, split, batch):
        s = self.pools[i][split]
        if batch.is_full or batch.size >= s.A.shape[0]:
            return s.A, s.labels
        rng = np.random.default_rng(batch.key)
        idx = rng.choice(s.A.shape[0], size=batch.size, replace=False)
        return s.A[idx], s.labels[idx]

    def _head(self, y):
        Y = y.reshape(self.rep_dim + 1, 2)
        return Y[:-1], Y[-1]

    def _forward(self, x, y, A):
        Xr = x.reshape(self.input_dim, self.rep_dim)
        phi = A @ Xr
        W, b = self._head(y)
        return phi, phi @ W + b

    @staticmethod
    def _ce(z, labels):
        return float(-log_softmax(z, axis=1)[np.arange(len(labels)), labels].mean())

    def _grads_z(self, z, labels):
        P = softmax(z, axis=1)
        P[np.arange(len(labels)), labels] -= 1.0
        return P / len(labels)

    # oracles ---------------------------------------------------------------
    def f_value(self, i, x, y, batch=FULL_BATCH):
        A, lab = self._data(i, "val", batch)
        return self._ce(self._forward(x, y, A)[1], lab)

    def g_value(self, i, x, y, batch=FULL_BATCH):
        A, lab = self._data(i, "train", batch)
        return self._ce(self._forward(x, y, A)[1], lab) + self.spec.l2 * float(y @ y)

    def _grad_y(self, x, y, A, lab):
        phi, z = self._forward(x, y, A)
        G = self._grads_z(z, lab)
        return np.vstack([phi.T @ G, G.sum(axis=0)]).ravel()

    def grad_y_f(self, i, x, y, batch=FULL_BATCH):
        A, lab = self._data(i, "val", batch)
        return self._grad_y(x, y, A, lab)

    def grad_y_g(self, i, x, y, batch=FULL_BATCH):
        A, lab = self._data(i, "train", batch)
        return self._grad_y(x, y, A, lab) + 2.0 * self.spec.l2 * y

    def grad_x_f(self, i, x, y, batch=FULL_BATCH):
        A, lab = self._data(i, "val", batch)
        _, z = self._forward(x, y, A)
        W, _ = self._head(y)
        G = self._grads_z(z, lab)
        return (A.T @ (G @ W.T)).ravel()

    def _dP(self, z, dz):
        P = softmax(z, axis=1)
        return P * dz - P * np.sum(P * dz, axis=1, keepdims=True)

    def hvp_yy_g(self, i, x, y, v, batch=FULL_BATCH):
        A, lab = self._data(i, "train", batch)
        phi, z = self._forward(x, y, A)
        VW, vb = self._head(v)
        dP = self._dP(z, phi @ VW + vb) / len(lab)
        return np.vstack([phi.T @ dP, dP.sum(axis=0)]).ravel() + 2.0 * self.spec.l2 * v

    def hvp_xy_g(self, i, x, y, v, batch=FULL_BATCH):
        A, lab = self._data(i, "train", batch)
        phi, z = self._forward(x, y, A)
        W, _ = self._head(y)
        VW, vb = self._head(v)
        G = self._grads_z(z, lab)
        dP = self._dP(z, phi @ VW + vb) / len(lab)
        R = G @ VW.T + dP @ W.T
        return (A.T @ R).ravel()

    def hessian_yy_g(self, i, x, y, batch=FULL_BATCH):
        A, lab = self._data(i, "train", batch)
        phi, z = self._forward(x, y, A)
        P = softmax(z, axis=1)
        Z = np.hstack([phi, np.ones((phi.shape[0], 1))])
        m = len(lab)
        # per-sample Hessian is (Z_j Z_j^T) kron (diag(p_j) - p_j p_j^T)
        H = np.zeros((self.head_dim, self.head_dim))
        for a in range(2):
            for c in range(2):
                s = P[:, a] * ((a == c) - P[:, c])
                H[a::2, c::2] = (Z * s[:, None]).T @ Z / m
        return H + 2.0 * self.spec.l2 * np.eye(self.head_dim)

    def true_loss(self, i, x, y):
        s = self.pools[i]["test"]
        return self._ce(self._forward(x, y, s.A)[1], s.labels)


def _synthetic_pools(src, input_dim):
    rng = np.random.default_rng(check_seed(src.seed))
    pools, difficulty = [], []
    seps = [src.easy_sep] * src.n_easy + [src.hard_sep] * src.n_hard
    for sep in seps:
        u = rng.standard_normal(input_dim)
        u /= np.linalg.norm(u)
        pool = {}
        for split, m in (("train", src.n_train), ("val", src.n_val), ("test", src.n_test)):
            labels = np.arange(m) % 2
            rng.shuffle(labels)
            signs = 2.0 * labels - 1.0
            A = rng.standard_normal((m, input_dim)) + 0.5 * sep * signs[:, None] * u
            pool[split] = _Split(A=A, labels=labels.astype(np.int64))
        pools.append(pool)
        difficulty.append("easy" if sep == src.easy_sep else "hard")
    return pools, difficulty


def _idx_pools(src):
    images, _ = parse_idx(src.images)
    labels, _ = parse_idx(src.labels)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1)
    rng = np.random.default_rng(check_seed(src.seed))
    need = src.n_train + src.n_val + src.n_test
    pools = []
    for a, b in src.pairs:
        idx = np.flatnonzero((labels == a) | (labels == b))
        if idx.size < need:
            raise DomainError(f"pair ({a}, {b}) has {idx.size} samples, need {need}")
        idx = rng.permutation(idx)[:need]
        lab = (labels[idx] == b).astype(np.int64)
        cuts = np.cumsum([src.n_train, src.n_val])
        parts = np.split(np.arange(need), cuts)
        pools.append({split: _Split(A=flat[idx[p]], labels=lab[p])
                      for split, p in zip(("train", "val", "test"), parts)})
    return pools


def linrep_suite(spec=None, source=None, init_seed=None):
    """Build the representation-learning benchmark.

    ``source`` is a :class:`SyntheticGaussian` (default) or an
    :class:`IdxDataset`; for IDX data the input dimension comes from the
    images.
    """
    spec = LinRepSpec() if spec is None else spec
    source = SyntheticGaussian() if source is None else source
    difficulty = None
    if isinstance(source, SyntheticGaussian):
        pools, difficulty = _synthetic_pools(source, spec.input_dim)
    elif isinstance(source, IdxDataset):
        pools = _idx_pools(source)
    else:
        raise TypeError(f"unknown data source {source!r}")
    seed = source.seed if init_seed is None else init_seed
    return LinearRepresentation(pools, spec, init_seed=seed, difficulty=difficulty)
