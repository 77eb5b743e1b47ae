"""Parallel SGD (PSGD) workloads with and without data shuffling.

Each epoch every worker starts from the common model, makes one sequential
SGD pass over its mini-batch in the drawn row order, and the master averages
the ``n`` local models. Shuffling redraws the mini-batches between epochs.
Coded and uncoded shuffling move the same rows, so they give identical
iterates and only their wall-time accounting differs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .coded_shuffle import draw_partition, wall_time
from .errors import InvalidParameter
from .matrix_io import read_matrix

SCHEMES = ("coded", "uncoded", "none")


@dataclass
class LearnTask:
    kind: str  # "linreg" or "logistic"
    A: np.ndarray
    y: np.ndarray
    x_star: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("linreg", "logistic"):
            raise InvalidParameter(f"unknown task kind {self.kind!r}")
        self.A = np.asarray(self.A, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.A.ndim != 2 or self.y.shape[0] != self.A.shape[0]:
            raise InvalidParameter("A must be q x r and y must have q entries")
        if self.kind == "logistic" and not np.all((self.y == 0) | (self.y == 1)):
            raise InvalidParameter("logistic labels must be 0 or 1")

    @property
    def q(self) -> int:
        return self.A.shape[0]

    @property
    def r(self) -> int:
        return self.A.shape[1]

    def loss(self, x) -> float:
        """Linreg: ``1/2 ||Ax - y||^2``. Logistic: summed negative log-likelihood."""
        z = self.A @ x
        if self.kind == "linreg":
            d = z - self.y
            return 0.5 * float(d @ d)
        # -log P(y|a;x) = log(1 + e^z) - y z, computed stably
        return float(np.sum(np.logaddexp(0.0, z) - self.y * z))

    def residual(self, rows, X) -> np.ndarray:
        """Per-row scalar ``d loss_j / d (a_j . x)``, one model per row of ``X``."""
        z = np.einsum("ij,ij->i", self.A[rows], X)
        if self.kind == "linreg":
            return z - self.y[rows]
        return _sigmoid(z) - self.y[rows]

    def optimum(self) -> float:
        """Least-squares optimum of the objective (linreg only)."""
        if self.kind != "linreg":
            raise InvalidParameter("closed-form optimum only for linreg")
        x, *_ = np.linalg.lstsq(self.A, self.y, rcond=None)
        return self.loss(x)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def make_synthetic(kind: str, q: int = 1000, r: int = 100, seed: int = 0) -> LearnTask:
    """Linreg: ``A, x*, w ~ U[0,1]``, ``y = A x* + w``. Logistic: ``A ~ N(0,1)``, ``x* ~ U[0,1]``, labels from the model."""
    rng = np.random.default_rng(seed)
    if kind == "linreg":
        A = rng.random((q, r))
        x_star = rng.random(r)
        w = rng.random(q)
        return LearnTask(kind, A, A @ x_star + w, x_star)
    if kind == "logistic":
        A = rng.standard_normal((q, r))
        x_star = rng.random(r)
        labels = (rng.random(q) < _sigmoid(A @ x_star)).astype(np.float64)
        return LearnTask(kind, A, labels, x_star)
    raise InvalidParameter(f"unknown task kind {kind!r}")


def load_task(kind: str, path) -> LearnTask:
    """Dataset file with the label in the last column."""
    M = read_matrix(path)
    if M.shape[1] < 2:
        raise InvalidParameter("dataset needs at least one feature column and a label column")
    return LearnTask(kind, M[:, :-1], M[:, -1])


def psgd_epoch(task: LearnTask, x, partition, step: float) -> np.ndarray:
    """One PSGD epoch: local sequential passes from ``x``, then the average.

    Workers are advanced in lockstep so the inner loop is vectorised across
    workers; each still sees only its own rows in its own order.
    """
    x = np.asarray(x, dtype=np.float64)
    parts = [np.asarray(p, dtype=np.int64) for p in partition]
    n = len(parts)
    sizes = np.array([p.size for p in parts])
    width = int(sizes.max()) if n else 0
    idx = np.zeros((n, width), dtype=np.int64)
    for i, p in enumerate(parts):
        idx[i, : p.size] = p
    X = np.tile(x, (n, 1))
    for j in range(width):
        live = sizes > j
        rows = idx[live, j]
        g = task.residual(rows, X[live])
        X[live] -= step * g[:, None] * task.A[rows]
    return X.mean(axis=0)


def tune_step(task: LearnTask, n: int = 10, start: float = 1.0, seed: int = 0, max_halvings: int = 60) -> float:
    """Halve ``start`` until one epoch from zero lowers the objective."""
    rng = np.random.default_rng(seed)
    part = draw_partition(task.q - task.q % n, n, rng)
    x0 = np.zeros(task.r)
    f0 = task.loss(x0)
    step = start
    for _ in range(max_halvings):
        with np.errstate(over="ignore", invalid="ignore"):
            x1 = psgd_epoch(task, x0, part, step)
            f1 = task.loss(x1) if np.all(np.isfinite(x1)) else np.inf
        if f1 < f0:
            return step
        step /= 2
    raise InvalidParameter("no descending step size found")


@dataclass
class EpochTrace:
    epoch: int
    objective: float
    wall_none: float
    wall_uncoded: float
    wall_coded: float


def run_experiment(
    task: LearnTask,
    scheme: str,
    epochs: int,
    n: int = 10,
    s: int | None = None,
    alpha: float = 0.5,
    seed: int = 0,
    step: float | None = None,
) -> list[EpochTrace]:
    """Run PSGD for ``epochs`` epochs under a shuffling scheme.

    ``none`` keeps the epoch-1 partition; ``coded``/``uncoded`` redraw it
    before each later epoch from the same stream. ``s`` defaults to a cache
    of ``2q/n`` rows. If ``n`` does not divide ``q`` the last ``q mod n``
    rows are dropped.
    """
    if scheme not in SCHEMES:
        raise InvalidParameter(f"unknown scheme {scheme!r}")
    if epochs < 1 or n < 1:
        raise InvalidParameter("epochs and n must be positive")
    q = task.q - task.q % n
    s = min(q, 2 * q // n) if s is None else int(s)
    if not q // n <= s <= q:
        raise InvalidParameter("need q/n <= s <= q")
    if step is None:
        step = tune_step(task, n)
    rng = np.random.default_rng(seed)
    part = draw_partition(q, n, rng)
    x = np.zeros(task.r)
    out = []
    for e in range(1, epochs + 1):
        if e > 1 and scheme != "none":
            part = draw_partition(q, n, rng)
        x = psgd_epoch(task, x, part, step)
        out.append(
            EpochTrace(
                e,
                task.loss(x),
                wall_time("none", e, alpha, n, s, q),
                wall_time("uncoded", e, alpha, n, s, q),
                wall_time("coded", e, alpha, n, s, q),
            )
        )
    return out


TRACE_HEADER = ["epoch", "objective", "wall_none", "wall_uncoded", "wall_coded"]


def write_traces(path, traces: list[EpochTrace]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for t in traces:
            w.writerow([t.epoch, repr(t.objective), repr(t.wall_none), repr(t.wall_uncoded), repr(t.wall_coded)])
