"""Coded matrix-vector multiplication and coded gradient descent.

Gradient descent for ``min 1/2 ||Ax - y||^2`` needs ``A x`` and ``A^T (Ax - y)``
each iteration. Worker ``i`` stores block ``i`` of an ``(n, k1)`` code over
the rows of ``A`` and block ``i`` of an ``(n, k2)`` code over the rows of
``A^T``, so each product only waits for the fastest ``k1`` (or ``k2``) workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cluster_sim import JobTrace, LatencyModel, run_job
from .codes import Code, MdsCodeSpec, RowBlockSet, as_matrix, encode_matrix
from .errors import InvalidParameter, StepTooLarge
from .runtime_model import SchemeSpec

DIVERGENCE_LIMIT = 1e12


def scheme_of(code: Code) -> SchemeSpec:
    fam = code.family
    return SchemeSpec(fam.scheme, fam.n, fam.k)


def first_decodable(order: Sequence[int], code: Code) -> list[int]:
    """Shortest prefix of an arrival order that ``code`` can decode."""
    got: list[int] = []
    for i in order:
        got.append(int(i))
        if got in code.family:
            return got
    raise InvalidParameter("arrival order never becomes decodable")


def decode_from(code: Code, responding: Sequence[int], products, padding_rows: int):
    responding = list(responding)
    if code.family.scheme == "mds":
        responding = responding[: code.k]
    return code.decode(responding, [products[i] for i in responding], padding_rows)


def coded_matmul(
    A,
    x,
    code: Code,
    mode: str = "exact",
    latency: LatencyModel | None = None,
    rng: np.random.Generator | None = None,
    responders: Sequence[int] | None = None,
) -> tuple[np.ndarray, JobTrace | None]:
    """Compute ``A @ x`` through ``code``.

    In ``exact`` mode the responders are taken in the given order (default:
    worker index order). In ``simulated`` mode a job is drawn from the
    cluster simulator and its responding set is decoded.
    """
    A = as_matrix(A)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.shape[1]:
        raise InvalidParameter(f"x has {x.shape[0]} entries, A has {A.shape[1]} columns")
    blocks = encode_matrix(A, code)
    products = [blocks[i] @ x for i in range(code.n)]
    trace = None
    if mode == "exact":
        order = range(code.n) if responders is None else responders
        responding = first_decodable(order, code)
    elif mode in ("simulated", "sim"):
        trace = run_job(scheme_of(code), latency or LatencyModel(), rng or np.random.default_rng(), input_size=x.size, result_size=blocks.block_rows)
        responding = list(trace.responding)
    else:
        raise InvalidParameter(f"unknown mode {mode!r}")
    return decode_from(code, responding, products, blocks.padding_rows), trace


def gd_storage_fraction(k1: int, k2: int) -> float:
    """Fraction of ``A`` stored per worker: ``1/k1 + 1/k2 - 1/(k1 k2)``."""
    return 1.0 / k1 + 1.0 / k2 - 1.0 / (k1 * k2)


@dataclass
class CodedMatmulPlan:
    """Both encodings of ``A`` used by coded gradient descent."""

    row_code: MdsCodeSpec
    col_code: MdsCodeSpec
    row_blocks: RowBlockSet
    col_blocks: RowBlockSet
    shape: tuple[int, int]

    @classmethod
    def build(cls, A, n: int, k1: int, k2: int) -> "CodedMatmulPlan":
        A = as_matrix(A)
        rc, cc = MdsCodeSpec.vandermonde(n, k1), MdsCodeSpec.vandermonde(n, k2)
        return cls(rc, cc, encode_matrix(A, rc), encode_matrix(A.T, cc), A.shape)

    @property
    def n(self) -> int:
        return self.row_code.n

    @property
    def storage_fraction(self) -> float:
        return gd_storage_fraction(self.row_code.k, self.col_code.k)

    def code(self, transposed: bool) -> MdsCodeSpec:
        return self.col_code if transposed else self.row_code

    def blocks(self, transposed: bool) -> RowBlockSet:
        return self.col_blocks if transposed else self.row_blocks

    def products(self, v, transposed: bool = False) -> list[np.ndarray]:
        blocks = self.blocks(transposed)
        return [blocks[i] @ v for i in range(self.n)]

    def decode(self, responding, products, transposed: bool = False) -> np.ndarray:
        return decode_from(self.code(transposed), responding, products, self.blocks(transposed).padding_rows)


@dataclass
class GdState:
    iteration: int
    x: np.ndarray
    z: np.ndarray | None
    step: float
    objective: float
    wall_time: float = 0.0
    responding: tuple = field(default=(), repr=False)
    phase_times: tuple = (0.0, 0.0)


def lambda_max(A, iters: int = 100, seed: int = 0) -> float:
    """Largest eigenvalue of ``A^T A`` by power iteration."""
    A = as_matrix(A)
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return float(v @ (A.T @ (A @ v)))


def default_step(A) -> float:
    lam = lambda_max(A)
    if lam <= 0:
        raise InvalidParameter("A is zero; no step size scale")
    return 1.0 / lam


def objective(A, y, x) -> float:
    r = A @ x - y
    return 0.5 * float(r @ r)


def _check(x):
    if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_LIMIT:
        raise StepTooLarge("iterate norm exceeded 1e12; reduce the step size")


def serial_gradient_descent(A, y, steps: int, step: float, x0=None) -> list[np.ndarray]:
    """Plain ``x <- x - step * A^T (A x - y)``; returns ``steps + 1`` iterates."""
    A = as_matrix(A)
    y = np.asarray(y, dtype=np.float64).ravel()
    x = np.zeros(A.shape[1]) if x0 is None else np.array(x0, dtype=np.float64)
    out = [x.copy()]
    for _ in range(steps):
        x = x - step * (A.T @ (A @ x - y))
        _check(x)
        out.append(x.copy())
    return out


def coded_gradient_descent(
    A,
    y,
    n: int,
    k1: int,
    k2: int,
    steps: int,
    step: float | str = "auto",
    mode: str = "exact",
    *,
    latency: LatencyModel | None = None,
    rng: np.random.Generator | None = None,
    sticky_stragglers: bool = False,
    cluster=None,
    x0=None,
) -> list[GdState]:
    """Least-squares gradient descent with both products MDS-coded.

    ``mode``:
      * ``exact``: all products computed in memory; responders arrive in an
        ``rng`` permutation (index order when ``rng`` is None);
      * ``sim``: responders and wall time come from simulated jobs, one per
        product; with ``sticky_stragglers`` the straggling workers are drawn
        once and stay slow for the whole run;
      * ``live``: products go through ``cluster`` (a ``live_cluster.LiveMaster``
        whose workers hold this plan's blocks).

    The master subtracts ``y`` before the second product, so workers never
    hold labels. Returns ``steps + 1`` states, the first being the start.
    """
    A = as_matrix(A)
    y = np.asarray(y, dtype=np.float64).ravel()
    q, r = A.shape
    if y.shape[0] != q:
        raise InvalidParameter("y length must match the rows of A")
    if not (1 <= k1 < n and 1 <= k2 < n):
        raise InvalidParameter("need 1 <= k1, k2 < n")
    gamma = default_step(A) if step == "auto" else float(step)
    if not gamma > 0:
        raise InvalidParameter("step size must be positive")
    if mode not in ("exact", "sim", "simulated", "live"):
        raise InvalidParameter(f"unknown mode {mode!r}")
    if mode == "live" and cluster is None:
        raise InvalidParameter("live mode needs a cluster")

    plan = CodedMatmulPlan.build(A, n, k1, k2)
    latency = latency or LatencyModel()
    rng = rng if rng is not None else (np.random.default_rng(0) if mode != "exact" else None)
    mask = None
    if sticky_stragglers and mode in ("sim", "simulated"):
        mask = rng.random(n) < latency.straggler_prob

    x = np.zeros(r) if x0 is None else np.array(x0, dtype=np.float64)
    wall = 0.0
    states = [GdState(0, x.copy(), None, gamma, objective(A, y, x), wall)]
    for t in range(1, steps + 1):
        z, t1, resp1 = _coded_product(plan, x, False, mode, latency, rng, mask, cluster, 2 * t - 2)
        g, t2, resp2 = _coded_product(plan, z - y, True, mode, latency, rng, mask, cluster, 2 * t - 1)
        x = x - gamma * g
        _check(x)
        # an iteration is charged the slower of its two coded products
        wall += max(t1, t2)
        states.append(GdState(t, x.copy(), z, gamma, objective(A, y, x), wall, (resp1, resp2), (t1, t2)))
    return states


def _coded_product(plan: CodedMatmulPlan, v, transposed, mode, latency, rng, mask, cluster, iteration):
    code = plan.code(transposed)
    if mode == "live":
        out, trace = cluster.matvec(v, iteration=iteration, transposed=transposed)
        return out, trace.total_time, trace.responding
    products = plan.products(v, transposed)
    if mode == "exact":
        order = range(plan.n) if rng is None else rng.permutation(plan.n)
        responding = first_decodable(order, code)
        elapsed = 0.0
    else:
        blocks = plan.blocks(transposed)
        trace = run_job(scheme_of(code), latency, rng, input_size=np.size(v), result_size=blocks.block_rows, straggler_mask=mask)
        responding, elapsed = list(trace.responding), trace.total_time
    return plan.decode(responding, products, transposed), elapsed, tuple(responding)
