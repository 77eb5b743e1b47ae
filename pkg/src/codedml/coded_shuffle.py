"""Coded data shuffling between a master and ``n`` caching workers.

The master holds all ``q`` rows. Worker ``i`` caches ``s`` rows ``C_i`` that
always include its current mini-batch ``S_i`` (``q/n`` rows); the remaining
``s - q/n`` cached rows are uniform over the rows outside ``S_i``.

When a new partition is drawn, a row that worker ``k`` needs but does not hold
is cached at exactly some set ``J`` of other workers (its exclusive class).
For each subset ``I`` with ``|I| >= 2`` the master broadcasts the elementwise
sum, over ``k`` in ``I``, of the rows worker ``k`` needs whose exclusive class
is ``I - {k}``. Every other term of that sum sits in worker ``k``'s cache, so
``k`` subtracts them and keeps its own term. That one broadcast serves all
``|I|`` workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cluster_sim import BroadcastModel
from .errors import InvalidParameter, InvalidState, PlanInconsistency

MAX_PLANNER_WORKERS = 20


# --------------------------------------------------------------------------
# state


def draw_partition(q: int, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform random permutation of ``range(q)`` cut into ``n`` equal mini-batches."""
    if n < 1 or q % n:
        raise InvalidParameter(f"need n | q (got q={q}, n={n}); pad the data upstream")
    return list(rng.permutation(q).reshape(n, q // n))


@dataclass
class ShuffleState:
    """Master-side view: cached row indices and current mini-batches."""

    q: int
    n: int
    s: int
    caches: list[np.ndarray]
    partition: list[np.ndarray]

    def __post_init__(self):
        self.caches = [np.sort(np.asarray(c, dtype=np.int64)) for c in self.caches]
        self.partition = [np.asarray(p, dtype=np.int64) for p in self.partition]

    @property
    def batch(self) -> int:
        return self.q // self.n

    def validate(self) -> None:
        q, n, s = self.q, self.n, self.s
        if n < 1 or q % n:
            raise InvalidState("n must divide q")
        if not q // n <= s <= q:
            raise InvalidState(f"cache size must satisfy q/n <= s <= q (s={s})")
        if len(self.caches) != n or len(self.partition) != n:
            raise InvalidState("need one cache and one mini-batch per worker")
        allrows = np.concatenate(self.partition)
        if allrows.size != q or not np.array_equal(np.sort(allrows), np.arange(q)):
            raise InvalidState("mini-batches must partition range(q)")
        for i, (c, p) in enumerate(zip(self.caches, self.partition)):
            if p.size != q // n:
                raise InvalidState(f"worker {i}: mini-batch has {p.size} rows, expected {q // n}")
            if c.size != s or np.unique(c).size != s:
                raise InvalidState(f"worker {i}: cache holds {np.unique(c).size} distinct rows, expected {s}")
            if not np.all(np.isin(p, c)):
                raise InvalidState(f"worker {i}: mini-batch not contained in cache")

    def cache_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, self.q), dtype=bool)
        for i, c in enumerate(self.caches):
            mask[i, c] = True
        return mask

    def patterns(self) -> np.ndarray:
        """Per-row bitmask of the workers caching it."""
        bits = np.zeros(self.q, dtype=np.int64)
        for i, c in enumerate(self.caches):
            bits[c] |= np.int64(1) << i
        return bits


def initial_state(q: int, n: int, s: int, rng: np.random.Generator) -> ShuffleState:
    """Fresh partition; each cache is its mini-batch plus a uniform sample of other rows."""
    if not (n >= 1 and q % n == 0 and q // n <= s <= q):
        raise InvalidParameter("need n | q and q/n <= s <= q")
    part = draw_partition(q, n, rng)
    caches = []
    for S in part:
        rest = np.setdiff1d(np.arange(q), S, assume_unique=True)
        caches.append(np.concatenate([S, rng.choice(rest, s - S.size, replace=False)]))
    return ShuffleState(q, n, s, caches, part)


def _subset(bits: int) -> frozenset:
    return frozenset(i for i in range(bits.bit_length()) if bits >> i & 1)


def exclusive_sets(state: ShuffleState) -> dict[frozenset, np.ndarray]:
    """Map each worker subset ``I`` to the rows cached at exactly the workers in ``I``.

    Only nonempty classes are returned; together they partition ``range(q)``.
    """
    bits = state.patterns()
    if np.any(bits == 0):
        raise InvalidState("some rows are cached nowhere")
    order = np.argsort(bits, kind="stable")
    keys, starts = np.unique(bits[order], return_index=True)
    groups = np.split(order, starts[1:])
    return {_subset(int(k)): np.sort(g) for k, g in zip(keys, groups)}


# --------------------------------------------------------------------------
# planning and delivery


@dataclass
class ShuffleMessage:
    """One broadcast: zero-padded sum of the per-worker terms of subset ``I``."""

    subset: tuple[int, ...]
    terms: dict[int, np.ndarray]
    length: int
    payload: np.ndarray | None = field(default=None, repr=False)


@dataclass
class ShufflePlan:
    messages: list[ShuffleMessage]
    partition: list[np.ndarray]
    uncoded_rows: int

    @property
    def padded_rows(self) -> int:
        return sum(m.length for m in self.messages)

    @property
    def useful_rows(self) -> int:
        return sum(t.size for m in self.messages for t in m.terms.values())


def plan_transmissions(state: ShuffleState, new_partition, data=None, validate: bool = True) -> ShufflePlan:
    """Build the coded broadcasts that deliver ``new_partition``.

    With ``data`` (the master's ``q x r`` matrix) every message carries its
    payload; without it only indices and lengths are planned.
    """
    if validate:
        state.validate()
    if state.n > MAX_PLANNER_WORKERS:
        raise InvalidParameter(f"planner enumerates subsets; n is capped at {MAX_PLANNER_WORKERS}")
    q, n = state.q, state.n
    new_partition = [np.asarray(p, dtype=np.int64) for p in new_partition]
    owner = np.full(q, -1, dtype=np.int64)
    for k, S in enumerate(new_partition):
        owner[S] = k
    if np.any(owner < 0) or sum(S.size for S in new_partition) != q:
        raise InvalidState("new mini-batches must partition range(q)")

    bits = state.patterns()
    rows = np.arange(q)
    need = (bits >> owner & 1) == 0
    rows, owner_n, bits_n = rows[need], owner[need], bits[need]
    subset_bits = bits_n | (np.int64(1) << owner_n)
    # group needed rows by (subset, receiver), rows ascending inside a group
    order = np.lexsort((rows, owner_n, subset_bits))
    rows, owner_n, subset_bits = rows[order], owner_n[order], subset_bits[order]

    A = None if data is None else np.asarray(data, dtype=np.float64)
    messages = []
    if rows.size:
        cut = np.flatnonzero(np.diff(subset_bits)) + 1
        for r_grp, o_grp in zip(np.split(rows, cut), np.split(owner_n, cut)):
            kcut = np.flatnonzero(np.diff(o_grp)) + 1
            terms = {int(o[0]): r for r, o in zip(np.split(r_grp, kcut), np.split(o_grp, kcut))}
            sub = tuple(sorted(_subset(int(bits[r_grp[0]]) | (1 << int(o_grp[0])))))
            length = max(t.size for t in terms.values())
            payload = None
            if A is not None:
                payload = np.zeros((length, A.shape[1]))
                for t in terms.values():
                    payload[: t.size] += A[t]
            messages.append(ShuffleMessage(sub, terms, length, payload))
    return ShufflePlan(messages, new_partition, int(rows.size))


class WorkerCache:
    """Rows held by one worker: sorted indices and the matching data rows."""

    def __init__(self, indices, data):
        indices = np.asarray(indices, dtype=np.int64)
        order = np.argsort(indices)
        self.indices = indices[order]
        self.data = np.asarray(data, dtype=np.float64)[order]

    def __len__(self):
        return self.indices.size

    def __contains__(self, row) -> bool:
        j = np.searchsorted(self.indices, row)
        return bool(j < self.indices.size and self.indices[j] == row)

    def holds(self, rows) -> np.ndarray:
        return np.isin(np.asarray(rows), self.indices)

    def rows(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        j = np.searchsorted(self.indices, rows)
        ok = (j < self.indices.size) & (self.indices[np.minimum(j, self.indices.size - 1)] == rows)
        if not np.all(ok):
            raise PlanInconsistency(f"rows {rows[~ok][:5].tolist()} are not in this cache")
        return self.data[j]


def apply_plan(worker_id: int, cache: WorkerCache, plan: ShufflePlan) -> tuple[np.ndarray, np.ndarray]:
    """Decode this worker's missing rows: ``(sorted indices, values)`` of ``S_new - C``."""
    got_idx, got_val = [], []
    for msg in plan.messages:
        if worker_id not in msg.terms:
            continue
        if msg.payload is None:
            raise PlanInconsistency("plan was built without data payloads")
        acc = msg.payload.copy()
        for k, t in msg.terms.items():
            if k != worker_id:
                acc[: t.size] -= cache.rows(t)
        mine = msg.terms[worker_id]
        got_idx.append(mine)
        got_val.append(acc[: mine.size])
    if not got_idx:
        return np.zeros(0, dtype=np.int64), np.zeros((0, cache.data.shape[1] if cache.data.ndim == 2 else 0))
    idx = np.concatenate(got_idx)
    val = np.vstack(got_val)
    order = np.argsort(idx)
    return idx[order], val[order]


def resample_cache(cache_idx, new_batch, s: int, rng: np.random.Generator) -> np.ndarray:
    """New cache indices: the new mini-batch plus ``s - |batch|`` uniform picks from the old cache."""
    cache_idx = np.asarray(cache_idx, dtype=np.int64)
    new_batch = np.asarray(new_batch, dtype=np.int64)
    candidates = np.setdiff1d(cache_idx, new_batch)
    extra = s - new_batch.size
    if extra < 0 or candidates.size < extra:
        raise InvalidState(f"cannot fill a cache of {s} rows from {candidates.size} candidates")
    keep = rng.choice(candidates, extra, replace=False) if extra else np.zeros(0, dtype=np.int64)
    return np.concatenate([new_batch, keep])


def update_cache(cache: WorkerCache, new_batch, recovered, s: int, rng: np.random.Generator) -> WorkerCache:
    """Cache after a shuffle; ``recovered`` is the output of ``apply_plan``."""
    rec_idx, rec_val = recovered
    pool_idx = np.concatenate([cache.indices, rec_idx])
    pool_val = np.vstack([cache.data, rec_val]) if rec_idx.size else cache.data
    if np.unique(pool_idx).size != pool_idx.size:
        raise InvalidState("recovered rows overlap the cache")
    pool = WorkerCache(pool_idx, pool_val)
    new_idx = resample_cache(cache.indices, new_batch, s, rng)
    return WorkerCache(new_idx, pool.rows(new_idx))


# --------------------------------------------------------------------------
# rates


def cache_overlap(q: float, s: float, n: int) -> float:
    """``p = (s - q/n) / (q - q/n)``: chance a non-batch row sits in a given cache."""
    if n == 1:
        return 1.0
    if not q / n <= s <= q:
        raise InvalidParameter("need q/n <= s <= q")
    return (s - q / n) / (q - q / n)


def rate_uncoded(q: float, s: float, n: int) -> float:
    return q * (1.0 - s / q)


SMALL_P = 1e-2


def rate_coded_closed(q: float, s: float, n: int) -> float:
    """Closed-form expected rows broadcast per shuffle; at ``p = 0`` the limit ``R_u/(1 + ns/q)``."""
    p = cache_overlap(q, s, n)
    if n == 1 or p >= 1.0:
        return 0.0
    if p == 0.0:
        return q * (1.0 - s / q) / (1.0 + n * s / q)
    return rate_coded_closed_p(q, n, p)


def rate_coded_sum(q: float, s: float, n: int, p: float | None = None) -> float:
    """The same rate as a sum over subset sizes ``i = 2..n``."""
    if p is None:
        p = cache_overlap(q, s, n)
    return math.fsum(
        math.comb(n, i) * (q / n) * ((i - 1) / n) * p ** (i - 2) * (1 - p) ** (n - i + 1) for i in range(2, n + 1)
    )


def rate_coded_closed_p(q: float, n: int, p: float) -> float:
    """Closed form as a function of ``p`` directly (``0 < p <= 1``)."""
    # the closed form cancels catastrophically as p -> 0; the sum is exact there
    if p < SMALL_P:
        return rate_coded_sum(q, 0, n, p=p)
    return q / (n * p) ** 2 * ((1 - p) ** (n + 1) + (n - 1) * p * (1 - p) - (1 - p) ** 2)


def exclusive_class_mass(n: int, p: float) -> float:
    """Sum over nonempty subsets ``I`` of ``P(row in class I)``; identically 1."""
    return math.fsum(math.comb(n, i) * (i / n) * p ** (i - 1) * (1 - p) ** (n - i) for i in range(1, n + 1))


@dataclass
class RateReport:
    q: int
    n: int
    s: int
    p: float
    rate_uncoded: float
    rate_coded: float
    reduction: float
    measured_uncoded: float | None = None
    measured_coded: float | None = None
    measured_reps: int = 0
    broadcast: str = "full"
    cost_uncoded: float = 0.0
    cost_coded: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def rate_report(q: int, s: int, n: int, measure: bool = False, reps: int = 20, seed: int = 0, bcast: BroadcastModel | None = None) -> RateReport:
    bcast = bcast or BroadcastModel("full")
    ru, rc = rate_uncoded(q, s, n), rate_coded_closed(q, s, n)
    rep = RateReport(
        q, n, s, cache_overlap(q, s, n), ru, rc, 1.0 - rc / ru if ru else 0.0,
        broadcast=bcast.kind, cost_uncoded=ru, cost_coded=rc * n / bcast.gamma(n),
    )
    if measure:
        epochs = simulate_shuffles(q, n, s, reps, np.random.default_rng(seed))
        rep.measured_uncoded = float(np.mean([e.rows_uncoded for e in epochs]))
        rep.measured_coded = float(np.mean([e.rows_coded_measured for e in epochs]))
        rep.measured_reps = reps
    return rep


@dataclass
class ShuffleEpoch:
    epoch: int
    rows_uncoded: int
    rows_coded_measured: int
    rows_coded_analytic: float


def simulate_shuffles(q: int, n: int, s: int, epochs: int, rng: np.random.Generator, data=None) -> list[ShuffleEpoch]:
    """Run ``epochs`` consecutive shuffles and count rows moved.

    Without ``data`` only indices move (fast). With ``data`` every worker
    decodes its rows from real payloads and the result is checked against
    the master's copy.
    """
    state = initial_state(q, n, s, rng)
    A = None if data is None else np.asarray(data, dtype=np.float64)
    workers = None if A is None else [WorkerCache(c, A[c]) for c in state.caches]
    analytic = rate_coded_closed(q, s, n)
    out = []
    for e in range(1, epochs + 1):
        new_part = draw_partition(q, n, rng)
        plan = plan_transmissions(state, new_part, A, validate=False)
        if workers is None:
            caches = [resample_cache(c, S, s, rng) for c, S in zip(state.caches, new_part)]
        else:
            for i in range(n):
                rec = apply_plan(i, workers[i], plan)
                need = np.setdiff1d(new_part[i], workers[i].indices)
                if not np.array_equal(rec[0], need) or not np.allclose(rec[1], A[need], rtol=1e-12, atol=1e-12):
                    raise PlanInconsistency(f"worker {i} decoded wrong rows in epoch {e}")
                workers[i] = update_cache(workers[i], new_part[i], rec, s, rng)
            caches = [w.indices for w in workers]
        state = ShuffleState(q, n, s, caches, new_part)
        out.append(ShuffleEpoch(e, plan.uncoded_rows, plan.padded_rows, analytic))
    return out


# --------------------------------------------------------------------------
# wall time


def wall_time(scheme: str, epoch: int, comm_overhead: float, n: int, s: float, q: float) -> float:
    """Wall time after ``epoch`` epochs.

    One unit of computation per epoch; initial distribution costs
    ``comm_overhead / n``; each later shuffle adds the per-worker share of
    either the uncoded or the coded rate.
    """
    base = comm_overhead / n + epoch
    if scheme == "none":
        return base
    shuffle = (epoch - 1) / n * (1.0 - s / q)
    if scheme == "uncoded":
        return base + shuffle
    if scheme == "coded":
        return base + shuffle / (1.0 + n * s / q)
    raise InvalidParameter(f"unknown shuffling scheme {scheme!r}")
