"""Discrete-event simulation of a master and ``n`` workers.

Every worker starts its task at time 0 and finishes after a random runtime.
The master stops at the first instant the set of finished workers is
decodable. Results that arrive later are ignored, and their workers are not
cancelled.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codes import DecodableFamily
from .errors import InvalidParameter
from .runtime_model import MotherDistribution, SchemeSpec, ShiftedExponential


@dataclass(frozen=True)
class LatencyModel:
    """Mother distribution plus Bernoulli stragglers slowed by a constant factor.

    The defaults (5% of tasks twice as slow) follow the measured cluster
    behaviour; pass ``straggler_prob=0`` for the pure mother distribution.
    """

    base: MotherDistribution = field(default_factory=ShiftedExponential)
    straggler_prob: float = 0.05
    straggler_factor: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.straggler_prob <= 1.0:
            raise InvalidParameter("straggler_prob must lie in [0, 1]")
        if not self.straggler_factor >= 1.0:
            raise InvalidParameter("straggler_factor must be >= 1")

    def draw(self, spec: SchemeSpec, rng: np.random.Generator, size=None, straggler_mask=None) -> np.ndarray:
        """Task times with shape ``size + (n,)``.

        ``straggler_mask`` pins which workers straggle instead of drawing them.
        """
        shape = (spec.n,) if size is None else tuple(np.atleast_1d(size)) + (spec.n,)
        times = self.base.sample(rng, shape) / spec.scale
        if straggler_mask is not None:
            times = np.where(straggler_mask, times * self.straggler_factor, times)
        elif self.straggler_prob > 0:
            slow = rng.random(shape) < self.straggler_prob
            times = np.where(slow, times * self.straggler_factor, times)
        return times


class DegenerateRuntime:
    """Constant mother runtime; useful for deterministic checks."""

    def __init__(self, value: float = 1.0):
        self.value = float(value)
        self.support_start = self.value
        self.mean = self.value

    def cdf(self, t):
        return np.where(np.asarray(t) >= self.value, 1.0, 0.0)

    def sample(self, rng, size=None):
        return np.full(() if size is None else size, self.value)


@dataclass
class JobTrace:
    """Outcome of one simulated (or live) job.

    ``completion_time`` is when the responding set became decodable;
    ``decode_time`` is charged on top of it.
    """

    start_times: np.ndarray
    finish_times: np.ndarray
    responding: tuple[int, ...]
    completion_time: float
    decode_time: float = 0.0
    unicast_units: float = 0.0
    broadcast_units: float = 0.0

    @property
    def total_time(self) -> float:
        return self.completion_time + self.decode_time


def earliest_decodable(finish_times: Sequence[float], family: DecodableFamily) -> tuple[tuple[int, ...], float]:
    """Walk finish events in time order (ties by worker index) until decodable."""
    order = sorted(range(len(finish_times)), key=lambda i: (finish_times[i], i))
    got: list[int] = []
    for i in order:
        got.append(i)
        if got in family:
            return tuple(got), float(finish_times[i])
    raise InvalidParameter("the full worker set is not decodable")  # pragma: no cover


def run_job(
    spec: SchemeSpec,
    latency: LatencyModel,
    rng: np.random.Generator,
    *,
    input_size: float = 1.0,
    result_size: float = 1.0,
    decode_cost: float = 0.0,
    straggler_mask=None,
) -> JobTrace:
    """Simulate one job.

    Communication is one broadcast of the input and ``n`` unicast results
    (late results are still sent since nobody cancels them).
    """
    times = latency.draw(spec, rng, straggler_mask=straggler_mask)
    responding, done = earliest_decodable(times, spec)
    return JobTrace(
        start_times=np.zeros(spec.n),
        finish_times=times,
        responding=responding,
        completion_time=done,
        decode_time=decode_cost if spec.scheme != "uncoded" else 0.0,
        unicast_units=spec.n * result_size,
        broadcast_units=input_size,
    )


def completion_times(times: np.ndarray, family: DecodableFamily) -> np.ndarray:
    """Vectorised earliest-decodable time for each row of ``times``."""
    times = np.asarray(times)
    if family.scheme == "uncoded":
        return times.max(axis=-1)
    if family.scheme == "mds":
        k = family.k
        return np.partition(times, k - 1, axis=-1)[..., k - 1]
    r = family.replicas
    grouped = times.reshape(times.shape[:-1] + (family.k, r))
    return grouped.min(axis=-1).max(axis=-1)


@dataclass
class RuntimeDistribution:
    """Empirical distribution of job completion times from repeated runs."""

    times: np.ndarray
    responding: list[tuple[int, ...]]

    @property
    def sorted_times(self) -> np.ndarray:
        return np.sort(self.times)

    def quantiles(self) -> dict:
        t = self.times
        return {
            "replications": int(t.size),
            "mean": float(t.mean()),
            "p50": float(np.quantile(t, 0.50)),
            "p95": float(np.quantile(t, 0.95)),
            "p99": float(np.quantile(t, 0.99)),
        }

    def cdf(self, t):
        s = self.sorted_times
        return np.searchsorted(s, np.asarray(t), side="right") / s.size

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", "completion_time", "responding_set"])
            for i, (t, resp) in enumerate(zip(self.times, self.responding)):
                w.writerow([i, repr(float(t)), ";".join(str(j) for j in sorted(resp))])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.quantiles(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def simulate_distribution(spec: SchemeSpec, latency: LatencyModel, replications: int, seed: int) -> RuntimeDistribution:
    """Run ``replications`` independent jobs from one seeded stream.

    Same arithmetic as ``run_job`` in bulk: all task times are drawn as a
    ``(replications, n)`` matrix and reduced per scheme.
    """
    if replications < 1:
        raise InvalidParameter("replications must be at least 1")
    rng = np.random.default_rng(seed)
    times = latency.draw(spec, rng, size=replications)
    done = completion_times(times, spec)
    # responding set = shortest decodable prefix of the arrival order
    order = np.argsort(times, axis=-1, kind="stable")
    if spec.scheme == "mds":
        stop = np.full(replications, spec.k)
    elif spec.scheme == "uncoded":
        stop = np.full(replications, spec.n)
    else:
        pos = np.argsort(order, axis=-1)
        stop = pos.reshape(replications, spec.k, spec.replicas).min(axis=-1).max(axis=-1) + 1
    responding = [tuple(int(i) for i in o[:s]) for o, s in zip(order, stop)]
    return RuntimeDistribution(done, responding)


# --------------------------------------------------------------------------
# broadcast cost model


@dataclass(frozen=True)
class BroadcastModel:
    """Broadcast gain ``gamma(n)``: cost of ``n`` unicasts over one broadcast.

    ``full``: ``gamma = n``; ``tree``: ``n / log2(n + 1)``; ``none``: 1;
    ``custom``: looked up in ``table`` (keyed by n).
    """

    kind: str = "full"
    table: dict | None = None

    def __post_init__(self):
        if self.kind not in ("full", "tree", "none", "custom"):
            raise InvalidParameter(f"unknown broadcast model {self.kind!r}")
        if self.kind == "custom" and not self.table:
            raise InvalidParameter("custom broadcast model needs a table")

    def gamma(self, n: int) -> float:
        if n < 1:
            raise InvalidParameter("n must be positive")
        if self.kind == "full":
            g = float(n)
        elif self.kind == "tree":
            g = n / math.log2(n + 1)
        elif self.kind == "none":
            g = 1.0
        else:
            g = float(self.table[n])
        if not 1.0 - 1e-12 <= g <= n + 1e-12:
            raise InvalidParameter(f"gamma({n}) = {g} is outside [1, n]")
        return max(g, 1.0)


def comm_cost(unicast_messages: Sequence[float], broadcast_messages: Sequence[float], bcast: BroadcastModel, n: int) -> float:
    """Cost in unicast units: ``sum(unicasts) + sum(broadcasts) * n / gamma(n)``."""
    return math.fsum(unicast_messages) + math.fsum(broadcast_messages) * n / bcast.gamma(n)
