"""Real-valued erasure codes over row blocks of a matrix.

Three schemes are supported:

* ``uncoded``: ``n`` disjoint row blocks, every block is needed.
* ``repetition``: ``k`` row blocks, each replicated ``n/k`` times on
  consecutive workers.
* ``mds``: ``k`` row blocks expanded to ``n`` coded blocks with a systematic
  generator ``[I; V]``; any ``k`` coded blocks recover the source.

A coded block ``i`` is ``sum_j G[i, j] * B_j``. Because encoding is linear,
``(G B) x = G (B x)``, so workers can multiply their coded block by an input
vector and the master decodes the products directly.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import IllConditionedCode, InsufficientResults, InvalidParameter

SCHEMES = ("uncoded", "repetition", "mds")

# Decoding subsystems above this 2-norm condition number are rejected.
MAX_CONDITION = 1e12
# Practical limit on k; the generator gets ill-conditioned long before this.
K_WARN = 64
_COND_SAMPLES = 200


def as_matrix(A) -> np.ndarray:
    """Validate and return ``A`` as a finite 2-D float64 array."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise InvalidParameter(f"expected a 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidParameter("matrix contains non-finite entries")
    return A


@dataclass(frozen=True)
class RowBlockSet:
    """Equal-height row blocks stacked in a ``(count, block_rows, cols)`` array.

    ``padding_rows`` zero rows were appended to the source before splitting;
    they sit at the tail of the stacked systematic blocks, and there are
    always fewer of them than blocks.
    """

    blocks: np.ndarray
    padding_rows: int = 0

    def __post_init__(self):
        if self.blocks.ndim != 3:
            raise InvalidParameter("blocks must be a 3-D array")
        if not 0 <= self.padding_rows < max(self.blocks.shape[0], 1):
            raise InvalidParameter("padding must be smaller than the block count")

    @property
    def count(self) -> int:
        return self.blocks.shape[0]

    @property
    def block_rows(self) -> int:
        return self.blocks.shape[1]

    @property
    def cols(self) -> int:
        return self.blocks.shape[2]

    def __len__(self):
        return self.count

    def __getitem__(self, i) -> np.ndarray:
        return self.blocks[i]

    def concat(self) -> np.ndarray:
        """Vertical concatenation with the padding stripped."""
        full = self.blocks.reshape(-1, self.cols)
        return full[: full.shape[0] - self.padding_rows]


def partition_rows(A, k: int) -> RowBlockSet:
    """Split ``A`` into ``k`` blocks of ``ceil(q/k)`` rows, zero padding the tail."""
    A = as_matrix(A)
    if k < 1:
        raise InvalidParameter("k must be at least 1")
    q, r = A.shape
    b = -(-q // k)
    pad = b * k - q
    if pad:
        A = np.vstack([A, np.zeros((pad, r))])
    return RowBlockSet(A.reshape(k, b, r).copy(), padding_rows=pad)


# --------------------------------------------------------------------------
# decodable families


@dataclass(frozen=True)
class DecodableFamily:
    """Minimal decodable index sets of a scheme, as a membership predicate."""

    scheme: str
    n: int
    k: int

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidParameter(f"unknown scheme {self.scheme!r}")
        if not 1 <= self.k <= self.n:
            raise InvalidParameter("need 1 <= k <= n")
        if self.scheme == "uncoded" and self.k != self.n:
            raise InvalidParameter("uncoded scheme has k = n")
        if self.scheme == "repetition" and self.n % self.k:
            raise InvalidParameter("repetition needs k dividing n")

    @property
    def replicas(self) -> int:
        return self.n // self.k if self.scheme == "repetition" else 1

    def group(self, i: int) -> int:
        """Source block served by worker ``i`` (repetition and uncoded)."""
        return i // self.replicas

    def __contains__(self, indices) -> bool:
        idx = set(indices)
        if self.scheme == "mds":
            return len(idx) >= self.k
        if self.scheme == "repetition":
            return len({i // self.replicas for i in idx}) == self.k
        return len(idx) == self.n

    def minimal_sets(self) -> Iterator[frozenset]:
        """Enumerate every minimal decodable set. Exponential; small n only."""
        if self.scheme == "mds":
            for c in itertools.combinations(range(self.n), self.k):
                yield frozenset(c)
        elif self.scheme == "repetition":
            r = self.replicas
            groups = [range(g * r, (g + 1) * r) for g in range(self.k)]
            for c in itertools.product(*groups):
                yield frozenset(c)
        else:
            yield frozenset(range(self.n))


def is_decodable(indices: Iterable[int], family: DecodableFamily) -> bool:
    return set(indices) in family


# --------------------------------------------------------------------------
# code specs


def vandermonde_parity(n: int, k: int) -> np.ndarray:
    """``(n-k) x k`` parity block with rows ``(x^0, ..., x^(k-1))``.

    Evaluation points are ``x_i = i / (n-k)`` for ``i = 1..n-k``. Distinct
    positive points with increasing exponents make every square submatrix
    totally positive, hence nonsingular, so ``[I; V]`` is MDS over the reals.
    The last point is 1, so a single parity row is the plain sum.
    """
    m = n - k
    if m == 0:
        return np.zeros((0, k))
    pts = np.arange(1, m + 1, dtype=np.float64) / m
    return pts[:, None] ** np.arange(k)[None, :]


def _worst_condition(G: np.ndarray, k: int, rng: np.random.Generator) -> float:
    n = G.shape[0]
    m = n - k
    if m == 0:
        return 1.0
    subsets = []
    # all parity rows, dropping the leading or trailing systematic rows
    keep = k - min(m, k)
    subsets.append(list(range(keep)) + list(range(k, k + min(m, k))))
    subsets.append(list(range(k - keep, k)) + list(range(k, k + min(m, k))))
    if math.comb(n, k) <= _COND_SAMPLES:
        subsets.extend(itertools.combinations(range(n), k))
    else:
        for _ in range(_COND_SAMPLES):
            subsets.append(np.sort(rng.choice(n, k, replace=False)))
    worst = 1.0
    for s in subsets:
        c = np.linalg.cond(G[list(s)])
        if not np.isfinite(c):
            return math.inf
        worst = max(worst, c)
    return worst


@dataclass(frozen=True)
class MdsCodeSpec:
    """Systematic ``(n, k)`` MDS code over the reals."""

    n: int
    k: int
    generator: np.ndarray = field(repr=False, compare=False)
    condition: float = field(default=1.0, compare=False)

    @classmethod
    def vandermonde(cls, n: int, k: int, max_condition: float = MAX_CONDITION) -> "MdsCodeSpec":
        if not 1 <= k <= n:
            raise InvalidParameter(f"need 1 <= k <= n, got n={n}, k={k}")
        if k > K_WARN:
            warnings.warn(f"k={k} exceeds {K_WARN}; decoding will be badly conditioned", RuntimeWarning)
        G = np.vstack([np.eye(k), vandermonde_parity(n, k)])
        return cls.from_generator(G, max_condition=max_condition)

    @classmethod
    def from_generator(cls, G, max_condition: float = MAX_CONDITION) -> "MdsCodeSpec":
        G = np.asarray(G, dtype=np.float64)
        n, k = G.shape
        if not 1 <= k <= n:
            raise InvalidParameter("generator must be n x k with n >= k")
        if not np.array_equal(G[:k], np.eye(k)):
            raise InvalidParameter("generator is not systematic (top k x k block must be identity)")
        cond = _worst_condition(G, k, np.random.default_rng(0))
        if cond > max_condition:
            raise IllConditionedCode(
                f"({n},{k}) generator has a decoding subsystem with condition {cond:.3g} > {max_condition:.3g}"
            )
        G.setflags(write=False)
        return cls(n, k, G, cond)

    @property
    def family(self) -> DecodableFamily:
        return DecodableFamily("mds", self.n, self.k)

    def encode(self, blocks: RowBlockSet) -> RowBlockSet:
        return mds_encode(blocks, self)

    def decode(self, indices, partials, padding_rows: int = 0) -> np.ndarray:
        return mds_decode(indices, partials, self, padding_rows)


@dataclass(frozen=True)
class RepetitionCodeSpec:
    """``n/k``-fold repetition: worker ``i`` holds source block ``i // (n/k)``."""

    n: int
    k: int

    def __post_init__(self):
        if not 1 <= self.k <= self.n or self.n % self.k:
            raise InvalidParameter(f"repetition needs k | n, got n={self.n}, k={self.k}")

    @property
    def replicas(self) -> int:
        return self.n // self.k

    @property
    def family(self) -> DecodableFamily:
        return DecodableFamily("repetition", self.n, self.k)

    def encode(self, blocks: RowBlockSet) -> RowBlockSet:
        return repetition_encode(blocks, self)

    def decode(self, indices, partials, padding_rows: int = 0) -> np.ndarray:
        return repetition_decode(indices, partials, self, padding_rows)


@dataclass(frozen=True)
class UncodedSpec:
    """Plain row partition into ``n`` blocks; ``k = n``."""

    n: int

    @property
    def k(self) -> int:
        return self.n

    @property
    def family(self) -> DecodableFamily:
        return DecodableFamily("uncoded", self.n, self.n)

    def encode(self, blocks: RowBlockSet) -> RowBlockSet:
        if blocks.count != self.n:
            raise InvalidParameter(f"expected {self.n} blocks, got {blocks.count}")
        return blocks

    def decode(self, indices, partials, padding_rows: int = 0) -> np.ndarray:
        indices = list(indices)
        if sorted(indices) != list(range(self.n)):
            raise InsufficientResults("uncoded decoding needs every block")
        order = np.argsort(indices)
        return _concat([partials[i] for i in order], padding_rows)


Code = MdsCodeSpec | RepetitionCodeSpec | UncodedSpec


def make_code(scheme: str, n: int, k: int | None = None) -> Code:
    if scheme == "mds":
        return MdsCodeSpec.vandermonde(n, n if k is None else k)
    if scheme == "repetition":
        return RepetitionCodeSpec(n, n if k is None else k)
    if scheme == "uncoded":
        if k not in (None, n):
            raise InvalidParameter("uncoded scheme has k = n")
        return UncodedSpec(n)
    raise InvalidParameter(f"unknown scheme {scheme!r}")


def parse_code(text: str) -> Code:
    """Parse ``"mds:n=5,k=3"``, ``"repetition:n=4,k=2"`` or ``"uncoded:n=4"``."""
    scheme, _, rest = text.partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, sep, val = item.partition("=")
        if not sep or key.strip() not in ("n", "k"):
            raise InvalidParameter(f"bad code parameter {item!r} in {text!r}")
        try:
            params[key.strip()] = int(val)
        except ValueError:
            raise InvalidParameter(f"bad integer in {item!r}") from None
    if "n" not in params:
        raise InvalidParameter(f"code {text!r} is missing n")
    return make_code(scheme.strip(), params["n"], params.get("k"))


def format_code(code: Code) -> str:
    scheme = code.family.scheme
    if scheme == "uncoded":
        return f"uncoded:n={code.n}"
    return f"{scheme}:n={code.n},k={code.k}"


# --------------------------------------------------------------------------
# encode / decode


def mds_encode(blocks: RowBlockSet, spec: MdsCodeSpec) -> RowBlockSet:
    if blocks.count != spec.k:
        raise InvalidParameter(f"expected {spec.k} source blocks, got {blocks.count}")
    coded = np.empty((spec.n,) + blocks.blocks.shape[1:])
    coded[: spec.k] = blocks.blocks
    if spec.n > spec.k:
        coded[spec.k :] = np.tensordot(spec.generator[spec.k :], blocks.blocks, axes=(1, 0))
    return RowBlockSet(coded, blocks.padding_rows)


def repetition_encode(blocks: RowBlockSet, spec: RepetitionCodeSpec) -> RowBlockSet:
    if spec.n % spec.k:
        raise InvalidParameter("repetition needs k dividing n")
    if blocks.count != spec.k:
        raise InvalidParameter(f"expected {spec.k} source blocks, got {blocks.count}")
    return RowBlockSet(np.repeat(blocks.blocks, spec.replicas, axis=0), blocks.padding_rows)


def _stack(partials) -> tuple[np.ndarray, bool]:
    arrs = [np.asarray(p, dtype=np.float64) for p in partials]
    vector = arrs[0].ndim == 1
    if any(a.shape != arrs[0].shape for a in arrs):
        raise InvalidParameter("partial results have mismatched shapes")
    return np.stack([a.reshape(a.shape[0], -1) for a in arrs]), vector


def _concat(parts, padding_rows: int) -> np.ndarray:
    P, vector = _stack(parts)
    out = P.reshape(-1, P.shape[2])
    out = out[: out.shape[0] - padding_rows]
    return out[:, 0] if vector else out


def mds_decode(indices: Sequence[int], partials, spec: MdsCodeSpec, padding_rows: int = 0) -> np.ndarray:
    """Recover the stacked source-block results from any ``k`` coded results.

    ``partials[j]`` is the result computed from coded block ``indices[j]``;
    results may be vectors (one value per block row) or matrices.
    """
    indices = list(indices)
    if len(indices) != spec.k or len(partials) != spec.k:
        raise InsufficientResults(f"need exactly {spec.k} results, got {len(indices)}")
    if len(set(indices)) != spec.k or any(not 0 <= i < spec.n for i in indices):
        raise InvalidParameter(f"indices must be distinct and in [0, {spec.n})")
    P, vector = _stack(partials)
    order = np.argsort(indices)
    idx = [indices[j] for j in order]
    P = P[order]
    if idx[-1] < spec.k:
        X = P
    else:
        sub = spec.generator[idx]
        cond = np.linalg.cond(sub)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise IllConditionedCode(f"decoding subsystem {idx} has condition {cond:.3g}")
        kk, b, c = P.shape
        X = np.linalg.solve(sub, P.reshape(kk, b * c)).reshape(kk, b, c)
    out = X.reshape(-1, X.shape[2])
    out = out[: out.shape[0] - padding_rows]
    return out[:, 0] if vector else out


def repetition_decode(indices: Sequence[int], partials, spec: RepetitionCodeSpec, padding_rows: int = 0) -> np.ndarray:
    """Pick the first received replica of each group and concatenate."""
    chosen: dict[int, int] = {}
    for j, i in enumerate(indices):
        chosen.setdefault(i // spec.replicas, j)
    if len(chosen) != spec.k:
        missing = sorted(set(range(spec.k)) - set(chosen))
        raise InsufficientResults(f"no replica received for groups {missing}")
    return _concat([partials[chosen[g]] for g in range(spec.k)], padding_rows)


def encode_matrix(A, code: Code) -> RowBlockSet:
    """Row-partition ``A`` into ``code.k`` blocks and encode them to ``code.n``."""
    return code.encode(partition_rows(A, code.k))
