"""Matrix and latency-sample file formats.

Matrices are stored either as CSV (one row per line) or in a raw little-endian
binary format::

    b"CDM1" | u64 rows | u64 cols | rows*cols float64 (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidParameter

MAGIC = b"CDM1"
_HEADER = struct.Struct("<4sQQ")


def write_binary(path, A) -> None:
    A = np.ascontiguousarray(A, dtype="<f8")
    if A.ndim == 1:
        A = A[:, None]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, A.shape[0], A.shape[1]))
        fh.write(A.tobytes())


def read_binary(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidParameter(f"{path}: truncated header")
    magic, q, r = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise InvalidParameter(f"{path}: bad magic {magic!r}")
    body = data[_HEADER.size :]
    if len(body) != 8 * q * r:
        raise InvalidParameter(f"{path}: expected {q}x{r} floats, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(q, r).astype(np.float64)


def write_csv(path, A) -> None:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    with open(path, "w") as fh:
        for row in A:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise InvalidParameter(f"{path}:{lineno}: not a row of numbers") from None
    if not rows:
        raise InvalidParameter(f"{path}: empty matrix file")
    if len({len(r) for r in rows}) != 1:
        raise InvalidParameter(f"{path}: ragged rows")
    return np.array(rows)


def read_matrix(path) -> np.ndarray:
    """Read either format, sniffing the binary magic."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_binary(path) if head == MAGIC else read_csv(path)


def write_matrix(path, A) -> None:
    if str(path).endswith((".csv", ".txt")):
        write_csv(path, A)
    else:
        write_binary(path, A)


def read_vector(path) -> np.ndarray:
    M = read_matrix(path)
    if 1 not in M.shape:
        raise InvalidParameter(f"{path}: expected a vector, got shape {M.shape}")
    return M.ravel()


def read_latencies(path) -> np.ndarray:
    """One-column CSV of round-trip times in seconds; a text header is skipped."""
    vals = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                vals.append(float(line.split(",")[0]))
            except ValueError:
                if lineno == 1:
                    continue
                raise InvalidParameter(f"{path}:{lineno}: not a number") from None
    return np.array(vals)


FIXTURE_NAME = "latency_fixture.csv"


def fixture_latencies() -> np.ndarray:
    """Bundled synthetic round-trip times: mean 0.11 s, 95th percentile 0.20 s.

    A shifted-exponential quantile grid; only those two statistics are
    grounded in measurements, the shape is an assumption.
    """
    from importlib.resources import as_file, files

    with as_file(files("codedml") / "data" / FIXTURE_NAME) as path:
        return read_latencies(path)
