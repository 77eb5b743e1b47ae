"""Master and worker processes talking length-prefixed frames over TCP.

Frame layout (all integers little-endian)::

    0xC0 0xDE | version u8 = 1 | msg_type u8 | payload_len u32 | payload

Message types:

    0x01 INPUT_VECTOR    u32 iteration, f64[] vector (multiply by the stored block)
    0x02 RESULT_BLOCK    u32 worker_id, u32 iteration, f64[] product
    0x03 SHUTDOWN        empty
    0x04 ERROR           utf-8 message; the sender closes the connection after it
    0x05 INPUT_VECTOR_T  as 0x01, but multiply by the second (transposed-code) block

The master connects to every worker, sends the input to all of them and
decodes from the first decodable set of replies. Late replies are read and
dropped; iteration ids keep them from leaking into the next job.
"""

from __future__ import annotations

import json
import os
import queue
import socket
import struct
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cluster_sim import JobTrace
from .codes import Code, as_matrix, encode_matrix, format_code, parse_code
from .coded_compute import CodedMatmulPlan, decode_from
from .errors import InvalidParameter, JobTimeout, ProtocolError

MAGIC = b"\xc0\xde"
VERSION = 1
INPUT_VECTOR, RESULT_BLOCK, SHUTDOWN, ERROR, INPUT_VECTOR_T = 1, 2, 3, 4, 5
MSG_TYPES = {INPUT_VECTOR, RESULT_BLOCK, SHUTDOWN, ERROR, INPUT_VECTOR_T}
HEADER = struct.Struct("<2sBBI")
MAX_PAYLOAD = 1 << 30
STRAGGLE_ENV = "STRAGGLE_MS"


# --------------------------------------------------------------------------
# frames


@dataclass(frozen=True)
class WireFrame:
    msg_type: int
    payload: bytes = b""

    def encode(self) -> bytes:
        if self.msg_type not in MSG_TYPES:
            raise ProtocolError(f"unknown msg_type 0x{self.msg_type:02x}")
        if len(self.payload) > MAX_PAYLOAD:
            raise ProtocolError("payload too large")
        return HEADER.pack(MAGIC, VERSION, self.msg_type, len(self.payload)) + self.payload

    @classmethod
    def parse_header(cls, head: bytes) -> tuple[int, int]:
        if len(head) != HEADER.size:
            raise ProtocolError("truncated header")
        magic, version, msg_type, length = HEADER.unpack(head)
        if magic != MAGIC:
            raise ProtocolError(f"bad magic {magic.hex()}")
        if version != VERSION:
            raise ProtocolError(f"unsupported version {version}")
        if msg_type not in MSG_TYPES:
            raise ProtocolError(f"unknown msg_type 0x{msg_type:02x}")
        if length > MAX_PAYLOAD:
            raise ProtocolError("payload too large")
        return msg_type, length

    @classmethod
    def decode(cls, data: bytes) -> "WireFrame":
        msg_type, length = cls.parse_header(data[: HEADER.size])
        payload = data[HEADER.size :]
        if len(payload) != length:
            raise ProtocolError(f"payload_len {length} but {len(payload)} bytes follow")
        return cls(msg_type, bytes(payload))


def _recv_exact(sock: socket.socket, size: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(size - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError("connection closed mid-frame")
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> WireFrame | None:
    """Next frame from ``sock``, or None on a clean end of stream."""
    head = _recv_exact(sock, HEADER.size)
    if head is None:
        return None
    msg_type, length = WireFrame.parse_header(head)
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        raise ProtocolError("connection closed mid-frame")
    return WireFrame(msg_type, payload)


def send_frame(sock: socket.socket, frame: WireFrame) -> None:
    sock.sendall(frame.encode())


def _f64(vec) -> bytes:
    return np.ascontiguousarray(vec, dtype="<f8").tobytes()


def _unf64(buf: bytes) -> np.ndarray:
    if len(buf) % 8:
        raise ProtocolError("float array length is not a multiple of 8")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64)


def input_frame(iteration: int, vec, transposed: bool = False) -> WireFrame:
    return WireFrame(INPUT_VECTOR_T if transposed else INPUT_VECTOR, struct.pack("<I", iteration) + _f64(vec))


def parse_input(frame: WireFrame) -> tuple[int, np.ndarray]:
    if len(frame.payload) < 4:
        raise ProtocolError("input payload too short")
    (it,) = struct.unpack_from("<I", frame.payload)
    return it, _unf64(frame.payload[4:])


def result_frame(worker_id: int, iteration: int, vec) -> WireFrame:
    return WireFrame(RESULT_BLOCK, struct.pack("<II", worker_id, iteration) + _f64(vec))


def parse_result(frame: WireFrame) -> tuple[int, int, np.ndarray]:
    if frame.msg_type != RESULT_BLOCK or len(frame.payload) < 8:
        raise ProtocolError("not a result frame")
    wid, it = struct.unpack_from("<II", frame.payload)
    return wid, it, _unf64(frame.payload[8:])


def error_frame(message: str) -> WireFrame:
    return WireFrame(ERROR, message.encode("utf-8"))


# --------------------------------------------------------------------------
# assignments


@dataclass
class WorkerAssignment:
    """What one worker stores: its coded block(s) and the code they came from."""

    worker_id: int
    code: str
    block: np.ndarray
    block_t: np.ndarray | None = None
    code_t: str | None = None

    def __post_init__(self):
        n = parse_code(self.code).n
        if not 0 <= self.worker_id < n:
            raise InvalidParameter(f"worker_id {self.worker_id} out of range for {self.code}")
        self.block = as_matrix(self.block)
        if self.block_t is not None:
            self.block_t = as_matrix(self.block_t)

    def to_json(self) -> dict:
        d = {"worker_id": self.worker_id, "code": self.code, "block": self.block.tolist()}
        if self.block_t is not None:
            d["code_t"] = self.code_t
            d["block_t"] = self.block_t.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "WorkerAssignment":
        extra = set(d) - {"worker_id", "code", "block", "block_t", "code_t"}
        if extra:
            raise InvalidParameter(f"unknown assignment keys {sorted(extra)}")
        return cls(int(d["worker_id"]), d["code"], np.array(d["block"], dtype=np.float64),
                   None if d.get("block_t") is None else np.array(d["block_t"], dtype=np.float64), d.get("code_t"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "WorkerAssignment":
        return cls.from_json(json.loads(Path(path).read_text()))


def make_assignments(A, code: Code) -> tuple[list[WorkerAssignment], int]:
    """Encode ``A`` and return one assignment per worker plus the padding row count."""
    blocks = encode_matrix(A, code)
    name = format_code(code)
    return [WorkerAssignment(i, name, blocks[i]) for i in range(code.n)], blocks.padding_rows


def make_gd_assignments(plan: CodedMatmulPlan) -> list[WorkerAssignment]:
    rc, cc = format_code(plan.row_code), format_code(plan.col_code)
    return [WorkerAssignment(i, rc, plan.row_blocks[i], plan.col_blocks[i], cc) for i in range(plan.n)]


# --------------------------------------------------------------------------
# worker


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise InvalidParameter(f"endpoint must be HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _straggle_delay() -> float:
    raw = os.environ.get(STRAGGLE_ENV, "").strip()
    if not raw:
        return 0.0
    try:
        return max(0.0, float(raw) / 1000.0)
    except ValueError:
        raise InvalidParameter(f"{STRAGGLE_ENV} must be a number of milliseconds") from None


def handle_connection(conn: socket.socket, assignment: WorkerAssignment, delay: float = 0.0) -> bool:
    """Serve one master connection. Returns True when SHUTDOWN was received."""
    while True:
        try:
            frame = read_frame(conn)
        except ProtocolError as e:
            _try_send(conn, error_frame(str(e)))
            return False
        if frame is None:
            return False
        if frame.msg_type == SHUTDOWN:
            return True
        if frame.msg_type not in (INPUT_VECTOR, INPUT_VECTOR_T):
            _try_send(conn, error_frame(f"unexpected msg_type 0x{frame.msg_type:02x}"))
            return False
        it, x = parse_input(frame)
        block = assignment.block if frame.msg_type == INPUT_VECTOR else assignment.block_t
        if block is None or x.shape[0] != block.shape[1]:
            have = "no transposed block" if block is None else f"block has {block.shape[1]} columns"
            _try_send(conn, error_frame(f"shape mismatch: input has {x.shape[0]} entries, {have}"))
            return False
        if delay:
            time.sleep(delay)
        send_frame(conn, result_frame(assignment.worker_id, it, block @ x))


def _try_send(conn, frame):
    try:
        send_frame(conn, frame)
    except OSError:
        pass


def worker_serve(assignment: WorkerAssignment, endpoint: str, ready=None, delay: float | None = None) -> int:
    """Listen on ``endpoint`` and answer masters until SHUTDOWN; returns 0.

    ``ready`` is called with the bound ``host:port`` (useful with port 0).
    The straggler delay defaults to the ``STRAGGLE_MS`` environment variable.
    """
    delay = _straggle_delay() if delay is None else delay
    host, port = parse_endpoint(endpoint)
    with socket.create_server((host, port)) as srv:
        bound = "%s:%d" % srv.getsockname()[:2]
        if ready is not None:
            ready(bound)
        while True:
            conn, _ = srv.accept()
            with conn:
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                try:
                    if handle_connection(conn, assignment, delay):
                        return 0
                except OSError:
                    continue


# --------------------------------------------------------------------------
# master


class LiveMaster:
    """Connections to ``n`` workers plus the decode loop.

    One reader thread per connection pushes replies onto a queue; the calling
    thread is the only one that touches decode state.
    """

    def __init__(self, endpoints, code: Code, padding_rows: int = 0, *, code_t: Code | None = None,
                 padding_rows_t: int = 0, timeout: float = 30.0, connect_timeout: float = 10.0):
        endpoints = list(endpoints)
        if len(endpoints) != code.n:
            raise InvalidParameter(f"code needs {code.n} workers, got {len(endpoints)} endpoints")
        self.endpoints = endpoints
        self.codes = {False: code, True: code_t}
        self.padding = {False: padding_rows, True: padding_rows_t}
        self.timeout = timeout
        self.n = code.n
        self.failed: set[int] = set()
        self.errors: dict[int, str] = {}
        self.socks: list[socket.socket | None] = [None] * self.n
        self.inbox: queue.Queue = queue.Queue()
        self._iteration = 0
        deadline = time.monotonic() + connect_timeout
        for i, ep in enumerate(endpoints):
            self.socks[i] = self._connect(i, ep, deadline)
        for i, s in enumerate(self.socks):
            if s is not None:
                threading.Thread(target=self._reader, args=(i, s), daemon=True).start()

    def _connect(self, i, ep, deadline):
        host, port = parse_endpoint(ep)
        while True:
            try:
                s = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
                s.settimeout(None)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return s
            except OSError as e:
                if time.monotonic() >= deadline:
                    self._fail(i, f"connect failed: {e}")
                    return None
                time.sleep(0.05)

    def _fail(self, i, why):
        self.failed.add(i)
        self.errors.setdefault(i, why)

    def _reader(self, i, sock):
        try:
            while True:
                frame = read_frame(sock)
                if frame is None:
                    self.inbox.put((i, None, "connection closed"))
                    return
                self.inbox.put((i, frame, None))
        except (OSError, ProtocolError) as e:
            self.inbox.put((i, None, str(e)))

    def _drop(self, i, why):
        self._fail(i, why)
        s = self.socks[i]
        self.socks[i] = None
        if s is not None:
            try:
                s.close()
            except OSError:
                pass

    def matvec(self, v, iteration: int | None = None, transposed: bool = False) -> tuple[np.ndarray, JobTrace]:
        """Coded product of the stored blocks with ``v``."""
        code = self.codes[transposed]
        if code is None:
            raise InvalidParameter("no transposed code configured")
        v = np.asarray(v, dtype=np.float64).ravel()
        it = self._iteration if iteration is None else int(iteration)
        self._iteration = it + 1
        t0 = time.monotonic()
        frame = input_frame(it, v, transposed)
        sent = 0
        for i, s in enumerate(self.socks):
            if s is None:
                continue
            try:
                send_frame(s, frame)
                sent += 1
            except OSError as e:
                self._drop(i, f"send failed: {e}")

        results: dict[int, np.ndarray] = {}
        arrivals: list[int] = []
        finish = np.full(self.n, np.nan)
        rows = None
        deadline = t0 + self.timeout
        while arrivals not in code.family:
            alive = set(range(self.n)) - self.failed
            if (set(arrivals) | alive) not in code.family:
                raise JobTimeout(f"no decodable set possible: workers {sorted(self.failed)} failed")
            left = deadline - time.monotonic()
            if left <= 0:
                raise JobTimeout(f"no decodable set within {self.timeout} s (got {sorted(arrivals)})")
            try:
                i, frm, err = self.inbox.get(timeout=left)
            except queue.Empty:
                continue
            if frm is None:
                self._drop(i, err)
                continue
            if frm.msg_type == ERROR:
                self._drop(i, "worker error: " + frm.payload.decode("utf-8", "replace"))
                continue
            try:
                wid, rit, y = parse_result(frm)
            except ProtocolError as e:
                self._drop(i, str(e))
                continue
            if rit != it or i in results:
                continue  # stale reply from an earlier job
            if wid != i or (rows is not None and y.shape[0] != rows):
                self._drop(i, "result does not match this worker's block")
                continue
            rows = y.shape[0]
            results[i] = y
            arrivals.append(i)
            finish[i] = time.monotonic() - t0
        done = time.monotonic() - t0
        out = decode_from(code, arrivals, results, self.padding[transposed])
        decode = time.monotonic() - t0 - done
        trace = JobTrace(np.zeros(self.n), finish, tuple(arrivals), done, decode,
                         unicast_units=sent * v.size, broadcast_units=v.size)
        return out, trace

    def close(self) -> None:
        """Send SHUTDOWN to every live worker and close the connections."""
        for i, s in enumerate(self.socks):
            if s is None:
                continue
            try:
                send_frame(s, WireFrame(SHUTDOWN))
            except OSError:
                pass
            try:
                s.close()
            except OSError:
                pass
            self.socks[i] = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def master_run(x, workers, code: Code, padding_rows: int = 0, timeout: float = 30.0, shutdown: bool = False):
    """One coded matrix-vector job against running workers; returns ``(result, trace)``."""
    m = LiveMaster(workers, code, padding_rows, timeout=timeout)
    try:
        return m.matvec(x)
    finally:
        if shutdown:
            m.close()
        else:
            for s in m.socks:
                if s is not None:
                    s.close()


# --------------------------------------------------------------------------
# local process cluster


class LocalCluster:
    """Spawn one ``serve-worker`` process per assignment on 127.0.0.1.

    ``straggle_ms`` maps worker ids to an injected delay.
    """

    def __init__(self, assignments, straggle_ms: dict | None = None, startup_timeout: float = 30.0):
        self.tmp = tempfile.TemporaryDirectory(prefix="codedml-")
        self.procs: list[subprocess.Popen] = []
        self.endpoints: list[str] = []
        straggle_ms = straggle_ms or {}
        try:
            for a in assignments:
                path = Path(self.tmp.name) / f"worker{a.worker_id}.json"
                a.save(path)
                env = dict(os.environ)
                env.pop(STRAGGLE_ENV, None)
                if a.worker_id in straggle_ms:
                    env[STRAGGLE_ENV] = str(straggle_ms[a.worker_id])
                p = subprocess.Popen(
                    [sys.executable, "-m", "codedml", "serve-worker", "--listen", "127.0.0.1:0", "--assignment", str(path)],
                    stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env,
                )
                self.procs.append(p)
            for p in self.procs:
                self.endpoints.append(self._ready(p, startup_timeout))
        except BaseException:
            self.close()
            raise

    @staticmethod
    def _ready(p, timeout):
        box: list[str] = []
        t = threading.Thread(target=lambda: box.append(p.stdout.readline()), daemon=True)
        t.start()
        t.join(timeout)
        line = box[0].strip() if box else ""
        if not line.startswith("listening on "):
            if not line and p.poll() is not None:
                line = p.stderr.read().strip()
            raise RuntimeError(f"worker failed to start: {line}")
        return line.removeprefix("listening on ")

    def kill(self, worker_id: int) -> None:
        p = self.procs[worker_id]
        p.kill()
        p.wait()

    def close(self) -> None:
        for p in self.procs:
            if p.poll() is None:
                p.kill()
            p.wait()
            for f in (p.stdout, p.stderr):
                if f:
                    f.close()
        self.tmp.cleanup()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
