"""Client SDK: connect to a server, upload row-indexed matrices, hold
handles to server-resident matrices, invoke routines, and fetch results.

The driver channel is strictly request-reply; row traffic fans out across
one socket per worker. Rows stream straight from the local matrix to the
sockets in batches, so the client never buffers more than one batch per
worker beyond the source data (the server necessarily holds the second copy
of everything uploaded).
"""

from __future__ import annotations

import socket
import threading
from dataclasses import dataclass

import numpy as np

from . import wire

DEFAULT_BATCH_ROWS = 128


class ClientError(Exception):
    pass


class ServerError(ClientError):
    """An ERROR frame from the server."""

    def __init__(self, code, message):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message


class InvalidHandleError(ClientError):
    pass


class SessionClosedError(ClientError):
    pass


class LocalMatrix:
    """Row-indexed dense matrix; rows may arrive in any order."""

    def __init__(self, rows, cols):
        if rows < 0 or cols < 0:
            raise ValueError("dimensions must be nonnegative")
        self.rows = rows
        self.cols = cols
        self._data = {}

    @classmethod
    def from_dense(cls, array):
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 2:
            raise ValueError("expected a 2-D array")
        m = cls(array.shape[0], array.shape[1])
        for i in range(array.shape[0]):
            m._data[i] = array[i]
        return m

    def set_row(self, index, values):
        if not 0 <= index < self.rows:
            raise ValueError(f"row {index} outside [0, {self.rows})")
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.cols,):
            raise ValueError(f"row width {values.shape} != ({self.cols},)")
        self._data[index] = values

    def row(self, index):
        return self._data[index]

    def items(self):
        return self._data.items()

    def __len__(self):
        return len(self._data)

    @property
    def complete(self):
        return len(self._data) == self.rows

    def to_dense(self):
        if not self.complete:
            raise ValueError(f"{self.rows - len(self._data)} rows missing")
        out = np.empty((self.rows, self.cols))
        for index, row in self._data.items():
            out[index] = row
        return out


@dataclass
class ClientHandle:
    """Proxy for a server-resident matrix; valid until released or the
    session closes."""

    matrix_id: int
    rows: int
    cols: int
    ranges: tuple  # (worker_id, row_start, row_end_excl)
    _session: object
    valid: bool = True

    def fetch(self):
        return self._session.fetch_matrix(self)

    def release(self):
        self._session.release(self)


def connect(address, workers, *, batch_rows=DEFAULT_BATCH_ROWS, timeout=None):
    """Open a session against ``address`` ("host:port" or (host, port)),
    requesting ``workers`` workers."""
    if isinstance(address, str):
        host, port = address.rsplit(":", 1)
        address = (host, int(port))
    return Session(address, workers, batch_rows=batch_rows, timeout=timeout)


class Session:
    def __init__(self, address, workers, *, batch_rows=DEFAULT_BATCH_ROWS, timeout=None):
        if batch_rows < 1:
            raise ValueError("batch_rows must be >= 1")
        self.batch_rows = batch_rows
        self.timeout = timeout
        self._handles = {}
        self._lock = threading.Lock()
        self._closed = False

        self._driver = socket.create_connection(address, timeout=timeout)
        self._driver.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._driver_buf = wire.FrameBuffer()
        self.session_id = 0
        ack = self._request(wire.Handshake(requested_workers=workers))
        if not isinstance(ack, wire.HandshakeAck):
            raise ClientError(f"unexpected handshake reply {type(ack).__name__}")
        self.session_id = ack.session_id
        self.workers = ack.workers

        self._worker_socks = {}
        self._worker_bufs = {}
        self._worker_locks = {}
        try:
            for worker_id, addr in ack.workers:
                host, port = addr.rsplit(":", 1)
                sock = socket.create_connection((host, int(port)), timeout=timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._worker_socks[worker_id] = sock
                self._worker_bufs[worker_id] = wire.FrameBuffer()
                self._worker_locks[worker_id] = threading.Lock()
        except OSError:
            self.close()
            raise

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ---- plumbing --------------------------------------------------------

    def _check_open(self):
        if self._closed:
            raise SessionClosedError("session is closed")

    @staticmethod
    def _recv_reply(sock, buf):
        while True:
            data = sock.recv(1 << 16)
            if not data:
                raise ClientError("connection closed while awaiting a reply")
            got = buf.feed(data)
            if got:
                if len(got) != 1:
                    raise ClientError("unsolicited extra frame on request-reply channel")
                msg, _ = got[0]
                if isinstance(msg, wire.ErrorMessage):
                    raise ServerError(msg.code, msg.message)
                return msg

    def _request(self, msg):
        self._check_open()
        wire.send_frame(self._driver, msg, self.session_id)
        try:
            return self._recv_reply(self._driver, self._driver_buf)
        except OSError as exc:
            raise ClientError(f"driver connection lost: {exc}") from exc

    def _worker_request(self, worker_id, msg):
        sock = self._worker_socks[worker_id]
        with self._worker_locks[worker_id]:
            wire.send_frame(sock, msg, self.session_id)
            return self._recv_reply(sock, self._worker_bufs[worker_id])

    def _adopt_handle(self, info):
        handle = ClientHandle(
            info.matrix_id, info.rows, info.cols, info.ranges, _session=self
        )
        with self._lock:
            self._handles[info.matrix_id] = handle
        return handle

    def _check_handle(self, handle):
        self._check_open()
        if not isinstance(handle, ClientHandle) or handle._session is not self:
            raise InvalidHandleError("handle belongs to a different session")
        if not handle.valid:
            raise InvalidHandleError(f"matrix {handle.matrix_id} handle is no longer valid")

    # ---- matrix transfer ---------------------------------------------------

    def send_matrix(self, matrix):
        """Upload a LocalMatrix (or dense array) and return its handle."""
        self._check_open()
        if isinstance(matrix, np.ndarray):
            matrix = LocalMatrix.from_dense(matrix)
        if matrix.rows < 1 or matrix.cols < 1:
            raise ValueError(f"cannot send an empty {matrix.rows} x {matrix.cols} matrix")
        if not matrix.complete:
            raise ValueError(f"{matrix.rows - len(matrix)} rows missing from local matrix")

        info = self._request(wire.CreateMatrix(matrix.rows, matrix.cols))
        if not isinstance(info, wire.MatrixInfo):
            raise ClientError(f"unexpected CREATE_MATRIX reply {type(info).__name__}")

        # block-row owner arithmetic mirrors the layout in MATRIX_INFO
        block = -(-matrix.rows // len(info.ranges))
        per_worker = {}
        for index, row in matrix.items():
            per_worker.setdefault(info.ranges[index // block][0], []).append((index, row))

        errors = []

        def pump(worker_id, rows):
            try:
                for lo in range(0, len(rows), self.batch_rows):
                    chunk = rows[lo : lo + self.batch_rows]
                    indices = np.fromiter(
                        (i for i, _ in chunk), dtype=np.uint64, count=len(chunk)
                    )
                    values = np.stack([r for _, r in chunk])
                    ack = self._worker_request(
                        worker_id, wire.SendRows(info.matrix_id, indices, values)
                    )
                    if not isinstance(ack, wire.RowsAck):
                        raise ClientError(f"unexpected SEND_ROWS reply {type(ack).__name__}")
            except Exception as exc:  # noqa: BLE001 - collected below
                errors.append(exc)

        threads = [
            threading.Thread(target=pump, args=(wid, rows))
            for wid, rows in per_worker.items()
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            try:
                self._request(wire.ReleaseMatrix(info.matrix_id))
            except ClientError:
                pass
            raise errors[0]

        ready = self._request(wire.SendComplete(info.matrix_id))
        if not isinstance(ready, wire.MatrixReady):
            raise ClientError(f"unexpected SEND_COMPLETE reply {type(ready).__name__}")
        return self._adopt_handle(info)

    def fetch_matrix(self, handle):
        """Download a ready matrix, bit-exact, reassembled by row index."""
        self._check_handle(handle)
        pieces = []
        errors = []

        def pull(worker_id, start, end):
            try:
                for lo in range(start, end, self.batch_rows):
                    count = min(self.batch_rows, end - lo)
                    data = self._worker_request(
                        worker_id, wire.FetchRows(handle.matrix_id, lo, count)
                    )
                    if not isinstance(data, wire.RowsData):
                        raise ClientError(f"unexpected FETCH_ROWS reply {type(data).__name__}")
                    pieces.append(data)
            except Exception as exc:  # noqa: BLE001 - collected below
                errors.append(exc)

        threads = [
            threading.Thread(target=pull, args=(wid, start, end))
            for wid, start, end in handle.ranges
            if end > start
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]

        out = LocalMatrix(handle.rows, handle.cols)
        for piece in pieces:
            for local, index in enumerate(piece.indices):
                out._data[int(index)] = piece.values[local]
        return out

    # ---- tasks -------------------------------------------------------------

    def register_library(self, name, path=""):
        ack = self._request(wire.RegisterLibrary(name, path))
        if not isinstance(ack, wire.LibraryAck):
            raise ClientError(f"unexpected REGISTER_LIBRARY reply {type(ack).__name__}")
        return ack.lib_id

    def run(self, lib_id, routine, inputs, params=None):
        """Run a routine on handle inputs; returns ([output handles], scalars)."""
        for handle in inputs:
            self._check_handle(handle)
        reply = self._request(
            wire.RunTask(
                lib_id, routine, tuple(h.matrix_id for h in inputs), dict(params or {})
            )
        )
        if not isinstance(reply, wire.TaskResult):
            raise ClientError(f"unexpected RUN_TASK reply {type(reply).__name__}")
        return [self._adopt_handle(info) for info in reply.outputs], reply.scalars

    def release(self, handle):
        self._check_handle(handle)
        self._request(wire.ReleaseMatrix(handle.matrix_id))
        handle.valid = False
        with self._lock:
            self._handles.pop(handle.matrix_id, None)

    def close(self):
        """Idempotent: closes the session and invalidates every handle."""
        if self._closed:
            return
        self._closed = True
        with self._lock:
            for handle in self._handles.values():
                handle.valid = False
            self._handles.clear()
        try:
            if self.session_id:
                wire.send_frame(self._driver, wire.CloseSession(), self.session_id)
                self._recv_reply(self._driver, self._driver_buf)
        except (OSError, ClientError):
            pass
        for sock in [self._driver, *getattr(self, "_worker_socks", {}).values()]:
            try:
                sock.close()
            except OSError:
                pass

    @property
    def builtin(self):
        """Typed wrappers for the built-in routine library."""
        if not hasattr(self, "_builtin"):
            self._builtin = BuiltinLibrary(self)
        return self._builtin


@dataclass
class CgReport:
    iterations: np.ndarray  # per right-hand-side column
    residuals: np.ndarray
    converged: np.ndarray
    iterations_total: int
    iter_seconds_mean: float
    iter_seconds_std: float


@dataclass
class SvdResult:
    U: ClientHandle
    S: np.ndarray
    V: ClientHandle
    unreliable: np.ndarray
    basis: int

    def __iter__(self):  # allows U, S, V = session.builtin.svd(...)
        return iter((self.U, self.S, self.V))


class BuiltinLibrary:
    """Stubs that encode the built-in routines' parameter schemas."""

    def __init__(self, session):
        self._session = session
        self.lib_id = session.register_library("builtin")

    def qr(self, a):
        (q, r), _ = self._session.run(self.lib_id, "tsqr", [a])
        return q, r

    def cg(self, x, y, lam=1e-5, tol=1e-12, max_iter=1000):
        (w,), scalars = self._session.run(
            self.lib_id,
            "cg_solve",
            [x, y],
            {"lambda": float(lam), "tol": float(tol), "max_iter": int(max_iter)},
        )
        c = scalars["columns"]
        report = CgReport(
            iterations=np.array([scalars[f"iterations.{j}"] for j in range(c)]),
            residuals=np.array([scalars[f"residual.{j}"] for j in range(c)]),
            converged=np.array([scalars[f"converged.{j}"] for j in range(c)]),
            iterations_total=scalars["iterations_total"],
            iter_seconds_mean=scalars["iter_seconds_mean"],
            iter_seconds_std=scalars["iter_seconds_std"],
        )
        return w, report

    def svd(self, a, k, tol=1e-10, max_subspace=0, seed=0):
        (u, v), scalars = self._session.run(
            self.lib_id,
            "truncated_svd",
            [a],
            {
                "k": int(k),
                "tol": float(tol),
                "max_subspace": int(max_subspace),
                "seed": int(seed),
            },
        )
        kk = scalars["k"]
        return SvdResult(
            U=u,
            S=np.array([scalars[f"sigma.{j}"] for j in range(kk)]),
            V=v,
            unreliable=np.array([scalars[f"unreliable.{j}"] for j in range(kk)]),
            basis=scalars["basis"],
        )

    def random_features(self, x, num_features, sigma=10.0, seed=0):
        (z,), _ = self._session.run(
            self.lib_id,
            "random_features",
            [x],
            {"num_features": int(num_features), "sigma": float(sigma), "seed": int(seed)},
        )
        return z

    def load_file(self, path):
        (m,), _ = self._session.run(self.lib_id, "load_file", [], {"path": str(path)})
        return m

    def replicate_columns(self, a, times):
        (m,), _ = self._session.run(
            self.lib_id, "replicate_columns", [a], {"times": int(times)}
        )
        return m
