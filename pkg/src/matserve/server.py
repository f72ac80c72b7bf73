"""The offload server: a driver endpoint accepting client sessions plus one
TCP endpoint per worker for bulk row traffic.

Metadata and task requests travel over the driver socket; distributed rows
travel directly between the client and each worker's socket. Workers are
shared across sessions; isolation comes from matrix ownership. Each
well-formed request gets exactly one reply frame (possibly ERROR).
"""

from __future__ import annotations

import logging
import socket
import threading
import time

from . import routines, wire
from .engine import Engine, EngineError
from .store import (
    FILLING,
    READY,
    RELEASED,
    DuplicateRow,
    HandleRegistry,
    RowOutOfRange,
    ShardIncomplete,
    StoreError,
    WidthMismatch,
    plan_layout,
)

log = logging.getLogger("matserve.server")


class _Session:
    def __init__(self, session_id, worker_count):
        self.session_id = session_id
        self.worker_count = worker_count
        self.matrices = set()
        self.state = "active"


class _Reply(Exception):
    """Control-flow helper: abort a request with an ERROR reply."""

    def __init__(self, code, message):
        super().__init__(message)
        self.error = wire.ErrorMessage(code, message)


class Server:
    """Driver + worker pool in one process.

    ``port=0`` binds an ephemeral driver port (see ``address`` after
    ``start()``); each worker endpoint always binds an ephemeral port on the
    same host.
    """

    def __init__(self, host="127.0.0.1", port=0, workers=4, max_matrix_bytes=None):
        self.host = host
        self._requested_port = port
        self.nworkers = workers
        self.engine = Engine(workers, max_matrix_bytes)
        self.registry = HandleRegistry()
        self._lock = threading.RLock()
        self._sessions = {}
        self._next_session = 1
        self._libraries = {}  # name -> lib_id
        self._lib_names = {}  # lib_id -> name
        self._next_lib = 1
        self._listeners = []
        self._threads = []
        self._conns = set()
        self._running = False
        self.worker_addrs = []
        self._created_at = {}  # matrix_id -> perf_counter at CREATE_MATRIX

    # ---- lifecycle -------------------------------------------------------

    def start(self):
        driver = socket.create_server((self.host, self._requested_port))
        self._listeners.append(driver)
        self.port = driver.getsockname()[1]
        for wid in range(self.nworkers):
            ls = socket.create_server((self.host, 0))
            self._listeners.append(ls)
            self.worker_addrs.append(f"{self.host}:{ls.getsockname()[1]}")
        self._running = True
        self._spawn(self._accept_loop, driver, None)
        for wid in range(self.nworkers):
            self._spawn(self._accept_loop, self._listeners[wid + 1], wid)
        log.info(
            "listening host=%s port=%d workers=%d", self.host, self.port, self.nworkers
        )
        return self

    @property
    def address(self):
        return f"{self.host}:{self.port}"

    def stop(self):
        self._running = False
        for ls in self._listeners:
            try:
                ls.close()
            except OSError:
                pass
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                conn.close()
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=5)
        self.engine.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _spawn(self, fn, *args):
        t = threading.Thread(target=fn, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self, listener, worker_id):
        listener.settimeout(0.25)  # closing a socket does not wake accept()
        while self._running:
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._conns.add(conn)
            if worker_id is None:
                self._spawn(self._serve_driver, conn)
            else:
                self._spawn(self._serve_worker, worker_id, conn)

    # ---- driver channel ----------------------------------------------------

    def _serve_driver(self, conn):
        session = None
        try:
            for msg, sid in wire.read_frames(conn):
                try:
                    if session is None:
                        if not isinstance(msg, wire.Handshake):
                            raise _Reply(
                                wire.ERR_PROTOCOL_VIOLATION,
                                "expected HANDSHAKE on a new driver connection",
                            )
                        session, reply = self._handshake(msg)
                        wire.send_frame(conn, reply, session.session_id)
                        continue
                    if sid != session.session_id:
                        raise _Reply(
                            wire.ERR_PROTOCOL_VIOLATION,
                            f"frame for session {sid} on session "
                            f"{session.session_id}'s connection",
                        )
                    reply = self._dispatch_driver(session, msg)
                    wire.send_frame(conn, reply, session.session_id)
                    if isinstance(msg, wire.CloseSession):
                        break
                except _Reply as stop:
                    wire.send_frame(conn, stop.error, sid)
        except (wire.ProtocolError, OSError):
            pass
        finally:
            if session is not None:
                self._close_session(session)
            self._drop_conn(conn)

    def _handshake(self, msg):
        if msg.protocol_version != wire.PROTOCOL_VERSION:
            raise _Reply(
                wire.ERR_VERSION_MISMATCH,
                f"protocol version {msg.protocol_version} not supported "
                f"(server speaks {wire.PROTOCOL_VERSION})",
            )
        if msg.requested_workers < 1:
            raise _Reply(wire.ERR_PROTOCOL_VIOLATION, "requested_workers must be >= 1")
        if msg.requested_workers > self.nworkers:
            raise _Reply(
                wire.ERR_INSUFFICIENT_WORKERS,
                f"requested {msg.requested_workers} workers, pool has {self.nworkers}",
            )
        with self._lock:
            session = _Session(self._next_session, msg.requested_workers)
            self._next_session += 1
            self._sessions[session.session_id] = session
        workers = tuple(
            (wid, self.worker_addrs[wid]) for wid in range(msg.requested_workers)
        )
        log.info(
            "session_open session=%d workers=%d",
            session.session_id,
            msg.requested_workers,
        )
        return session, wire.HandshakeAck(session.session_id, workers)

    def _dispatch_driver(self, session, msg):
        if isinstance(msg, wire.RegisterLibrary):
            return self._register_library(msg)
        if isinstance(msg, wire.CreateMatrix):
            return self._create_matrix(session, msg)
        if isinstance(msg, wire.SendComplete):
            return self._finalize_matrix(session, msg)
        if isinstance(msg, wire.RunTask):
            return self._run_task(session, msg)
        if isinstance(msg, wire.ReleaseMatrix):
            return self._release_matrix(session, msg)
        if isinstance(msg, wire.CloseSession):
            self._close_session(session)
            return wire.CloseSession()
        raise _Reply(
            wire.ERR_PROTOCOL_VIOLATION,
            f"{type(msg).__name__} is not valid on the driver channel",
        )

    def _register_library(self, msg):
        if msg.name not in routines.LIBRARIES:
            raise _Reply(
                wire.ERR_UNKNOWN_LIBRARY,
                f"library {msg.name!r} is not in this server's registry",
            )
        with self._lock:
            if msg.name not in self._libraries:
                self._libraries[msg.name] = self._next_lib
                self._lib_names[self._next_lib] = msg.name
                self._next_lib += 1
            return wire.LibraryAck(self._libraries[msg.name])

    def _create_matrix(self, session, msg):
        if msg.rows < 1 or msg.cols < 1:
            raise _Reply(
                wire.ERR_PROTOCOL_VIOLATION,
                f"matrix dimensions must be positive, got {msg.rows} x {msg.cols}",
            )
        layout = plan_layout(msg.rows, msg.cols, session.worker_count)
        meta = self.registry.create(msg.rows, msg.cols, layout, session.session_id)
        try:
            self.engine.allocate(meta.matrix_id, layout)
        except EngineError as exc:
            self.registry.set_state(meta.matrix_id, RELEASED)
            raise _Reply(exc.code, str(exc)) from None
        with self._lock:
            session.matrices.add(meta.matrix_id)
            self._created_at[meta.matrix_id] = time.perf_counter()
        return self._matrix_info(meta)

    @staticmethod
    def _matrix_info(meta):
        return wire.MatrixInfo(meta.matrix_id, meta.rows, meta.cols, meta.layout.assignment)

    def _lookup(self, session, matrix_id, want_state=None):
        meta = self.registry.get(matrix_id)
        if meta is None or meta.owner_session != session.session_id:
            raise _Reply(wire.ERR_UNKNOWN_MATRIX, f"unknown matrix {matrix_id}")
        if meta.state == RELEASED:
            raise _Reply(wire.ERR_UNKNOWN_MATRIX, f"matrix {matrix_id} was released")
        if want_state is not None and meta.state != want_state:
            if want_state == READY:
                raise _Reply(
                    wire.ERR_MATRIX_INCOMPLETE, f"matrix {matrix_id} is not ready"
                )
            raise _Reply(
                wire.ERR_PROTOCOL_VIOLATION,
                f"matrix {matrix_id} is {meta.state}, expected {want_state}",
            )
        return meta

    def _finalize_matrix(self, session, msg):
        meta = self._lookup(session, msg.matrix_id)
        if meta.state == READY:  # idempotent
            return wire.MatrixReady(msg.matrix_id)
        missing = self.engine.missing_rows(meta.matrix_id, meta.layout)
        if missing:
            raise _Reply(
                wire.ERR_MATRIX_INCOMPLETE,
                f"{missing} row{'s' if missing != 1 else ''} missing",
            )
        self.registry.set_state(meta.matrix_id, READY)
        started = self._created_at.get(meta.matrix_id)
        log.info(
            "matrix_ready session=%d matrix=%d rows=%d cols=%d bytes=%d transfer_s=%.6f",
            session.session_id,
            meta.matrix_id,
            meta.rows,
            meta.cols,
            meta.nbytes,
            time.perf_counter() - started if started else -1.0,
        )
        return wire.MatrixReady(msg.matrix_id)

    def _run_task(self, session, msg):
        name = self._lib_names.get(msg.lib_id)
        if name is None:
            raise _Reply(wire.ERR_UNKNOWN_LIBRARY, f"no library with id {msg.lib_id}")
        routine = routines.LIBRARIES[name].get(msg.routine)
        if routine is None:
            raise _Reply(
                wire.ERR_UNKNOWN_ROUTINE, f"library {name!r} has no routine {msg.routine!r}"
            )
        metas = [self._lookup(session, mid, want_state=READY) for mid in msg.input_ids]
        try:
            params = routines.validate_request(routine, metas, msg.params)
        except EngineError as exc:
            raise _Reply(exc.code, str(exc)) from None

        layouts = {meta.matrix_id: meta.layout for meta in metas}
        p = session.worker_count

        def task(ctx):
            return routine.fn(ctx, msg.input_ids, params)

        try:
            results, elapsed = self.engine.run_routine(p, task, layouts)
        except EngineError as exc:
            raise _Reply(exc.code, str(exc)) from None

        outputs, scalars = results[0]
        infos = []
        for idx in range(len(outputs)):
            rows, cols = outputs[idx].rows, outputs[idx].cols
            layout = plan_layout(rows, cols, p)
            meta = self.registry.create(rows, cols, layout, session.session_id, state=READY)
            self.engine.adopt(
                meta.matrix_id, layout, [results[r][0][idx].block for r in range(p)]
            )
            with self._lock:
                session.matrices.add(meta.matrix_id)
            infos.append(self._matrix_info(meta))
        log.info(
            "task session=%d lib=%s routine=%s inputs=%s outputs=%s compute_s=%.6f",
            session.session_id,
            name,
            msg.routine,
            ",".join(f"{m.rows}x{m.cols}" for m in metas) or "-",
            ",".join(f"{m.rows}x{m.cols}" for m in infos) or "-",
            elapsed,
        )
        return wire.TaskResult(0, tuple(infos), scalars)

    def _release_matrix(self, session, msg):
        meta = self.registry.get(msg.matrix_id)
        if meta is None or meta.owner_session != session.session_id:
            raise _Reply(wire.ERR_UNKNOWN_MATRIX, f"unknown matrix {msg.matrix_id}")
        self._free(session, meta)
        return wire.ReleaseMatrix(msg.matrix_id)

    def _free(self, session, meta):
        if meta.state == RELEASED:  # double release is a no-op
            return
        self.registry.set_state(meta.matrix_id, RELEASED)
        self.engine.free(meta.matrix_id, meta.layout)
        with self._lock:
            session.matrices.discard(meta.matrix_id)
            self._created_at.pop(meta.matrix_id, None)
        log.info("release session=%d matrix=%d", session.session_id, meta.matrix_id)

    def _close_session(self, session):
        with self._lock:
            if session.state == "closed":
                return
            session.state = "closed"
            owned = list(session.matrices)
            self._sessions.pop(session.session_id, None)
        for mid in owned:
            meta = self.registry.get(mid)
            if meta is not None:
                self._free(session, meta)
        log.info("session_close session=%d released=%d", session.session_id, len(owned))

    # ---- worker channels -----------------------------------------------

    def _serve_worker(self, worker_id, conn):
        try:
            for msg, sid in wire.read_frames(conn):
                try:
                    reply = self._dispatch_worker(worker_id, sid, msg)
                except _Reply as stop:
                    reply = stop.error
                wire.send_frame(conn, reply, sid)
        except (wire.ProtocolError, OSError):
            pass
        finally:
            self._drop_conn(conn)

    def _session_for(self, sid):
        with self._lock:
            session = self._sessions.get(sid)
        if session is None or session.state != "active":
            raise _Reply(wire.ERR_PROTOCOL_VIOLATION, f"no active session {sid}")
        return session

    def _dispatch_worker(self, worker_id, sid, msg):
        session = self._session_for(sid)
        if isinstance(msg, wire.SendRows):
            meta = self._lookup(session, msg.matrix_id)
            if meta.state != FILLING:
                raise _Reply(
                    wire.ERR_PROTOCOL_VIOLATION,
                    f"matrix {msg.matrix_id} already finalized",
                )
            try:
                self.engine.ingest(worker_id, msg.matrix_id, msg.indices, msg.values)
            except KeyError:
                raise _Reply(
                    wire.ERR_UNKNOWN_MATRIX,
                    f"worker {worker_id} holds no shard of matrix {msg.matrix_id}",
                ) from None
            except (RowOutOfRange, WidthMismatch, DuplicateRow) as exc:
                raise _Reply(wire.ERR_PROTOCOL_VIOLATION, str(exc)) from None
            return wire.RowsAck(msg.matrix_id, len(msg.indices))
        if isinstance(msg, wire.FetchRows):
            meta = self._lookup(session, msg.matrix_id, want_state=READY)
            try:
                indices, values = self.engine.extract(
                    worker_id, msg.matrix_id, msg.row_start, msg.row_count
                )
            except KeyError:
                raise _Reply(
                    wire.ERR_UNKNOWN_MATRIX,
                    f"worker {worker_id} holds no shard of matrix {msg.matrix_id}",
                ) from None
            except ShardIncomplete as exc:
                raise _Reply(wire.ERR_MATRIX_INCOMPLETE, str(exc)) from None
            except StoreError as exc:
                raise _Reply(wire.ERR_PROTOCOL_VIOLATION, str(exc)) from None
            return wire.RowsData(msg.matrix_id, indices, values)
        raise _Reply(
            wire.ERR_PROTOCOL_VIOLATION,
            f"{type(msg).__name__} is not valid on a worker channel",
        )

    def _drop_conn(self, conn):
        with self._lock:
            self._conns.discard(conn)
        try:
            conn.close()
        except OSError:
            pass
