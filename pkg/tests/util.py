"""Shared helpers: seeded message sampler for protocol fuzzing, golden frame
(de)serialization, and an in-process pool for driving routines without TCP."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from matserve import routines, wire
from matserve.engine import Engine
from matserve.store import plan_layout


class LocalPool:
    """Drive routines straight against an Engine (no sockets): the fast path
    for numerical tests and p-sweeps."""

    def __init__(self, p, max_matrix_bytes=None):
        self.p = p
        self.engine = Engine(p, max_matrix_bytes)
        self.layouts = {}
        self._next = 1

    def close(self):
        self.engine.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def put(self, array):
        array = np.asarray(array, dtype=np.float64)
        mid = self._next
        self._next += 1
        lay = plan_layout(array.shape[0], array.shape[1], self.p)
        self.engine.adopt(mid, lay, [array[s:e] for _, s, e in lay.assignment])
        self.layouts[mid] = lay
        return mid

    def gather(self, mid):
        lay = self.layouts[mid]
        blocks = [
            self.engine.shard_of(w, mid).data for w, s, e in lay.assignment
        ]
        return np.concatenate(blocks) if blocks else np.zeros((0, lay.cols))

    def run(self, name, input_ids, params=None, lib="builtin"):
        routine = routines.LIBRARIES[lib][name]
        metas = [
            SimpleNamespace(rows=self.layouts[m].rows, cols=self.layouts[m].cols)
            for m in input_ids
        ]
        normalized = routines.validate_request(routine, metas, dict(params or {}))

        def task(ctx):
            return routine.fn(ctx, list(input_ids), normalized)

        results, _ = self.engine.run_routine(self.p, task, dict(self.layouts))
        outputs, scalars = results[0]
        out_ids = []
        for idx in range(len(outputs)):
            rows, cols = outputs[idx].rows, outputs[idx].cols
            mid = self._next
            self._next += 1
            lay = plan_layout(rows, cols, self.p)
            self.engine.adopt(mid, lay, [results[r][0][idx].block for r in range(self.p)])
            self.layouts[mid] = lay
            out_ids.append(mid)
        return out_ids, scalars

    def run_dense(self, name, arrays, params=None):
        ids = [self.put(a) for a in arrays]
        out_ids, scalars = self.run(name, ids, params)
        return [self.gather(m) for m in out_ids], scalars


def run_routine_dense(p, name, arrays, params=None, max_matrix_bytes=None):
    with LocalPool(p, max_matrix_bytes) as pool:
        return pool.run_dense(name, arrays, params)


def random_f64(rng, n):
    """Finite doubles spanning magnitudes, signed zeros, and subnormals."""
    choice = rng.integers(0, 5, size=n)
    out = np.empty(n)
    out[choice == 0] = rng.standard_normal((choice == 0).sum())
    out[choice == 1] = rng.standard_normal((choice == 1).sum()) * 1e300
    out[choice == 2] = rng.standard_normal((choice == 2).sum()) * 5e-324
    out[choice == 3] = -0.0
    out[choice == 4] = 0.0
    return out


def random_layout(rng, max_rows=50, max_workers=6):
    rows = int(rng.integers(0, max_rows))
    cols = int(rng.integers(1, 20))
    p = int(rng.integers(1, max_workers))
    return plan_layout(rows, cols, p)


def random_matrix_info(rng):
    lay = random_layout(rng)
    return wire.MatrixInfo(int(rng.integers(0, 1 << 32)), lay.rows, lay.cols, lay.assignment)


def random_params(rng, allow_nan=False):
    params = {}
    for _ in range(int(rng.integers(0, 5))):
        key = "k" + "".join(chr(97 + c) for c in rng.integers(0, 26, size=4))
        kind = int(rng.integers(0, 5))
        if kind == 0:
            value = float(random_f64(rng, 1)[0])
            if not allow_nan and not np.isfinite(value):
                value = 1.5
        elif kind == 1:
            value = int(rng.integers(-(1 << 62), 1 << 62))
        elif kind == 2:
            value = "s" * int(rng.integers(0, 12)) + "é"
        elif kind == 3:
            value = bool(rng.integers(0, 2))
        else:
            value = wire.MatrixRef(int(rng.integers(0, 1 << 64, dtype=np.uint64)))
        params[key] = value
    return params


def random_row_block(rng, cls):
    n = int(rng.integers(0, 6))
    cols = int(rng.integers(1, 8)) if n else 0
    indices = rng.integers(0, 1 << 40, size=n).astype(np.uint64)
    values = random_f64(rng, n * cols).reshape(n, cols)
    return cls(int(rng.integers(0, 1 << 64, dtype=np.uint64)), indices, values)


def random_message(rng):
    kind = int(rng.integers(0, 17))
    if kind == 0:
        return wire.Handshake(int(rng.integers(1, 1 << 16)), int(rng.integers(0, 1 << 16)))
    if kind == 1:
        workers = tuple(
            (w, f"127.0.0.1:{int(rng.integers(1024, 65535))}")
            for w in range(int(rng.integers(0, 5)))
        )
        return wire.HandshakeAck(int(rng.integers(0, 1 << 32)), workers)
    if kind == 2:
        return wire.RegisterLibrary("lib" * int(rng.integers(0, 5)), "/p/" * int(rng.integers(0, 5)))
    if kind == 3:
        return wire.LibraryAck(int(rng.integers(0, 1 << 16)))
    if kind == 4:
        return wire.CreateMatrix(int(rng.integers(0, 1 << 48)), int(rng.integers(1, 1 << 32)))
    if kind == 5:
        return random_matrix_info(rng)
    if kind == 6:
        return random_row_block(rng, wire.SendRows)
    if kind == 7:
        return wire.RowsAck(int(rng.integers(0, 1 << 64, dtype=np.uint64)), int(rng.integers(0, 1 << 32)))
    if kind == 8:
        return wire.SendComplete(int(rng.integers(0, 1 << 64, dtype=np.uint64)))
    if kind == 9:
        return wire.MatrixReady(int(rng.integers(0, 1 << 64, dtype=np.uint64)))
    if kind == 10:
        inputs = tuple(int(x) for x in rng.integers(0, 1 << 64, size=rng.integers(0, 4), dtype=np.uint64))
        return wire.RunTask(
            int(rng.integers(0, 1 << 16)), "routine_x", inputs, random_params(rng)
        )
    if kind == 11:
        outputs = tuple(random_matrix_info(rng) for _ in range(int(rng.integers(0, 3))))
        return wire.TaskResult(int(rng.integers(0, 2)), outputs, random_params(rng))
    if kind == 12:
        return wire.FetchRows(
            int(rng.integers(0, 1 << 64, dtype=np.uint64)),
            int(rng.integers(0, 1 << 48)),
            int(rng.integers(0, 1 << 32)),
        )
    if kind == 13:
        return random_row_block(rng, wire.RowsData)
    if kind == 14:
        return wire.ReleaseMatrix(int(rng.integers(0, 1 << 64, dtype=np.uint64)))
    if kind == 15:
        return wire.CloseSession()
    return wire.ErrorMessage(int(rng.integers(0, 1 << 16)), "boom " * int(rng.integers(0, 4)))


# ---------------------------------------------------------------------------
# golden-frame JSON <-> message adapters

_TAGGED = {"f64": float, "i64": int, "str": str, "bool": bool}


def params_from_json(triples):
    params = {}
    for key, tag, value in triples:
        if tag == "handle":
            params[key] = wire.MatrixRef(int(value))
        else:
            params[key] = _TAGGED[tag](value)
    return params


def message_from_json(obj):
    t = obj["type"]
    if t == "handshake":
        return wire.Handshake(obj["requested_workers"], obj["protocol_version"])
    if t == "handshake_ack":
        return wire.HandshakeAck(obj["session_id"], tuple((w, a) for w, a in obj["workers"]))
    if t == "register_library":
        return wire.RegisterLibrary(obj["name"], obj["path"])
    if t == "library_ack":
        return wire.LibraryAck(obj["lib_id"])
    if t == "create_matrix":
        return wire.CreateMatrix(obj["rows"], obj["cols"])
    if t == "matrix_info":
        return wire.MatrixInfo(
            obj["matrix_id"], obj["rows"], obj["cols"], tuple(tuple(r) for r in obj["ranges"])
        )
    if t == "send_rows":
        return wire.SendRows(
            obj["matrix_id"],
            np.array(obj["indices"], dtype=np.uint64),
            np.array(obj["values"], dtype=np.float64).reshape(len(obj["indices"]), -1),
        )
    if t == "rows_ack":
        return wire.RowsAck(obj["matrix_id"], obj["rows_received"])
    if t == "send_complete":
        return wire.SendComplete(obj["matrix_id"])
    if t == "matrix_ready":
        return wire.MatrixReady(obj["matrix_id"])
    if t == "run_task":
        return wire.RunTask(
            obj["lib_id"], obj["routine"], tuple(obj["inputs"]),
            params_from_json(obj["params"]),
        )
    if t == "task_result":
        return wire.TaskResult(
            obj["status"],
            tuple(message_from_json(o) for o in obj["outputs"]),
            params_from_json(obj["scalars"]),
        )
    if t == "fetch_rows":
        return wire.FetchRows(obj["matrix_id"], obj["row_start"], obj["row_count"])
    if t == "rows_data":
        return wire.RowsData(
            obj["matrix_id"],
            np.array(obj["indices"], dtype=np.uint64),
            np.array(obj["values"], dtype=np.float64).reshape(len(obj["indices"]), -1),
        )
    if t == "release_matrix":
        return wire.ReleaseMatrix(obj["matrix_id"])
    if t == "close_session":
        return wire.CloseSession()
    if t == "error":
        return wire.ErrorMessage(obj["code"], obj["message"])
    raise ValueError(f"unknown golden message type {t!r}")
