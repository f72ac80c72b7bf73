#!/usr/bin/env python3
"""Regenerate golden/frames.json: canonical frames for every message type.

The JSON is the shared conformance fixture for independent client
implementations; run this only when the wire format itself changes.
"""

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from util import message_from_json  # noqa: E402

from matserve import wire  # noqa: E402

CASES = [
    {
        "name": "handshake",
        "description": "client opens a session asking for 4 workers",
        "session_id": 0,
        "message": {"type": "handshake", "protocol_version": 1, "requested_workers": 4},
    },
    {
        "name": "handshake_ack",
        "description": "driver grants session 1 with 2 worker endpoints",
        "session_id": 1,
        "message": {
            "type": "handshake_ack",
            "session_id": 1,
            "workers": [[0, "127.0.0.1:5001"], [1, "127.0.0.1:5002"]],
        },
    },
    {
        "name": "register_library",
        "description": "register the built-in routine library",
        "session_id": 1,
        "message": {"type": "register_library", "name": "builtin", "path": ""},
    },
    {
        "name": "library_ack",
        "description": "library id grant",
        "session_id": 1,
        "message": {"type": "library_ack", "lib_id": 1},
    },
    {
        "name": "create_matrix",
        "description": "allocate a 10x4 matrix",
        "session_id": 1,
        "message": {"type": "create_matrix", "rows": 10, "cols": 4},
    },
    {
        "name": "matrix_info",
        "description": "block-row layout of 10 rows over 4 workers",
        "session_id": 1,
        "message": {
            "type": "matrix_info",
            "matrix_id": 1,
            "rows": 10,
            "cols": 4,
            "ranges": [[0, 0, 3], [1, 3, 6], [2, 6, 9], [3, 9, 10]],
        },
    },
    {
        "name": "send_rows_single",
        "description": "one 2-wide row at index 3 (49-byte frame)",
        "session_id": 1,
        "message": {
            "type": "send_rows",
            "matrix_id": 7,
            "indices": [3],
            "values": [[1.0, 2.0]],
        },
    },
    {
        "name": "send_rows_special_floats",
        "description": "signed zero, subnormal, huge, and fractional values",
        "session_id": 2,
        "message": {
            "type": "send_rows",
            "matrix_id": 9,
            "indices": [0, 5],
            "values": [[-0.0, 5e-324, 1.7976931348623157e308], [0.1, -2.5, 3.141592653589793]],
        },
    },
    {
        "name": "rows_ack",
        "description": "worker acknowledges one row batch",
        "session_id": 1,
        "message": {"type": "rows_ack", "matrix_id": 7, "rows_received": 1},
    },
    {
        "name": "send_complete",
        "description": "client finished streaming matrix 7",
        "session_id": 1,
        "message": {"type": "send_complete", "matrix_id": 7},
    },
    {
        "name": "matrix_ready",
        "description": "driver confirms matrix 7 assembled",
        "session_id": 1,
        "message": {"type": "matrix_ready", "matrix_id": 7},
    },
    {
        "name": "run_task_no_params",
        "description": "QR factorization of matrix 1",
        "session_id": 1,
        "message": {
            "type": "run_task",
            "lib_id": 1,
            "routine": "tsqr",
            "inputs": [1],
            "params": [],
        },
    },
    {
        "name": "run_task_all_param_tags",
        "description": "every ParamMap value tag in one request",
        "session_id": 3,
        "message": {
            "type": "run_task",
            "lib_id": 1,
            "routine": "cg_solve",
            "inputs": [1, 2],
            "params": [
                ["lambda", "f64", 1e-05],
                ["max_iter", "i64", 100],
                ["note", "str", "précis"],
                ["flag", "bool", True],
                ["ref", "handle", 9],
            ],
        },
    },
    {
        "name": "task_result",
        "description": "one output handle plus scalar results",
        "session_id": 1,
        "message": {
            "type": "task_result",
            "status": 0,
            "outputs": [
                {
                    "type": "matrix_info",
                    "matrix_id": 2,
                    "rows": 4,
                    "cols": 4,
                    "ranges": [[0, 0, 2], [1, 2, 4]],
                }
            ],
            "scalars": [["sigma.0", "f64", 3.0], ["converged.0", "bool", False]],
        },
    },
    {
        "name": "fetch_rows",
        "description": "ask a worker for rows [3, 5)",
        "session_id": 1,
        "message": {"type": "fetch_rows", "matrix_id": 1, "row_start": 3, "row_count": 2},
    },
    {
        "name": "rows_data",
        "description": "worker returns one row including a negative zero",
        "session_id": 1,
        "message": {
            "type": "rows_data",
            "matrix_id": 1,
            "indices": [3],
            "values": [[1.5, -0.0]],
        },
    },
    {
        "name": "release_matrix",
        "description": "free matrix 1",
        "session_id": 1,
        "message": {"type": "release_matrix", "matrix_id": 1},
    },
    {
        "name": "close_session",
        "description": "end session 9 (13-byte frame)",
        "session_id": 9,
        "message": {"type": "close_session"},
    },
    {
        "name": "error",
        "description": "unknown routine",
        "session_id": 1,
        "message": {"type": "error", "code": 5, "message": "library 'builtin' has no routine 'foo'"},
    },
]


def main():
    for case in CASES:
        msg = message_from_json(case["message"])
        case["hex"] = wire.encode_frame(msg, case["session_id"]).hex()
    out = ROOT / "golden" / "frames.json"
    out.parent.mkdir(exist_ok=True)
    with open(out, "w") as f:
        json.dump(CASES, f, indent=2, ensure_ascii=False)
        f.write("\n")
    print(f"wrote {out} ({len(CASES)} frames)")


if __name__ == "__main__":
    main()
