"""Binary message format spoken between client, driver, and workers.

Every frame is a 13-byte header followed by a payload:

    offset  size  field
    0       1     msg_type (u8)
    1       4     session_id (u32)
    5       8     payload_len (u64, bytes)
    13      ...   payload

All multi-byte integers are little-endian; floats are IEEE 754 binary64,
little-endian. The per-type payload layouts are documented bit-exactly in
docs/PROTOCOL.md, which is the contract for independent client
implementations. NaN payloads are transported verbatim; validating values
is the solver's job, not the wire's.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = 1

HEADER = struct.Struct("<BIQ")
HEADER_LEN = HEADER.size  # 13

# msg_type codes
MSG_HANDSHAKE = 0x01
MSG_HANDSHAKE_ACK = 0x02
MSG_REGISTER_LIBRARY = 0x03
MSG_LIBRARY_ACK = 0x04
MSG_CREATE_MATRIX = 0x05
MSG_MATRIX_INFO = 0x06
MSG_SEND_ROWS = 0x07
MSG_ROWS_ACK = 0x08
MSG_SEND_COMPLETE = 0x09
MSG_MATRIX_READY = 0x0A
MSG_RUN_TASK = 0x0B
MSG_TASK_RESULT = 0x0C
MSG_FETCH_ROWS = 0x0D
MSG_ROWS_DATA = 0x0E
MSG_RELEASE_MATRIX = 0x0F
MSG_CLOSE_SESSION = 0x10
MSG_ERROR = 0x7F

# ParamMap value tags
TAG_F64 = 0
TAG_I64 = 1
TAG_STR = 2
TAG_BOOL = 3
TAG_HANDLE = 4

# ERROR codes
ERR_VERSION_MISMATCH = 1
ERR_INSUFFICIENT_WORKERS = 2
ERR_RESOURCE_EXHAUSTED = 3
ERR_MATRIX_INCOMPLETE = 4
ERR_UNKNOWN_ROUTINE = 5
ERR_SCHEMA_VIOLATION = 6
ERR_NUMERICAL_FAILURE = 7
ERR_UNKNOWN_MATRIX = 8
ERR_PROTOCOL_VIOLATION = 9
ERR_UNKNOWN_LIBRARY = 10
ERR_IO = 11

_U8_MAX = 0xFF
_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF


class ProtocolError(Exception):
    """Base for wire-level failures."""


class EncodeError(ProtocolError):
    """A field does not fit its width or a message is malformed."""


class DecodeError(ProtocolError):
    """Bytes cannot be a well-formed frame (hard error, not 'need more')."""


class ConnectionClosedMidFrame(ProtocolError):
    """Stream ended inside a frame; distinct from a clean close at a boundary."""


@dataclass(frozen=True)
class MatrixRef:
    """A matrix-handle value inside a ParamMap (tag 4)."""

    matrix_id: int


@dataclass(frozen=True)
class Handshake:
    requested_workers: int
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class HandshakeAck:
    session_id: int
    workers: tuple  # of (worker_id, "host:port")


@dataclass(frozen=True)
class RegisterLibrary:
    name: str
    path: str


@dataclass(frozen=True)
class LibraryAck:
    lib_id: int


@dataclass(frozen=True)
class CreateMatrix:
    rows: int
    cols: int


@dataclass(frozen=True)
class MatrixInfo:
    matrix_id: int
    rows: int
    cols: int
    ranges: tuple  # of (worker_id, row_start, row_end_excl); sorted, contiguous


@dataclass(frozen=True)
class RowsAck:
    matrix_id: int
    rows_received: int


@dataclass(frozen=True)
class SendComplete:
    matrix_id: int


@dataclass(frozen=True)
class MatrixReady:
    matrix_id: int


@dataclass(frozen=True)
class RunTask:
    lib_id: int
    routine: str
    input_ids: tuple
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "input_ids", tuple(self.input_ids))


@dataclass(frozen=True)
class TaskResult:
    status: int
    outputs: tuple  # of MatrixInfo
    scalars: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FetchRows:
    matrix_id: int
    row_start: int
    row_count: int


@dataclass(frozen=True)
class ReleaseMatrix:
    matrix_id: int


@dataclass(frozen=True)
class CloseSession:
    pass


@dataclass(frozen=True)
class ErrorMessage:
    code: int
    message: str


class _RowBlock:
    """Shared implementation of SEND_ROWS / ROWS_DATA payloads.

    ``values`` is an (n, cols) float64 array; ``indices`` the matching global
    row indices. Equality is bit-exact on the float payload so that
    decode(encode(m)) == m holds for NaNs and signed zeros alike.
    """

    __slots__ = ("matrix_id", "indices", "values")

    def __init__(self, matrix_id, indices, values):
        values = np.ascontiguousarray(values, dtype="<f8")
        if values.ndim != 2:
            raise ValueError("row values must be a 2-D array")
        indices = np.ascontiguousarray(indices, dtype="<u8")
        if indices.shape != (values.shape[0],):
            raise ValueError("one index per row required")
        self.matrix_id = matrix_id
        self.indices = indices
        self.values = values

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.matrix_id == other.matrix_id
            and self.indices.shape == other.indices.shape
            and self.values.shape == other.values.shape
            and self.indices.tobytes() == other.indices.tobytes()
            and self.values.tobytes() == other.values.tobytes()
        )

    def __repr__(self):
        return "%s(matrix_id=%d, rows=%d, cols=%d)" % (
            type(self).__name__,
            self.matrix_id,
            self.values.shape[0],
            self.values.shape[1],
        )


class SendRows(_RowBlock):
    pass


class RowsData(_RowBlock):
    pass


def _check_range(value, maximum, what):
    if not 0 <= value <= maximum:
        raise EncodeError(f"{what} {value} out of range [0, {maximum}]")
    return value


def _pack_str16(s, what):
    raw = s.encode("utf-8")
    _check_range(len(raw), _U16_MAX, f"{what} length")
    return struct.pack("<H", len(raw)) + raw


def _encode_param_map(params):
    pieces = [struct.pack("<H", _check_range(len(params), _U16_MAX, "param count"))]
    for key, value in params.items():
        pieces.append(_pack_str16(key, "param key"))
        if isinstance(value, bool):
            pieces.append(struct.pack("<BB", TAG_BOOL, 1 if value else 0))
        elif isinstance(value, MatrixRef):
            pieces.append(struct.pack("<B", TAG_HANDLE))
            pieces.append(struct.pack("<Q", _check_range(value.matrix_id, _U64_MAX, "handle id")))
        elif isinstance(value, (int, np.integer)):
            pieces.append(struct.pack("<Bq", TAG_I64, int(value)))
        elif isinstance(value, (float, np.floating)):
            pieces.append(struct.pack("<Bd", TAG_F64, float(value)))
        elif isinstance(value, str):
            pieces.append(struct.pack("<B", TAG_STR))
            pieces.append(_pack_str16(value, "param string"))
        else:
            raise EncodeError(f"unsupported param type {type(value).__name__} for key {key!r}")
    return b"".join(pieces)


def _encode_matrix_info_body(mi):
    pieces = [
        struct.pack(
            "<QQQH",
            _check_range(mi.matrix_id, _U64_MAX, "matrix_id"),
            _check_range(mi.rows, _U64_MAX, "rows"),
            _check_range(mi.cols, _U64_MAX, "cols"),
            _check_range(len(mi.ranges), _U16_MAX, "entry count"),
        )
    ]
    for worker_id, start, end in mi.ranges:
        pieces.append(
            struct.pack(
                "<HQQ",
                _check_range(worker_id, _U16_MAX, "worker_id"),
                _check_range(start, _U64_MAX, "row_start"),
                _check_range(end, _U64_MAX, "row_end"),
            )
        )
    return b"".join(pieces)


def _encode_row_block(msg):
    n, cols = msg.values.shape
    _check_range(msg.matrix_id, _U64_MAX, "matrix_id")
    _check_range(n, _U32_MAX, "row_count")
    head = struct.pack("<QI", msg.matrix_id, n)
    if n == 0:
        return head
    block = np.empty((n, cols + 1), dtype="<f8")
    block[:, 0] = msg.indices.view("<f8")
    block[:, 1:] = msg.values
    return head + block.tobytes()


def encode_message(msg):
    """Return (msg_type, payload bytes) for one message body."""
    if isinstance(msg, Handshake):
        _check_range(msg.protocol_version, _U16_MAX, "protocol_version")
        _check_range(msg.requested_workers, _U16_MAX, "requested_workers")
        return MSG_HANDSHAKE, struct.pack("<HH", msg.protocol_version, msg.requested_workers)
    if isinstance(msg, HandshakeAck):
        pieces = [
            struct.pack(
                "<IH",
                _check_range(msg.session_id, _U32_MAX, "session_id"),
                _check_range(len(msg.workers), _U16_MAX, "worker count"),
            )
        ]
        for worker_id, addr in msg.workers:
            pieces.append(struct.pack("<H", _check_range(worker_id, _U16_MAX, "worker_id")))
            pieces.append(_pack_str16(addr, "worker address"))
        return MSG_HANDSHAKE_ACK, b"".join(pieces)
    if isinstance(msg, RegisterLibrary):
        return MSG_REGISTER_LIBRARY, _pack_str16(msg.name, "library name") + _pack_str16(
            msg.path, "library path"
        )
    if isinstance(msg, LibraryAck):
        return MSG_LIBRARY_ACK, struct.pack("<H", _check_range(msg.lib_id, _U16_MAX, "lib_id"))
    if isinstance(msg, CreateMatrix):
        return MSG_CREATE_MATRIX, struct.pack(
            "<QQ",
            _check_range(msg.rows, _U64_MAX, "rows"),
            _check_range(msg.cols, _U64_MAX, "cols"),
        )
    if isinstance(msg, MatrixInfo):
        return MSG_MATRIX_INFO, _encode_matrix_info_body(msg)
    if isinstance(msg, SendRows):
        return MSG_SEND_ROWS, _encode_row_block(msg)
    if isinstance(msg, RowsAck):
        return MSG_ROWS_ACK, struct.pack(
            "<QI",
            _check_range(msg.matrix_id, _U64_MAX, "matrix_id"),
            _check_range(msg.rows_received, _U32_MAX, "rows_received"),
        )
    if isinstance(msg, SendComplete):
        return MSG_SEND_COMPLETE, struct.pack("<Q", _check_range(msg.matrix_id, _U64_MAX, "matrix_id"))
    if isinstance(msg, MatrixReady):
        return MSG_MATRIX_READY, struct.pack("<Q", _check_range(msg.matrix_id, _U64_MAX, "matrix_id"))
    if isinstance(msg, RunTask):
        _check_range(msg.lib_id, _U16_MAX, "lib_id")
        _check_range(len(msg.input_ids), _U8_MAX, "input count")
        pieces = [struct.pack("<H", msg.lib_id), _pack_str16(msg.routine, "routine name")]
        pieces.append(struct.pack("<B", len(msg.input_ids)))
        for mid in msg.input_ids:
            pieces.append(struct.pack("<Q", _check_range(mid, _U64_MAX, "input handle")))
        pieces.append(_encode_param_map(msg.params))
        return MSG_RUN_TASK, b"".join(pieces)
    if isinstance(msg, TaskResult):
        _check_range(msg.status, _U8_MAX, "status")
        _check_range(len(msg.outputs), _U8_MAX, "output count")
        pieces = [struct.pack("<BB", msg.status, len(msg.outputs))]
        for mi in msg.outputs:
            pieces.append(_encode_matrix_info_body(mi))
        pieces.append(_encode_param_map(msg.scalars))
        return MSG_TASK_RESULT, b"".join(pieces)
    if isinstance(msg, FetchRows):
        return MSG_FETCH_ROWS, struct.pack(
            "<QQI",
            _check_range(msg.matrix_id, _U64_MAX, "matrix_id"),
            _check_range(msg.row_start, _U64_MAX, "row_start"),
            _check_range(msg.row_count, _U32_MAX, "row_count"),
        )
    if isinstance(msg, RowsData):
        return MSG_ROWS_DATA, _encode_row_block(msg)
    if isinstance(msg, ReleaseMatrix):
        return MSG_RELEASE_MATRIX, struct.pack("<Q", _check_range(msg.matrix_id, _U64_MAX, "matrix_id"))
    if isinstance(msg, CloseSession):
        return MSG_CLOSE_SESSION, b""
    if isinstance(msg, ErrorMessage):
        return MSG_ERROR, struct.pack("<H", _check_range(msg.code, _U16_MAX, "error code")) + _pack_str16(
            msg.message, "error message"
        )
    raise EncodeError(f"not a protocol message: {type(msg).__name__}")


def encode_frame(msg, session_id):
    """Serialize one message into a complete frame."""
    msg_type, payload = encode_message(msg)
    _check_range(session_id, _U32_MAX, "session_id")
    return HEADER.pack(msg_type, session_id, len(payload)) + payload


class _Cursor:
    """Bounded reader over one frame payload."""

    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf):
        self.buf = buf
        self.pos = 0
        self.end = len(buf)

    def take(self, n):
        if self.pos + n > self.end:
            raise DecodeError("payload truncated inside message body")
        piece = self.buf[self.pos : self.pos + n]
        self.pos += n
        return piece

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def remaining(self):
        return self.end - self.pos

    def done(self):
        if self.pos != self.end:
            raise DecodeError(f"{self.end - self.pos} trailing bytes after message body")


_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


def _take_str16(cur):
    (n,) = cur.unpack(_U16)
    raw = cur.take(n)
    try:
        return bytes(raw).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"invalid UTF-8 in string field: {exc}") from None


def _decode_param_map(cur):
    (count,) = cur.unpack(_U16)
    params = {}
    for _ in range(count):
        key = _take_str16(cur)
        if key in params:
            raise DecodeError(f"duplicate param key {key!r}")
        (tag,) = cur.unpack(_U8)
        if tag == TAG_F64:
            (params[key],) = cur.unpack(_F64)
        elif tag == TAG_I64:
            (params[key],) = cur.unpack(_I64)
        elif tag == TAG_STR:
            params[key] = _take_str16(cur)
        elif tag == TAG_BOOL:
            (raw,) = cur.unpack(_U8)
            if raw not in (0, 1):
                raise DecodeError(f"bool param {key!r} has value {raw}")
            params[key] = bool(raw)
        elif tag == TAG_HANDLE:
            (mid,) = cur.unpack(_U64)
            params[key] = MatrixRef(mid)
        else:
            raise DecodeError(f"unknown param tag {tag}")
    return params


def _decode_matrix_info_body(cur):
    matrix_id, rows, cols = cur.unpack(_U64)[0], cur.unpack(_U64)[0], cur.unpack(_U64)[0]
    (count,) = cur.unpack(_U16)
    ranges = []
    prev_end = 0
    for _ in range(count):
        (worker_id,) = cur.unpack(_U16)
        (start,) = cur.unpack(_U64)
        (end,) = cur.unpack(_U64)
        if start != prev_end or end < start:
            raise DecodeError("matrix info ranges must be sorted, disjoint, and cover [0, rows)")
        prev_end = end
        ranges.append((worker_id, start, end))
    if prev_end != rows:
        raise DecodeError("matrix info ranges must cover [0, rows) exactly")
    return MatrixInfo(matrix_id, rows, cols, tuple(ranges))


def _decode_row_block(cur, cls):
    (matrix_id,) = cur.unpack(_U64)
    (count,) = cur.unpack(_U32)
    rem = cur.remaining()
    if count == 0:
        if rem:
            raise DecodeError("row payload present but row_count is 0")
        return cls(matrix_id, np.empty(0, "<u8"), np.empty((0, 0), "<f8"))
    if rem % count:
        raise DecodeError("row payload length not divisible by row_count")
    per_row = rem // count
    if per_row < 8 or (per_row - 8) % 8:
        raise DecodeError("row payload length inconsistent with an f64 row layout")
    cols = (per_row - 8) // 8
    # copy: the decoded message must not retain the stream buffer
    block = np.frombuffer(bytes(cur.take(rem)), dtype="<f8").reshape(count, cols + 1)
    indices = block[:, 0].copy().view("<u8")
    values = block[:, 1:].copy()
    return cls(matrix_id, indices, values)


def _decode_body(msg_type, payload):
    cur = _Cursor(payload)
    if msg_type == MSG_HANDSHAKE:
        version, workers = cur.unpack(struct.Struct("<HH"))
        msg = Handshake(requested_workers=workers, protocol_version=version)
    elif msg_type == MSG_HANDSHAKE_ACK:
        (session_id,) = cur.unpack(_U32)
        (count,) = cur.unpack(_U16)
        workers = []
        for _ in range(count):
            (worker_id,) = cur.unpack(_U16)
            workers.append((worker_id, _take_str16(cur)))
        msg = HandshakeAck(session_id, tuple(workers))
    elif msg_type == MSG_REGISTER_LIBRARY:
        msg = RegisterLibrary(_take_str16(cur), _take_str16(cur))
    elif msg_type == MSG_LIBRARY_ACK:
        msg = LibraryAck(cur.unpack(_U16)[0])
    elif msg_type == MSG_CREATE_MATRIX:
        msg = CreateMatrix(cur.unpack(_U64)[0], cur.unpack(_U64)[0])
    elif msg_type == MSG_MATRIX_INFO:
        msg = _decode_matrix_info_body(cur)
    elif msg_type == MSG_SEND_ROWS:
        msg = _decode_row_block(cur, SendRows)
    elif msg_type == MSG_ROWS_ACK:
        msg = RowsAck(cur.unpack(_U64)[0], cur.unpack(_U32)[0])
    elif msg_type == MSG_SEND_COMPLETE:
        msg = SendComplete(cur.unpack(_U64)[0])
    elif msg_type == MSG_MATRIX_READY:
        msg = MatrixReady(cur.unpack(_U64)[0])
    elif msg_type == MSG_RUN_TASK:
        (lib_id,) = cur.unpack(_U16)
        routine = _take_str16(cur)
        (n_inputs,) = cur.unpack(_U8)
        inputs = tuple(cur.unpack(_U64)[0] for _ in range(n_inputs))
        msg = RunTask(lib_id, routine, inputs, _decode_param_map(cur))
    elif msg_type == MSG_TASK_RESULT:
        (status,) = cur.unpack(_U8)
        (n_outputs,) = cur.unpack(_U8)
        outputs = tuple(_decode_matrix_info_body(cur) for _ in range(n_outputs))
        msg = TaskResult(status, outputs, _decode_param_map(cur))
    elif msg_type == MSG_FETCH_ROWS:
        msg = FetchRows(cur.unpack(_U64)[0], cur.unpack(_U64)[0], cur.unpack(_U32)[0])
    elif msg_type == MSG_ROWS_DATA:
        msg = _decode_row_block(cur, RowsData)
    elif msg_type == MSG_RELEASE_MATRIX:
        msg = ReleaseMatrix(cur.unpack(_U64)[0])
    elif msg_type == MSG_CLOSE_SESSION:
        msg = CloseSession()
    elif msg_type == MSG_ERROR:
        msg = ErrorMessage(cur.unpack(_U16)[0], _take_str16(cur))
    else:
        raise DecodeError(f"unknown msg_type 0x{msg_type:02X}")
    cur.done()
    return msg


def decode_frame(buf, offset=0):
    """Decode one frame starting at ``offset``.

    Returns (message, session_id, bytes_consumed), or None when the buffer
    does not yet hold a complete frame ("need more bytes"). Malformed frames
    raise DecodeError.
    """
    view = memoryview(buf)[offset:]
    if len(view) < HEADER_LEN:
        return None
    msg_type, session_id, payload_len = HEADER.unpack_from(view)
    total = HEADER_LEN + payload_len
    if len(view) < total:
        return None
    msg = _decode_body(msg_type, view[HEADER_LEN:total])
    return msg, session_id, total


class FrameBuffer:
    """Reassembles frames from an arbitrarily segmented byte stream.

    One buffer per socket; never share across connections.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data):
        """Append bytes, return the list of (message, session_id) completed."""
        self._buf.extend(data)
        out = []
        pos = 0
        while True:
            decoded = decode_frame(self._buf, pos)
            if decoded is None:
                break
            msg, session_id, consumed = decoded
            out.append((msg, session_id))
            pos += consumed
        if pos:
            del self._buf[:pos]
        return out

    @property
    def at_boundary(self):
        """True when no partial frame is pending."""
        return not self._buf


def read_frames(sock, chunk_size=1 << 16):
    """Yield (message, session_id) pairs from a connected socket.

    Ends cleanly when the peer closes at a frame boundary; raises
    ConnectionClosedMidFrame if the stream ends inside a frame.
    """
    fb = FrameBuffer()
    while True:
        data = sock.recv(chunk_size)
        if not data:
            if not fb.at_boundary:
                raise ConnectionClosedMidFrame("stream closed inside a frame")
            return
        yield from fb.feed(data)


def send_frame(sock, msg, session_id):
    sock.sendall(encode_frame(msg, session_id))
