import io
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matserve import wire

from util import message_from_json, random_f64, random_message

GOLDEN = Path(__file__).resolve().parents[1] / "golden" / "frames.json"


class FakeSock:
    """recv() over a scripted list of byte chunks."""

    def __init__(self, chunks):
        self.chunks = list(chunks)

    def recv(self, n):
        if not self.chunks:
            return b""
        return self.chunks.pop(0)


def roundtrip(msg, session_id=1):
    raw = wire.encode_frame(msg, session_id)
    decoded, sid, used = wire.decode_frame(raw)
    assert used == len(raw)
    assert sid == session_id
    return decoded


# ---------------------------------------------------------------------------
# framing basics (values forced by the framing definition)


def test_send_rows_frame_is_49_bytes():
    msg = wire.SendRows(7, np.array([3], dtype=np.uint64), np.array([[1.0, 2.0]]))
    raw = wire.encode_frame(msg, 1)
    assert len(raw) == 49
    msg_type, sid, payload_len = wire.HEADER.unpack(raw[:13])
    assert (msg_type, sid, payload_len) == (0x07, 1, 36)
    assert roundtrip(msg) == msg


def test_close_session_frame_is_header_only():
    raw = wire.encode_frame(wire.CloseSession(), 9)
    assert len(raw) == 13
    assert wire.HEADER.unpack(raw)[2] == 0
    assert roundtrip(wire.CloseSession(), 9) == wire.CloseSession()


def test_matrix_info_block_row_ranges():
    from matserve.store import plan_layout

    lay = plan_layout(10, 4, 4)
    msg = wire.MatrixInfo(1, 10, 4, lay.assignment)
    assert [(s, e) for _, s, e in msg.ranges] == [(0, 3), (3, 6), (6, 9), (9, 10)]
    assert roundtrip(msg) == msg


def test_truncated_header_is_incomplete_not_error():
    assert wire.decode_frame(b"\x07\x00\x00\x00\x00") is None


def test_truncated_payload_is_incomplete():
    raw = wire.encode_frame(wire.SendComplete(5), 1)
    assert wire.decode_frame(raw[:-1]) is None


def test_unknown_msg_type_is_hard_error():
    raw = wire.HEADER.pack(0xEE, 1, 0)
    with pytest.raises(wire.DecodeError):
        wire.decode_frame(raw)


def test_trailing_garbage_in_payload_is_hard_error():
    raw = wire.encode_frame(wire.SendComplete(5), 1)
    bad = wire.HEADER.pack(0x09, 1, 9) + raw[13:] + b"\x00"
    with pytest.raises(wire.DecodeError):
        wire.decode_frame(bad)


def test_trailing_bytes_left_for_next_frame():
    a = wire.encode_frame(wire.SendComplete(5), 1)
    b = wire.encode_frame(wire.MatrixReady(5), 1)
    msg, sid, used = wire.decode_frame(a + b)
    assert msg == wire.SendComplete(5) and used == len(a)
    msg2, _, _ = wire.decode_frame(a + b, offset=used)
    assert msg2 == wire.MatrixReady(5)


def test_oversized_field_raises_encode_error():
    with pytest.raises(wire.EncodeError):
        wire.encode_frame(wire.LibraryAck(1 << 16), 0)
    with pytest.raises(wire.EncodeError):
        wire.encode_frame(wire.RegisterLibrary("x" * 70000, ""), 0)
    with pytest.raises(wire.EncodeError):
        wire.encode_frame(wire.SendComplete(1), 1 << 32)


def test_param_map_rejects_unknown_tag():
    raw = wire.encode_frame(wire.RunTask(1, "r", (), {"a": 1}), 0)
    mutated = bytearray(raw)
    # the tag byte follows count(2) + key_len(2) + key(1) inside the ParamMap
    tag_offset = len(raw) - 9
    assert mutated[tag_offset] == wire.TAG_I64
    mutated[tag_offset] = 77
    with pytest.raises(wire.DecodeError):
        wire.decode_frame(bytes(mutated))


def test_matrix_info_gap_rejected():
    body = struct.pack("<QQQH", 1, 10, 4, 2)
    body += struct.pack("<HQQ", 0, 0, 3) + struct.pack("<HQQ", 1, 4, 10)
    raw = wire.HEADER.pack(wire.MSG_MATRIX_INFO, 0, len(body)) + body
    with pytest.raises(wire.DecodeError):
        wire.decode_frame(raw)


# ---------------------------------------------------------------------------
# round-trip properties


def test_seeded_roundtrip_sweep():
    rng = np.random.default_rng(2024)
    for _ in range(2000):
        msg = random_message(rng)
        sid = int(rng.integers(0, 1 << 32))
        got = roundtrip(msg, sid)
        assert got == msg or _params_equal(got, msg)


def _params_equal(a, b):
    """dict equality is False for NaN values; compare bits for those."""
    if type(a) is not type(b):
        return False
    da, db = getattr(a, "params", None), getattr(b, "params", None)
    if da is None:
        da, db = getattr(a, "scalars", None), getattr(b, "scalars", None)
    if da is None or set(da) != set(db):
        return False
    for k in da:
        va, vb = da[k], db[k]
        if isinstance(va, float) and isinstance(vb, float):
            if struct.pack("<d", va) != struct.pack("<d", vb):
                return False
        elif va != vb:
            return False
    return True


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_hypothesis_roundtrip(data):
    seed = data.draw(st.integers(0, 2**63 - 1))
    rng = np.random.default_rng(seed)
    msg = random_message(rng)
    assert roundtrip(msg, data.draw(st.integers(0, 2**32 - 1))) in (msg,) or _params_equal(
        roundtrip(msg), msg
    )


def test_float_fidelity_bit_exact():
    rng = np.random.default_rng(5)
    values = random_f64(rng, 64).reshape(8, 8)
    special = np.array(
        [0.0, -0.0, 5e-324, -5e-324, np.finfo(float).max, np.finfo(float).tiny, 1e-310, -1.5]
    )
    values[0] = special
    msg = wire.SendRows(1, np.arange(8, dtype=np.uint64), values)
    got = roundtrip(msg)
    assert got.values.tobytes() == values.astype("<f8").tobytes()


def test_nan_transported_verbatim():
    payload = np.array([[np.nan, -np.nan, np.inf, -np.inf]])
    # a quiet NaN with a payload survives too
    weird = np.frombuffer(struct.pack("<Q", 0x7FF8_0000_DEAD_BEEF), dtype=np.float64)
    payload[0, 1] = weird[0]
    msg = wire.RowsData(3, np.array([0], dtype=np.uint64), payload)
    got = roundtrip(msg)
    assert got.values.tobytes() == payload.astype("<f8").tobytes()


# ---------------------------------------------------------------------------
# streaming segmentation


def _frame_sequence():
    msgs = [
        (wire.Handshake(4), 0),
        (wire.SendRows(7, np.array([3], dtype=np.uint64), np.array([[1.0, 2.0]])), 1),
        (wire.CloseSession(), 1),
    ]
    blob = b"".join(wire.encode_frame(m, s) for m, s in msgs)
    return msgs, blob


def test_all_single_and_double_splits():
    msgs, blob = _frame_sequence()
    n = len(blob)
    for i in range(1, n):
        fb = wire.FrameBuffer()
        got = fb.feed(blob[:i]) + fb.feed(blob[i:])
        assert got == msgs
        assert fb.at_boundary
    for i in range(1, n - 1):
        for j in range(i + 1, n):
            fb = wire.FrameBuffer()
            got = fb.feed(blob[:i]) + fb.feed(blob[i:j]) + fb.feed(blob[j:])
            assert got == msgs


def test_byte_at_a_time():
    msgs, blob = _frame_sequence()
    fb = wire.FrameBuffer()
    got = []
    for i in range(len(blob)):
        got += fb.feed(blob[i : i + 1])
    assert got == msgs


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_segmentations(seed):
    msgs, blob = _frame_sequence()
    rng = np.random.default_rng(seed)
    cuts = sorted(rng.integers(0, len(blob), size=rng.integers(0, 8)))
    fb = wire.FrameBuffer()
    got = []
    prev = 0
    for cut in [*cuts, len(blob)]:
        got += fb.feed(blob[prev:cut])
        prev = cut
    assert got == msgs


def test_read_frames_two_frames_one_read():
    blob = wire.encode_frame(wire.CloseSession(), 1) + wire.encode_frame(wire.CloseSession(), 2)
    got = list(wire.read_frames(FakeSock([blob])))
    assert got == [(wire.CloseSession(), 1), (wire.CloseSession(), 2)]


def test_read_frames_split_across_three_reads():
    raw = wire.encode_frame(wire.SendComplete(1), 1)
    got = list(wire.read_frames(FakeSock([raw[:4], raw[4:9], raw[9:]])))
    assert got == [(wire.SendComplete(1), 1)]


def test_read_frames_clean_close_at_boundary():
    raw = wire.encode_frame(wire.MatrixReady(1), 1)
    assert list(wire.read_frames(FakeSock([raw]))) == [(wire.MatrixReady(1), 1)]


def test_read_frames_mid_frame_close_is_connection_error():
    raw = wire.encode_frame(wire.MatrixReady(1), 1)
    with pytest.raises(wire.ConnectionClosedMidFrame):
        list(wire.read_frames(FakeSock([raw[:7]])))


# ---------------------------------------------------------------------------
# golden frames shared with other client implementations


def _load_golden():
    with open(GOLDEN) as f:
        return json.load(f)


def test_golden_frames_encode_exactly():
    for case in _load_golden():
        msg = message_from_json(case["message"])
        raw = wire.encode_frame(msg, case["session_id"])
        assert raw.hex() == case["hex"], f"golden encode mismatch: {case['name']}"


def test_golden_frames_decode_exactly():
    for case in _load_golden():
        msg = message_from_json(case["message"])
        decoded, sid, used = wire.decode_frame(bytes.fromhex(case["hex"]))
        assert used == len(case["hex"]) // 2
        assert sid == case["session_id"]
        assert decoded == msg, f"golden decode mismatch: {case['name']}"
