import numpy as np
import pytest

from matserve import binfile


def test_header_and_size(tmp_path):
    path = tmp_path / "m.alch"
    m = np.arange(12.0).reshape(3, 4)
    binfile.write_matrix(path, m)
    assert path.stat().st_size == 22 + 8 * 12
    with open(path, "rb") as f:
        assert f.read(4) == b"ALCH"
        assert binfile.read_header(open(path, "rb")) == (3, 4)


def test_round_trip_bits(tmp_path):
    path = tmp_path / "m.alch"
    m = np.array([[np.nan, -0.0], [5e-324, 1e308]])
    binfile.write_matrix(path, m)
    assert binfile.read_matrix(path).tobytes() == m.tobytes()


def test_partial_row_read(tmp_path):
    path = tmp_path / "m.alch"
    m = np.random.default_rng(0).standard_normal((10, 3))
    binfile.write_matrix(path, m)
    with open(path, "rb") as f:
        rows, cols = binfile.read_header(f)
        block = binfile.read_rows(f, rows, cols, 4, 3)
    assert block.tobytes() == m[4:7].tobytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.alch"
    path.write_bytes(b"NOPE" + b"\x00" * 18)
    with pytest.raises(binfile.BinMatrixError):
        binfile.read_matrix(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "short.alch"
    binfile.write_matrix(path, np.ones((4, 4)))
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(binfile.BinMatrixError):
        binfile.read_matrix(path)


def test_out_of_range_read_rejected(tmp_path):
    path = tmp_path / "m.alch"
    binfile.write_matrix(path, np.ones((4, 2)))
    with open(path, "rb") as f:
        rows, cols = binfile.read_header(f)
        with pytest.raises(binfile.BinMatrixError):
            binfile.read_rows(f, rows, cols, 3, 2)
