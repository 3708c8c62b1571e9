"""Binary tensor container round-trips and corruption handling."""

import struct

import numpy as np
import pytest

from pointcont.pcnt_io import MAGIC, PcntError, read_tensors, write_tensors


def test_round_trip_preserves_values_and_order(tmp_path):
    path = tmp_path / "t.pcnt"
    tensors = {
        "b.second": np.arange(12, dtype=np.float32).reshape(3, 4),
        "a.first": np.float32(np.random.default_rng(0).normal(size=(2, 3, 2))),
        "scalar": np.array(7.5, dtype=np.float32),
    }
    write_tensors(path, tensors)
    back = read_tensors(path)
    assert list(back.keys()) == list(tensors.keys())  # insertion order kept
    for name, val in tensors.items():
        assert back[name].shape == np.asarray(val).shape
        assert np.array_equal(back[name], np.asarray(val, dtype=np.float32))


def test_float64_input_is_stored_as_f32(tmp_path):
    path = tmp_path / "t.pcnt"
    x = np.array([1.0 / 3.0], dtype=np.float64)
    write_tensors(path, {"x": x})
    back = read_tensors(path)["x"]
    assert back.dtype == np.float32
    assert back[0] == np.float32(1.0 / 3.0)


def test_write_is_bitwise_deterministic(tmp_path):
    a, b = tmp_path / "a.pcnt", tmp_path / "b.pcnt"
    tensors = {"w": np.linspace(0, 1, 10, dtype=np.float32).reshape(2, 5)}
    write_tensors(a, tensors)
    write_tensors(b, tensors)
    assert a.read_bytes() == b.read_bytes()


def test_header_layout(tmp_path):
    path = tmp_path / "t.pcnt"
    write_tensors(path, {"ab": np.zeros((2,), dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, count = struct.unpack_from("<II", raw, 4)
    assert (version, count) == (1, 1)
    (name_len,) = struct.unpack_from("<H", raw, 12)
    assert name_len == 2
    assert raw[14:16] == b"ab"
    assert raw[16] == 1  # rank
    (dim,) = struct.unpack_from("<I", raw, 17)
    assert dim == 2
    assert len(raw) == 21 + 8  # header + 2 float32


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.pcnt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(PcntError):
        read_tensors(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.pcnt"
    write_tensors(path, {"w": np.zeros((4, 4), dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(PcntError):
        read_tensors(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.pcnt"
    write_tensors(path, {"w": np.zeros((2,), dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(PcntError):
        read_tensors(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "t.pcnt"
    write_tensors(path, {"w": np.zeros((2,), dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(PcntError):
        read_tensors(path)
