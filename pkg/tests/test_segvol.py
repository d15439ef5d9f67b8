import struct

import numpy as np
import pytest

from mfpnet.errors import ConfigError, FormatError
from mfpnet.segvol import HEADER_SIZE, SegVol, decode_segvol, encode_segvol, io_segvol, read_segvol, write_segvol


def test_round_trip_float(tmp_path):
    data = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    path = tmp_path / "a.svol"
    write_segvol(path, SegVol(data, (3.0, 1.5, 1.5)))
    back = read_segvol(path)
    assert back.data.dtype == np.float32 and back.data.tobytes() == data.tobytes()
    assert back.spacing == (3.0, 1.5, 1.5)


def test_round_trip_labels_via_dispatcher(tmp_path):
    labels = np.random.default_rng(1).integers(0, 6, (2, 3, 4)).astype(np.uint8)
    path = tmp_path / "l.svol"
    assert io_segvol(path, "write", SegVol(labels)) is None
    assert np.array_equal(io_segvol(path, "read").data, labels)


def test_header_layout():
    buf = encode_segvol(SegVol(np.zeros((4, 4, 4), np.uint8), (2.0, 1.0, 1.0)))
    assert buf[:4] == b"SVOL"
    assert struct.unpack_from("<H3I", buf, 4) == (1, 4, 4, 4)
    assert len(buf) == HEADER_SIZE + 64


def test_bad_magic():
    buf = b"XXXX" + encode_segvol(SegVol(np.zeros((2, 2, 2), np.uint8)))[4:]
    with pytest.raises(FormatError, match="magic") as exc:
        decode_segvol(buf)
    assert exc.value.offset == 0


def test_truncated_payload():
    buf = encode_segvol(SegVol(np.zeros((4, 4, 4), np.uint8)))[:HEADER_SIZE + 63]
    with pytest.raises(FormatError, match="truncated") as exc:
        decode_segvol(buf)
    assert exc.value.offset == HEADER_SIZE + 63


def test_truncated_header():
    with pytest.raises(FormatError):
        decode_segvol(b"SVOL\x01")


def test_trailing_bytes():
    buf = encode_segvol(SegVol(np.zeros((1, 1, 2), np.float32))) + b"\0"
    with pytest.raises(FormatError, match="trailing"):
        decode_segvol(buf)


def test_bad_dtype_code():
    buf = bytearray(encode_segvol(SegVol(np.zeros((1, 1, 1), np.uint8))))
    buf[30] = 9
    with pytest.raises(FormatError) as exc:
        decode_segvol(bytes(buf))
    assert exc.value.offset == 30


@pytest.mark.parametrize("data", [np.zeros((2, 2)), np.zeros((1, 1, 1), np.int64)])
def test_unsupported_payload(data):
    with pytest.raises(ConfigError):
        encode_segvol(SegVol(data))


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        read_segvol(tmp_path / "nope.svol")
