import struct

import numpy as np
import pytest

from corenet.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from corenet.data import FormatError


def sample():
    return Checkpoint(
        {"iteration": 3, "name": "run"},
        {
            "w": np.arange(6, dtype=np.float32).reshape(2, 3),
            "d": np.array([1.5, -2.0]),
            "scalar": np.array(7.0, dtype=np.float32),
            "bytes": np.array([1, 2, 3], dtype=np.uint8),
            "count": np.array([4], dtype=np.int64),
        },
    )


def test_round_trip_bit_exact(tmp_path):
    ck = sample()
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.meta == ck.meta
    assert list(back.tensors) == list(ck.tensors)
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()
    assert encode_checkpoint(back) == (tmp_path / "a.ckpt").read_bytes()


def test_header_layout():
    buf = encode_checkpoint(Checkpoint({}, {"x": np.zeros(2, dtype=np.float64)}))
    assert buf[:4] == b"CORN"
    assert struct.unpack("<II", buf[4:12]) == (1, 2)


def test_meta_key_order_irrelevant():
    a = encode_checkpoint(Checkpoint({"a": 1, "b": 2}))
    b = encode_checkpoint(Checkpoint({"b": 2, "a": 1}))
    assert a == b


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        encode_checkpoint(Checkpoint({}, {"x": np.zeros(2, dtype=np.int16)}))


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:-1],
    lambda b: b + b"\x00",
    lambda b: b[:20],
], ids=["magic", "version", "truncated", "trailing", "header-only"])
def test_corruption_detected(mutate):
    buf = encode_checkpoint(sample())
    with pytest.raises(FormatError):
        decode_checkpoint(mutate(buf))


def test_bad_dtype_tag():
    buf = bytearray(encode_checkpoint(Checkpoint({}, {"x": np.zeros(1, dtype=np.float64)})))
    # the tag byte of the last entry sits right before its u64 length and 8-byte payload
    buf[-17] = 99
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(buf))
