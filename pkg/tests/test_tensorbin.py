import struct

import numpy as np
import pytest

from passt import tensorbin


def test_layout_is_bit_exact():
    buf = tensorbin.dumps({"ab": np.array([1.0, -2.0], dtype=np.float32)})
    expected = (b"TBIN" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab"
                + struct.pack("<BB", 1, 1) + struct.pack("<I", 2) + struct.pack("<2f", 1.0, -2.0))
    assert buf == expected


def test_roundtrip_mixed_dtypes(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b.c": rng.standard_normal(5),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3), dtype=np.float32),
        "ünïcode": np.arange(6, dtype=np.float64).reshape(1, 2, 3),
    }
    path = tmp_path / "t.tbin"
    tensorbin.save(path, tensors)
    back = tensorbin.load(path)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_bad_magic():
    with pytest.raises(tensorbin.TensorBinError, match="not a TENSORBIN file"):
        tensorbin.loads(b"NOPE" + bytes(8))


def test_version_mismatch():
    buf = bytearray(tensorbin.dumps({}))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(tensorbin.TensorBinError, match="version"):
        tensorbin.loads(bytes(buf))


@pytest.mark.parametrize("cut", [3, 10, 20, -1])
def test_truncated(cut):
    buf = tensorbin.dumps({"w": np.ones((4, 4), dtype=np.float32)})
    with pytest.raises(tensorbin.TensorBinError):
        tensorbin.loads(buf[:cut])


def test_unsupported_dtype():
    with pytest.raises(tensorbin.TensorBinError, match="dtype"):
        tensorbin.dumps({"i": np.arange(3)})
