"""TENSORBIN: a flat, bit-exact container for named tensors.

Layout (all integers little-endian)::

    b"TBIN"  u32 version=1  u32 tensor_count
    per tensor:
        u16 name_len  name (utf-8)  u8 dtype  u8 ndim  ndim x u32 dims
        raw little-endian IEEE-754 payload, row-major

dtype codes: 1 = float32, 2 = float64.
"""

import struct

import numpy as np

MAGIC = b"TBIN"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class TensorBinError(ValueError):
    """Raised for malformed or mismatched TENSORBIN containers."""


def dumps(tensors):
    """Serialize a mapping of name -> array into bytes (insertion order kept)."""
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise TensorBinError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise TensorBinError(f"tensor name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        out.append(np.ascontiguousarray(le).tobytes())
    return b"".join(out)


def loads(buf):
    """Parse bytes produced by :func:`dumps` into a ``dict`` of arrays."""
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise TensorBinError(f"truncated file while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(view[:4]) != MAGIC:
        raise TensorBinError("not a TENSORBIN file")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise TensorBinError(f"unsupported TENSORBIN version {version} (expected {VERSION})")

    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"dtype of {name!r}"))
        if code not in _CODE_DTYPES:
            raise TensorBinError(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of {name!r}"))
        dtype = _CODE_DTYPES[code]
        nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
        payload = take(nbytes, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(view):
        raise TensorBinError(f"{len(view) - pos} trailing bytes after last tensor")
    return tensors


def save(path, tensors):
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
