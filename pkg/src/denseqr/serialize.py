"""Little-endian binary containers for tensors.

Single tensor record::

    magic    4 bytes  b"DQTS"
    version  u16      1
    dtype    u8       1 = float32, 2 = float64, 3 = int64, 4 = uint8, 5 = int32
    rank     u8
    dims     rank x u64
    values   product(dims) raw little-endian values

A container (checkpoints, encoded corpora) is::

    magic    4 bytes  b"DQTC"
    version  u16      1
    meta     u32 length + UTF-8 text (``key=value`` lines)
    count    u32
    count x (u32 name length + UTF-8 name + tensor record)

Tensors are written in insertion order so equal inputs give equal bytes.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"DQTS"
CONTAINER_MAGIC = b"DQTC"
VERSION = 1

_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
    5: np.dtype("<i4"),
}
_CODES = {v.str[1:]: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """Raised on a malformed binary file."""


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"unexpected end of file (wanted {n} bytes, got {len(b)})")
    return b


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.str[1:])
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    dt = _DTYPES[code]
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<HBB", VERSION, code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, code, rank = struct.unpack("<HBB", _read_exact(f, 4))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    dt = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(f, n * dt.itemsize), dtype=dt)
    return data.reshape(dims).astype(dt.newbyteorder("="))


def write_str(f: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def read_str(f: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def dump_container(tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack("<H", VERSION))
    write_str(buf, format_meta(meta or {}))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        write_str(buf, name)
        write_tensor(buf, arr)
    return buf.getvalue()


def load_container(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    f = io.BytesIO(data)
    if _read_exact(f, 4) != CONTAINER_MAGIC:
        raise FormatError("bad container magic")
    (version,) = struct.unpack("<H", _read_exact(f, 2))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    meta = parse_meta(read_str(f))
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    tensors = {}
    for _ in range(count):
        name = read_str(f)
        tensors[name] = read_tensor(f)
    return tensors, meta


def save_container(path, tensors, meta=None) -> None:
    with open(path, "wb") as f:
        f.write(dump_container(tensors, meta))


def read_container(path):
    with open(path, "rb") as f:
        return load_container(f.read())


def format_meta(meta: Mapping[str, object]) -> str:
    lines = []
    for k, v in meta.items():
        if "\n" in str(v) or "=" in k:
            raise FormatError(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    return "\n".join(lines)


def parse_meta(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        out[k] = v
    return out
