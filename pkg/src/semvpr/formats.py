"""Binary file formats: VPRT tensors, VPRC checkpoints, VPRD descriptor databases.

All integers and floats are little-endian.

VPRT   magic "VPRT" | u16 version=1 | u16 ndims | ndims x u32 extents | f64 payload (row-major)
VPRC   magic "VPRC" | u16 version=1 | records until EOF: u16 name length, utf-8 name, VPRT block
VPRD   magic "VPRD" | u32 count | u32 dim | count x (u64 id, dim x f64)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

TENSOR_MAGIC = b"VPRT"
CHECKPOINT_MAGIC = b"VPRC"
DESCRIPTOR_MAGIC = b"VPRD"
VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated binary file."""


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor_stream(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<HH", VERSION, arr.ndim))
    if arr.ndim:
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor_stream(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, ndims = struct.unpack("<HH", _read_exact(f, 4))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{ndims}I", _read_exact(f, 4 * ndims)) if ndims else ()
    count = int(np.prod(shape)) if ndims else 1
    payload = _read_exact(f, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor_stream(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor_stream(io.BytesIO(data))


def save_tensor(path: PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor_stream(f, arr)


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor_stream(f)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return arr


def save_checkpoint(path: PathLike, params: Mapping[str, np.ndarray]) -> None:
    """Write named arrays sorted by name."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", VERSION))
        for name in sorted(params):
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            write_tensor_stream(f, params[name])


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a VPRC checkpoint")
        (version,) = struct.unpack("<H", _read_exact(f, 2))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated checkpoint record")
            (n,) = struct.unpack("<H", head)
            name = _read_exact(f, n).decode("utf-8")
            if name in out:
                raise FormatError(f"duplicate parameter {name!r}")
            out[name] = read_tensor_stream(f)
    return out


def save_descriptors(path: PathLike, ids: Sequence[int], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError(f"descriptor matrix {matrix.shape} does not match {len(ids)} ids")
    with open(path, "wb") as f:
        f.write(DESCRIPTOR_MAGIC)
        f.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        for rid, row in zip(ids, matrix):
            f.write(struct.pack("<Q", int(rid)))
            f.write(np.ascontiguousarray(row, dtype="<f8").tobytes())


def load_descriptors(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(ids as uint64 array, count x dim float64 matrix)``."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != DESCRIPTOR_MAGIC:
            raise FormatError(f"{path}: not a VPRD descriptor file")
        count, dim = struct.unpack("<II", _read_exact(f, 8))
        rec = np.dtype([("id", "<u8"), ("v", "<f8", (dim,))])
        raw = _read_exact(f, rec.itemsize * count)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes")
    table = np.frombuffer(raw, dtype=rec)
    return table["id"].astype(np.uint64), table["v"].astype(np.float64).reshape(count, dim)
