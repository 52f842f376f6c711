"""Binary tensor dumps (``.tdump``) and checkpoints.

``.tdump`` layout (little endian)::

    b"TDMP" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank | u64 dims[rank] | scalars

A checkpoint is ``b"TCKP" | u8 version=1 | u32 count`` followed by ``count``
records in sorted name order, each ``u32 name_len | utf-8 name | u64 nbytes |
tdump bytes``.
"""
from __future__ import annotations

import io as _io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from faxbev.errors import FormatError

MAGIC = b"TDMP"
CKPT_MAGIC = b"TCKP"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; only f32/f64 are dumpable")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError("missing TDMP magic")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported tdump version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 7
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    need = off + count * dt.itemsize
    if len(buf) != need:
        raise FormatError(f"tdump payload length {len(buf) - off} != expected {count * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    try:
        return decode_tensor(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_checkpoint(fh: BinaryIO, state: Mapping[str, np.ndarray]) -> None:
    fh.write(CKPT_MAGIC + struct.pack("<BI", VERSION, len(state)))
    for name in sorted(state):
        raw = name.encode("utf-8")
        payload = encode_tensor(state[name])
        fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload)


def read_checkpoint(fh: BinaryIO) -> dict[str, np.ndarray]:
    head = fh.read(9)
    if len(head) != 9 or head[:4] != CKPT_MAGIC:
        raise FormatError("missing TCKP magic")
    version, count = struct.unpack("<BI", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, nlen).decode("utf-8")
        (plen,) = struct.unpack("<Q", _read_exact(fh, 8))
        state[name] = decode_tensor(_read_exact(fh, plen))
    return state


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated checkpoint")
    return buf


def save_checkpoint(path, state: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, state)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            return read_checkpoint(fh)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def checkpoint_bytes(state: Mapping[str, np.ndarray]) -> bytes:
    buf = _io.BytesIO()
    write_checkpoint(buf, state)
    return buf.getvalue()
