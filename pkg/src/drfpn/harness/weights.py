"""Binary weight files.

Layout (little-endian): magic ``DRFW``, u32 version, u32 tensor count, then per
tensor: u16 name length, UTF-8 name, u8 rank (always 4), four u32 dims, u8 dtype
code (1 = float32, 2 = float64), raw values in C order.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from ..autograd import Tensor
from ..errors import FormatError
from ..params import ModelParams

MAGIC = b"DRFW"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def encode(params: Mapping[str, Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        data = np.asarray(t.data)
        dtype = data.dtype.newbyteorder("<")
        if dtype not in DTYPE_CODES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {data.dtype}")
        if data.ndim != 4:
            raise FormatError(f"tensor {name!r}: rank {data.ndim}, expected 4")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]!r}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B4IB", 4, *data.shape, DTYPE_CODES[dtype]))
        parts.append(np.ascontiguousarray(data, dtype=dtype).tobytes())
    return b"".join(parts)


def atomic_write(path: str | Path, payload: bytes | str) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_weights(params: Mapping[str, Tensor], path: str | Path) -> None:
    atomic_write(path, encode(params))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(f"file truncated while reading {what} (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, expected: Mapping[str, tuple[int, ...]] | None = None, seed: int = 0) -> ModelParams:
    r = _Reader(buf)
    magic = bytes(r.take(4, "magic"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    out = ModelParams(seed)
    for index in range(count):
        (name_len,) = r.unpack("<H", f"name length of tensor #{index}")
        try:
            name = bytes(r.take(name_len, f"name of tensor #{index}")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor #{index}: name is not UTF-8") from exc
        rank, *dims, code = r.unpack("<B4IB", f"header of tensor {name!r}")
        if rank != 4:
            raise FormatError(f"tensor {name!r}: rank {rank}, expected 4")
        if code not in CODE_DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        shape = tuple(dims)
        if expected is not None:
            if name not in expected:
                raise FormatError(f"tensor {name!r} is not part of the expected registry")
            if tuple(expected[name]) != shape:
                raise FormatError(f"tensor {name!r} has shape {shape}, expected {tuple(expected[name])}")
        if name in out:
            raise FormatError(f"tensor {name!r} appears twice")
        dtype = CODE_DTYPES[code]
        raw = r.take(int(np.prod(shape)) * dtype.itemsize, f"values of tensor {name!r}")
        out.add(name, np.frombuffer(raw, dtype=dtype).reshape(shape).copy())
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after the last tensor")
    if expected is not None:
        missing = [n for n in expected if n not in out]
        if missing:
            raise FormatError(f"tensor {missing[0]!r} is missing ({len(missing)} missing in total)")
    return out


def load_weights(path: str | Path, expected: Mapping[str, tuple[int, ...]] | None = None) -> ModelParams:
    """Read a weight file; with ``expected`` every tensor name and shape is validated."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read weight file {path}: {exc}") from exc
    return decode(buf, expected)
