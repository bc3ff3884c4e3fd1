"""Binary checkpoint container ("VARC").

Layout, all little-endian::

    magic "VARC" | version u32 | module tag u8
    K u32 | K x (h u32, w u32)
    record count u32
    per record: name length u16, UTF-8 name, dtype u8, ndim u8, dims u32 x ndim, payload

dtype 0 is 32-bit IEEE-754 float; dtype 1 is 32-bit signed integer (token
maps and integer config values).
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VARC"
VERSION = 1

TAG_GENERIC = 0
TAG_TOKENIZER = 1
TAG_TRANSFORMER = 2
TAG_TOKENS = 3

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointVersionError(CheckpointFormatError):
    pass


@dataclass
class Checkpoint:
    module_tag: int
    schedule: tuple[tuple[int, int], ...]
    records: dict[str, np.ndarray] = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.records.items() if k.startswith(prefix)}


def _dtype_code(arr: np.ndarray) -> int:
    if np.issubdtype(arr.dtype, np.floating):
        return 0
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return 1
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<IB", VERSION, ckpt.module_tag)
    out += struct.pack("<I", len(ckpt.schedule))
    for h, w in ckpt.schedule:
        out += struct.pack("<II", h, w)
    out += struct.pack("<I", len(ckpt.records))
    for name, arr in ckpt.records.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.raw):
            raise CheckpointFormatError(f"truncated while reading {what}", self.off)
        vals = struct.unpack_from(fmt, self.raw, self.off)
        self.off += size
        return vals

    def bytes(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointFormatError(f"truncated while reading {what}", self.off)
        b = self.raw[self.off:self.off + n]
        self.off += n
        return b


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.bytes(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    (version,) = r.take("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}", 4)
    (tag,) = r.take("<B", "module tag")
    (k,) = r.take("<I", "schedule length")
    schedule = tuple(r.take("<II", f"scale {i}") for i in range(k))
    (count,) = r.take("<I", "record count")
    records: dict[str, np.ndarray] = {}
    for i in range(count):
        start = r.off
        (nlen,) = r.take("<H", f"record {i} name length")
        try:
            name = r.bytes(nlen, f"record {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"record {i} name is not UTF-8", start) from None
        code, ndim = r.take("<BB", f"record {name!r} header")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"record {name!r} has unknown dtype {code}", r.off - 2)
        dims = r.take(f"<{ndim}I", f"record {name!r} dims")
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        payload = r.bytes(nbytes, f"record {name!r} payload")
        if name in records:
            raise CheckpointFormatError(f"duplicate record {name!r}", start)
        records[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    if r.off != len(raw):
        raise CheckpointFormatError("trailing bytes after last record", r.off)
    return Checkpoint(tag, schedule, records)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a crash never leaves a half-written file at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expect_tag: int | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = decode_checkpoint(path.read_bytes())
    if expect_tag is not None and ckpt.module_tag != expect_tag:
        raise CheckpointFormatError(f"module tag {ckpt.module_tag}, expected {expect_tag}", 8)
    return ckpt
