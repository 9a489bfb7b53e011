"""EMAECKPT binary checkpoints.

Layout (little-endian)::

    b"EMAECKPT"  version:u32 (=1)
    parameter table
    optimizer table
    step:u64  config_hash:u64

A table is ``count:u32`` followed by ``count`` entries of
``name_len:u32, name (utf-8), rank:u32, dims:u32*rank, payload:f64*prod(dims)``.
Entry order is preserved, so load-then-save reproduces the file byte for byte.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"EMAECKPT"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass(eq=False)
class Checkpoint:
    params: dict
    optimizer: dict = field(default_factory=dict)
    step: int = 0
    config_hash: int = 0


def _pack_table(table: dict) -> bytes:
    out = [_U32.pack(len(table))]
    for name, arr in table.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(_U32.pack(len(raw)))
        out.append(raw)
        out.append(_U32.pack(arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def encode(ckpt: Checkpoint) -> bytes:
    return b"".join([
        MAGIC,
        _U32.pack(VERSION),
        _pack_table(ckpt.params),
        _pack_table(ckpt.optimizer),
        _U64.pack(ckpt.step),
        _U64.pack(ckpt.config_hash),
    ])


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"truncated checkpoint while reading {what}: need {n} bytes, {len(self.blob) - self.pos} left",
                self.pos,
            )
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what):
        return _U64.unpack(self.take(8, what))[0]

    def table(self, label):
        out = {}
        for _ in range(self.u32(f"{label} entry count")):
            name = self.take(self.u32("name length"), "name").decode("utf-8")
            rank = self.u32(f"rank of {name}")
            dims = struct.unpack(f"<{rank}I", self.take(4 * rank, f"dims of {name}"))
            count = int(np.prod(dims, dtype=np.int64))
            payload = self.take(8 * count, f"payload of {name}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        return out


def decode(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    magic = r.take(8, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    params = r.table("parameter")
    opt = r.table("optimizer")
    step = r.u64("step")
    chash = r.u64("config hash")
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes after footer", r.pos)
    return Checkpoint(params, opt, step, chash)


def save(path, ckpt: Checkpoint):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
