"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DPDE"  u32 version  u64 step
    u32 len + bytes        RNG / stream state (JSON)
    u32 count + tensors    parameters
    u32 count + (name, tensor m, tensor v)   Adam moments
    u32 crc32 of everything above

A tensor record is ``u16 name_len, name, u8 dtype_code, u8 ndim,
u32 dims[ndim], raw little-endian payload``; moment records omit the name
on the two tensors.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .errors import CorruptionError, FormatError, ShapeError, VersionError

MAGIC = b"DPDE"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


@dataclass
class Checkpoint:
    step: int
    rng_state: bytes
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    version: int = VERSION

    def apply_to(self, store):
        """Copy tensors into a :class:`ParamStore`, checking names and shapes."""
        for name, t in store.items():
            if name not in self.tensors:
                raise ShapeError(f"checkpoint has no tensor {name!r} required by the network")
            src = self.tensors[name]
            if src.shape != t.shape:
                raise ShapeError(f"tensor {name!r}: checkpoint shape {src.shape} != network shape {t.shape}")
        extra = sorted(set(self.tensors) - set(store.tensors))
        if extra:
            raise ShapeError(f"checkpoint tensor {extra[0]!r} does not exist in the network")
        for name, t in store.items():
            t.data = self.tensors[name].astype(t.dtype, copy=True)
        return store


def _pack_array(buf: bytearray, arr: np.ndarray):
    arr = np.asarray(arr)
    if arr.dtype not in CODE_OF:
        raise FormatError(f"unsupported dtype {arr.dtype} in checkpoint")
    buf += struct.pack("<BB", CODE_OF[arr.dtype], arr.ndim)
    buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def _pack_name(buf: bytearray, name: str):
    raw = name.encode("utf-8")
    buf += struct.pack("<H", len(raw))
    buf += raw


def encode(ckpt: Checkpoint) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<IQ", ckpt.version, ckpt.step)
    buf += struct.pack("<I", len(ckpt.rng_state))
    buf += ckpt.rng_state
    buf += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        _pack_name(buf, name)
        _pack_array(buf, arr)
    buf += struct.pack("<I", len(ckpt.moments))
    for name, (m, v) in ckpt.moments.items():
        _pack_name(buf, name)
        _pack_array(buf, m)
        _pack_array(buf, v)
    buf += struct.pack("<I", zlib.crc32(buf))
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def array(self) -> np.ndarray:
        code, ndim = self.unpack("<BB")
        if code not in DTYPE_CODES:
            raise CorruptionError(f"unknown dtype code {code} at byte {self.pos}")
        dims = self.unpack(f"<{ndim}I")
        dtype = DTYPE_CODES[code]
        count = int(np.prod(dims)) if ndim else 1
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def decode(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise FormatError(f"not a checkpoint: magic {data[:4]!r} != {MAGIC!r}")
    if len(data) < 4 + 12:
        raise CorruptionError("checkpoint truncated inside the header")
    version, step = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads version {VERSION}")
    if len(data) < 16 + 4 + 4:
        raise CorruptionError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.pos = 16
    (n_rng,) = r.unpack("<I")
    rng_state = r.take(n_rng)
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        name = r.name()
        tensors[name] = r.array()
    (n_moments,) = r.unpack("<I")
    moments = {}
    for _ in range(n_moments):
        name = r.name()
        moments[name] = (r.array(), r.array())
    if r.pos != len(body):
        raise CorruptionError(f"checkpoint has {len(body) - r.pos} unexpected trailing bytes")
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint checksum mismatch")
    return Checkpoint(step, rng_state, tensors, moments, version)


def save_checkpoint(path, store, step: int, rng_state: bytes = b"", moments=None):
    ckpt = Checkpoint(
        step=int(step),
        rng_state=bytes(rng_state),
        tensors={n: t.data for n, t in store.items()},
        moments={n: (mv[0], mv[1]) for n, mv in (moments or {}).items()},
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
