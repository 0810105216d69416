"""Binary adapter checkpoints.

Layout (little-endian, no padding)::

    4s   magic      b"BLRA"
    u32  version    1
    u8   kind       0 = LoRA, 1 = Block-LoRA, 2 = Block-LoRA with frozen A_s
    u8   precision  0 = float64, 1 = float32
    u32  k, d, r, n
    payload         kind 0: A (k*r) then B (r*d)
                    kind 1/2: A_s (k*r/n) then B_1 .. B_n (each r/n*d)

All matrices are stored row-major in the declared precision.  Anything
after the payload is rejected.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .adapter import Adapter, BlockLoRAAdapter, LoRAAdapter
from .errors import FormatError, TruncatedError

MAGIC = b"BLRA"
VERSION = 1
HEADER = struct.Struct("<4sIBBIIII")

KIND_LORA = 0
KIND_BLOCK = 1
KIND_BLOCK_FROZEN_DOWN = 2

_PRECISION_DTYPE = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def _precision_tag(dtype) -> int:
    dtype = np.dtype(dtype)
    if dtype == np.float64:
        return 0
    if dtype == np.float32:
        return 1
    raise FormatError("precision", f"unsupported dtype {dtype}")


def to_bytes(ad: Adapter) -> bytes:
    k, d = ad.shape
    r, n = ad.rank, ad.blocks
    if isinstance(ad, BlockLoRAAdapter):
        kind = KIND_BLOCK_FROZEN_DOWN if ad.freeze_down else KIND_BLOCK
        mats = [ad.A_s, *ad.B_blocks]
    else:
        kind = KIND_LORA
        mats = [ad.A, ad.B]
    tag = _precision_tag(mats[0].dtype)
    dt = _PRECISION_DTYPE[tag]
    header = HEADER.pack(MAGIC, VERSION, kind, tag, k, d, r, n)
    return header + b"".join(np.ascontiguousarray(m, dtype=dt).tobytes() for m in mats)


def from_bytes(buf: bytes, scaling: float = 1.0) -> Adapter:
    if len(buf) < HEADER.size:
        raise TruncatedError(f"checkpoint truncated: {len(buf)} bytes, header needs {HEADER.size}")
    magic, version, kind, tag, k, d, r, n = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise FormatError("version", f"expected {VERSION}, got {version}")
    if kind not in (KIND_LORA, KIND_BLOCK, KIND_BLOCK_FROZEN_DOWN):
        raise FormatError("kind", f"unknown adapter kind {kind}")
    if tag not in _PRECISION_DTYPE:
        raise FormatError("precision", f"unknown precision tag {tag}")
    if min(k, d, r, n) < 1:
        raise FormatError("shape", f"non-positive dimension in k={k} d={d} r={r} n={n}")
    if r % n:
        raise FormatError("shape", f"n={n} does not divide r={r}")
    if kind == KIND_LORA and n != 1:
        raise FormatError("n", f"vanilla LoRA checkpoint must have n=1, got {n}")

    dt = _PRECISION_DTYPE[tag]
    rb = r // n
    if kind == KIND_LORA:
        shapes = [(k, r), (r, d)]
    else:
        shapes = [(k, rb)] + [(rb, d)] * n
    expected = sum(a * b for a, b in shapes) * dt.itemsize
    payload = len(buf) - HEADER.size
    if payload < expected:
        raise TruncatedError(f"checkpoint truncated: payload {payload} bytes, expected {expected}")
    if payload > expected:
        raise FormatError("payload", f"{payload - expected} trailing bytes after payload")

    mats = []
    offset = HEADER.size
    for rows, cols in shapes:
        count = rows * cols
        m = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(rows, cols)
        mats.append(m.astype(dt.newbyteorder("="), copy=True))
        offset += count * dt.itemsize

    if kind == KIND_LORA:
        return LoRAAdapter(mats[0], mats[1], scaling)
    return BlockLoRAAdapter(mats[0], mats[1:], scaling,
                            freeze_down=kind == KIND_BLOCK_FROZEN_DOWN)


def save(ad: Adapter, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ad))


def load(path: str | os.PathLike, scaling: float = 1.0) -> Adapter:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), scaling)
