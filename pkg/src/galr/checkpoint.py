"""Binary parameter checkpoints.

Layout (little-endian):

    magic "GALRCK1"
    u16 length + registry version (utf-8)
    u32 length + config JSON (utf-8, sorted keys)
    u32 record count
    records, sorted by name:
        u16 length + name (utf-8)
        u8 ndim, then ndim x u32 dims
        float32 values, row-major
    u32 CRC32 of every preceding byte

Values are stored in float32 regardless of in-memory dtype. Loading
refuses files whose registry version differs from this build's, since
decoder slot indexing depends on the registry ordering.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .registry import REGISTRY_VERSION

_MAGIC = b"GALRCK1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict) -> None:
    blob = bytearray()
    blob += _MAGIC
    ver = REGISTRY_VERSION.encode("utf-8")
    blob += struct.pack("<H", len(ver)) + ver
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg)) + cfg
    blob += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nm = name.encode("utf-8")
        blob += struct.pack("<H", len(nm)) + nm
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 4 or blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file corrupted")

    off = len(_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    (vlen,) = take("<H")
    version = body[off : off + vlen].decode("utf-8")
    off += vlen
    if version != REGISTRY_VERSION:
        raise CheckpointError(
            f"{path}: registry version mismatch: checkpoint has {version!r}, "
            f"this build uses {REGISTRY_VERSION!r}"
        )
    (clen,) = take("<I")
    config = json.loads(body[off : off + clen].decode("utf-8"))
    off += clen
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = body[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = take("<B")
        shape = tuple(take("<" + "I" * ndim)) if ndim else ()
        n_vals = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=n_vals, offset=off).reshape(shape)
        off += n_vals * 4
        params[name] = arr.copy()
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes in checkpoint")
    return params, config
