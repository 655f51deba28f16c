"""Writer (and a reader for self-tests) of the engine's embedding format.

Layout, little-endian: magic "ZSE1", u32 version=1, u32 dim, u64 count,
u16-length-prefixed UTF-8 model_id, u32 flags (bit 0 = normalized), then
count id entries (u16 length + UTF-8), then count*dim float32 row-major.

This is a second, independent implementation of the shared wire format;
the engine's own validator is the compatibility oracle in tests.
"""

from __future__ import annotations

import os
import struct
from typing import Sequence

import numpy as np

MAGIC = b"ZSE1"
VERSION = 1
FLAG_NORMALIZED = 0x1


class FormatError(ValueError):
    pass


def _encode_str(value: str, what: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"{what} too long: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def write_embedding_file(
    path: str | os.PathLike[str],
    model_id: str,
    ids: Sequence[str],
    rows: np.ndarray,
    normalized: bool = False,
) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise FormatError(f"rows must be 2-d, got shape {rows.shape}")
    count, dim = rows.shape
    if dim < 1:
        raise FormatError("dim must be >= 1")
    if len(ids) != count:
        raise FormatError(f"{len(ids)} ids for {count} rows")
    if len(set(ids)) != count:
        raise FormatError("duplicate ids")
    if count and not np.isfinite(rows).all():
        raise FormatError("rows contain non-finite values")
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIQ", VERSION, dim, count))
            fh.write(_encode_str(model_id, "model_id"))
            fh.write(struct.pack("<I", FLAG_NORMALIZED if normalized else 0))
            for doc_id in ids:
                fh.write(_encode_str(doc_id, "id"))
            fh.write(rows.tobytes())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_embedding_file(path: str | os.PathLike[str]):
    """Minimal reader used by this package's own tests."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("unexpected end of file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad magic")
    version, dim = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    (count,) = struct.unpack("<Q", take(8))
    (mlen,) = struct.unpack("<H", take(2))
    model_id = take(mlen).decode("utf-8")
    (flags,) = struct.unpack("<I", take(4))
    ids = []
    for _ in range(count):
        (ilen,) = struct.unpack("<H", take(2))
        ids.append(take(ilen).decode("utf-8"))
    rows = np.frombuffer(take(count * dim * 4), dtype="<f4").reshape(count, dim).copy()
    if pos != len(data):
        raise FormatError("trailing bytes")
    return model_id, ids, rows, bool(flags & FLAG_NORMALIZED)
