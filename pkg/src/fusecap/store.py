"""Per-encoder embedding matrices and their on-disk binary format.

File layout (little-endian throughout):

    bytes 0-3   magic ``ZSE1``
    u32         version (currently 1)
    u32         dim
    u64         count
    u16 + utf8  model_id
    u32         flags (bit 0 = rows are unit L2 normalized)
    id table    count entries of (u16 byte-length + utf8 id)
    payload     count x dim float32 values, row-major, no padding

The payload length must equal exactly count*dim*4; anything shorter is a
truncated file, anything longer has trailing garbage. Loaded matrices are
immutable (the numpy buffer is marked read-only), so concurrent readers
are safe.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"ZSE1"
VERSION = 1
FLAG_NORMALIZED = 0x1
_KNOWN_FLAGS = FLAG_NORMALIZED

# Row norms may drift from exactly 1.0 under float32; this is the widest
# deviation a matrix flagged as normalized is allowed to carry.
NORM_TOLERANCE = 1e-3


class MatrixValidationError(ValueError):
    """An EmbeddingMatrix violates one of its invariants."""


class EmbeddingFileError(ValueError):
    """An embedding file is malformed (bad magic, truncation, ...)."""


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """One encoder's embeddings plus the id table binding rows to image ids.

    ``rows`` is coerced to a C-contiguous read-only float32 array of shape
    (count, dim). Ids are arbitrary UTF-8 strings, unique, one per row.
    """

    model_id: str
    ids: tuple[str, ...]
    rows: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        # Copy rather than alias so freezing the buffer never mutates the
        # caller's array.
        rows = np.array(self.rows, dtype=np.float32, order="C", copy=True)
        if rows.ndim != 2:
            raise MatrixValidationError(f"rows must be a 2-d matrix, got shape {rows.shape}")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "ids", tuple(self.ids))
        self.validate()

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def validate(self) -> None:
        """Raise MatrixValidationError unless every invariant holds."""
        if not self.model_id:
            raise MatrixValidationError("model_id must be non-empty")
        if self.dim < 1:
            raise MatrixValidationError("dim must be >= 1")
        if len(self.ids) != self.count:
            raise MatrixValidationError(
                f"id table has {len(self.ids)} entries for {self.count} rows"
            )
        seen: set[str] = set()
        for doc_id in self.ids:
            if doc_id in seen:
                raise MatrixValidationError(f"duplicate id: {doc_id!r}")
            seen.add(doc_id)
        if self.count and not np.isfinite(self.rows).all():
            raise MatrixValidationError("rows contain non-finite values")
        if self.normalized and self.count:
            norms = np.linalg.norm(self.rows.astype(np.float64), axis=1)
            worst = int(np.argmax(np.abs(norms - 1.0)))
            if abs(norms[worst] - 1.0) > NORM_TOLERANCE:
                raise MatrixValidationError(
                    f"normalized flag set but row {self.ids[worst]!r} has norm {norms[worst]:.6f}"
                )

    def row_for(self, doc_id: str) -> np.ndarray:
        idx = self.ids.index(doc_id)
        return self.rows[idx]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.model_id == other.model_id
            and self.ids == other.ids
            and self.normalized == other.normalized
            and self.rows.shape == other.rows.shape
            and self.rows.tobytes() == other.rows.tobytes()
        )

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return (
            f"EmbeddingMatrix(model_id={self.model_id!r}, dim={self.dim}, "
            f"count={self.count}, normalized={self.normalized})"
        )


def matrix_from_rows(
    model_id: str,
    ids: Sequence[str],
    rows: np.ndarray | Sequence[Sequence[float]],
    normalized: bool = False,
    dim: int | None = None,
) -> EmbeddingMatrix:
    """Build a validated matrix from any array-like row data.

    ``dim`` is only needed to disambiguate an empty matrix.
    """
    arr = np.asarray(rows, dtype=np.float32)
    if arr.ndim == 1:
        if arr.size == 0:
            if dim is None:
                raise MatrixValidationError("dim required to build an empty matrix")
            arr = arr.reshape(0, dim)
        else:
            arr = arr.reshape(len(ids), -1)
    return EmbeddingMatrix(model_id=model_id, ids=tuple(ids), rows=arr, normalized=normalized)


def normalize_rows(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    """Return a copy with each row scaled to unit L2 length.

    Idempotent within float32 round-off. Zero-norm rows cannot be scaled
    and are reported by id.
    """
    if matrix.count == 0:
        return EmbeddingMatrix(matrix.model_id, matrix.ids, matrix.rows.copy(), normalized=True)
    rows64 = matrix.rows.astype(np.float64)
    norms = np.linalg.norm(rows64, axis=1)
    zero = np.where(norms == 0.0)[0]
    if zero.size:
        raise MatrixValidationError(f"zero-norm row: {matrix.ids[int(zero[0])]}")
    scaled = (rows64 / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(matrix.model_id, matrix.ids, scaled, normalized=True)


def _write_str(fh: BinaryIO, value: str, what: str) -> None:
    data = value.encode("utf-8")
    if len(data) > 0xFFFF:
        raise MatrixValidationError(f"{what} longer than 65535 bytes: {value[:32]!r}...")
    fh.write(struct.pack("<H", len(data)))
    fh.write(data)


def write_embeddings(matrix: EmbeddingMatrix, path: str | os.PathLike[str]) -> None:
    """Persist a matrix, byte-exact under reread.

    Validates first and writes through a temp file + rename so a failed
    write never leaves a partial file behind.
    """
    matrix.validate()
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, matrix.dim))
            fh.write(struct.pack("<Q", matrix.count))
            _write_str(fh, matrix.model_id, "model_id")
            flags = FLAG_NORMALIZED if matrix.normalized else 0
            fh.write(struct.pack("<I", flags))
            for doc_id in matrix.ids:
                _write_str(fh, doc_id, "id")
            fh.write(np.ascontiguousarray(matrix.rows, dtype="<f4").tobytes())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class _Reader:
    """Cursor over the file bytes with truncation-aware reads."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise EmbeddingFileError(f"truncated payload: file ends inside {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def utf8(self, what: str) -> str:
        length = self.u16(what)
        raw = self.take(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EmbeddingFileError(f"invalid UTF-8 in {what}") from exc

    def remaining(self) -> int:
        return len(self.data) - self.pos


def load_embeddings(path: str | os.PathLike[str]) -> EmbeddingMatrix:
    """Load and validate an embedding file written by :func:`write_embeddings`."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise EmbeddingFileError(f"bad magic: {magic!r}")
    version = r.u32("version")
    if version != VERSION:
        raise EmbeddingFileError(f"unsupported version: {version}")
    dim = r.u32("dim")
    if dim < 1:
        raise EmbeddingFileError(f"dim must be >= 1, got {dim}")
    count = r.u64("count")
    model_id = r.utf8("model_id")
    flags = r.u32("flags")
    if flags & ~_KNOWN_FLAGS:
        raise EmbeddingFileError(f"unsupported flags: 0x{flags:x}")
    ids = tuple(r.utf8("id table") for _ in range(count))
    payload_len = count * dim * 4
    if r.remaining() < payload_len:
        raise EmbeddingFileError(
            f"truncated payload: expected {payload_len} bytes, found {r.remaining()}"
        )
    if r.remaining() > payload_len:
        raise EmbeddingFileError(
            f"trailing bytes: payload should be {payload_len} bytes, found {r.remaining()}"
        )
    raw = r.take(payload_len, "payload")
    rows = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
    if count and not np.isfinite(rows).all():
        raise EmbeddingFileError("payload contains non-finite values")
    try:
        return EmbeddingMatrix(
            model_id=model_id,
            ids=ids,
            rows=rows,
            normalized=bool(flags & FLAG_NORMALIZED),
        )
    except MatrixValidationError as exc:
        raise EmbeddingFileError(str(exc)) from exc
