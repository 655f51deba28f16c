"""Exact top-k L2 nearest-neighbor search over an embedding matrix.

Distances are accumulated in float64 so results do not drift with
summation order, and exact ties are broken by ascending doc_id, which
keeps rankings reproducible when near-duplicate images produce equal
distances. Run files are JSON Lines, one ranked list per query:

    {"query_id": ..., "model_id": ..., "direction": "asc"|"desc",
     "entries": [{"doc_id": ..., "score": ..., "rank": ...}, ...]}
"""

from __future__ import annotations

import enum
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from fusecap.store import EmbeddingMatrix


class Direction(enum.Enum):
    """Whether smaller or larger scores are better."""

    ASCENDING_BETTER = "asc"
    DESCENDING_BETTER = "desc"


class RankedListError(ValueError):
    """A ranked list violates its invariants."""


@dataclass(frozen=True)
class RankedEntry:
    doc_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class RankedList:
    """An ordered candidate list for one query.

    Ranks are exactly 1..len(entries), scores are monotone in rank
    according to ``direction``, and doc_ids are unique.
    """

    query_id: str
    model_id: str
    entries: tuple[RankedEntry, ...]
    direction: Direction

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        prev_score: float | None = None
        for i, entry in enumerate(self.entries):
            if entry.rank != i + 1:
                raise RankedListError(
                    f"query {self.query_id!r}: rank {entry.rank} at position {i + 1}"
                )
            if entry.doc_id in seen:
                raise RankedListError(
                    f"query {self.query_id!r}: duplicate doc_id {entry.doc_id!r}"
                )
            seen.add(entry.doc_id)
            if not math.isfinite(entry.score):
                raise RankedListError(
                    f"query {self.query_id!r}: non-finite score for {entry.doc_id!r}"
                )
            if prev_score is not None:
                if self.direction is Direction.ASCENDING_BETTER and entry.score < prev_score:
                    raise RankedListError(
                        f"query {self.query_id!r}: scores not non-decreasing at rank {i + 1}"
                    )
                if self.direction is Direction.DESCENDING_BETTER and entry.score > prev_score:
                    raise RankedListError(
                        f"query {self.query_id!r}: scores not non-increasing at rank {i + 1}"
                    )
            prev_score = entry.score

    def doc_ids(self) -> tuple[str, ...]:
        return tuple(e.doc_id for e in self.entries)

    def truncated(self, depth: int) -> "RankedList":
        """Prefix of the list; a prefix of a valid ranking is still valid."""
        if depth >= len(self.entries):
            return self
        return RankedList(self.query_id, self.model_id, self.entries[:depth], self.direction)

    def to_json_obj(self) -> dict:
        return {
            "query_id": self.query_id,
            "model_id": self.model_id,
            "direction": self.direction.value,
            "entries": [
                {"doc_id": e.doc_id, "score": e.score, "rank": e.rank} for e in self.entries
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RankedList":
        try:
            direction = Direction(obj["direction"])
            entries = tuple(
                RankedEntry(doc_id=e["doc_id"], score=float(e["score"]), rank=int(e["rank"]))
                for e in obj["entries"]
            )
            return cls(
                query_id=obj["query_id"],
                model_id=obj["model_id"],
                entries=entries,
                direction=direction,
            )
        except (KeyError, TypeError) as exc:
            raise RankedListError(f"malformed ranked-list object: {exc}") from exc


def l2_distance(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Euclidean distance, accumulated in float64."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1:
        raise ValueError(f"dimension mismatch: {av.shape} vs {bv.shape}")
    if not (np.isfinite(av).all() and np.isfinite(bv).all()):
        raise ValueError("vectors must be finite")
    diff = av - bv
    return float(np.sqrt(np.dot(diff, diff)))


def top_k(
    query: Sequence[float] | np.ndarray,
    matrix: EmbeddingMatrix,
    k: int,
    query_id: str = "",
) -> RankedList:
    """The min(k, count) rows nearest to ``query`` by L2 distance.

    Exact ties are broken by ascending doc_id. Scores are the distances
    (ascending-better).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if matrix.count == 0:
        raise ValueError("empty matrix")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != matrix.dim:
        raise ValueError(f"dimension mismatch: query has {q.shape[0]}, matrix has {matrix.dim}")
    if not np.isfinite(q).all():
        raise ValueError("query vector must be finite")
    diff = matrix.rows.astype(np.float64) - q
    dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    ids_arr = np.asarray(matrix.ids)
    order = np.lexsort((ids_arr, dists))[: min(k, matrix.count)]
    entries = tuple(
        RankedEntry(doc_id=str(ids_arr[i]), score=float(dists[i]), rank=pos + 1)
        for pos, i in enumerate(order)
    )
    return RankedList(
        query_id=query_id, model_id=matrix.model_id, entries=entries,
        direction=Direction.ASCENDING_BETTER,
    )


def batch_search(
    queries: EmbeddingMatrix,
    db: EmbeddingMatrix,
    k: int,
    threads: int = 1,
) -> list[RankedList]:
    """Run top_k for every query row; output order matches query order.

    Queries may be evaluated in parallel; each per-query computation is
    independent, so results are identical for any thread count.
    """
    if queries.dim != db.dim:
        raise ValueError(f"dimension mismatch: queries dim {queries.dim}, db dim {db.dim}")

    def one(i: int) -> RankedList:
        return top_k(queries.rows[i], db, k, query_id=queries.ids[i])

    if queries.count == 0:
        return []
    if threads <= 1:
        return [one(i) for i in range(queries.count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(queries.count)))


def write_run(lists: Iterable[RankedList], path: str | os.PathLike[str]) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            for ranked in lists:
                fh.write(json.dumps(ranked.to_json_obj(), sort_keys=True))
                fh.write("\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_run(path: str | os.PathLike[str]) -> list[RankedList]:
    out: list[RankedList] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RankedListError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            out.append(RankedList.from_json_obj(obj))
    return out
