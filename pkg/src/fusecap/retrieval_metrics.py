"""Retrieval evaluation: mean average precision and recall@k.

Ground truth is JSON Lines, one object per query:

    {"query_id": "...", "relevant": ["doc1", "doc2", ...]}

Queries present in ground truth but missing from the run count as zero
rather than being skipped, so dropping hard queries cannot inflate the
mean. With a single relevant document per query, AP reduces to
1/rank-of-relevant and mAP coincides with MRR.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Set

from fusecap.search import RankedList


class GroundTruthError(ValueError):
    """Malformed ground-truth data."""


class EvaluationError(ValueError):
    """A run cannot be evaluated against the given ground truth."""


@dataclass(frozen=True)
class GroundTruth:
    relevance: Mapping[str, frozenset[str]]

    def __post_init__(self) -> None:
        for query_id, relevant in self.relevance.items():
            if not relevant:
                raise GroundTruthError(f"query {query_id!r} has an empty relevant set")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, Iterable[str]]]) -> "GroundTruth":
        relevance: dict[str, frozenset[str]] = {}
        for query_id, relevant in pairs:
            if query_id in relevance:
                raise GroundTruthError(f"duplicate query_id: {query_id!r}")
            relevance[query_id] = frozenset(relevant)
        return cls(relevance=relevance)


def load_ground_truth(path: str | os.PathLike[str]) -> GroundTruth:
    pairs: list[tuple[str, list[str]]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                pairs.append((obj["query_id"], list(obj["relevant"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise GroundTruthError(f"{path}:{lineno}: {exc}") from exc
    return GroundTruth.from_pairs(pairs)


@dataclass(frozen=True)
class QueryResult:
    average_precision: float
    first_relevant_rank: int | None


@dataclass(frozen=True)
class RetrievalReport:
    map_score: float
    recall_at: Mapping[int, float]
    per_query: Mapping[str, QueryResult]
    num_queries: int

    def to_json_obj(self) -> dict:
        obj: dict = {"map": self.map_score, "num_queries": self.num_queries}
        for k in sorted(self.recall_at):
            obj[f"recall@{k}"] = self.recall_at[k]
        obj["per_query"] = {
            query_id: {
                "ap": result.average_precision,
                "first_relevant_rank": result.first_relevant_rank,
            }
            for query_id, result in sorted(self.per_query.items())
        }
        return obj


def average_precision(ranked: RankedList, relevant: Set[str]) -> float:
    """Interpolation-free AP: mean of precision at each relevant hit.

    Relevant documents never retrieved contribute 0 to the sum.
    """
    if not relevant:
        raise EvaluationError("relevant set is empty")
    hits = 0
    total = 0.0
    for entry in ranked.entries:
        if entry.doc_id in relevant:
            hits += 1
            total += hits / entry.rank
    return total / len(relevant)


def recall_at_k(ranked: RankedList, relevant: Set[str], k: int) -> float:
    """Fraction of the relevant documents appearing in the top k."""
    if not relevant:
        raise EvaluationError("relevant set is empty")
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    retrieved = {entry.doc_id for entry in ranked.entries[:k]}
    return len(retrieved & set(relevant)) / len(relevant)


def _first_relevant_rank(ranked: RankedList, relevant: Set[str]) -> int | None:
    for entry in ranked.entries:
        if entry.doc_id in relevant:
            return entry.rank
    return None


def evaluate_run(
    run: Sequence[RankedList],
    gt: GroundTruth,
    ks: Iterable[int] = (1, 10),
) -> RetrievalReport:
    """Average AP and recall@k over all ground-truth queries.

    Every run query must be judged; ground-truth queries absent from the
    run score zero. Aggregation iterates queries in sorted order so the
    floating-point sums are reproducible.
    """
    ks = sorted(set(int(k) for k in ks))
    if any(k < 1 for k in ks):
        raise EvaluationError("every k must be >= 1")
    by_query: dict[str, RankedList] = {}
    for ranked in run:
        if ranked.query_id in by_query:
            raise EvaluationError(f"duplicate query_id in run: {ranked.query_id!r}")
        by_query[ranked.query_id] = ranked
    unjudged = set(by_query) - set(gt.relevance)
    if unjudged:
        raise EvaluationError(f"run queries missing from ground truth: {sorted(unjudged)}")
    if not gt.relevance:
        raise EvaluationError("ground truth is empty")

    per_query: dict[str, QueryResult] = {}
    ap_sum = 0.0
    recall_sums = {k: 0.0 for k in ks}
    for query_id in sorted(gt.relevance):
        relevant = gt.relevance[query_id]
        ranked = by_query.get(query_id)
        if ranked is None:
            per_query[query_id] = QueryResult(0.0, None)
            continue
        ap = average_precision(ranked, relevant)
        ap_sum += ap
        for k in ks:
            recall_sums[k] += recall_at_k(ranked, relevant, k)
        per_query[query_id] = QueryResult(ap, _first_relevant_rank(ranked, relevant))

    n = len(gt.relevance)
    return RetrievalReport(
        map_score=ap_sum / n,
        recall_at={k: recall_sums[k] / n for k in ks},
        per_query=per_query,
        num_queries=n,
    )
