"""Fuse per-model ranked lists into one final ranking.

Two methods:

* weighted ensemble - the fused score of a candidate is the weighted sum
  of its per-model L2 distances; the lowest sum wins. Weights are
  normalized to sum to 1 before use, which leaves the ordering unchanged
  (scores only scale).
* reciprocal rank fusion - the fused score is the sum over rankings of
  1/(k + rank); the highest sum wins. Ranks are 1-based, so k=0 is valid.

All ties are broken by ascending doc_id so that near-duplicate candidates
with equal scores fuse to the same output on every run.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from fusecap.search import Direction, RankedEntry, RankedList


class FusionError(ValueError):
    """Invalid fusion configuration or incompatible input lists."""


class FusionMethod(enum.Enum):
    WEIGHTED_ENSEMBLE = "we"
    RRF = "rrf"


FUSED_MODEL_ID = "fused"


@dataclass(frozen=True)
class FusionConfig:
    """Fusion method plus its knobs.

    ``depth`` is the candidate-list length consumed per model. ``weights``
    and ``per_model_minmax`` only matter for the weighted ensemble;
    ``rrf_k`` only for RRF.
    """

    method: FusionMethod
    depth: int
    weights: Mapping[str, float] = field(default_factory=dict)
    rrf_k: float = 0.0
    per_model_minmax: bool = False

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise FusionError(f"depth must be >= 1, got {self.depth}")
        if self.rrf_k < 0 or not math.isfinite(self.rrf_k):
            raise FusionError(f"rrf_k must be finite and >= 0, got {self.rrf_k}")
        for model_id, w in self.weights.items():
            if not math.isfinite(w):
                raise FusionError(f"weight for {model_id!r} is not finite")
            if w < 0:
                raise FusionError(f"negative weight for {model_id!r}: {w}")
        if self.method is FusionMethod.WEIGHTED_ENSEMBLE:
            if not self.weights:
                raise FusionError("weighted ensemble requires per-model weights")
            if not any(w > 0 for w in self.weights.values()):
                raise FusionError("at least one weight must be strictly positive")

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "FusionConfig":
        try:
            method = FusionMethod(obj["method"])
            depth = int(obj["depth"])
        except KeyError as exc:
            raise FusionError(f"fusion config missing field: {exc}") from exc
        except ValueError as exc:
            raise FusionError(f"unknown fusion method: {obj.get('method')!r}") from exc
        weights = {str(k): float(v) for k, v in dict(obj.get("weights", {})).items()}
        return cls(
            method=method,
            depth=depth,
            weights=weights,
            rrf_k=float(obj.get("rrf_k", 0.0)),
            per_model_minmax=bool(obj.get("per_model_minmax", False)),
        )


def load_fusion_config(path: str | os.PathLike[str]) -> FusionConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FusionError(f"{path}: invalid JSON: {exc}") from exc
    return FusionConfig.from_json_obj(obj)


def normalize_weights(raw: Mapping[str, float]) -> dict[str, float]:
    """Scale each weight proportionally so they sum to 1."""
    if not raw:
        raise FusionError("no weights given")
    for model_id, w in raw.items():
        if not math.isfinite(w):
            raise FusionError(f"weight for {model_id!r} is not finite")
        if w < 0:
            raise FusionError(f"negative weight for {model_id!r}: {w}")
    total = sum(raw.values())
    if total <= 0:
        raise FusionError("all weights are zero")
    return {model_id: w / total for model_id, w in raw.items()}


def _check_shared_query(lists: Sequence[RankedList]) -> str:
    query_ids = {ranked.query_id for ranked in lists}
    if len(query_ids) != 1:
        raise FusionError(f"lists disagree on query_id: {sorted(query_ids)}")
    return lists[0].query_id


def _minmax_map(scores: dict[str, float]) -> dict[str, float]:
    lo = min(scores.values())
    hi = max(scores.values())
    if hi == lo:
        # Degenerate range: every candidate is equally far; map all to 0.
        return {doc: 0.0 for doc in scores}
    span = hi - lo
    return {doc: (s - lo) / span for doc, s in scores.items()}


def weighted_ensemble(
    lists: Mapping[str, RankedList],
    weights: Mapping[str, float],
    depth: int,
    per_model_minmax: bool = False,
) -> RankedList:
    """Fuse by weighted sum of per-model distances; lowest sum is rank 1.

    Candidates are the union of each model's top-``depth`` entries. A
    candidate absent from one model's consumed list is scored with that
    model's depth-boundary distance (the deepest consumed distance, a
    lower bound on the true one); at depth >= database size the rule is
    inert because every candidate appears everywhere.
    """
    if not lists:
        raise FusionError("no input lists")
    if set(lists) != set(weights):
        raise FusionError(
            f"weights cover {sorted(weights)} but lists cover {sorted(lists)}"
        )
    if depth < 1:
        raise FusionError(f"depth must be >= 1, got {depth}")
    for model_id, ranked in lists.items():
        if not ranked.entries:
            raise FusionError(f"model {model_id!r} contributed an empty list")
        if ranked.direction is not Direction.ASCENDING_BETTER:
            raise FusionError(
                f"model {model_id!r} list is not ascending-better; "
                "weighted ensemble sums distances"
            )
    query_id = _check_shared_query(list(lists.values()))

    per_model: dict[str, dict[str, float]] = {}
    boundary: dict[str, float] = {}
    for model_id, ranked in lists.items():
        consumed = ranked.entries[: min(depth, len(ranked.entries))]
        scores = {e.doc_id: e.score for e in consumed}
        if per_model_minmax:
            scores = _minmax_map(scores)
        per_model[model_id] = scores
        boundary[model_id] = scores[consumed[-1].doc_id]

    candidates = sorted(set().union(*(m.keys() for m in per_model.values())))
    model_order = sorted(per_model)  # accumulation order independent of dict order
    fused: list[tuple[float, str]] = []
    for doc_id in candidates:
        total = 0.0
        for model_id in model_order:
            d = per_model[model_id].get(doc_id, boundary[model_id])
            total += weights[model_id] * d
        fused.append((total, doc_id))
    fused.sort()
    entries = tuple(
        RankedEntry(doc_id=doc_id, score=score, rank=pos + 1)
        for pos, (score, doc_id) in enumerate(fused)
    )
    return RankedList(
        query_id=query_id, model_id=FUSED_MODEL_ID, entries=entries,
        direction=Direction.ASCENDING_BETTER,
    )


def rrf(lists: Sequence[RankedList], k: float = 0.0) -> RankedList:
    """Reciprocal rank fusion: score(d) = sum over lists of 1/(k + rank).

    Lists not containing a document contribute 0 for it. The highest
    fused score is rank 1. Input order of the lists does not matter.
    """
    if not lists:
        raise FusionError("no input lists")
    if k < 0 or not math.isfinite(k):
        raise FusionError(f"rrf k must be finite and >= 0, got {k}")
    query_id = _check_shared_query(lists)

    contributions: dict[str, list[float]] = {}
    for ranked in lists:
        for entry in ranked.entries:
            # rank >= 1 and k >= 0, so the denominator is never zero
            contributions.setdefault(entry.doc_id, []).append(1.0 / (k + entry.rank))
    # fsum is exactly rounded, so the score is identical however the input
    # lists were ordered - the permutation-invariance contract.
    scores = {doc_id: math.fsum(values) for doc_id, values in contributions.items()}
    fused = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    entries = tuple(
        RankedEntry(doc_id=doc_id, score=score, rank=pos + 1)
        for pos, (doc_id, score) in enumerate(fused)
    )
    return RankedList(
        query_id=query_id, model_id=FUSED_MODEL_ID, entries=entries,
        direction=Direction.DESCENDING_BETTER,
    )


def fuse(config: FusionConfig, lists: Mapping[str, RankedList]) -> RankedList:
    """Dispatch to the configured fusion method.

    For the weighted ensemble the raw config weights are normalized to
    sum to 1 first. For RRF each list is truncated to the configured
    depth before fusing; model order is fixed by sorting model_ids
    (RRF is order-invariant, this just keeps runs reproducible).
    """
    if not lists:
        raise FusionError("no input lists")
    if config.method is FusionMethod.WEIGHTED_ENSEMBLE:
        return weighted_ensemble(
            lists,
            normalize_weights(config.weights),
            config.depth,
            per_model_minmax=config.per_model_minmax,
        )
    truncated = [lists[model_id].truncated(config.depth) for model_id in sorted(lists)]
    return rrf(truncated, config.rrf_k)
