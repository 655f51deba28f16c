"""Caption scoring: CIDEr-D against references, CLIPScore against images.

CIDEr-D here is the consensus variant used by modern captioning suites:
clipped TF-IDF n-gram cosine for n = 1..4, a gaussian length penalty, and
a x10 scale, giving per-query scores in [0, 10]. Document frequencies are
computed over the reference sets of the evaluated corpus itself, counting
each query at most once per n-gram; IDF is ln(N / max(1, df)), so an
n-gram present in every query's references gets IDF 0 on a tiny corpus.
That is accepted, not smoothed.

CLIPScore is 2.5 * max(cosine, 0) over externally supplied caption/image
embedding pairs, so this module stays model-free.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from fusecap.store import EmbeddingMatrix

DEFAULT_MAX_N = 4
DEFAULT_SIGMA = 6.0
CLIPSCORE_SCALE = 2.5


class CaptionEvalError(ValueError):
    """Caption records cannot be scored as given."""


@dataclass(frozen=True)
class CaptionRecord:
    query_id: str
    candidate: str
    references: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "references", tuple(self.references))
        if not self.references:
            raise CaptionEvalError(f"query {self.query_id!r}: no references")


@dataclass(frozen=True)
class CaptionReport:
    cider: float
    clipscore: float | None
    per_query: Mapping[str, tuple[float, float | None]]
    num_records: int

    def to_json_obj(self) -> dict:
        return {
            "cider": self.cider,
            "clipscore": self.clipscore,
            "num_records": self.num_records,
            "per_query": {
                query_id: {"cider": c, "clipscore": s}
                for query_id, (c, s) in sorted(self.per_query.items())
            },
        }


def tokenize(text: str) -> list[str]:
    """Lowercase, drop everything outside letters/digits/whitespace, split."""
    kept = [ch for ch in text.lower() if ch.isalnum() or ch.isspace()]
    return "".join(kept).split()


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _tfidf(
    tokens: Sequence[str],
    n: int,
    doc_freq: Mapping[tuple, int],
    log_corpus: float,
) -> tuple[dict[tuple, float], float]:
    vec: dict[tuple, float] = {}
    norm_sq = 0.0
    for gram, tf in _ngram_counts(tokens, n).items():
        idf = log_corpus - math.log(max(1.0, doc_freq.get(gram, 0)))
        value = tf * idf
        vec[gram] = value
        norm_sq += value * value
    return vec, math.sqrt(norm_sq)


def cider_d(
    records: Sequence[CaptionRecord],
    max_n: int = DEFAULT_MAX_N,
    sigma: float = DEFAULT_SIGMA,
) -> tuple[dict[str, float], float]:
    """Per-query and corpus CIDEr-D.

    Returns (per_query scores keyed by query_id, corpus mean). Scores are
    invariant under record permutation because document frequencies only
    depend on the set of reference sets.
    """
    if not records:
        raise CaptionEvalError("empty corpus")
    seen: set[str] = set()
    for record in records:
        if record.query_id in seen:
            raise CaptionEvalError(f"duplicate query_id: {record.query_id!r}")
        seen.add(record.query_id)
        if not tokenize(record.candidate):
            raise CaptionEvalError(f"query {record.query_id!r}: candidate tokenizes empty")

    # Document frequency: number of queries whose reference set contains
    # the n-gram (a query counts once however many of its refs repeat it).
    doc_freq: Counter = Counter()
    for record in records:
        grams: set[tuple] = set()
        for ref in record.references:
            ref_tokens = tokenize(ref)
            for n in range(1, max_n + 1):
                grams.update(_ngram_counts(ref_tokens, n).keys())
        doc_freq.update(grams)
    log_corpus = math.log(len(records))

    per_query: dict[str, float] = {}
    for record in records:
        cand_tokens = tokenize(record.candidate)
        cand_vecs = [_tfidf(cand_tokens, n, doc_freq, log_corpus) for n in range(1, max_n + 1)]
        per_n = [0.0] * max_n
        for ref in record.references:
            ref_tokens = tokenize(ref)
            delta = float(len(cand_tokens) - len(ref_tokens))
            penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            for n in range(1, max_n + 1):
                cand_vec, cand_norm = cand_vecs[n - 1]
                ref_vec, ref_norm = _tfidf(ref_tokens, n, doc_freq, log_corpus)
                # CIDEr-D clipping: candidate counts cannot reward an
                # n-gram beyond its reference weight.
                overlap = sum(
                    min(value, ref_vec.get(gram, 0.0)) * ref_vec.get(gram, 0.0)
                    for gram, value in cand_vec.items()
                )
                if cand_norm > 0.0 and ref_norm > 0.0:
                    overlap /= cand_norm * ref_norm
                else:
                    overlap = 0.0
                per_n[n - 1] += overlap * penalty
        score = 10.0 * sum(per_n) / (max_n * len(record.references))
        per_query[record.query_id] = score

    # Mean in sorted-query order for reproducible float aggregation.
    corpus = sum(per_query[q] for q in sorted(per_query)) / len(per_query)
    return per_query, corpus


def clipscore(caption_embedding: np.ndarray, image_embedding: np.ndarray) -> float:
    """2.5 * max(cosine(caption, image), 0); scale-invariant in both inputs."""
    u = np.asarray(caption_embedding, dtype=np.float64).reshape(-1)
    v = np.asarray(image_embedding, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise CaptionEvalError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise CaptionEvalError("zero-norm embedding")
    cosine = float(np.dot(u, v)) / (nu * nv)
    return CLIPSCORE_SCALE * max(cosine, 0.0)


def _embedding_lookup(matrix: EmbeddingMatrix) -> dict[str, np.ndarray]:
    return {doc_id: matrix.rows[i] for i, doc_id in enumerate(matrix.ids)}


def score_captions(
    records: Sequence[CaptionRecord],
    caption_embeddings: EmbeddingMatrix | None = None,
    image_embeddings: EmbeddingMatrix | None = None,
    max_n: int = DEFAULT_MAX_N,
    sigma: float = DEFAULT_SIGMA,
) -> CaptionReport:
    """CIDEr-D always; CLIPScore when both embedding files are supplied.

    Embeddings are matched to records by query_id; a record with no
    embedding on either side is an error rather than a silent skip.
    """
    if (caption_embeddings is None) != (image_embeddings is None):
        raise CaptionEvalError(
            "clipscore needs both caption and image embeddings (or neither)"
        )
    per_cider, corpus_cider = cider_d(records, max_n=max_n, sigma=sigma)

    per_query: dict[str, tuple[float, float | None]] = {}
    corpus_clip: float | None = None
    if caption_embeddings is not None and image_embeddings is not None:
        captions = _embedding_lookup(caption_embeddings)
        images = _embedding_lookup(image_embeddings)
        clip_sum = 0.0
        for record in records:
            if record.query_id not in captions:
                raise CaptionEvalError(f"no caption embedding for {record.query_id!r}")
            if record.query_id not in images:
                raise CaptionEvalError(f"no image embedding for {record.query_id!r}")
            score = clipscore(captions[record.query_id], images[record.query_id])
            per_query[record.query_id] = (per_cider[record.query_id], score)
            clip_sum += score
        corpus_clip = clip_sum / len(records)
    else:
        per_query = {q: (c, None) for q, c in per_cider.items()}

    return CaptionReport(
        cider=corpus_cider,
        clipscore=corpus_clip,
        per_query=per_query,
        num_records=len(records),
    )


def load_caption_records(path: str | os.PathLike[str]) -> list[CaptionRecord]:
    """Read the canonical records file: {"query_id", "candidate", "references"}."""
    out: list[CaptionRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(
                    CaptionRecord(
                        query_id=obj["query_id"],
                        candidate=obj["candidate"],
                        references=tuple(obj["references"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CaptionEvalError(f"{path}:{lineno}: {exc}") from exc
    return out


def join_captions_with_references(
    captions: Iterable[Mapping],
    references: Mapping[str, Sequence[str]],
) -> list[CaptionRecord]:
    """Pair generated captions with reference captions by query_id."""
    out: list[CaptionRecord] = []
    for obj in captions:
        query_id = obj["query_id"]
        candidate = obj.get("candidate", obj.get("caption"))
        if candidate is None:
            raise CaptionEvalError(f"query {query_id!r}: no candidate caption field")
        if query_id not in references:
            raise CaptionEvalError(f"query {query_id!r}: no references")
        out.append(
            CaptionRecord(
                query_id=query_id,
                candidate=candidate,
                references=tuple(references[query_id]),
            )
        )
    return out
