"""Synthetic end-to-end fixture: embeddings, catalog, ground truth, configs.

Each query embedding is a lightly perturbed copy of its own database row
in every encoder space, and the perturbation is orders of magnitude below
the separation between rows, so the nearest neighbor of query i is image
i in every model and in any fusion of them. That makes mAP exactly 1.0 by
construction, which the generator asserts before writing anything.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from fusecap import fileio
from fusecap.fusion import FusionConfig, FusionMethod
from fusecap.search import top_k
from fusecap.store import EmbeddingMatrix, write_embeddings

DEFAULT_MODELS = ("enc_a", "enc_b", "enc_c")
DEFAULT_WEIGHTS = {"enc_a": 0.5, "enc_b": 0.3, "enc_c": 0.3}
_NOISE_SCALE = 1e-3

_TOPICS = (
    ("harbor festival", "fireworks over the bay drew record crowds"),
    ("city marathon", "the winner crossed the finish line at dawn"),
    ("museum opening", "a new wing devoted to maritime history opened"),
    ("flood response", "volunteers stacked sandbags along the river"),
    ("chess tournament", "the defending champion conceded in the final round"),
    ("harvest fair", "farmers displayed prize pumpkins and cider presses"),
    ("bridge repair", "engineers inspected the cables after the storm"),
    ("choir concert", "the hall filled for an evening of winter songs"),
    ("science fair", "students demonstrated a water powered clock"),
    ("street market", "vendors opened stalls before the morning rush"),
)


@dataclass(frozen=True)
class FixturePaths:
    root: str
    pipeline_config: str


def _article_body(index: int, topic: str, detail: str) -> str:
    return (
        f"The {topic} took place this week. According to organizers, {detail}. "
        f"Local reporters covered story number {index} in detail, and residents "
        f"said the event would be remembered for years."
    )


def _reference_caption(topic: str, detail: str) -> str:
    return f"At the {topic}, {detail}."


def make_fixture(
    out_dir: str | os.PathLike[str],
    seed: int = 0,
    num_images: int = 10,
    dim: int = 16,
    models: tuple[str, ...] = DEFAULT_MODELS,
) -> FixturePaths:
    """Generate the fixture tree and return the pipeline config path."""
    if num_images < 1 or num_images > len(_TOPICS):
        raise ValueError(f"num_images must be in 1..{len(_TOPICS)}, got {num_images}")
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)

    image_ids = [f"img{i:03d}" for i in range(num_images)]
    query_ids = [f"q{i:03d}" for i in range(num_images)]

    model_files: dict[str, dict[str, str]] = {}
    for model_id in models:
        db_rows = rng.normal(size=(num_images, dim)).astype(np.float32)
        noise = rng.normal(scale=_NOISE_SCALE, size=(num_images, dim)).astype(np.float32)
        query_rows = db_rows + noise
        db = EmbeddingMatrix(model_id=model_id, ids=tuple(image_ids), rows=db_rows)
        queries = EmbeddingMatrix(model_id=model_id, ids=tuple(query_ids), rows=query_rows)
        for i in range(num_images):
            hit = top_k(queries.rows[i], db, 1).entries[0].doc_id
            if hit != image_ids[i]:
                raise AssertionError(
                    f"fixture self-check failed: query {query_ids[i]} nearest to {hit}"
                )
        db_path = os.path.join(out_dir, f"db.{model_id}.emb")
        q_path = os.path.join(out_dir, f"queries.{model_id}.emb")
        write_embeddings(db, db_path)
        write_embeddings(queries, q_path)
        model_files[model_id] = {"db": f"db.{model_id}.emb", "queries": f"queries.{model_id}.emb"}

    fileio.write_jsonl(
        os.path.join(out_dir, "gt.jsonl"),
        (
            {"query_id": query_ids[i], "relevant": [image_ids[i]]}
            for i in range(num_images)
        ),
    )
    fileio.write_jsonl(
        os.path.join(out_dir, "articles.jsonl"),
        (
            {
                "article_id": f"art{i:03d}",
                "title": _TOPICS[i][0].title(),
                "body": _article_body(i, *_TOPICS[i]),
            }
            for i in range(num_images)
        ),
    )
    fileio.write_jsonl(
        os.path.join(out_dir, "mapping.jsonl"),
        (
            {"image_id": image_ids[i], "article_id": f"art{i:03d}"}
            for i in range(num_images)
        ),
    )
    fileio.write_jsonl(
        os.path.join(out_dir, "references.jsonl"),
        (
            {"query_id": query_ids[i], "references": [_reference_caption(*_TOPICS[i])]}
            for i in range(num_images)
        ),
    )

    weights = {m: DEFAULT_WEIGHTS.get(m, 1.0) for m in models}
    fusion = FusionConfig(
        method=FusionMethod.WEIGHTED_ENSEMBLE,
        depth=num_images,
        weights=weights,
    )
    fileio.write_json(
        os.path.join(out_dir, "fusion.json"),
        {
            "method": fusion.method.value,
            "depth": fusion.depth,
            "weights": weights,
            "rrf_k": fusion.rrf_k,
            "per_model_minmax": fusion.per_model_minmax,
        },
    )
    fileio.write_json(os.path.join(out_dir, "endpoint.json"), {"kind": "stub"})

    pipeline_config = os.path.join(out_dir, "pipeline.json")
    fileio.write_json(
        pipeline_config,
        {
            "models": model_files,
            "k": num_images,
            "ks": [1, 10],
            "fusion_config": "fusion.json",
            "ground_truth": "gt.jsonl",
            "articles": "articles.jsonl",
            "mapping": "mapping.jsonl",
            "references": "references.jsonl",
            "endpoint_config": "endpoint.json",
        },
    )
    return FixturePaths(root=out_dir, pipeline_config=pipeline_config)
