"""Ensemble image retrieval and article-grounded captioning.

Pipeline: per-encoder exact L2 retrieval over binary embedding files,
rank fusion (weighted ensemble or reciprocal rank fusion), image-to-article
context resolution, prompt-guided caption generation through an external
LLM endpoint, and evaluation (mAP, Recall@k, CIDEr-D, CLIPScore).
"""

__version__ = "0.1.0"

from fusecap.store import EmbeddingMatrix, load_embeddings, normalize_rows, write_embeddings
from fusecap.search import Direction, RankedEntry, RankedList, batch_search, l2_distance, top_k
from fusecap.fusion import FusionConfig, FusionMethod, fuse, normalize_weights, rrf, weighted_ensemble

__all__ = [
    "Direction",
    "EmbeddingMatrix",
    "FusionConfig",
    "FusionMethod",
    "RankedEntry",
    "RankedList",
    "batch_search",
    "fuse",
    "l2_distance",
    "load_embeddings",
    "normalize_rows",
    "normalize_weights",
    "rrf",
    "top_k",
    "weighted_ensemble",
]
