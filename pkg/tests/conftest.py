import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fusecap.search import Direction, RankedEntry, RankedList
from fusecap.store import EmbeddingMatrix


def ranked_list(query_id, model_id, docs_scores, direction=Direction.ASCENDING_BETTER):
    """Build a RankedList from [(doc_id, score), ...] already in rank order."""
    entries = tuple(
        RankedEntry(doc_id=doc_id, score=float(score), rank=i + 1)
        for i, (doc_id, score) in enumerate(docs_scores)
    )
    return RankedList(query_id=query_id, model_id=model_id, entries=entries, direction=direction)


def random_matrix(rng, model_id, count, dim, id_prefix="d"):
    rows = rng.normal(size=(count, dim)).astype(np.float32)
    ids = tuple(f"{id_prefix}{i:04d}" for i in range(count))
    return EmbeddingMatrix(model_id=model_id, ids=ids, rows=rows)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
