"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The large synthetic retrieval set (3 models x 500 database vectors
x 50 queries, dim 32, fixed seed) is shared by the fusion criteria.
"""

import filecmp
import json
import random
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_matrix, ranked_list
from fusecap.caption_metrics import CaptionRecord, cider_d, clipscore
from fusecap.captioning import (
    PROMPT_SHA256,
    EmptyCaptionError,
    build_request,
    load_prompt_template,
    postprocess,
)
from fusecap.fusion import FusionConfig, FusionMethod, fuse, normalize_weights, rrf
from fusecap.retrieval_metrics import GroundTruth, average_precision, evaluate_run
from fusecap.search import batch_search, top_k
from fusecap.store import EmbeddingMatrix, matrix_from_rows
from oracles import (
    full_sort_neighbors,
    l2_loop,
    naive_evaluate,
    rrf_scores,
    weighted_ensemble_scores,
)

MODELS = ("m1", "m2", "m3")
RAW_WEIGHTS = {"m1": 0.5, "m2": 0.3, "m3": 0.3}
N_DB = 500
N_QUERIES = 50
DIM = 32


def _ok(number: int, name: str) -> None:
    print(f"[acceptance] criterion {number:02d} ({name}): PASS")


@pytest.fixture(scope="module")
def synthetic():
    """Shared retrieval set plus engine runs and oracle distances."""
    rng = np.random.default_rng(2025)
    dbs = {m: random_matrix(rng, m, N_DB, DIM) for m in MODELS}
    query_vecs = {m: rng.normal(size=(N_QUERIES, DIM)) for m in MODELS}
    runs = {}
    for m in MODELS:
        queries = matrix_from_rows(
            m, [f"q{i:03d}" for i in range(N_QUERIES)], query_vecs[m].astype(np.float32)
        )
        runs[m] = batch_search(queries, dbs[m], N_DB)
    oracle_distances = []
    for i in range(N_QUERIES):
        per_model = {}
        for m in MODELS:
            q = np.asarray(
                matrix_from_rows(m, ["q"], query_vecs[m][i].astype(np.float32)).rows[0],
                dtype=np.float64,
            )
            per_model[m] = {
                doc_id: l2_loop(q, row) for doc_id, row in zip(dbs[m].ids, dbs[m].rows)
            }
        oracle_distances.append(per_model)
    return {"dbs": dbs, "runs": runs, "oracle_distances": oracle_distances}


def test_criterion_01_weight_normalization_fixed_point():
    start = time.perf_counter()
    out = normalize_weights({"DINOv2": 0.5, "SigLIP": 0.3, "CLIP": 0.3})
    assert abs(out["DINOv2"] - 0.4545) <= 1e-4
    assert abs(out["SigLIP"] - 0.2727) <= 1e-4
    assert abs(out["CLIP"] - 0.2727) <= 1e-4
    assert abs(sum(out.values()) - 1.0) <= 1e-9
    assert time.perf_counter() - start < 1.0
    _ok(1, "weight normalization fixed point")


def test_criterion_02_weighted_ensemble_oracle_equivalence(synthetic):
    start = time.perf_counter()
    config = FusionConfig(FusionMethod.WEIGHTED_ENSEMBLE, depth=N_DB, weights=RAW_WEIGHTS)
    for i in range(N_QUERIES):
        lists = {m: synthetic["runs"][m][i] for m in MODELS}
        fused = fuse(config, lists)
        expected = weighted_ensemble_scores(synthetic["oracle_distances"][i], RAW_WEIGHTS)
        assert [e.doc_id for e in fused.entries] == [doc for doc, _ in expected]
        for entry, (_, score) in zip(fused.entries, expected):
            assert abs(entry.score - score) <= 1e-6
    assert time.perf_counter() - start < 10.0
    _ok(2, "weighted ensemble matches brute-force oracle")


def test_criterion_03_rrf_oracle_equivalence_and_permutation(synthetic):
    start = time.perf_counter()
    config = FusionConfig(FusionMethod.RRF, depth=N_DB, rrf_k=0.0)
    fused_per_query = []
    for i in range(N_QUERIES):
        lists = {m: synthetic["runs"][m][i] for m in MODELS}
        fused = fuse(config, lists)
        fused_per_query.append(fused)
        rankings = [{e.doc_id: e.rank for e in lists[m].entries} for m in MODELS]
        expected = rrf_scores(rankings, k=0.0)
        assert [e.doc_id for e in fused.entries] == [doc for doc, _ in expected]
        for entry, (_, score) in zip(fused.entries, expected):
            assert abs(entry.score - score) <= 1e-12
    rng = random.Random(7)
    for _ in range(20):
        i = rng.randrange(N_QUERIES)
        lists = [synthetic["runs"][m][i] for m in MODELS]
        rng.shuffle(lists)
        assert rrf(lists, k=0.0) == fused_per_query[i]
    assert time.perf_counter() - start < 10.0
    _ok(3, "RRF matches brute-force oracle; permutation-invariant")


def test_criterion_04_argsort_invariance_under_weight_scaling(synthetic):
    base_config = FusionConfig(FusionMethod.WEIGHTED_ENSEMBLE, depth=N_DB, weights=RAW_WEIGHTS)
    for c in (0.01, 1.0, 100.0):
        scaled = {m: w * c for m, w in RAW_WEIGHTS.items()}
        config = FusionConfig(FusionMethod.WEIGHTED_ENSEMBLE, depth=N_DB, weights=scaled)
        for i in range(N_QUERIES):
            lists = {m: synthetic["runs"][m][i] for m in MODELS}
            assert fuse(config, lists).doc_ids() == fuse(base_config, lists).doc_ids()
    _ok(4, "argsort invariance under weight scaling")


def test_criterion_05_single_model_degeneration(synthetic):
    config = FusionConfig(
        FusionMethod.WEIGHTED_ENSEMBLE, depth=N_DB,
        weights={"m1": 1.0, "m2": 0.0, "m3": 0.0},
    )
    for i in range(N_QUERIES):
        lists = {m: synthetic["runs"][m][i] for m in MODELS}
        assert fuse(config, lists).doc_ids() == lists["m1"].doc_ids()
    for i in range(0, N_QUERIES, 10):
        single = synthetic["runs"]["m2"][i]
        assert rrf([single], k=0.0).doc_ids() == single.doc_ids()
    _ok(5, "single-model degeneration")


def test_criterion_06_top_k_exactness_with_tie_break():
    rng = np.random.default_rng(99)
    rows = rng.normal(size=(1000, 16)).astype(np.float32)
    rows[500] = rows[100]  # planted duplicates: d0100 < d0500 lexicographically
    rows[901] = rows[900]
    ids = [f"d{i:04d}" for i in range(1000)]
    matrix = EmbeddingMatrix(model_id="m", ids=tuple(ids), rows=rows)
    for trial in range(3):
        query = rng.normal(size=16)
        expected = full_sort_neighbors(query, matrix.ids, matrix.rows)
        for k in (1, 10, 100):
            result = top_k(query, matrix, k)
            assert [e.doc_id for e in result.entries] == [d for d, _ in expected[:k]]
    # query sitting exactly on the duplicated row: tie at distance zero
    result = top_k(rows[100], matrix, 3)
    assert result.entries[0].doc_id == "d0100"
    assert result.entries[1].doc_id == "d0500"
    assert result.entries[0].score == result.entries[1].score == 0.0
    _ok(6, "top-k exact against full sort incl. doc_id tie-break")


def test_criterion_07_retrieval_metrics_oracle():
    # hand cases
    assert average_precision(ranked_list("q", "m", [("a", 0.1), ("b", 0.2)]), {"a"}) == 1.0
    assert average_precision(ranked_list("q", "m", [("b", 0.1), ("a", 0.2)]), {"a"}) == 0.5
    two_of_three = ranked_list("q", "m", [("a", 0.1), ("x", 0.2), ("b", 0.3)])
    assert abs(average_precision(two_of_three, {"a", "b"}) - 0.83333333) <= 1e-6

    rng = np.random.default_rng(1234)
    doc_ids = [f"d{i:03d}" for i in range(60)]
    run, gt_pairs = [], []
    for i in range(50):
        perm = rng.permutation(60)
        run.append(ranked_list(
            f"q{i:03d}", "m", [(doc_ids[j], float(r)) for r, j in enumerate(perm)]
        ))
        n_rel = int(rng.integers(1, 5))
        gt_pairs.append(
            (f"q{i:03d}", [doc_ids[j] for j in rng.choice(60, n_rel, replace=False)])
        )
    gt = GroundTruth.from_pairs(gt_pairs)
    report = evaluate_run(run, gt, ks=(1, 10))
    naive = naive_evaluate(
        {r.query_id: list(r.doc_ids()) for r in run},
        {q: set(rel) for q, rel in gt.relevance.items()},
        ks=(1, 10),
    )
    assert abs(report.map_score - naive["map"]) <= 1e-9
    for k in (1, 10):
        assert abs(report.recall_at[k] - naive["recall"][k]) <= 1e-9

    # single-relevant regime: mAP equals mean reciprocal rank
    single_gt = GroundTruth.from_pairs(
        (r.query_id, [r.entries[int(rng.integers(60))].doc_id]) for r in run
    )
    single_report = evaluate_run(run, single_gt, ks=(1,))
    ranks = {
        r.query_id: list(r.doc_ids()).index(next(iter(single_gt.relevance[r.query_id]))) + 1
        for r in run
    }
    mrr = sum(1.0 / ranks[q] for q in sorted(ranks)) / len(ranks)
    assert abs(single_report.map_score - mrr) <= 1e-9
    _ok(7, "retrieval metrics match naive evaluator + hand cases")


def test_criterion_08_cider_d_hand_oracle():
    # frozen from the dict-based oracle (tests/oracles.py): record A is
    # verbatim its single reference and shares no n-gram with record B
    record_a = CaptionRecord("q1", "a man rides a brown horse", ("a man rides a brown horse",))
    record_b = CaptionRecord(
        "q2", "children play soccer near the beach", ("children play soccer on sunny beaches",)
    )
    per_query, corpus = cider_d([record_a, record_b])
    assert abs(per_query["q1"] - 10.0) <= 1e-6
    assert abs(per_query["q2"] - 2.875) <= 1e-6
    assert abs(corpus - 6.4375) <= 1e-6

    zero = CaptionRecord("qz", "purple elephants dance quietly", record_b.references)
    per_zero, _ = cider_d([zero, record_a])
    assert per_zero["qz"] == 0.0

    assert all(0.0 <= s <= 10.0 for s in per_query.values())
    reversed_scores, reversed_corpus = cider_d([record_b, record_a])
    assert reversed_scores == per_query
    assert reversed_corpus == corpus
    _ok(8, "CIDEr-D hand oracle, zero overlap, range, permutation")


def test_criterion_09_clipscore_fixed_points():
    v = np.array([0.2, -0.7, 1.1, 0.4])
    assert abs(clipscore(v, v) - 2.5) <= 1e-12
    assert clipscore(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert clipscore(v, -v) == 0.0
    rng = np.random.default_rng(5)
    for _ in range(25):
        u, w = rng.normal(size=12), rng.normal(size=12)
        alpha, beta = float(rng.uniform(1e-3, 1e3)), float(rng.uniform(1e-3, 1e3))
        assert abs(clipscore(alpha * u, beta * w) - clipscore(u, w)) <= 1e-7
    _ok(9, "CLIPScore fixed points and scale invariance")


def test_criterion_10_postprocess_preambles_and_idempotence():
    assert postprocess("Here is the caption: Jockey wins.") == "Jockey wins."
    assert postprocess("The caption is: Jockey wins.") == "Jockey wins."
    rng = random.Random(20240817)
    pieces = [
        "Here is the caption:", "The caption is:", "caption:", '"', "'", "“",
        "”", "\n", "\r\n", "   ", "Jockey", "wins", "the", "2015", "race.",
    ]
    checked = 0
    for _ in range(1000):
        raw = " ".join(rng.choice(pieces) for _ in range(rng.randint(0, 10)))
        try:
            once = postprocess(raw)
        except EmptyCaptionError:
            continue
        assert postprocess(once) == once
        checked += 1
    assert checked >= 500
    _ok(10, "caption post-processing strips preambles; idempotent")


def test_criterion_11_end_to_end_fixture(tmp_path):
    start = time.perf_counter()
    env_cmd = [sys.executable, "-m", "fusecap.cli"]
    fixture_dir = tmp_path / "fixture"
    subprocess.run(
        env_cmd + ["make-fixture", "--out-dir", str(fixture_dir)],
        check=True, capture_output=True,
    )
    outs = []
    for name in ("out1", "out2"):
        out_dir = tmp_path / name
        proc = subprocess.run(
            env_cmd + ["pipeline", "--config", str(fixture_dir / "pipeline.json"),
                       "--out-dir", str(out_dir)],
            check=True, capture_output=True, text=True,
        )
        assert "failures" in proc.stdout
        outs.append(out_dir)

    report = json.loads((outs[0] / "retrieval_report.json").read_text())
    assert report["map"] == 1.0
    captions = (outs[0] / "captions.jsonl").read_text().strip().splitlines()
    assert len(captions) == 10
    caption_report = json.loads((outs[0] / "caption_report.json").read_text())
    assert 0.0 <= caption_report["cider"] <= 10.0
    failures = (outs[0] / "caption_failures.jsonl").read_text().strip()
    assert failures == ""

    # determinism: both runs byte-identical, file by file
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    for name in names:
        assert filecmp.cmp(outs[0] / name, outs[1] / name, shallow=False), name
    assert time.perf_counter() - start < 30.0
    _ok(11, "end-to-end fixture: mAP 1.0, 10 captions, deterministic")


def test_criterion_12_prompt_asset_integrity():
    template = load_prompt_template()
    assert template.sha256() == PROMPT_SHA256
    article = "Body of the retrieved article."
    request = build_request("q", "http://img/x.jpg", article, template)
    assert template.text in request.message_text()
    assert request.prompt.text == template.text
    again = load_prompt_template()
    assert again.text == template.text
    _ok(12, "prompt asset digest pinned; embedded byte-for-byte")
