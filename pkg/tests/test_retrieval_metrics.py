import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ranked_list
from fusecap.retrieval_metrics import (
    EvaluationError,
    GroundTruth,
    GroundTruthError,
    average_precision,
    evaluate_run,
    load_ground_truth,
    recall_at_k,
)
from oracles import naive_evaluate


def test_ap_single_relevant_at_rank_one():
    lst = ranked_list("q", "m", [("a", 0.1), ("b", 0.2)])
    assert average_precision(lst, {"a"}) == 1.0


def test_ap_single_relevant_at_rank_two():
    lst = ranked_list("q", "m", [("b", 0.1), ("a", 0.2)])
    assert average_precision(lst, {"a"}) == 0.5


def test_ap_two_relevant_at_ranks_one_and_three():
    lst = ranked_list("q", "m", [("a", 0.1), ("x", 0.2), ("b", 0.3), ("y", 0.4)])
    assert average_precision(lst, {"a", "b"}) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)


def test_ap_unretrieved_relevant_contributes_zero():
    lst = ranked_list("q", "m", [("a", 0.1)])
    assert average_precision(lst, {"a", "missing"}) == 0.5


def test_ap_requires_relevant():
    lst = ranked_list("q", "m", [("a", 0.1)])
    with pytest.raises(EvaluationError, match="empty"):
        average_precision(lst, set())


def test_recall_trivials():
    lst = ranked_list("q", "m", [(f"d{i}", float(i)) for i in range(12)])
    assert recall_at_k(lst, {"d0"}, 1) == 1.0
    assert recall_at_k(lst, {"d11"}, 10) == 0.0
    assert recall_at_k(lst, {"d1", "d2", "d11"}, 10) == pytest.approx(2 / 3)


def test_evaluate_perfect_run():
    run = [ranked_list(f"q{i}", "m", [(f"rel{i}", 0.0), ("x", 1.0)]) for i in range(4)]
    gt = GroundTruth.from_pairs((f"q{i}", [f"rel{i}"]) for i in range(4))
    report = evaluate_run(run, gt, ks=(1, 10))
    assert report.map_score == 1.0
    assert report.recall_at[1] == 1.0
    assert report.recall_at[10] == 1.0
    assert report.num_queries == 4


def test_missing_query_counts_as_zero():
    run = [ranked_list("q0", "m", [("rel0", 0.0)])]
    gt = GroundTruth.from_pairs([("q0", ["rel0"]), ("q1", ["rel1"])])
    report = evaluate_run(run, gt, ks=(1,))
    assert report.map_score == 0.5
    assert report.per_query["q1"].average_precision == 0.0
    assert report.per_query["q1"].first_relevant_rank is None


def test_duplicate_run_query_rejected():
    run = [ranked_list("q0", "m", [("a", 0.0)]), ranked_list("q0", "m", [("b", 0.0)])]
    gt = GroundTruth.from_pairs([("q0", ["a"])])
    with pytest.raises(EvaluationError, match="duplicate query_id"):
        evaluate_run(run, gt)


def test_unjudged_run_query_rejected():
    run = [ranked_list("q9", "m", [("a", 0.0)])]
    gt = GroundTruth.from_pairs([("q0", ["a"])])
    with pytest.raises(EvaluationError, match="missing from ground truth"):
        evaluate_run(run, gt)


def _random_run_and_gt(rng, queries=50, docs=40, max_relevant=4):
    doc_ids = [f"d{i:03d}" for i in range(docs)]
    run, gt_pairs = [], []
    for i in range(queries):
        perm = rng.permutation(docs)
        run.append(ranked_list(f"q{i:03d}", "m", [(doc_ids[j], float(r)) for r, j in enumerate(perm)]))
        n_rel = int(rng.integers(1, max_relevant + 1))
        gt_pairs.append((f"q{i:03d}", [doc_ids[j] for j in rng.choice(docs, n_rel, replace=False)]))
    return run, GroundTruth.from_pairs(gt_pairs)


def test_matches_naive_evaluator(rng):
    run, gt = _random_run_and_gt(rng)
    report = evaluate_run(run, gt, ks=(1, 5, 10))
    naive = naive_evaluate(
        {r.query_id: list(r.doc_ids()) for r in run},
        {q: set(rel) for q, rel in gt.relevance.items()},
        ks=(1, 5, 10),
    )
    assert report.map_score == pytest.approx(naive["map"], abs=1e-9)
    for k in (1, 5, 10):
        assert report.recall_at[k] == pytest.approx(naive["recall"][k], abs=1e-9)
    for query_id, ap in naive["per_query"].items():
        assert report.per_query[query_id].average_precision == pytest.approx(ap, abs=1e-9)


def test_single_relevant_map_equals_mrr(rng):
    run, _ = _random_run_and_gt(rng, queries=30, docs=25, max_relevant=1)
    chosen = {r.query_id: r.entries[int(rng.integers(len(r.entries)))].doc_id for r in run}
    gt = GroundTruth.from_pairs((q, [doc]) for q, doc in chosen.items())
    report = evaluate_run(run, gt, ks=(1,))
    ranks = {r.query_id: list(r.doc_ids()).index(chosen[r.query_id]) + 1 for r in run}
    mrr = sum(1.0 / ranks[q] for q in sorted(ranks)) / len(ranks)
    assert report.map_score == pytest.approx(mrr, abs=1e-12)


def test_run_as_its_own_ground_truth_has_perfect_recall_at_1(rng):
    run, _ = _random_run_and_gt(rng, queries=20, docs=15)
    gt = GroundTruth.from_pairs((r.query_id, [r.entries[0].doc_id]) for r in run)
    report = evaluate_run(run, gt, ks=(1,))
    assert report.recall_at[1] == 1.0


def test_recall_non_decreasing_in_k(rng):
    run, gt = _random_run_and_gt(rng, queries=10, docs=30)
    report = evaluate_run(run, gt, ks=range(1, 31))
    values = [report.recall_at[k] for k in range(1, 31)]
    assert values == sorted(values)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**32 - 1),
    docs=st.integers(min_value=3, max_value=25),
)
def test_ap_depends_only_on_relevant_positions(seed, docs):
    rng = np.random.default_rng(seed)
    doc_ids = [f"d{i}" for i in range(docs)]
    relevant = set(rng.choice(doc_ids, size=int(rng.integers(1, docs // 2 + 1)), replace=False))
    order = list(rng.permutation(doc_ids))
    base = average_precision(ranked_list("q", "m", [(d, float(i)) for i, d in enumerate(order)]), relevant)
    # permute only the non-relevant docs among their own positions
    non_rel_positions = [i for i, d in enumerate(order) if d not in relevant]
    shuffled = list(order)
    perm = rng.permutation(len(non_rel_positions))
    for tgt, src in zip(non_rel_positions, perm):
        shuffled[tgt] = order[non_rel_positions[src]]
    permuted = average_precision(
        ranked_list("q", "m", [(d, float(i)) for i, d in enumerate(shuffled)]), relevant
    )
    assert permuted == pytest.approx(base, abs=1e-12)


def test_ground_truth_file_round_trip(tmp_path):
    path = tmp_path / "gt.jsonl"
    path.write_text(
        '{"query_id": "q0", "relevant": ["a", "b"]}\n{"query_id": "q1", "relevant": ["c"]}\n'
    )
    gt = load_ground_truth(path)
    assert gt.relevance == {"q0": frozenset({"a", "b"}), "q1": frozenset({"c"})}


def test_ground_truth_rejects_duplicates_and_empty(tmp_path):
    dup = tmp_path / "dup.jsonl"
    dup.write_text('{"query_id": "q", "relevant": ["a"]}\n{"query_id": "q", "relevant": ["b"]}\n')
    with pytest.raises(GroundTruthError, match="duplicate"):
        load_ground_truth(dup)
    empty = tmp_path / "empty.jsonl"
    empty.write_text('{"query_id": "q", "relevant": []}\n')
    with pytest.raises(GroundTruthError, match="empty relevant"):
        load_ground_truth(empty)


def test_report_json_shape(rng):
    run, gt = _random_run_and_gt(rng, queries=3, docs=5)
    obj = evaluate_run(run, gt, ks=(1, 10)).to_json_obj()
    assert set(obj) == {"map", "num_queries", "recall@1", "recall@10", "per_query"}
    assert set(obj["per_query"]) == set(gt.relevance)
