import math

import numpy as np
import pytest

from denseqr.evalkit import (
    MetricReport,
    RankedList,
    discrimination_from_vectors,
    evaluate,
    format_run,
    map_at_k,
    mrr_at_k,
    ndcg_at_k,
    rank_scores,
    read_run,
    recall_at_k,
    sample_triples,
    write_run,
)
from denseqr.tensor import ContractError


def rl(ids, qid=0):
    return RankedList(qid, [(i, float(-n)) for n, i in enumerate(ids)])


# -- naive oracles written straight from the definitions ---------------------

def naive_recall(ids, rel, k):
    return sum(1 for i in ids[:k] if i in rel) / len(rel)


def naive_mrr(ids, rel, k):
    ranks = [r + 1 for r in range(min(k, len(ids))) if ids[r] in rel]
    return 1 / ranks[0] if ranks else 0.0


def naive_ap(ids, rel, k):
    precisions = []
    for r in range(1, min(k, len(ids)) + 1):
        if ids[r - 1] in rel:
            precisions.append(len([i for i in ids[:r] if i in rel]) / r)
    return sum(precisions) / len(rel)


def naive_ndcg(ids, rel, k):
    gains = [1.0 if i in rel else 0.0 for i in ids[:k]]
    dcg = sum(g / math.log2(r + 2) for r, g in enumerate(gains))
    ideal = sorted([1.0] * len(rel) + [0.0] * k, reverse=True)[:k]
    return dcg / sum(g / math.log2(r + 2) for r, g in enumerate(ideal))


def test_recall_examples():
    q = {0: {1, 2, 3, 4}}
    assert recall_at_k(rl([1, 2, 3, 4]), q, 100) == 1.0
    assert recall_at_k(rl([7, 8]), q, 100) == 0.0
    assert recall_at_k(rl([1, 9, 2, 3]), q, 100) == 0.75


def test_mrr_examples():
    q = {0: {5}}
    assert mrr_at_k(rl([5, 1, 2]), q, 10) == 1.0
    assert mrr_at_k(rl([1, 2, 5]), q, 10) == pytest.approx(1 / 3)
    assert mrr_at_k(rl([1, 2, 5]), q, 2) == 0.0


def test_map_examples():
    assert map_at_k(rl([1, 2]), {0: {1}}, 10) == 1.0
    assert map_at_k(rl([1, 9, 2]), {0: {1, 2}}, 10) == pytest.approx(5 / 6, abs=1e-12)
    assert naive_ap([1, 9, 2], {1, 2}, 10) == pytest.approx(5 / 6, abs=1e-12)
    assert map_at_k(rl([7, 8]), {0: {1}}, 10) == 0.0


def test_ndcg_examples():
    assert ndcg_at_k(rl([1, 2]), {0: {1}}, 10) == 1.0
    assert ndcg_at_k(rl([7, 8, 1]), {0: {1}}, 10) == pytest.approx(0.5, abs=1e-12)
    assert ndcg_at_k(rl([7, 8]), {0: {1}}, 10) == 0.0


def test_missing_qrels_is_contract_error():
    with pytest.raises(ContractError):
        recall_at_k(rl([1]), {}, 10)


def random_instance(rng):
    pool = np.arange(60)
    ids = rng.permutation(pool)[: rng.integers(0, 40)].tolist()
    rel = set(rng.choice(pool, size=rng.integers(1, 8), replace=False).tolist())
    return ids, rel


def test_metrics_agree_with_naive_oracles():
    rng = np.random.default_rng(11)
    for _ in range(100):
        ids, rel = random_instance(rng)
        q = {0: rel}
        for k in (1, 5, 10, 20, 100):
            r = rl(ids)
            assert abs(recall_at_k(r, q, k) - naive_recall(ids, rel, k)) <= 1e-9
            assert abs(mrr_at_k(r, q, k) - naive_mrr(ids, rel, k)) <= 1e-9
            assert abs(map_at_k(r, q, k) - naive_ap(ids, rel, k)) <= 1e-9
            assert abs(ndcg_at_k(r, q, k) - naive_ndcg(ids, rel, k)) <= 1e-9


def test_metric_properties():
    rng = np.random.default_rng(5)
    for _ in range(50):
        ids, rel = random_instance(rng)
        q = {0: rel}
        scores = rng.normal(size=len(ids))
        base = rank_scores(0, ids, scores, 100)
        # monotone transform of scores leaves order and metrics unchanged
        moved = rank_scores(0, ids, np.exp(3 * scores) + 2, 100)
        assert moved.ids == base.ids
        for k in (5, 10, 50):
            for f in (recall_at_k, mrr_at_k, map_at_k, ndcg_at_k):
                v = f(base, q, k)
                assert 0.0 <= v <= 1.0
        recalls = [recall_at_k(base, q, k) for k in (1, 2, 5, 10, 20, 50)]
        assert recalls == sorted(recalls)


def test_ndcg_is_not_monotone_in_k():
    # a second relevant item missing from the list raises the ideal DCG at k=2
    q = {0: {1, 2}}
    assert ndcg_at_k(rl([1, 9]), q, 1) == 1.0
    assert ndcg_at_k(rl([1, 9]), q, 2) < 1.0


def test_rank_scores_orders_by_score_then_id():
    r = rank_scores(3, [5, 1, 4, 2], [0.5, 0.9, 0.5, 0.1], k=3)
    assert r.ids == [1, 4, 5]
    with pytest.raises(ContractError):
        rank_scores(3, [1], [1.0], k=0)


def test_rank_scores_partial_selection_matches_full_sort():
    rng = np.random.default_rng(0)
    ids = rng.permutation(500)
    scores = rng.integers(0, 20, size=500).astype(float)
    full = sorted(zip(ids.tolist(), scores.tolist()), key=lambda p: (-p[1], p[0]))[:37]
    assert rank_scores(0, ids, scores, 37).items == full


def test_report_mean_is_mean_of_per_query():
    runs = [rl([1, 2], qid=0), rl([3, 9], qid=1), rl([4], qid=2)]
    qrels = {0: {2}, 1: {3}, 2: {8}}
    rep = evaluate(runs, qrels, [("recall", 1), ("mrr", 10)])
    assert rep.mean["recall@1"] == pytest.approx(1 / 3)
    assert rep.mean["mrr@10"] == pytest.approx((0.5 + 1 + 0) / 3)
    assert rep.to_tsv().splitlines()[0] == "query_id\trecall@1\tmrr@10"
    assert "mrr@10\t0.500000" in rep.summary()
    assert isinstance(rep, MetricReport)


def test_run_file_roundtrip(tmp_path):
    runs = [rank_scores(7, [1, 2, 3], [0.3, 0.2, 0.9], 3), rank_scores(2, [4], [0.1], 5)]
    text = format_run(runs, "exact")
    assert text.splitlines()[0] == "7 Q0 3 1 0.900000 exact"
    p = tmp_path / "run.txt"
    write_run(p, runs, "exact")
    back = {r.query_id: r.ids for r in read_run(p)}
    assert back == {7: [3, 1, 2], 2: [4]}


def test_run_file_malformed_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1 Q0 2 1 0.5 tag\n1 Q0 3\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":2:"):
        read_run(p)


# -- discrimination ----------------------------------------------------------

def test_discrimination_identical_positive():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(3, 1, 5)) + 2
    neg = rng.normal(size=(3, 1, 5)) + 2
    got = discrimination_from_vectors(q, q.copy(), neg)
    cos = (q * neg).sum(-1) / np.linalg.norm(q, axis=-1) / np.linalg.norm(neg, axis=-1)
    np.testing.assert_allclose(got, np.abs(np.log(np.clip(cos[:, 0], 1e-6, 1))), atol=1e-12)


def test_discrimination_all_identical_is_zero():
    q = np.ones((4, 2, 3))
    np.testing.assert_array_equal(discrimination_from_vectors(q, q, q), np.zeros(4))


def test_discrimination_clamps_negative_cosine():
    q = np.array([[[1.0, 0.0]]])
    got = discrimination_from_vectors(q, q, -q)
    assert got[0] == pytest.approx(-math.log(1e-6))


def test_discrimination_empty():
    with pytest.raises(ContractError):
        discrimination_from_vectors(np.zeros((2, 0, 3)), np.zeros((2, 0, 3)), np.zeros((2, 0, 3)))


def test_sample_triples_excludes_relevant():
    rng = np.random.default_rng(1)
    qrels = {0: {1, 2}, 5: {6}}
    triples = sample_triples(qrels, range(10), rng)
    assert len(triples) == 3
    for q, p, n in triples:
        assert p in qrels[q] and n not in qrels[q] and n != q
