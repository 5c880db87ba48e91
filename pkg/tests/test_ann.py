import numpy as np
import pytest

from denseqr.ann import (
    ExactIndex,
    IvfPqIndex,
    SearchParams,
    brute_force_search,
    kmeans,
    normalize_rows,
    overlap_recall,
    resolve_partitions,
)
from denseqr.rng import make_rng
from denseqr.serialize import FormatError
from denseqr.tensor import ContractError, ShapeError


def data(n=600, d=20, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


@pytest.fixture(scope="module")
def built():
    x = data()
    idx = IvfPqIndex.train(x, n_partitions=8, M=4, seed=1)
    idx.add(np.arange(1000, 1600), x)
    return x, idx


def test_kmeans_single_cluster_is_mean():
    x = normalize_rows(data(50, 6)).astype(np.float64)
    res = kmeans(x, 1, make_rng(0, "k"))
    np.testing.assert_allclose(res.centroids[0], x.mean(0), atol=1e-12)


def test_kmeans_objective_non_increasing():
    res = kmeans(data(400, 5), 12, make_rng(0, "k"), max_iter=25, tol=0)
    obj = np.array(res.objective)
    assert (np.diff(obj) <= 1e-9).all()


def test_kmeans_reseeds_empty_clusters():
    # three distinct points, k=3, many duplicates
    x = np.repeat(np.eye(3), [50, 1, 1], axis=0)
    res = kmeans(x, 3, make_rng(2, "k"))
    assert len(np.unique(res.assign)) == 3


def test_kmeans_needs_enough_points():
    with pytest.raises(ContractError):
        kmeans(data(3, 2), 5, make_rng(0, "k"))


def test_train_rejects_too_few_vectors():
    with pytest.raises(ContractError, match="n_partitions"):
        IvfPqIndex.train(data(10, 8), n_partitions=20, M=4)


def test_resolve_partitions():
    assert resolve_partitions(2000, 100000) == 2000
    assert resolve_partitions(2000, 1999) == 45


def test_padding_dimension():
    idx = IvfPqIndex.train(data(300, 300, 2), n_partitions=4, M=16)
    assert idx.d_pad == 304 and idx.d_pad % idx.M == 0
    assert idx.codebooks.shape == (16, 256, 19)


def test_identical_vectors_give_zero_residual_codebooks():
    x = np.tile(np.arange(1.0, 9.0), (300, 1))
    idx = IvfPqIndex.train(x, n_partitions=1, M=4)
    np.testing.assert_allclose(idx.codebooks[:, 0], 0.0, atol=1e-6)


def test_sizes_codes_and_ids(built):
    _, idx = built
    assert sum(idx.partition_sizes()) == 600 == len(idx)
    ids = np.concatenate([i for i, _ in idx._lists()])
    assert sorted(ids.tolist()) == list(range(1000, 1600))
    for _, codes in idx._lists():
        assert codes.dtype == np.uint8 and codes.shape[1] == 4


def test_duplicate_add(built):
    x, idx = built
    with pytest.raises(ContractError):
        idx.add([1000], x[:1])


def test_self_retrieval_full_probe(built):
    x, idx = built
    hits = sum(idx.search(x[i], SearchParams(5, idx.n_partitions)).ids[0] == 1000 + i for i in range(50))
    assert hits >= 45


def test_scores_bounded_and_within_probed(built):
    x, idx = built
    q = data(5, 20, 9)
    for v in q:
        r = idx.search(v, SearchParams(50, 3))
        assert all(s <= 1 + 1e-4 for _, s in r.items)
        qp = np.zeros(idx.d_pad)
        qp[:20] = normalize_rows(v)[0]
        probed = set()
        for p in idx.probe(qp, 3):
            probed.update(idx._lists()[p][0].tolist())
        assert set(r.ids) <= probed


def test_recall_monotone_in_nprobe(built):
    x, idx = built
    exact = ExactIndex(np.arange(1000, 1600), x)
    q = data(40, 20, 4)
    truth = exact.search_many(range(40), q, 20)
    rec = [overlap_recall(idx.search_many(range(40), q, SearchParams(20, n)), truth, 20)
           for n in (1, 2, 4, 8)]
    assert all(a <= b + 1e-12 for a, b in zip(rec, rec[1:]))


def test_lossless_full_probe_equals_exact():
    x = data(500, 24, 5)
    idx = IvfPqIndex.train(x, n_partitions=6, M=8, seed=3, lossless=True)
    idx.add(np.arange(500), x)
    exact = ExactIndex(np.arange(500), x)
    for i, v in enumerate(data(20, 24, 6)):
        assert idx.search(v, SearchParams(30, 6), i).items == exact.search(v, 30, i).items
    for i in range(10):
        a = idx.search(x[i], SearchParams(30, 6), i, exclude_self=True)
        b = exact.search(x[i], 30, i, exclude_self=True)
        assert a.items == b.items and i not in a.ids


def test_empty_and_single_vector():
    idx = IvfPqIndex.train(data(300, 8), n_partitions=2, M=2)
    assert idx.search(np.ones(8), SearchParams(5, 2)).items == []
    idx.add([7], np.ones((1, 8)))
    for v in data(5, 8, 3):
        assert idx.search(v, SearchParams(5, 2)).ids == [7]


def test_search_errors(built):
    _, idx = built
    with pytest.raises(ContractError):
        idx.search(np.ones(20), SearchParams(0, 1))
    with pytest.raises(ContractError):
        idx.search(np.ones(20), SearchParams(5, 99))
    with pytest.raises(ShapeError):
        idx.search(np.ones(7), SearchParams(5, 1))


@pytest.mark.parametrize("lossless", [False, True])
def test_roundtrip(built, lossless):
    x, idx = built
    if lossless:
        idx = IvfPqIndex.train(x, n_partitions=8, M=4, seed=1, lossless=True)
        idx.add(np.arange(600), x)
    back = IvfPqIndex.from_bytes(idx.to_bytes())
    assert back.to_bytes() == idx.to_bytes()
    for v in data(10, 20, 8):
        assert back.search(v, SearchParams(10, 4)).items == idx.search(v, SearchParams(10, 4)).items


def test_bad_magic():
    with pytest.raises(FormatError):
        IvfPqIndex.from_bytes(b"XXXX" + bytes(40))


def test_brute_force_properties():
    x = data(50, 6)
    r = brute_force_search(x, x[3], 5)
    assert r.ids[0] == 3 and r.items[0][1] == pytest.approx(1.0)
    assert len(brute_force_search(x, x[0], 500)) == 50
    assert brute_force_search(x, 7.5 * x[9], 10).items == brute_force_search(x, x[9], 10).items


def test_exact_index_rejects_duplicates():
    with pytest.raises(ContractError):
        ExactIndex([1, 1], np.ones((2, 3)))
