from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qreform.metrics import partition_metrics
from qreform.partitioning import (Partition, balance_clusters, bootstrap_partition,
                                  evaluate_partitioning, kmeans_partition, make_partition,
                                  ppmi_embeddings, query_features, random_partition,
                                  read_feature_cache, read_partition_tsv, within_cluster_ss,
                                  write_feature_cache, write_partition_tsv)

IDS = [f"q{i:02d}" for i in range(10)]


def test_random_partition_shapes():
    assert random_partition(IDS, 1, 0).subsets == [sorted(IDS)]
    assert sorted(map(tuple, random_partition(IDS, 10, 0).subsets)) == [(q,) for q in IDS]
    p = random_partition(IDS, 3, 7)
    assert sorted(p.sizes()) == [3, 3, 4]
    assert p.subsets == random_partition(IDS, 3, 7).subsets
    with pytest.raises(ValueError):
        random_partition(IDS, 11, 0)
    with pytest.raises(ValueError):
        random_partition(IDS, 0, 0)


@given(n=st.integers(1, 60), k=st.integers(1, 60), seed=st.integers(0, 2**32))
@settings(max_examples=60, deadline=None)
def test_random_partition_disjoint_cover(n, k, seed):
    if k > n:
        return
    ids = [f"x{i}" for i in range(n)]
    p = random_partition(ids, k, seed)
    flat = [q for s in p.subsets for q in s]
    assert sorted(flat) == sorted(ids) and len(set(flat)) == n
    assert max(p.sizes()) - min(p.sizes()) <= 1


def test_bootstrap_partition():
    assert bootstrap_partition(["a"], 3, 0).subsets == [["a"], ["a"], ["a"]]
    ids = [str(i) for i in range(1000)]
    p = bootstrap_partition(ids, 1000, 0)
    assert all(len(s) == 1000 for s in p.subsets)
    frac = np.mean([len(set(s)) / 1000 for s in p.subsets])
    assert 0.61 <= frac <= 0.65
    assert p.subsets[:3] == bootstrap_partition(ids, 1000, 0).subsets[:3]


def test_balance_forced_transfer_and_unchanged():
    out = balance_clusters([[0, 1, 2, 3], []], 2)
    assert sorted(map(len, out)) == [2, 2]
    assert sorted(i for c in out for i in c) == [0, 1, 2, 3]
    assert balance_clusters([[0, 1], [2, 3], [4]]) == [[0, 1], [2, 3], [4]]


def test_balance_hand_trace_531():
    # cluster 0: five points near x=0; cluster 1: three points near x=10; cluster 2: one at x=1
    x = np.array([[0.0], [0.1], [0.2], [0.3], [0.4], [10.0], [10.1], [10.2], [1.0]])
    clusters = [[0, 1, 2, 3, 4], [5, 6, 7], [8]]
    seed = 11
    out = balance_clusters(clusters, 3, x, seed=seed)
    # hand simulation: cluster 0 is visited first and sheds two random members;
    # cluster 2 (centroid 1.0, then ~0.6) is always nearer than cluster 1 (~10.1)
    rng = np.random.default_rng(seed)
    c0, c2 = [0, 1, 2, 3, 4], [8]
    for _ in range(2):
        c2.append(c0.pop(int(rng.integers(len(c0)))))
    assert out == [c0, [5, 6, 7], c2]


@given(sizes=st.lists(st.integers(0, 12), min_size=1, max_size=6), seed=st.integers(0, 1000))
@settings(max_examples=80, deadline=None)
def test_balance_properties(sizes, seed):
    clusters, nxt = [], 0
    for s in sizes:
        clusters.append(list(range(nxt, nxt + s)))
        nxt += s
    feats = np.random.default_rng(seed).normal(size=(max(nxt, 1), 2))
    out = balance_clusters(clusters, None, feats, seed=seed)
    assert sorted(i for c in out for i in c) == list(range(nxt))
    n, k = nxt, len(sizes)
    assert all(n // k <= len(c) <= -(-n // k) for c in out)


def test_balance_overflow_goes_to_smallest_processed(caplog):
    # M = 1 with 5 items over 2 clusters: the last cluster has no one to donate to
    out = balance_clusters([[0, 1, 2], [3, 4]], 1)
    assert sorted(i for c in out for i in c) == [0, 1, 2, 3, 4]
    assert "no remaining cluster" in caplog.text


def test_kmeans_partition():
    rng = np.random.default_rng(0)
    blobs = np.vstack([rng.normal(0, 0.1, (10, 2)), rng.normal(5, 0.1, (10, 2))])
    ids = [f"b{i:02d}" for i in range(20)]
    p = kmeans_partition(ids, blobs, 2, 0)
    assert sorted(map(tuple, p.subsets)) == [tuple(ids[:10]), tuple(ids[10:])]
    same = kmeans_partition(ids, np.vstack([blobs, blobs[:1]])[:20], 2, 0)
    assert same.subsets == p.subsets
    with pytest.raises(ValueError):
        kmeans_partition(ids, np.ones((20, 2)), 2, 0)
    with pytest.raises(ValueError):
        kmeans_partition(ids, blobs, 1, 0)
    with pytest.raises(ValueError):
        kmeans_partition(ids[:5], blobs, 2, 0)


def test_kmeans_beats_random_wcss():
    x = np.random.default_rng(3).normal(size=(50, 2)) * [1, 3]
    ids = [str(i) for i in range(50)]
    km = kmeans_partition(ids, x, 4, 0)
    rnd = random_partition(ids, 4, 0)
    pos = {q: i for i, q in enumerate(ids)}
    to_idx = lambda p: [[pos[q] for q in s] for s in p.subsets]
    assert within_cluster_ss(x, to_idx(km)) <= within_cluster_ss(x, to_idx(rnd))
    assert sorted(km.sizes()) == [12, 12, 13, 13]


def test_ppmi_embeddings_deterministic_and_sized():
    texts = [[0, 1, 2], [1, 2, 3], [3, 4], [0, 4, 5]]
    a = ppmi_embeddings(texts, 7, 3, seed=0)
    assert a.shape == (7, 3) and np.allclose(a[6], 0)
    assert np.array_equal(a, ppmi_embeddings(texts, 7, 3, seed=0))
    assert np.allclose(ppmi_embeddings([[0], [1]], 3, 2), 0)


def test_make_partition_strategies(small_data):
    d = small_data
    qids = d.splits["train"]
    for strat in ("random", "kmeans-Q", "kmeans-A", "kmeans-QA"):
        p = make_partition(strat, qids, 4, 1, d.queries, d.qrels, d.corpus)
        flat = [q for s in p.subsets for q in s]
        assert sorted(flat) == sorted(qids) and p.strategy == strat
        assert max(p.sizes()) - min(p.sizes()) <= 1
    assert make_partition("bagging", qids, 2, 1).sizes() == [len(qids)] * 2
    f = query_features(qids, d.queries, d.qrels, d.corpus, "QA", dim=8)
    assert f.shape == (len(qids), 16)
    with pytest.raises(ValueError):
        make_partition("nope", qids, 2, 0)


def test_evaluate_partitioning():
    agents = ["a", "a", "a"]
    ev = evaluate_partitioning(agents, [["x"], ["y"], ["z"]], lambda a, qs: 0.7)
    assert ev.oop_error == 0 and ev.oop_variance == 0 and ev.oop_score == pytest.approx(0.7)
    table = {("a0", "0"): .9, ("a0", "1"): .5, ("a0", "2"): .3, ("a1", "0"): .4,
             ("a1", "1"): .8, ("a1", "2"): .6, ("a2", "0"): .2, ("a2", "1"): .1, ("a2", "2"): .7}
    ev = evaluate_partitioning(["a0", "a1", "a2"], [["0"], ["1"], ["2"]],
                               lambda a, qs: table[(a, qs[0])])
    assert (ev.oop_score, ev.oop_variance, ev.oop_error) == partition_metrics(ev.scores)
    assert list(ev.row(0.5)) == ["E_i[e_i]", "E_i[E_j!=i[s_ij]]", "E_i[V_j!=i[s_ij]]", "score"]
    with pytest.raises(ValueError):
        evaluate_partitioning(["a"], [], lambda a, q: 0)


def test_partition_and_feature_files(tmp_path):
    p = Partition([["a", "b"], ["c"], []], "random")
    write_partition_tsv(p, tmp_path / "p.tsv")
    assert read_partition_tsv(tmp_path / "p.tsv").subsets == [["a", "b"], ["c"]]
    x = np.arange(6.0).reshape(3, 2)
    write_feature_cache(x, tmp_path / "f.bin")
    assert np.array_equal(read_feature_cache(tmp_path / "f.bin"), x)
    (tmp_path / "bad.bin").write_bytes((tmp_path / "f.bin").read_bytes()[:-3])
    with pytest.raises(ValueError):
        read_feature_cache(tmp_path / "bad.bin")
