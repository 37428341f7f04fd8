"""Splitting the training queries among sub-agents.

Random equal-size splits, bootstrap samples for bagging, and balanced
k-means over query / answer embedding features.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Set

import numpy as np

from .metrics import partition_metrics

log = logging.getLogger(__name__)

STRATEGIES = ("random", "bagging", "kmeans-Q", "kmeans-A", "kmeans-QA")


@dataclass
class Partition:
    subsets: List[List[str]]
    strategy: str

    def __len__(self) -> int:
        return len(self.subsets)

    def sizes(self) -> List[int]:
        return [len(s) for s in self.subsets]


def random_partition(query_ids: Sequence[str], k: int, seed) -> Partition:
    """Shuffle, then deal the ids round-robin into ``k`` subsets (each sorted)."""
    n = len(query_ids)
    if k < 1:
        raise ValueError("K must be >= 1")
    if k > n:
        raise ValueError(f"cannot split {n} queries into {k} partitions")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    return Partition([sorted(query_ids[i] for i in order[j::k]) for j in range(k)], "random")


def bootstrap_partition(query_ids: Sequence[str], k: int, seed) -> Partition:
    """``k`` independent samples of size N drawn with replacement."""
    if k < 1:
        raise ValueError("K must be >= 1")
    n = len(query_ids)
    rng = np.random.default_rng(seed)
    return Partition([[query_ids[i] for i in rng.integers(n, size=n)] for _ in range(k)],
                     "bagging")


def balance_clusters(clusters: Sequence[Sequence[int]], m: Optional[int] = None,
                     features: Optional[np.ndarray] = None,
                     centers: Optional[np.ndarray] = None, seed=0) -> List[List[int]]:
    """Greedy size balancing of ``clusters`` (lists of row indices into ``features``).

    Clusters are visited largest first. While the current cluster is over
    its cap, a uniformly chosen member moves to the remaining cluster with
    the nearest centroid, and the remaining clusters are re-sorted by size.
    With the default ``m = ceil(N/K)`` the cap drops to ``floor(N/K)`` once
    the ``N mod K`` larger slots are used, so every output size lies in
    ``[floor(N/K), ceil(N/K)]``. An explicit ``m`` is used as a plain cap.
    """
    rng = np.random.default_rng(seed)
    work = [list(c) for c in clusters]
    k = len(work)
    if k == 0:
        return []
    n = sum(len(c) for c in work)
    if n == 0:
        return work
    hi = -(-n // k)
    lo = n // k
    exact = m is None or m == hi
    m = hi if m is None else m
    if m < 1:
        raise ValueError("M must be >= 1")

    def centroid(i: int) -> Optional[np.ndarray]:
        if features is None:
            return None
        if work[i]:
            return features[work[i]].mean(axis=0)
        return None if centers is None else centers[i]

    def nearest(item: int, cands: List[int]) -> int:
        if features is None:
            return cands[0]
        best, best_d = cands[0], math.inf
        for c in cands:
            cen = centroid(c)
            # an empty cluster without a center is treated as adjacent
            d = 0.0 if cen is None else float(np.sum((features[item] - cen) ** 2))
            if d < best_d:
                best, best_d = c, d
        return best

    def by_size(idx: List[int]) -> List[int]:
        return sorted(idx, key=lambda i: (-len(work[i]), i))

    remaining = by_size(list(range(k)))
    processed: List[int] = []
    left = n
    while remaining:
        cur = remaining.pop(0)
        cap = m
        if exact:
            cap = hi if left - lo * (len(remaining) + 1) > 0 else lo
        while len(work[cur]) > cap:
            j = int(rng.integers(len(work[cur])))
            item = work[cur].pop(j)
            if remaining:
                dest = nearest(item, remaining)
            else:
                dest = min(processed, key=lambda i: (len(work[i]), i)) if processed else cur
                log.warning("no remaining cluster for overflow; moved to cluster %d", dest)
                if dest == cur:
                    work[cur].insert(j, item)
                    break
            work[dest].append(item)
            remaining = by_size(remaining)
        left -= len(work[cur])
        processed.append(cur)
    return work


def kmeans_partition(query_ids: Sequence[str], features: np.ndarray, k: int, seed,
                     strategy: str = "kmeans-QA", m: Optional[int] = None) -> Partition:
    """Mini-batch k-means (batch 256, 100 iterations, k-means++) then balancing."""
    from sklearn.cluster import MiniBatchKMeans

    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("features must be an (N, d) matrix with d >= 1")
    if x.shape[0] != len(query_ids):
        raise ValueError("one feature row per query id expected")
    if k < 2:
        raise ValueError("K must be >= 2")
    if np.unique(x, axis=0).shape[0] < k:
        raise ValueError("fewer distinct feature vectors than clusters")
    km = MiniBatchKMeans(n_clusters=k, batch_size=256, max_iter=100, init="k-means++",
                         n_init=1, random_state=int(seed) % (2 ** 32))
    labels = km.fit_predict(x)
    clusters = [np.flatnonzero(labels == c).tolist() for c in range(k)]
    balanced = balance_clusters(clusters, m, x, km.cluster_centers_, seed)
    return Partition([[query_ids[i] for i in sorted(c)] for c in balanced], strategy)


def within_cluster_ss(features: np.ndarray, clusters: Sequence[Sequence[int]]) -> float:
    x = np.asarray(features, dtype=np.float64)
    return float(sum(np.sum((x[c] - x[c].mean(axis=0)) ** 2) for c in clusters if len(c)))


# --- embedding features -----------------------------------------------------------

def ppmi_embeddings(token_lists: Sequence[Sequence[int]], vocab_size: int, dim: int = 64,
                    seed: int = 0) -> np.ndarray:
    """Word vectors from a rank-``dim`` decomposition of the PPMI matrix of
    within-text co-occurrence counts. Words never seen get zero vectors."""
    from scipy import sparse
    from scipy.sparse.linalg import svds

    rows, cols = [], []
    for i, toks in enumerate(token_lists):
        for t in set(toks):
            rows.append(i)
            cols.append(t)
    a = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)),
                          shape=(len(token_lists), vocab_size))
    co = (a.T @ a).tocsr()
    co.setdiag(0)
    co.eliminate_zeros()
    total = co.sum()
    if total == 0:
        return np.zeros((vocab_size, dim))
    rs = np.asarray(co.sum(axis=1)).ravel()
    co = co.tocoo()
    pmi = np.log(co.data * total / (rs[co.row] * rs[co.col]))
    keep = pmi > 0
    ppmi = sparse.csr_matrix((pmi[keep], (co.row[keep], co.col[keep])),
                             shape=(vocab_size, vocab_size))
    k = min(dim, min(ppmi.shape) - 1)
    if ppmi.nnz == 0 or k < 1:
        return np.zeros((vocab_size, dim))
    v0 = np.random.default_rng(seed).uniform(-1, 1, size=vocab_size)
    u, s, _ = svds(ppmi, k=k, v0=v0)
    order = np.argsort(-s)
    emb = u[:, order] * np.sqrt(s[order])
    # fix the sign of each component so the result is reproducible
    signs = np.sign(emb[np.argmax(np.abs(emb), axis=0), np.arange(emb.shape[1])])
    emb *= np.where(signs == 0, 1.0, signs)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb


def _mean_vec(ids: Sequence[int], emb: np.ndarray) -> np.ndarray:
    return emb[list(ids)].mean(axis=0) if len(ids) else np.zeros(emb.shape[1])


def query_features(qids: Sequence[str], queries: Mapping[str, Sequence[str]],
                   qrels: Mapping[str, Set[str]], corpus, kind: str = "QA", dim: int = 64,
                   seed: int = 0) -> np.ndarray:
    """Per-query features: average question embedding (Q), average answer
    embedding over the relevant documents (A), or both concatenated (QA).

    Embeddings come from co-occurrence in the corpus plus the given
    (training) queries, so query-only words also get vectors.
    """
    if kind not in ("Q", "A", "QA"):
        raise ValueError("kind must be Q, A or QA")
    vocab = corpus.vocab
    texts = [[vocab[t] for t in d.tokens] for d in corpus.documents]
    texts += [[vocab[t] for t in queries[q] if t in vocab] for q in qids]
    emb = ppmi_embeddings(texts, len(vocab), dim, seed)
    rows = []
    for q in qids:
        parts = []
        if "Q" in kind:
            parts.append(_mean_vec([vocab[t] for t in queries[q] if t in vocab], emb))
        if "A" in kind:
            docs = sorted(qrels.get(q, ()))
            vecs = [_mean_vec([vocab[t] for t in corpus.doc(d).tokens], emb) for d in docs]
            parts.append(np.mean(vecs, axis=0) if vecs else np.zeros(dim))
        rows.append(np.concatenate(parts))
    return np.array(rows)


def make_partition(strategy: str, qids: Sequence[str], k: int, seed,
                   queries=None, qrels=None, corpus=None) -> Partition:
    if strategy == "random":
        return random_partition(qids, k, seed)
    if strategy == "bagging":
        return bootstrap_partition(qids, k, seed)
    if strategy.startswith("kmeans-"):
        kind = strategy.split("-", 1)[1]
        feats = query_features(qids, queries, qrels, corpus, kind, seed=int(seed) % (2 ** 32))
        return kmeans_partition(qids, feats, k, seed, strategy)
    raise ValueError(f"unknown partition strategy {strategy!r}")


# --- partition study ---------------------------------------------------------------

@dataclass
class PartitionEvaluation:
    scores: np.ndarray       # s[i, j]: agent i on partition j
    oop_score: float
    oop_variance: float
    oop_error: float

    def row(self, task_score: float) -> Dict[str, float]:
        return {"E_i[e_i]": self.oop_error, "E_i[E_j!=i[s_ij]]": self.oop_score,
                "E_i[V_j!=i[s_ij]]": self.oop_variance, "score": task_score}


def evaluate_partitioning(agents: Sequence, eval_sets: Sequence[Sequence[str]],
                          score: Callable[[object, Sequence[str]], float]) -> PartitionEvaluation:
    """Score matrix of every agent on every partition's queries plus the
    out-of-partition diagnostics."""
    if len(agents) != len(eval_sets):
        raise ValueError("one evaluation set per agent expected")
    s = np.array([[score(a, qs) for qs in eval_sets] for a in agents], dtype=np.float64)
    sc, var, err = partition_metrics(s)
    return PartitionEvaluation(s, sc, var, err)


# --- files --------------------------------------------------------------------------

def write_partition_tsv(partition: Partition, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for j, subset in enumerate(partition.subsets):
            for q in subset:
                fh.write(f"{q}\t{j}\n")


def read_partition_tsv(path, strategy: str = "random") -> Partition:
    subsets: Dict[int, List[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                q, j = line.rstrip("\n").split("\t")
                subsets.setdefault(int(j), []).append(q)
    k = max(subsets) + 1 if subsets else 0
    return Partition([subsets.get(j, []) for j in range(k)], strategy)


def write_feature_cache(features: np.ndarray, path) -> None:
    """Header of two little-endian u64 (rows, dim), then float64 values row-major."""
    x = np.ascontiguousarray(features, dtype="<f8")
    if x.ndim != 2:
        raise ValueError("features must be 2-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", *x.shape))
        fh.write(x.tobytes())


def read_feature_cache(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16:
            raise ValueError("truncated feature cache header")
        rows, dim = struct.unpack("<QQ", head)
        data = fh.read()
    if len(data) != rows * dim * 8:
        raise ValueError("feature cache size does not match its header")
    return np.frombuffer(data, dtype="<f8").reshape(rows, dim).astype(np.float64)
