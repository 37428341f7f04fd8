"""In-process search environment: tokenizer, corpus, BM25 inverted index.

The index is immutable once built and every query is answered from
precomputed per-posting BM25 weights, so a search costs one scatter-add
per query token plus a partial sort.
"""
from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

_SPLIT = re.compile(r"[^0-9a-z]+")


def s_stem(token: str) -> str:
    """Conservative plural stripping (ies -> y, es -> e, s -> '')."""
    if len(token) > 3 and token.endswith("ies") and not token.endswith(("eies", "aies")):
        return token[:-3] + "y"
    if len(token) > 3 and token.endswith("es") and not token.endswith(("aes", "ees", "oes")):
        return token[:-1]
    if len(token) > 2 and token.endswith("s") and not token.endswith(("us", "ss")):
        return token[:-1]
    return token


def tokenize(text: str, stopwords: Optional[Set[str]] = None, stem: bool = False) -> List[str]:
    """Lowercase and split on anything that is not an ASCII letter or digit.

    Stopword removal and stemming are off by default.
    """
    toks = [t for t in _SPLIT.split(text.lower()) if t]
    if stopwords:
        toks = [t for t in toks if t not in stopwords]
    if stem:
        toks = [s_stem(t) for t in toks]
    return toks


@dataclass(frozen=True)
class Document:
    doc_id: str
    tokens: Tuple[str, ...]

    @property
    def length(self) -> int:
        return len(self.tokens)


class Corpus:
    """Documents plus vocabulary and collection statistics.

    Token ids are assigned in order of first appearance, so the mapping is
    a pure function of the document order.
    """

    def __init__(self, documents: Iterable[Document], extra_vocab: Iterable[str] = ()):
        self.documents: List[Document] = list(documents)
        self._pos: Dict[str, int] = {}
        for i, d in enumerate(self.documents):
            if d.doc_id in self._pos:
                raise ValueError(f"duplicate doc_id {d.doc_id!r}")
            self._pos[d.doc_id] = i
        self.vocab: Dict[str, int] = {}
        self.id_to_term: List[str] = []
        counts: Counter = Counter()
        for d in self.documents:
            counts.update(d.tokens)
            for t in d.tokens:
                self._add_term(t)
        # terms known to the system (e.g. query words) that never occur in a document
        for t in extra_vocab:
            self._add_term(t)
        self.term_counts = np.zeros(len(self.vocab), dtype=np.int64)
        for t, c in counts.items():
            self.term_counts[self.vocab[t]] = c
        self.total_tokens = int(self.term_counts.sum())

    def _add_term(self, t: str) -> None:
        if t not in self.vocab:
            self.vocab[t] = len(self.id_to_term)
            self.id_to_term.append(t)

    def __len__(self) -> int:
        return len(self.documents)

    def doc(self, doc_id: str) -> Document:
        return self.documents[self._pos[doc_id]]

    def position(self, doc_id: str) -> int:
        return self._pos[doc_id]

    def collection_prob(self, term: str) -> float:
        """P(t|C) = count(t) / |C|; zero for unseen terms."""
        i = self.vocab.get(term)
        if i is None or self.total_tokens == 0:
            return 0.0
        return self.term_counts[i] / self.total_tokens

    @classmethod
    def from_texts(cls, pairs: Iterable[Tuple[str, str]]) -> "Corpus":
        return cls(Document(doc_id, tuple(tokenize(text))) for doc_id, text in pairs)


@dataclass
class RankedList:
    """Ordered (doc_id, score) pairs, score descending, doc_id ascending on ties."""

    items: List[Tuple[str, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def doc_ids(self) -> List[str]:
        return [d for d, _ in self.items]

    @classmethod
    def from_scores(cls, scores: Dict[str, float], k: Optional[int] = None) -> "RankedList":
        ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        if k is not None:
            ordered = ordered[:k]
        return cls(ordered)


class InvertedIndex:
    """Immutable BM25 index over a :class:`Corpus`.

    Postings for each term are stored as parallel arrays of document
    positions (sorted) and raw term frequencies, with the BM25 per-posting
    weight precomputed.
    """

    def __init__(self, corpus: Corpus, k1: float = 1.2, b: float = 0.75):
        if len(corpus) == 0:
            raise ValueError("cannot index an empty corpus")
        self.corpus = corpus
        self.k1 = float(k1)
        self.b = float(b)
        n_docs = len(corpus)
        self.n_docs = n_docs
        self.doc_lengths = np.array([d.length for d in corpus.documents], dtype=np.float64)
        self.avgdl = float(self.doc_lengths.mean())
        # doc_id order used for tie-breaking: rank of each doc position in sorted doc_id order
        order = sorted(range(n_docs), key=lambda i: corpus.documents[i].doc_id)
        self._id_rank = np.empty(n_docs, dtype=np.int64)
        self._id_rank[order] = np.arange(n_docs)
        self._doc_ids = [d.doc_id for d in corpus.documents]

        post_docs: Dict[int, List[int]] = {}
        post_tf: Dict[int, List[int]] = {}
        self.doc_tf: List[Dict[int, int]] = []
        for pos, d in enumerate(corpus.documents):
            tf = Counter(corpus.vocab[t] for t in d.tokens)
            self.doc_tf.append(dict(tf))
            for tid in sorted(tf):
                post_docs.setdefault(tid, []).append(pos)
                post_tf.setdefault(tid, []).append(tf[tid])

        vsize = len(corpus.vocab)
        self.df = np.zeros(vsize, dtype=np.int64)
        self.postings: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        self._weights: Dict[int, np.ndarray] = {}
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_lengths / self.avgdl)
        for tid, docs in post_docs.items():
            docs_a = np.asarray(docs, dtype=np.int64)
            tf_a = np.asarray(post_tf[tid], dtype=np.float64)
            docs_a.setflags(write=False)
            tf_a.setflags(write=False)
            self.postings[tid] = (docs_a, tf_a)
            self.df[tid] = len(docs)
            w = self.idf(tid) * tf_a * (self.k1 + 1.0) / (tf_a + norm[docs_a])
            w.setflags(write=False)
            self._weights[tid] = w
        self.df.setflags(write=False)
        vocab = corpus.id_to_term
        self._by_term = {vocab[tid]: (self.postings[tid][0], w) for tid, w in self._weights.items()}

    def idf(self, tid: int) -> float:
        df = self.df[tid]
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def term_id(self, term: str) -> Optional[int]:
        return self.corpus.vocab.get(term)

    def tf(self, term: str, doc_pos: int) -> int:
        tid = self.corpus.vocab.get(term)
        if tid is None:
            return 0
        return self.doc_tf[doc_pos].get(tid, 0)

    def score_all(self, query: Sequence[str]) -> np.ndarray:
        """BM25 score of every document; each query token occurrence contributes.

        Tokens are added in sorted order, so the result depends only on the
        multiset of query tokens (bit for bit, not just up to rounding).
        """
        scores = np.zeros(self.n_docs)
        by_term = self._by_term
        for t in sorted(query):
            hit = by_term.get(t)
            if hit is not None:
                scores[hit[0]] += hit[1]
        return scores

    def search_positions(self, query: Sequence[str], k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Top-k document positions and scores; only documents matching a query term."""
        if k < 1:
            raise ValueError("K must be >= 1")
        scores = self.score_all(query)
        hit = np.flatnonzero(scores > 0.0)
        if hit.size == 0:
            return hit, scores[hit]
        hs = scores[hit]
        if hit.size > k:
            # keep everything tied with the k-th score, then order exactly
            kth = np.partition(hs, hit.size - k)[hit.size - k]
            keep = hs >= kth
            hit, hs = hit[keep], hs[keep]
        order = np.lexsort((self._id_rank[hit], -hs))[:k]
        return hit[order], hs[order]

    def search(self, query: Sequence[str], k: int) -> RankedList:
        pos, sc = self.search_positions(query, k)
        return RankedList([(self._doc_ids[p], float(s)) for p, s in zip(pos, sc)])

    def doc_id(self, pos: int) -> str:
        return self._doc_ids[pos]


def build_index(corpus: Corpus, k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    return InvertedIndex(corpus, k1=k1, b=b)


def bm25_search(index: InvertedIndex, query: Sequence[str], k: int) -> RankedList:
    return index.search(query, k)


def dirichlet_prob(term: str, doc: Document, u: float, corpus: Corpus,
                   tf: Optional[int] = None) -> float:
    """Dirichlet-smoothed P(t|d) = (tf(t,d) + u P(t|C)) / (|d| + u)."""
    if u < 0:
        raise ValueError("u must be >= 0")
    denom = doc.length + u
    if denom == 0:
        raise ValueError("|d| + u is zero")
    if tf is None:
        tf = doc.tokens.count(term)
    return (tf + u * corpus.collection_prob(term)) / denom


def recall(ranked: Sequence[str], relevant: Set[str]) -> float:
    if not relevant:
        raise ValueError("undefined recall: empty relevant set")
    return len(set(ranked) & relevant) / len(relevant)


def query_environment(index: InvertedIndex, q: Sequence[str], k: int,
                      relevant: Set[str]) -> Tuple[RankedList, float]:
    """One environment interaction: ranked results and Recall@K reward."""
    if not relevant:
        raise ValueError("undefined recall: empty relevant set")
    ranked = index.search(q, k)
    return ranked, recall(ranked.doc_ids, relevant)


class Environment:
    """Black-box search environment bound to an index, a depth and a qrels map.

    Searches are memoised by the sorted query tokens (BM25 ignores order);
    the cache is private to one environment instance.
    """

    def __init__(self, index: InvertedIndex, k: int, qrels: Dict[str, Set[str]],
                 cache_size: int = 200_000):
        self.index = index
        self.k = k
        self.qrels = qrels
        self._cache: Dict[Tuple[str, ...], Tuple[np.ndarray, np.ndarray]] = {}
        self._cache_size = cache_size
        self._rel_pos = {qid: {index.corpus.position(d) for d in docs if d in index.corpus._pos}
                         for qid, docs in qrels.items()}

    def positions(self, q: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        key = tuple(sorted(q))
        hit = self._cache.get(key)
        if hit is None:
            hit = self.index.search_positions(key, self.k)
            if len(self._cache) < self._cache_size:
                self._cache[key] = hit
        return hit

    def reward(self, qid: str, q: Sequence[str]) -> float:
        rel = self._rel_pos[qid]
        if not rel:
            raise ValueError("undefined recall: empty relevant set")
        pos, _ = self.positions(q)
        return sum(1 for p in pos.tolist() if p in rel) / len(self.qrels[qid])

    def step(self, qid: str, q: Sequence[str]) -> Tuple[RankedList, float]:
        pos, sc = self.positions(q)
        ranked = RankedList([(self.index.doc_id(p), float(s)) for p, s in zip(pos, sc)])
        return ranked, self.reward(qid, q)


# --- file formats -----------------------------------------------------------

def read_corpus_jsonl(path) -> Corpus:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                pairs.append((str(obj["doc_id"]), obj["text"]))
    return Corpus.from_texts(pairs)


def write_corpus_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus.documents:
            fh.write(json.dumps({"doc_id": d.doc_id, "text": " ".join(d.tokens)}) + "\n")


def read_queries_tsv(path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if row:
                out[row[0]] = row[1] if len(row) > 1 else ""
    return out


def write_queries_tsv(queries: Dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for qid, text in queries.items():
            fh.write(f"{qid}\t{text}\n")


def read_qrels_tsv(path) -> Dict[str, Set[str]]:
    out: Dict[str, Set[str]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if len(row) >= 2:
                out.setdefault(row[0], set()).add(row[1])
    return out


def write_qrels_tsv(qrels: Dict[str, Set[str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for qid, docs in qrels.items():
            for d in sorted(docs):
                fh.write(f"{qid}\t{d}\n")
