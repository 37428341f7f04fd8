"""Non-learned query expansion: tf-idf pseudo relevance feedback and RM3."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .search import InvertedIndex


@dataclass(frozen=True)
class PRFConfig:
    n_terms: int = 3
    k_docs: int = 3


@dataclass(frozen=True)
class RM3Config:
    lam: float = 0.65
    u: float = 1500.0
    n_terms: int = 100
    fb_docs: int = 10

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.u < 0:
            raise ValueError("u must be >= 0")


def tfidf_terms(index: InvertedIndex, doc_pos: int) -> List[Tuple[str, float]]:
    """Terms of one document ranked by tf(t,d) * ln(N / df(t)), ties by term."""
    vocab = index.corpus.id_to_term
    n = index.n_docs
    scored = [(vocab[tid], tf * math.log(n / index.df[tid]))
              for tid, tf in index.doc_tf[doc_pos].items()]
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored


def prf_expand(q0: Sequence[str], index: InvertedIndex, n_terms: int, k_docs: int) -> List[str]:
    """Append the top ``n_terms`` tf-idf terms of each of the top ``k_docs`` results."""
    if n_terms < 0 or k_docs < 0:
        raise ValueError("n_terms and k_docs must be >= 0")
    q0 = list(q0)
    if n_terms == 0 or k_docs == 0:
        return q0
    pos, _ = index.search_positions(q0, k_docs)
    added: List[str] = []
    seen = set()
    for p in pos.tolist():
        for term, _ in tfidf_terms(index, p)[:n_terms]:
            if term not in seen:
                seen.add(term)
                added.append(term)
    return q0 + added


def rm3_distribution(q0: Sequence[str], index: InvertedIndex, cfg: RM3Config) -> np.ndarray:
    """P(t|q0) over the whole vocabulary (indexed by term id).

    The feedback component weights each feedback document by its normalised
    query likelihood, so the result sums to one.
    """
    corpus = index.corpus
    pos, _ = index.search_positions(list(q0), cfg.fb_docs)
    if pos.size == 0:
        raise ValueError("no feedback documents")
    pc = corpus.term_counts / corpus.total_tokens
    lengths = index.doc_lengths[pos]
    if np.any(lengths + cfg.u == 0):
        raise ValueError("|d| + u is zero")

    # log P(q0|d), skipping terms unseen in the collection (a factor shared by all d)
    loglik = np.zeros(pos.size)
    for t in q0:
        tid = corpus.vocab.get(t)
        if tid is None or pc[tid] == 0.0:
            continue
        tf = np.array([index.doc_tf[p].get(tid, 0) for p in pos.tolist()], dtype=np.float64)
        loglik += np.log((tf + cfg.u * pc[tid]) / (lengths + cfg.u))
    w = np.exp(loglik - loglik.max())
    w /= w.sum()

    fb = pc * float(np.sum(w * cfg.u / (lengths + cfg.u)))
    for wd, p, ln in zip(w, pos.tolist(), lengths):
        for tid, tf in index.doc_tf[p].items():
            fb[tid] += wd * tf / (ln + cfg.u)

    orig = np.zeros(len(corpus.vocab))
    q_known = [corpus.vocab[t] for t in q0 if t in corpus.vocab]
    if q0:
        for tid in q_known:
            orig[tid] += 1.0 / len(q0)
    return (1.0 - cfg.lam) * orig + cfg.lam * fb


def rm3_terms(q0: Sequence[str], index: InvertedIndex, cfg: RM3Config) -> List[Tuple[str, float]]:
    """Top-N (term, P(t|q0)) pairs, probability descending, term ascending on ties."""
    p = rm3_distribution(q0, index, cfg)
    vocab = index.corpus.id_to_term
    nz = np.flatnonzero(p > 0)
    order = sorted(nz.tolist(), key=lambda i: (-p[i], vocab[i]))[:cfg.n_terms]
    return [(vocab[i], float(p[i])) for i in order]


def rm3_expand(q0: Sequence[str], index: InvertedIndex, cfg: RM3Config = RM3Config()) -> List[str]:
    """The N most probable terms under the relevance model form the new query."""
    return [t for t, _ in rm3_terms(q0, index, cfg)]


def write_expansion_trace(pairs: Sequence[Tuple[str, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for term, prob in pairs:
            fh.write(f"{term}\t{prob:.12g}\n")
