"""Evaluation metrics: ranking quality, answer overlap, reformulation diversity
and partition generalisation diagnostics.

All ranking metrics use binary relevance. Diversity metrics average over
ordered pairs of distinct members of each reformulation set.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from typing import Callable, Dict, Iterable, List, Mapping, Sequence, Set, Tuple

import numpy as np


def _ids(ranked) -> List[str]:
    if hasattr(ranked, "doc_ids"):
        return ranked.doc_ids
    return [r[0] if isinstance(r, tuple) else r for r in ranked]


def _need(relevant: Set[str]) -> None:
    if not relevant:
        raise ValueError("empty relevant set")


def recall_at_k(ranked, relevant: Set[str], k: int) -> float:
    _need(relevant)
    return len(set(_ids(ranked)[:k]) & relevant) / len(relevant)


def average_precision(ranked, relevant: Set[str]) -> float:
    _need(relevant)
    hits = 0
    total = 0.0
    for i, d in enumerate(_ids(ranked), start=1):
        if d in relevant:
            hits += 1
            total += hits / i
    return total / len(relevant)


def r_precision(ranked, relevant: Set[str]) -> float:
    _need(relevant)
    r = len(relevant)
    return len(set(_ids(ranked)[:r]) & relevant) / r


def reciprocal_rank(ranked, relevant: Set[str]) -> float:
    _need(relevant)
    for i, d in enumerate(_ids(ranked), start=1):
        if d in relevant:
            return 1.0 / i
    return 0.0


def ndcg(ranked, relevant: Set[str]) -> float:
    _need(relevant)
    ids = _ids(ranked)
    dcg = sum(1.0 / math.log2(i + 1) for i, d in enumerate(ids, start=1) if d in relevant)
    # a ranking shorter than |D*| is still compared against the full ideal list
    ideal = sum(1.0 / math.log2(i + 1) for i in range(1, len(relevant) + 1))
    return dcg / ideal


# MAP over a query set is the mean of per-query average precision
map_score = average_precision
mrr = reciprocal_rank


def ranking_metrics(ranked, relevant: Set[str], k: int) -> Dict[str, float]:
    return {
        f"R@{k}": recall_at_k(ranked, relevant, k),
        "MAP": average_precision(ranked, relevant),
        "R-Prec": r_precision(ranked, relevant),
        "MRR": reciprocal_rank(ranked, relevant),
        "NDCG": ndcg(ranked, relevant),
    }


def macro_average(per_query: Mapping[str, Mapping[str, float]]) -> Dict[str, float]:
    if not per_query:
        return {}
    names = list(next(iter(per_query.values())))
    return {n: float(np.mean([m[n] for m in per_query.values()])) for n in names}


def token_f1(prediction: Sequence[str], truth: Sequence[str]) -> float:
    """Harmonic mean of bag-of-token precision and recall."""
    if not truth:
        raise ValueError("empty ground truth")
    common = sum((Counter(prediction) & Counter(truth)).values())
    if common == 0:
        return 0.0
    p = common / len(prediction)
    r = common / len(truth)
    return 2 * p * r / (p + r)


def oracle_score(candidate_scores: Sequence[Sequence[float]]) -> float:
    """Macro average over queries of the best candidate's score."""
    if any(len(c) == 0 for c in candidate_scores):
        raise ValueError("every query needs at least one candidate")
    return float(np.mean([max(c) for c in candidate_scores]))


# --- diversity ----------------------------------------------------------------

def _check_sets(Q) -> None:
    for qs in Q:
        if len(qs) < 2:
            raise ValueError("each reformulation set needs at least two members")


def _pairs(qs):
    n = len(qs)
    for i in range(n):
        for j in range(n):
            if i != j:
                yield qs[i], qs[j]


def _mean_pairwise(Q, fn) -> float:
    _check_sets(Q)
    return float(np.mean([np.mean([fn(a, b) for a, b in _pairs(qs)]) for qs in Q]))


def count_cosine(a: Sequence[str], b: Sequence[str]) -> float:
    ca, cb = Counter(a), Counter(b)
    dot = sum(v * cb[k] for k, v in ca.items())
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return dot / (na * nb)


def _ngrams(tokens: Sequence[str], n: int) -> List[Tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def sentence_bleu(hypothesis: Sequence[str], reference: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU with clipped counts, add-one smoothing for orders >= 2,
    and the standard brevity penalty."""
    if len(hypothesis) == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        h = Counter(_ngrams(hypothesis, n))
        r = Counter(_ngrams(reference, n))
        match = sum((h & r).values())
        total = max(len(hypothesis) - n + 1, 0)
        if n == 1:
            if match == 0:
                return 0.0
            p = match / total
        else:
            p = (match + 1) / (total + 1)
        log_p += math.log(p) / max_n
    bp = 1.0 if len(hypothesis) > len(reference) else math.exp(1 - len(reference) / len(hypothesis))
    return bp * math.exp(log_p)


def pinc_pair(q: Sequence[str], ref: Sequence[str], max_k: int = 4) -> float:
    """Mean over k of 1 - |kgrams(q) & kgrams(ref)| / |kgrams(ref)|, sets of k-grams;
    orders longer than ``ref`` are skipped."""
    terms = []
    for k in range(1, max_k + 1):
        ref_k = set(_ngrams(ref, k))
        if not ref_k:
            continue
        terms.append(1.0 - len(set(_ngrams(q, k)) & ref_k) / len(ref_k))
    return float(np.mean(terms)) if terms else 0.0


def pcos(Q) -> float:
    return 100.0 * _mean_pairwise(Q, count_cosine)


def pbleu(Q) -> float:
    return 100.0 * _mean_pairwise(Q, sentence_bleu)


def pinc(Q, max_k: int = 4) -> float:
    return 100.0 * _mean_pairwise(Q, lambda a, b: pinc_pair(a, b, max_k))


def length_std(Q) -> float:
    _check_sets(Q)
    return float(np.mean([np.std([len(q) for q in qs]) for qs in Q]))


def diversity(Q) -> Dict[str, float]:
    return {"pCos": pcos(Q), "pBLEU": pbleu(Q), "PINC": pinc(Q), "LengthStd": length_std(Q)}


# --- partition diagnostics --------------------------------------------------------

def partition_metrics(s) -> Tuple[float, float, float]:
    """Out-of-partition score, variance and error of an N x N score matrix.

    ``s[i, j]`` is agent i's score on partition j. The variance uses the
    N-2 denominator; the error compares each agent's own-partition score
    with its mean elsewhere.
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    if s.ndim != 2 or s.shape[1] != n:
        raise ValueError("score matrix must be square")
    if n < 3:
        raise ValueError("need at least 3 partitions")
    off = ~np.eye(n, dtype=bool)
    rows = [s[i, off[i]] for i in range(n)]
    means = np.array([r.mean() for r in rows])
    score = float(means.mean())
    variance = float(np.mean([np.sum((r - m) ** 2) / (n - 2) for r, m in zip(rows, means)]))
    error = float(np.mean(np.diag(s) - means))
    return score, variance, error


# --- run files and reports -------------------------------------------------------------

def read_run(path) -> Dict[str, List[Tuple[str, float]]]:
    """TREC-style run file: qid, doc_id, rank, score (tab or space separated)."""
    rows: Dict[str, List[Tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) < 4:
                continue
            qid, doc, rank, score = parts[0], parts[1], int(parts[2]), float(parts[3])
            rows.setdefault(qid, []).append((rank, doc, score))
    return {q: [(d, s) for _, d, s in sorted(v)] for q, v in rows.items()}


def write_run(run: Mapping[str, Sequence[Tuple[str, float]]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(run):
            for rank, (doc, score) in enumerate(run[qid], start=1):
                fh.write(f"{qid}\t{doc}\t{rank}\t{score:.10g}\n")


def evaluate_run(run: Mapping[str, Sequence[Tuple[str, float]]], qrels: Mapping[str, Set[str]],
                 k: int = 10) -> Tuple[Dict[str, Dict[str, float]], Dict[str, float]]:
    """Per-query and macro-averaged metrics; queries without judgements are skipped
    and judged queries missing from the run score zero."""
    per_query = {}
    for qid in sorted(qrels):
        rel = qrels[qid]
        if not rel:
            continue
        per_query[qid] = ranking_metrics([d for d, _ in run.get(qid, [])], rel, k)
    return per_query, macro_average(per_query)


def format_metrics_tsv(metrics: Mapping[str, float]) -> str:
    return "".join(f"{name}\t{value:.6f}\n" for name, value in metrics.items())


def format_metrics_json(metrics: Mapping[str, float]) -> str:
    return json.dumps({k: round(v, 6) for k, v in metrics.items()}, indent=2, sort_keys=True) + "\n"
