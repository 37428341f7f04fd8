"""Result aggregation across reformulations.

Every result retrieved by any reformulation becomes a candidate. Its
accumulated rank score ``s_A`` sums ``1/rank`` over the lists that contain
it, a learned relevance model gives ``s_R = P(relevant | q0, result)``, and
the final ranking sorts by ``s_A * s_R``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .nn import (EncoderConfig, ModelParams, bce_with_logits, bow_backward, bow_forward,
                 bow_matrix, cnn_backward, cnn_backward_batch, cnn_forward, cnn_forward_batch,
                 head_backward, head_forward, init_encoder_params, init_head_params,
                 make_optimizer, sigmoid)
from .search import Corpus, RankedList

log = logging.getLogger(__name__)

VARIANTS = ("product", "rank_only", "relevance_only", "count_rank", "concat_features")


@dataclass
class CandidateResult:
    doc_id: str
    ranks: Dict[int, int]            # reformulation index -> 1-based rank
    s_a: float
    s_r: float = 0.5

    @property
    def s(self) -> float:
        return self.s_a * self.s_r


def _as_record(r) -> dict:
    return r.to_json() if hasattr(r, "to_json") else r


def dedupe_and_rank_score(results: Sequence, variant: str = "product") -> List[CandidateResult]:
    """Unique results over all reformulations, sorted by doc id.

    ``results`` holds agent-result records (dicts with ``ranked_doc_ids``) or
    :class:`AgentResult` objects. ``count_rank`` counts the lists containing
    a result instead of summing reciprocal ranks.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    found: Dict[str, Dict[int, int]] = {}
    for i, r in enumerate(results):
        ids = _as_record(r)["ranked_doc_ids"]
        for rank, d in enumerate(ids, start=1):
            found.setdefault(d, {}).setdefault(i, rank)
    out = []
    for d in sorted(found):
        ranks = found[d]
        if variant == "count_rank":
            s_a = float(len(ranks))
        else:
            s_a = float(sum(1.0 / k for k in ranks.values()))
        out.append(CandidateResult(d, ranks, s_a))
    return out


def variant_score(c: CandidateResult, variant: str) -> float:
    if variant == "rank_only":
        return c.s_a
    if variant == "relevance_only":
        return c.s_r
    if variant in VARIANTS:
        return c.s_a * c.s_r
    raise ValueError(f"unknown variant {variant!r}")


def final_ranking(candidates: Sequence[CandidateResult], variant: str = "product",
                  k: int = 10) -> RankedList:
    """Top ``k`` candidates by variant score, doc id ascending on ties."""
    if k < 1:
        raise ValueError("K must be >= 1")
    scored = sorted(((variant_score(c, variant), c.doc_id) for c in candidates),
                    key=lambda x: (-x[0], x[1]))
    return RankedList([(d, s) for s, d in scored[:k]])


def oracle_ranking(candidates: Sequence[CandidateResult], relevant: Set[str],
                   k: int = 10) -> RankedList:
    """A perfect selector: relevant candidates first (by s_A), then the rest."""
    key = sorted(candidates, key=lambda c: (c.doc_id not in relevant, -c.s_a, c.doc_id))
    return RankedList([(c.doc_id, 1.0 if c.doc_id in relevant else 0.0) for c in key[:k]])


# --- relevance model ----------------------------------------------------------------

@dataclass
class AggregatorConfig:
    embed_dim: int = 32
    cnn_layers: Tuple[Tuple[int, int], ...] = ((9, 32), (3, 64))
    output_dim: int = 64
    hidden: int = 64
    shared_embeddings: bool = True    # one table for the CNN and BOW encoders
    features: str = "full"            # "full": [q; a; q-a; q*a], "concat": [q; a]
    agent_indicators: bool = False    # append which reformulations retrieved the result
    n_reformulations: int = 0         # width of the indicator block
    doc_len: int = 64
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-2
    optimizer: str = "adam"
    max_negatives: Optional[int] = None

    def __post_init__(self):
        if self.features not in ("full", "concat"):
            raise ValueError("features must be 'full' or 'concat'")
        if self.doc_len < 1:
            raise ValueError("doc_len must be >= 1")
        if self.agent_indicators and self.n_reformulations < 1:
            raise ValueError("agent_indicators needs n_reformulations >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "AggregatorConfig":
        d = dict(d)
        if "cnn_layers" in d:
            d["cnn_layers"] = tuple(tuple(x) for x in d["cnn_layers"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class RelevanceModel:
    """s_R = sigmoid(head(z)) with z built from a CNN query encoding and a
    bag-of-words result encoding."""

    def __init__(self, params: ModelParams, cfg: AggregatorConfig, corpus: Corpus):
        self.params = params
        self.cfg = cfg
        self.corpus = corpus
        self.unk = len(corpus.vocab)
        self.enc = EncoderConfig(len(corpus.vocab) + 1, cfg.embed_dim, tuple(cfg.cnn_layers),
                                 cfg.output_dim, cfg.shared_embeddings)
        self._doc_ids: Dict[str, List[int]] = {}

    @classmethod
    def create(cls, cfg: AggregatorConfig, corpus: Corpus, rng: np.random.Generator) -> "RelevanceModel":
        model = cls(ModelParams(), cfg, corpus)
        init_encoder_params(model.enc, rng, model.params)
        init_head_params(model.in_dim, cfg.hidden, rng, model.params)
        return model

    @property
    def in_dim(self) -> int:
        d = self.cfg.output_dim * (4 if self.cfg.features == "full" else 2)
        return d + (self.cfg.n_reformulations if self.cfg.agent_indicators else 0)

    def query_ids(self, q0: Sequence[str]) -> List[int]:
        ids = [self.corpus.vocab.get(t, self.unk) for t in q0]
        return ids or [self.unk]

    def doc_ids(self, doc_id: str) -> List[int]:
        ids = self._doc_ids.get(doc_id)
        if ids is None:
            toks = self.corpus.doc(doc_id).tokens[:self.cfg.doc_len]
            ids = [self.corpus.vocab[t] for t in toks] or [self.unk]
            self._doc_ids[doc_id] = ids
        return ids

    def bow_inputs(self, doc_ids: Sequence[str]):
        return bow_matrix([self.doc_ids(d) for d in doc_ids], self.enc.vocab_size)

    def indicators(self, candidates: Sequence[CandidateResult]) -> np.ndarray:
        ind = np.zeros((len(candidates), self.cfg.n_reformulations))
        for row, c in enumerate(candidates):
            for i in c.ranks:
                if i < ind.shape[1]:
                    ind[row, i] = 1.0
        return ind

    def _features(self, q: np.ndarray, a: np.ndarray, extra: Optional[np.ndarray]) -> np.ndarray:
        parts = [q, a] if self.cfg.features == "concat" else [q, a, q - a, q * a]
        if self.cfg.agent_indicators:
            parts.append(extra)
        return np.concatenate(parts, axis=1)

    def _feature_grads(self, dz: np.ndarray, q: np.ndarray, a: np.ndarray):
        """Per-row gradients w.r.t. the query and result encodings."""
        d = self.cfg.output_dim
        dq = dz[:, :d].copy()
        da = dz[:, d:2 * d].copy()
        if self.cfg.features == "full":
            dq += dz[:, 2 * d:3 * d] + dz[:, 3 * d:4 * d] * a
            da += -dz[:, 2 * d:3 * d] + dz[:, 3 * d:4 * d] * q
        return dq, da

    def forward(self, q0: Sequence[str], bow, extra: Optional[np.ndarray] = None):
        q, qc = cnn_forward(self.query_ids(q0), self.params, self.enc)
        a, mean = bow_forward(bow, self.params)
        qb = np.broadcast_to(q, a.shape)
        logits, hc = head_forward(self._features(qb, a, extra), self.params)
        return logits, (qb, qc, a, mean, bow, hc)

    def backward(self, dlogits: np.ndarray, cache) -> None:
        qb, qc, a, mean, bow, hc = cache
        dz = head_backward(dlogits, hc, self.params)
        dq, da = self._feature_grads(dz, qb, a)
        cnn_backward(dq.sum(axis=0), qc, self.params, self.enc)
        bow_backward(da, bow, mean, self.params)

    def batch_step(self, examples: Sequence["TrainingExample"], scale: float) -> float:
        """Summed per-query cross-entropy of ``examples`` in one pass;
        accumulates ``scale`` x grads. Queries of equal length share a CNN call."""
        from scipy import sparse

        qids = [self.query_ids(ex.q0) for ex in examples]
        q = np.empty((len(examples), self.cfg.output_dim))
        groups: Dict[int, List[int]] = {}
        for i, ids in enumerate(qids):
            groups.setdefault(len(ids), []).append(i)
        caches = []
        for idx in groups.values():
            out, c = cnn_forward_batch(np.array([qids[i] for i in idx]), self.params, self.enc)
            q[idx] = out
            caches.append((idx, c))
        for ex in examples:
            if ex.bow is None:
                ex.bow = self.bow_inputs([c.doc_id for c in ex.candidates])
        sizes = np.array([len(ex.candidates) for ex in examples])
        owner = np.repeat(np.arange(len(examples)), sizes)
        bow = sparse.vstack([ex.bow for ex in examples], format="csr")
        a, mean = bow_forward(bow, self.params)
        qrows = q[owner]
        extra = (np.vstack([self.indicators(ex.candidates) for ex in examples])
                 if self.cfg.agent_indicators else None)
        logits, hc = head_forward(self._features(qrows, a, extra), self.params)
        loss, dlogits = bce_with_logits(logits, np.concatenate([ex.labels for ex in examples]))
        dz = head_backward(scale * dlogits, hc, self.params)
        dq_rows, da = self._feature_grads(dz, qrows, a)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        dq = np.add.reduceat(dq_rows, starts, axis=0)
        for idx, c in caches:
            cnn_backward_batch(dq[idx], c, self.params, self.enc)
        bow_backward(da, bow, mean, self.params)
        return loss

    def score(self, q0: Sequence[str], candidates: Sequence[CandidateResult]) -> np.ndarray:
        if not candidates:
            return np.zeros(0)
        extra = self.indicators(candidates) if self.cfg.agent_indicators else None
        logits, _ = self.forward(q0, self.bow_inputs([c.doc_id for c in candidates]), extra)
        return sigmoid(logits)


def relevance_score(q0: Sequence[str], candidate: CandidateResult, model: RelevanceModel) -> float:
    return float(model.score(q0, [candidate])[0])


def query_loss(model: RelevanceModel, q0: Sequence[str], candidates: Sequence[CandidateResult],
               labels: np.ndarray, bow=None, scale: float = 1.0) -> float:
    """Summed cross-entropy over one query's candidates; accumulates ``scale`` x grads."""
    bow = model.bow_inputs([c.doc_id for c in candidates]) if bow is None else bow
    extra = model.indicators(candidates) if model.cfg.agent_indicators else None
    logits, cache = model.forward(q0, bow, extra)
    loss, dlogits = bce_with_logits(logits, labels)
    model.backward(scale * dlogits, cache)
    return loss


@dataclass
class TrainingExample:
    qid: str
    q0: List[str]
    candidates: List[CandidateResult]
    labels: np.ndarray
    bow: object = field(default=None, repr=False)


def group_records(records: Sequence) -> Dict[str, List[dict]]:
    """Agent-result records per qid, in file order."""
    out: Dict[str, List[dict]] = {}
    for r in records:
        r = _as_record(r)
        out.setdefault(r["qid"], []).append(r)
    return out


def build_examples(records: Sequence, queries: Mapping[str, Sequence[str]],
                   qrels: Mapping[str, Set[str]], variant: str = "product",
                   max_negatives: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> List[TrainingExample]:
    """Labelled candidate sets; queries with no positive candidate are dropped."""
    out = []
    dropped = 0
    for qid, recs in sorted(group_records(records).items()):
        cands = dedupe_and_rank_score(recs, variant)
        rel = qrels.get(qid, set())
        labels = np.array([1.0 if c.doc_id in rel else 0.0 for c in cands])
        if not cands or labels.sum() == 0:
            dropped += 1
            continue
        if max_negatives is not None and (labels == 0).sum() > max_negatives:
            rng = rng if rng is not None else np.random.default_rng(0)
            neg = np.flatnonzero(labels == 0)
            keep = np.sort(np.concatenate([np.flatnonzero(labels == 1),
                                           rng.choice(neg, size=max_negatives, replace=False)]))
            cands = [cands[i] for i in keep]
            labels = labels[keep]
        out.append(TrainingExample(qid, list(queries[qid]), cands, labels))
    if dropped:
        log.warning("excluded %d training queries without a positive candidate", dropped)
    return out


def train_aggregator(records: Sequence, queries: Mapping[str, Sequence[str]],
                     qrels: Mapping[str, Set[str]], corpus: Corpus, cfg: AggregatorConfig,
                     seed: int = 0) -> Tuple[RelevanceModel, List[float]]:
    """Fit the relevance model with Adam on summed per-query cross-entropy,
    averaged over each mini-batch of queries. Returns the model and the
    mean per-query loss of every epoch."""
    rng = np.random.default_rng(seed)
    model = RelevanceModel.create(cfg, corpus, rng)
    examples = build_examples(records, queries, qrels, max_negatives=cfg.max_negatives, rng=rng)
    if not examples:
        raise ValueError("no training query has a positive candidate")
    for ex in examples:
        ex.bow = model.bow_inputs([c.doc_id for c in ex.candidates])
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(examples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            model.params.zero_grad()
            total += model.batch_step([examples[i] for i in batch.tolist()], 1.0 / batch.size)
            model.params.check_finite()
            opt.step(model.params)
        curve.append(total / len(examples))
    return model, curve


def batch_loss(model: RelevanceModel, examples: Sequence[TrainingExample]) -> float:
    """Mean over ``examples`` of the summed per-query cross-entropy; fills grads."""
    model.params.zero_grad()
    return model.batch_step(examples, 1.0 / len(examples)) / len(examples)


def score_candidates(models: Sequence[RelevanceModel], q0: Sequence[str],
                     candidates: Sequence[CandidateResult]) -> None:
    """Set each candidate's s_R to the mean relevance over ``models``."""
    if not models:
        raise ValueError("need at least one aggregator model")
    s = np.mean([m.score(q0, candidates) for m in models], axis=0) if candidates else []
    for c, v in zip(candidates, s):
        c.s_r = float(v)


def aggregate(records: Sequence, q0: Sequence[str], models: Sequence[RelevanceModel],
              variant: str = "product", k: int = 10) -> Tuple[RankedList, List[CandidateResult]]:
    cands = dedupe_and_rank_score(records, variant)
    if variant != "rank_only":
        score_candidates(models, q0, cands)
    return final_ranking(cands, variant, k), cands


def ensemble_aggregators(models: Sequence[RelevanceModel], q0: Sequence[str],
                         candidates: Sequence[CandidateResult], variant: str = "product",
                         k: int = 10) -> RankedList:
    score_candidates(models, q0, candidates)
    return final_ranking(candidates, variant, k)
