"""Synthetic retrieval benchmark with a controllable vocabulary gap.

Documents are drawn from topics grouped into families. Each topic owns a
set of specific words; each family owns words shared by its topics; a
background vocabulary is shared by everything. Queries are built from the
content words of one relevant document, and a fraction of those words is
replaced by a synonym that never occurs in any document. The original
query therefore under-retrieves, and reformulations that recover the
missing vocabulary help.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Set, Tuple

import numpy as np

from .search import Corpus, Document


@dataclass(frozen=True)
class SyntheticSpec:
    n_topics: int = 200
    topics_per_family: int = 5
    docs_per_topic: int = 10
    vocab_size: int = 8600
    background_words: int = 1500
    topic_words: int = 12
    generic_words: int = 60
    generic_per_topic: int = 3
    generic_share: float = 0.3
    distractor_words: int = 600
    distractors_per_doc: int = 2
    distractor_tf_max: int = 3
    family_words: int = 10
    doc_len_min: int = 30
    doc_len_max: int = 60
    topic_fraction: float = 0.45
    family_share: float = 0.35
    sibling_share: float = 0.3      # topic-slot tokens borrowed from a sibling topic
    synonym_table_size: int = 1800
    query_topics: int = 20          # queries come from this many topics (0 or more than n_topics: all)
    query_len_min: int = 4
    query_len_max: int = 6
    corruption_rate: float = 0.75
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 100

    def __post_init__(self):
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0, 1]")
        if not 0.0 <= self.sibling_share <= 1.0:
            raise ValueError("sibling_share must lie in [0, 1]")
        if self.n_topics < 1 or self.docs_per_topic < 1:
            raise ValueError("need at least one topic and one document per topic")
        if self.doc_len_min < 1 or self.doc_len_max < self.doc_len_min:
            raise ValueError("bad document length range")

    @property
    def n_families(self) -> int:
        return -(-self.n_topics // self.topics_per_family)

    @property
    def content_words(self) -> int:
        return self.n_topics * self.topic_words + self.n_families * self.family_words

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticData:
    corpus: Corpus
    queries: Dict[str, List[str]]
    qrels: Dict[str, Set[str]]
    synonyms: Dict[str, str]
    splits: Dict[str, List[str]]
    query_topic: Dict[str, int]


def _zipf(n: int, s: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def synth_corpus(spec: SyntheticSpec, seed: int = 0) -> SyntheticData:
    """Generate corpus, queries, qrels and the synonym table for ``seed``."""
    needed = (spec.background_words + spec.distractor_words + spec.generic_words
              + spec.content_words) + spec.synonym_table_size
    if needed > spec.vocab_size:
        raise ValueError(
            f"vocab_size {spec.vocab_size} too small: background + content words + "
            f"synonym table need {needed}")
    if spec.synonym_table_size > spec.content_words:
        raise ValueError("synonym table larger than the content vocabulary")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))

    names = [f"w{i:05d}" for i in rng.permutation(spec.vocab_size)]
    cursor = 0

    def take(n):
        nonlocal cursor
        out = names[cursor:cursor + n]
        cursor += n
        return out

    background = take(spec.background_words)
    distractors = take(spec.distractor_words)
    generic = take(spec.generic_words)
    family_vocab = [take(spec.family_words) for _ in range(spec.n_families)]
    topic_vocab = [take(spec.topic_words) for _ in range(spec.n_topics)]
    content = [w for ws in family_vocab for w in ws] + [w for ws in topic_vocab for w in ws]
    syn_targets = rng.choice(len(content), size=spec.synonym_table_size, replace=False)
    synonyms = {content[i]: s for i, s in
                zip(sorted(syn_targets.tolist()), take(spec.synonym_table_size))}

    topic_generic = [rng.choice(spec.generic_words, size=spec.generic_per_topic, replace=False)
                     for _ in range(spec.n_topics)]
    bg_p = _zipf(len(background), 1.0)
    tw_p = _zipf(spec.topic_words, 0.8)
    fw_p = _zipf(spec.family_words, 0.8)

    docs: List[Document] = []
    doc_topic: List[int] = []
    for topic in range(spec.n_topics):
        fam = topic // spec.topics_per_family
        for _ in range(spec.docs_per_topic):
            length = int(rng.integers(spec.doc_len_min, spec.doc_len_max + 1))
            kind = rng.random(length)
            own = spec.topic_fraction * (1 - spec.family_share - spec.generic_share)
            is_topic = kind < own
            is_generic = ~is_topic & (kind < own + spec.topic_fraction * spec.generic_share)
            is_family = ~(is_topic | is_generic) & (kind < spec.topic_fraction)
            is_bg = ~(is_topic | is_generic | is_family)
            ti = rng.choice(spec.topic_words, size=int(is_topic.sum()), p=tw_p)
            gi = rng.choice(topic_generic[topic], size=int(is_generic.sum()))
            fi = rng.choice(spec.family_words, size=int(is_family.sum()), p=fw_p)
            bi = rng.choice(len(background), size=int(is_bg.sum()), p=bg_p)
            toks = np.empty(length, dtype=object)
            src_topic = np.full(ti.size, topic)
            sibs = [t for t in range(fam * spec.topics_per_family,
                                     min((fam + 1) * spec.topics_per_family, spec.n_topics))
                    if t != topic]
            if sibs and spec.sibling_share > 0:
                borrow = rng.random(ti.size) < spec.sibling_share
                src_topic[borrow] = rng.choice(sibs, size=int(borrow.sum()))
            toks[is_topic] = [topic_vocab[t][i] for t, i in zip(src_topic.tolist(), ti.tolist())]
            toks[is_generic] = [generic[i] for i in gi]
            toks[is_family] = [family_vocab[fam][i] for i in fi]
            toks[is_bg] = [background[i] for i in bi]
            toks = toks.tolist()
            # a few document-specific repeated words that look salient to tf-idf
            for j in rng.choice(spec.distractor_words, size=spec.distractors_per_doc, replace=False):
                reps = int(rng.integers(2, spec.distractor_tf_max + 1))
                for _ in range(reps):
                    toks.insert(int(rng.integers(len(toks) + 1)), distractors[j])
            docs.append(Document(f"d{len(docs):05d}", tuple(toks)))
            doc_topic.append(topic)

    corpus = Corpus(docs, extra_vocab=sorted(synonyms.values()))
    by_topic: Dict[int, Set[str]] = {}
    for d, t in zip(docs, doc_topic):
        by_topic.setdefault(t, set()).add(d.doc_id)

    n_q = spec.n_train + spec.n_dev + spec.n_test
    queries: Dict[str, List[str]] = {}
    qrels: Dict[str, Set[str]] = {}
    query_topic: Dict[str, int] = {}
    content_set = set(content)
    # a small corpus simply uses all of its topics
    n_qt = min(spec.query_topics or spec.n_topics, spec.n_topics)
    q_topics = np.sort(rng.choice(spec.n_topics, size=n_qt, replace=False))
    for qi in range(n_q):
        topic = int(q_topics[rng.integers(n_qt)])
        src = topic * spec.docs_per_topic + int(rng.integers(spec.docs_per_topic))
        topic = doc_topic[src]
        words = sorted({t for t in docs[src].tokens if t in content_set})
        counts = np.array([docs[src].tokens.count(w) for w in words], dtype=np.float64)
        qlen = int(rng.integers(spec.query_len_min, spec.query_len_max + 1))
        qlen = min(qlen, len(words))
        chosen = rng.choice(len(words), size=qlen, replace=False, p=counts / counts.sum())
        q = []
        for i in chosen.tolist():
            w = words[i]
            if w in synonyms and rng.random() < spec.corruption_rate:
                w = synonyms[w]
            q.append(w)
        qid = f"q{qi:04d}"
        queries[qid] = q
        qrels[qid] = set(by_topic[topic])
        query_topic[qid] = topic

    qids = list(queries)
    order = rng.permutation(len(qids))
    shuffled = [qids[i] for i in order]
    splits = {
        "train": sorted(shuffled[:spec.n_train]),
        "dev": sorted(shuffled[spec.n_train:spec.n_train + spec.n_dev]),
        "test": sorted(shuffled[spec.n_train + spec.n_dev:]),
    }
    return SyntheticData(corpus, queries, qrels, synonyms, splits, query_topic)
