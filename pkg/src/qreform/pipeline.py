"""Experiment orchestration: datasets, the named arms, and report tables.

A run trains every agent the requested arms need (each agent at most once
per seed, shared between arms through a content key), writes the agent
result logs, trains the aggregators on the training-query logs and
evaluates every arm on held-out queries. All report files are pure
functions of the configuration and seed.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from . import metrics as M
from .agents import (AgentResult, AgentTrainConfig, CandidatePool, Policy, PolicyConfig,
                     Reformulation, build_candidate_pool, decode, ensemble_decode,
                     identity_agent, init_policy, train_agent, write_agent_results)
from .aggregator import (AggregatorConfig, RelevanceModel, aggregate, dedupe_and_rank_score,
                         group_records, oracle_ranking, score_candidates, final_ranking,
                         train_aggregator)
from .baselines import RM3Config, prf_expand, rm3_expand
from .partitioning import (evaluate_partitioning, make_partition, random_partition,
                           write_partition_tsv)
from .search import (Corpus, Environment, InvertedIndex, RankedList, build_index,
                     read_corpus_jsonl, read_qrels_tsv, read_queries_tsv, tokenize)
from .synth import SyntheticSpec, synth_corpus

log = logging.getLogger(__name__)

# reference values printed next to the desk-scale numbers
DIVERSITY_ANCHORS = {
    "AQA": (66.4, 45.7, 58.7, 3.8),
    "AQA-10-Full": (29.5, 26.6, 79.5, 9.2),
    "AQA-10-Sub": (14.2, 12.8, 94.5, 11.7),
}
ABLATION_ANCHORS = {"product": 0.0, "concat_features": -0.4, "count_rank": -0.6,
                    "rank_only": -1.2, "relevance_only": -1.4}
STABILITY_ANCHOR = {"multi_agent": 0.20, "single_agent": 1.07}

ARMS = ("bm25", "prf", "rm3", "rl-rnn", "ensemble", "full", "full-agg-ensemble", "bagging",
        "sub", "sub-pretrained", "rnn-greedy-agg", "rnn-sampled-agg", "rnn-beam-agg")
AGGREGATED = {"full", "full-agg-ensemble", "bagging", "sub", "sub-pretrained",
              "rnn-greedy-agg", "rnn-sampled-agg", "rnn-beam-agg"}
MULTI_AGENT = {"full", "bagging", "sub", "sub-pretrained"}


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


class DataError(ValueError):
    """Malformed or inconsistent input data (exit code 3)."""


def arm_label(arm: str, n: int, k_rewrites: int = 20) -> str:
    return {
        "bm25": "BM25", "prf": "PRF", "rm3": "RM3", "rl-rnn": "RL-RNN",
        "ensemble": f"RL-{n}-Ensemble", "full": f"RL-{n}-Full",
        "full-agg-ensemble": f"RL-{n}-Full (Ensemble {n} Aggregators)",
        "bagging": f"RL-{n}-Bagging", "sub": f"RL-{n}-Sub",
        "sub-pretrained": f"RL-{n}-Sub (Pretrained)",
        "rnn-greedy-agg": "RL-RNN Greedy + Aggregator",
        "rnn-sampled-agg": f"RL-RNN {k_rewrites} Sampled + Aggregator",
        "rnn-beam-agg": f"RL-RNN {k_rewrites} Beam + Aggregator",
    }[arm]


# --- configuration ------------------------------------------------------------------

DEFAULT_SYNTHETIC: dict = {}   # SyntheticSpec defaults are the benchmark


@dataclass
class ExperimentConfig:
    """Experiment settings. ``to_dict`` / ``from_dict`` use the JSON schema
    documented in the README; aggregator hyperparameters use the familiar
    names (mini_batch_size, learning_rate, filter_sizes, ...)."""

    synthetic: Optional[dict] = field(default_factory=lambda: dict(DEFAULT_SYNTHETIC))
    data_dir: Optional[str] = None
    n_agents: int = 4
    partition: str = "random"
    reward_k: int = 10
    result_depth: int = 10
    eval_k: int = 10
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    arms: List[str] = field(default_factory=lambda: ["bm25", "prf", "rm3", "rl-rnn", "full", "sub"])
    # sub-agents
    embed_dim: int = 16
    t_max: int = 10
    k_docs: int = 10
    m_terms: int = 20
    steps: int = 240
    mini_batch_size: int = 32
    n_samples: int = 8
    learning_rate: float = 0.03
    optimizer: str = "adam"
    baseline: str = "loo"
    baseline_decay: float = 0.99
    pretrain_steps: int = 240
    # decoding
    decode: str = "greedy"
    beam_width: int = 20
    n_rewrites: int = 20
    # aggregator
    aggregator: dict = field(default_factory=dict)
    n_aggregators: int = 4
    ablation: bool = True
    # baselines
    prf_n_terms: List[int] = field(default_factory=lambda: [1, 2, 3, 5])
    prf_k_docs: List[int] = field(default_factory=lambda: [1, 3, 5, 10])
    rm3_lambda: float = 0.65
    rm3_u: float = 1500.0
    rm3_fb_docs: int = 10
    rm3_n_terms: List[int] = field(default_factory=lambda: [5, 10, 20, 50, 100])
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ConfigError(f"unknown arms {bad}; choose from {list(ARMS)}")
        if self.synthetic is None and self.data_dir is None:
            raise ConfigError("need a synthetic spec or a data_dir")
        if self.data_dir is not None:
            for name in ("corpus.jsonl", "queries.tsv", "qrels.tsv", "splits.tsv"):
                if not (Path(self.data_dir) / name).exists():
                    raise ConfigError(f"missing {name} in {self.data_dir}")
        if self.partition not in ("random", "kmeans-Q", "kmeans-A", "kmeans-QA"):
            raise ConfigError(f"unknown partition strategy {self.partition!r}")
        if self.decode not in ("greedy", "beam"):
            raise ConfigError("decode must be greedy or beam")
        for name in ("reward_k", "result_depth", "eval_k", "steps", "mini_batch_size",
                     "n_samples", "beam_width", "n_rewrites", "n_aggregators", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        try:
            self.aggregator_config()
            if self.synthetic is not None:
                SyntheticSpec(**self.synthetic)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def aggregator_config(self) -> AggregatorConfig:
        a = dict(self.aggregator)
        kw = {}
        names = {"filter_sizes": None, "kernels": None, "D": "output_dim",
                 "hidden": "hidden", "embed_dim": "embed_dim", "learning_rate": "lr",
                 "mini_batch_size": "batch_size", "epochs": "epochs",
                 "optimizer": "optimizer", "doc_len": "doc_len", "features": "features",
                 "max_negatives": "max_negatives", "agent_indicators": "agent_indicators",
                 "shared_embeddings": "shared_embeddings"}
        unknown = set(a) - set(names)
        if unknown:
            raise ValueError(f"unknown aggregator keys {sorted(unknown)}")
        if "filter_sizes" in a or "kernels" in a:
            fs = a.get("filter_sizes", [9, 3])
            ks = a.get("kernels", [32, 64])
            if len(fs) != len(ks):
                raise ValueError("filter_sizes and kernels must have equal length")
            kw["cnn_layers"] = tuple(zip(fs, ks))
        for k, v in a.items():
            if names.get(k):
                kw[names[k]] = v
        if "D" in a and "hidden" not in a:
            kw["hidden"] = a["D"]
        if kw.get("agent_indicators"):
            kw["n_reformulations"] = self.n_agents + 1   # sub-agents plus the identity agent
        return AggregatorConfig(**kw)

    def policy_config(self, vocab_size: int) -> PolicyConfig:
        return PolicyConfig(vocab_size, self.embed_dim, self.t_max, self.k_docs, self.m_terms)

    def train_config(self, steps: Optional[int] = None) -> AgentTrainConfig:
        return AgentTrainConfig(steps or self.steps, self.mini_batch_size, self.n_samples,
                                self.learning_rate, self.optimizer, self.baseline_decay,
                                self.baseline)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**dict(d))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)


# --- data ----------------------------------------------------------------------------

@dataclass
class Dataset:
    corpus: Corpus
    queries: Dict[str, List[str]]
    qrels: Dict[str, Set[str]]
    splits: Dict[str, List[str]]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for d in self.corpus.documents:
            h.update(d.doc_id.encode())
            h.update(" ".join(d.tokens).encode())
        for q in sorted(self.queries):
            h.update(f"{q}\t{' '.join(self.queries[q])}\t{','.join(sorted(self.qrels.get(q, ())))}".encode())
        for s in sorted(self.splits):
            h.update(f"{s}:{','.join(self.splits[s])}".encode())
        return h.hexdigest()


def read_splits_tsv(path) -> Dict[str, List[str]]:
    out: Dict[str, List[str]] = {"train": [], "dev": [], "test": []}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                qid, split = line.rstrip("\n").split("\t")
                if split not in out:
                    raise DataError(f"unknown split {split!r}")
                out[split].append(qid)
    return {k: sorted(v) for k, v in out.items()}


def write_splits_tsv(splits: Mapping[str, Sequence[str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in ("train", "dev", "test"):
            for q in splits.get(s, []):
                fh.write(f"{q}\t{s}\n")


def load_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    if cfg.data_dir is None:
        d = synth_corpus(SyntheticSpec(**cfg.synthetic), seed)
        return Dataset(d.corpus, d.queries, d.qrels, d.splits)
    root = Path(cfg.data_dir)
    try:
        corpus = read_corpus_jsonl(root / "corpus.jsonl")
        queries = {q: tokenize(t) for q, t in read_queries_tsv(root / "queries.tsv").items()}
        qrels = read_qrels_tsv(root / "qrels.tsv")
        splits = read_splits_tsv(root / "splits.tsv")
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(str(exc)) from exc
    for s, qids in splits.items():
        missing = [q for q in qids if q not in queries]
        if missing:
            raise DataError(f"{s} split references unknown queries {missing[:3]}")
    for s in ("dev", "test"):
        unjudged = [q for q in splits[s] if not qrels.get(q)]
        if unjudged:
            log.warning("%d %s queries have no judgements and are skipped", len(unjudged), s)
            splits[s] = [q for q in splits[s] if qrels.get(q)]
    splits["train"] = [q for q in splits["train"] if qrels.get(q)]
    empty = [s for s in ("train", "test") if not splits.get(s)]
    if empty:
        raise DataError(f"no judged queries in split(s) {empty}")
    return Dataset(corpus, queries, qrels, splits)


# --- per-seed context -----------------------------------------------------------------------

def _sub_seed(seed: int, *path) -> int:
    ss = np.random.SeedSequence([int(seed) % (2 ** 63)] + [int(p) for p in path])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


class SeedContext:
    """Everything one seed's arms share: data, index, environment, pools, agents."""

    def __init__(self, cfg: ExperimentConfig, seed: int, log_dir: Optional[Path] = None):
        self.cfg = cfg
        self.seed = seed
        self.data = load_dataset(cfg, seed)
        self.index = build_index(self.data.corpus)
        self.env = Environment(self.index, cfg.reward_k, self.data.qrels)
        self.pcfg = cfg.policy_config(len(self.data.corpus.vocab))
        self.fingerprint = self.data.fingerprint()
        self.log_dir = log_dir
        self._pools: Dict[str, CandidatePool] = {}
        self._agents: Dict[str, Policy] = {}
        self._logs: Dict[str, List[dict]] = {}
        self._aggs: Dict[str, RelevanceModel] = {}

    # candidate pools are computed lazily and shared by all agents
    def pool(self, qid: str) -> CandidatePool:
        p = self._pools.get(qid)
        if p is None:
            p = build_candidate_pool(self.data.queries[qid], self.index, self.cfg.k_docs,
                                     self.cfg.m_terms)
            self._pools[qid] = p
        return p

    def pools(self, qids: Sequence[str]) -> Dict[str, CandidatePool]:
        return {q: self.pool(q) for q in qids}

    @property
    def train(self) -> List[str]:
        return self.data.splits["train"]

    def agent(self, qids: Sequence[str], index: int, init: Optional[str] = None,
              steps: Optional[int] = None) -> Tuple[str, Policy]:
        """Train (or reuse) the agent with this data, initialisation and seed path.

        Agent ``index`` trained on the full training set is the same policy
        whichever arm asks for it; ``RL-RNN`` is agent 0 on the full set.
        """
        qids = sorted(qids) if init != "bag" else list(qids)
        steps = steps or self.cfg.steps
        key = _key(self.fingerprint, qids, index, init, steps, self.cfg.train_config(steps).__dict__,
                   self.pcfg.__dict__, self.seed)
        if key in self._agents:
            return key, self._agents[key]
        seed = _sub_seed(self.seed, 1, index)
        if init is not None and init != "bag":
            params = self._agents[init].params.copy()
        else:
            params = init_policy(self.pcfg, np.random.default_rng(seed))
        pol = Policy(params, self.pcfg, self.data.corpus.vocab, agent_id=f"agent{index}")
        train_agent(pol, qids, self.data.queries, self.env, self.pools(qids),
                    self.cfg.train_config(steps), seed)
        self._agents[key] = pol
        return key, pol

    def train_agents(self, jobs: Sequence[Tuple[Sequence[str], int, Optional[str]]]) -> List[Tuple[str, Policy]]:
        for qids, _, _ in jobs:
            self.pools(qids)
        if self.cfg.threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(self.cfg.threads) as ex:
                return list(ex.map(lambda j: self.agent(*j), jobs))
        return [self.agent(*j) for j in jobs]

    def reformulations(self, pol: Policy, qid: str, mode: str = "greedy",
                       n: int = 1) -> List[Reformulation]:
        q0 = self.data.queries[qid]
        pool = self.pool(qid)
        if mode == "greedy":
            return decode(pol, pool, q0, "greedy")
        if mode == "beam":
            return decode(pol, pool, q0, "beam", beam_width=n)
        if mode == "sample":
            return decode(pol, pool, q0, "sample", n_samples=n,
                          rng_seed=_sub_seed(self.seed, 2, int(qid.encode().hex(), 16) % (2 ** 31)))
        raise ValueError(mode)

    def results(self, qid: str, reform: Reformulation) -> AgentResult:
        ranked = self.index.search(reform.query, self.cfg.result_depth)
        rel = self.data.qrels.get(qid, set())
        reward = M.recall_at_k(ranked, rel, self.cfg.reward_k) if rel else 0.0
        return AgentResult(qid, reform, ranked, reward)

    def agent_log(self, name: str, agents: Sequence[Tuple[str, Policy]], qids: Sequence[str],
                  mode: str = "greedy", n: int = 1, identity: bool = True) -> List[dict]:
        """Agent-result records for ``qids``; cached in memory and, when a log
        directory is set, on disk under a content address."""
        key = _key(name, [k for k, _ in agents], list(qids), mode, n, identity,
                   self.cfg.result_depth, self.cfg.reward_k)
        if key in self._logs:
            return self._logs[key]
        path = self.log_dir / f"{key}.jsonl" if self.log_dir is not None else None
        if path is not None and path.exists():
            from .agents import read_agent_results
            recs = read_agent_results(path)
        else:
            out: List[AgentResult] = []
            for q in qids:
                for i, (_, pol) in enumerate(agents):
                    for r in self.reformulations(pol, q, mode, n):
                        r.agent_id = f"agent{i}"
                        out.append(self.results(q, r))
                if identity:
                    out.append(self.results(q, identity_agent(self.data.queries[q])))
            recs = [r.to_json() for r in out]
            if path is not None:
                _atomic_write(path, lambda p: write_agent_results(out, p))
        self._logs[key] = recs
        return recs

    def aggregator(self, records: Sequence[dict], index: int = 0,
                   cfg: Optional[AggregatorConfig] = None) -> RelevanceModel:
        cfg = cfg or self.cfg.aggregator_config()
        key = _key(_key(records), index, cfg.to_dict())
        m = self._aggs.get(key)
        if m is None:
            m, _ = train_aggregator(records, self.data.queries, self.data.qrels, self.data.corpus,
                                    cfg, _sub_seed(self.seed, 3, index))
            self._aggs[key] = m
        return m


def _atomic_write(path: Path, writer: Callable[[str], None]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


# --- arms ------------------------------------------------------------------------------

@dataclass
class ArmResult:
    arm: str
    label: str
    run: Dict[str, List[Tuple[str, float]]]              # test qid -> ranking
    per_query: Dict[str, Dict[str, float]]
    metrics: Dict[str, float]
    oracle: Dict[str, float]                              # per-query oracle R@K
    reformulations: Dict[str, List[List[str]]] = field(default_factory=dict)
    extra: Dict[str, object] = field(default_factory=dict)


def _tune_prf(ctx: SeedContext) -> Tuple[int, int]:
    cfg = ctx.cfg
    best = None
    for n in cfg.prf_n_terms:
        for k in cfg.prf_k_docs:
            s = np.mean([ctx.env.reward(q, prf_expand(ctx.data.queries[q], ctx.index, n, k))
                         for q in ctx.data.splits["dev"]])
            if best is None or s > best[0]:
                best = (s, n, k)
    return best[1], best[2]


def _rm3_query(ctx: SeedContext, q0: Sequence[str], n_terms: int) -> List[str]:
    cfg = ctx.cfg
    if len(ctx.index.search(q0, 1)) == 0:
        return list(q0)   # nothing retrieved: no feedback documents
    return rm3_expand(q0, ctx.index, RM3Config(cfg.rm3_lambda, cfg.rm3_u, n_terms, cfg.rm3_fb_docs))


def _tune_rm3(ctx: SeedContext) -> int:
    best = None
    for n in ctx.cfg.rm3_n_terms:
        s = np.mean([ctx.env.reward(q, _rm3_query(ctx, ctx.data.queries[q], n))
                     for q in ctx.data.splits["dev"]])
        if best is None or s > best[0]:
            best = (s, n)
    return best[1]


def _single_list_arm(ctx: SeedContext, arm: str, qids: Sequence[str],
                     rewrite: Callable[[str], List[str]]) -> ArmResult:
    k = ctx.cfg.eval_k
    run, oracle, refs = {}, {}, {}
    for q in qids:
        query = rewrite(q)
        refs[q] = [query]
        ranked = ctx.index.search(query, max(k, ctx.cfg.result_depth))
        run[q] = list(ranked.items[:k])
        cands = dedupe_and_rank_score([{"ranked_doc_ids": ranked.doc_ids[:k]}])
        oracle[q] = M.recall_at_k(oracle_ranking(cands, ctx.data.qrels[q], k), ctx.data.qrels[q], k)
    per_query, macro = M.evaluate_run(run, {q: ctx.data.qrels[q] for q in qids}, k)
    return ArmResult(arm, arm_label(arm, ctx.cfg.n_agents, ctx.cfg.n_rewrites), run, per_query,
                     macro, oracle, refs)


def _aggregated_arm(ctx: SeedContext, arm: str, test_recs: Sequence[dict],
                    models: Sequence[RelevanceModel], variant: str = "product",
                    qids: Optional[Sequence[str]] = None) -> ArmResult:
    k = ctx.cfg.eval_k
    groups = group_records(test_recs)
    qids = sorted(groups) if qids is None else qids
    run, oracle, refs = {}, {}, {}
    for q in qids:
        recs = groups.get(q, [])
        ranked, cands = aggregate(recs, ctx.data.queries[q], models, variant, k)
        run[q] = list(ranked.items)
        oracle[q] = M.recall_at_k(oracle_ranking(cands, ctx.data.qrels[q], k), ctx.data.qrels[q], k)
        refs[q] = [r["reformulation"] for r in recs if r["agent_id"] != "identity"]
    per_query, macro = M.evaluate_run(run, {q: ctx.data.qrels[q] for q in qids}, k)
    return ArmResult(arm, arm_label(arm, ctx.cfg.n_agents, ctx.cfg.n_rewrites), run, per_query,
                     macro, oracle, refs)


def arm_agents(ctx: SeedContext, arm: str) -> List[Tuple[str, Policy]]:
    cfg = ctx.cfg
    n = cfg.n_agents
    train = ctx.train
    if arm in ("rl-rnn", "rnn-greedy-agg", "rnn-sampled-agg", "rnn-beam-agg"):
        return ctx.train_agents([(train, 0, None)])
    if arm in ("full", "ensemble", "full-agg-ensemble"):
        return ctx.train_agents([(train, i, None) for i in range(n)])
    if arm == "bagging":
        part = make_partition("bagging", train, n, _sub_seed(ctx.seed, 4))
        return ctx.train_agents([(s, 100 + i, "bag") for i, s in enumerate(part.subsets)])
    if arm == "sub":
        part = sub_partition(ctx)
        # same seed path as full agent i, so with one partition this is the RL-RNN agent
        return ctx.train_agents([(s, i, None) for i, s in enumerate(part.subsets)])
    if arm == "sub-pretrained":
        base, _ = ctx.agent(train, 0, None, cfg.pretrain_steps)
        part = sub_partition(ctx)
        return ctx.train_agents([(s, 300 + i, base) for i, s in enumerate(part.subsets)])
    raise ValueError(arm)


def sub_partition(ctx: SeedContext, strategy: Optional[str] = None, n: Optional[int] = None):
    strategy = strategy or ctx.cfg.partition
    n = n or ctx.cfg.n_agents
    return make_partition(strategy, ctx.train, n, _sub_seed(ctx.seed, 5),
                          ctx.data.queries, ctx.data.qrels, ctx.data.corpus)


def run_arm(ctx: SeedContext, arm: str, qids: Optional[Sequence[str]] = None) -> ArmResult:
    cfg = ctx.cfg
    qids = list(ctx.data.splits["test"] if qids is None else qids)
    queries = ctx.data.queries
    if arm == "bm25":
        return _single_list_arm(ctx, arm, qids, lambda q: list(queries[q]))
    if arm == "prf":
        n, k = _tune_prf(ctx)
        res = _single_list_arm(ctx, arm, qids, lambda q: prf_expand(queries[q], ctx.index, n, k))
        res.extra = {"n_terms": n, "k_docs": k}
        return res
    if arm == "rm3":
        n = _tune_rm3(ctx)
        res = _single_list_arm(ctx, arm, qids, lambda q: _rm3_query(ctx, queries[q], n))
        res.extra = {"n_terms": n}
        return res
    agents = arm_agents(ctx, arm)
    if arm == "rl-rnn":
        pol = agents[0][1]
        return _single_list_arm(ctx, arm, qids,
                                lambda q: ctx.reformulations(pol, q, cfg.decode, cfg.beam_width)[0].query)
    if arm == "ensemble":
        pols = [p for _, p in agents]
        return _single_list_arm(ctx, arm, qids,
                                lambda q: ensemble_decode(pols, ctx.pool(q), queries[q]).query)
    mode, n = cfg.decode, cfg.beam_width
    if arm == "rnn-sampled-agg":
        mode, n = "sample", cfg.n_rewrites
    elif arm == "rnn-beam-agg":
        mode, n = "beam", cfg.n_rewrites
    elif arm == "rnn-greedy-agg":
        mode, n = "greedy", 1
    if mode == "beam" and arm not in ("rnn-beam-agg",):
        n = 1   # one (top-beam) reformulation per sub-agent
    train_recs = ctx.agent_log(arm, agents, ctx.train, mode, n)
    test_recs = ctx.agent_log(arm, agents, qids, mode, n)
    n_models = cfg.n_aggregators if arm == "full-agg-ensemble" else 1
    models = [ctx.aggregator(train_recs, j) for j in range(n_models)]
    res = _aggregated_arm(ctx, arm, test_recs, models, "product", qids)
    res.extra = {"train_records": train_recs, "models": models, "agents": agents}
    return res


# --- reports ---------------------------------------------------------------------------

METRIC_ORDER = ("R@{k}", "MAP", "R-Prec", "MRR", "NDCG")


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def metric_rows(results: Sequence[ArmResult], k: int) -> List[List[str]]:
    names = [m.format(k=k) for m in METRIC_ORDER]
    rows = [["arm"] + names + [f"Oracle R@{k}"]]
    for r in results:
        rows.append([r.label] + [_fmt(r.metrics[n]) for n in names]
                    + [_fmt(float(np.mean(list(r.oracle.values()))))])
    return rows


def write_tsv(rows: Sequence[Sequence[str]], path) -> None:
    _atomic_write(Path(path), lambda p: Path(p).write_text(
        "".join("\t".join(map(str, r)) + "\n" for r in rows), encoding="utf-8"))


def write_json(obj, path) -> None:
    _atomic_write(Path(path), lambda p: Path(p).write_text(
        json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"))


def diversity_rows(results: Sequence[ArmResult], k: int) -> List[List[str]]:
    rows = [["method", "pCos", "pBLEU", "PINC", "LengthStd", f"R@{k}", f"Oracle R@{k}", "source"]]
    for r in results:
        sets = [v for v in r.reformulations.values() if len(v) >= 2]
        if not sets:
            continue
        d = M.diversity(sets)
        rows.append([r.label] + [f"{d[x]:.1f}" for x in ("pCos", "pBLEU", "PINC", "LengthStd")]
                    + [_fmt(r.metrics[f"R@{k}"]), _fmt(float(np.mean(list(r.oracle.values())))),
                       "this run"])
    for name, vals in DIVERSITY_ANCHORS.items():
        rows.append([name] + [f"{v:.1f}" for v in vals] + ["-", "-", "reference (QA task)"])
    return rows


def diversity_report(results: Sequence[ArmResult], k: int = 10) -> Dict[str, Dict[str, float]]:
    out = {}
    for r in results:
        sets = [v for v in r.reformulations.values() if len(v) >= 2]
        if sets:
            out[r.arm] = M.diversity(sets)
    return out


def ablation(ctx: SeedContext, arm_result: ArmResult, qids: Optional[Sequence[str]] = None,
             metric: str = "MAP") -> Dict[str, float]:
    """Scores of the five aggregation rules on ``qids`` (default: dev set).

    The first four share one trained relevance model and one log pass; the
    concatenated-feature rule needs its own model because its input differs.
    """
    qids = list(ctx.data.splits["dev"] if qids is None else qids)
    agents = arm_result.extra["agents"]
    train_recs = arm_result.extra["train_records"]
    model = arm_result.extra["models"][0]
    mode = "greedy" if ctx.cfg.decode == "greedy" else "beam"
    recs = ctx.agent_log(arm_result.arm, agents, qids, mode, 1)
    out = {}
    for v in ("product", "rank_only", "relevance_only", "count_rank"):
        out[v] = _aggregated_arm(ctx, arm_result.arm, recs, [model], v, qids).metrics[metric]
    cat_cfg = ctx.cfg.aggregator_config()
    cat_cfg = AggregatorConfig(**{**cat_cfg.to_dict(), "features": "concat"})
    cat = ctx.aggregator(train_recs, 0, cat_cfg)
    out["concat_features"] = _aggregated_arm(ctx, arm_result.arm, recs, [cat], "product",
                                             qids).metrics[metric]
    return out


def ablation_rows(scores: Mapping[str, float], metric: str = "MAP") -> List[List[str]]:
    labels = {"product": "s = sA * sR", "concat_features": "z = [fCNN(q0); fBOW(a)]",
              "count_rank": "sA = count of lists", "rank_only": "s = sA",
              "relevance_only": "s = sR"}
    rows = [["aggregator function", metric, "diff", "reference diff"]]
    base = scores["product"]
    for v in ("product", "concat_features", "count_rank", "rank_only", "relevance_only"):
        diff = "-" if v == "product" else f"{scores[v] - base:+.4f}"
        ref = "-" if v == "product" else f"{ABLATION_ANCHORS[v]:+.1f}"
        rows.append([labels[v], _fmt(scores[v]), diff, ref])
    return rows


def sweep(ctx: SeedContext, arm_result: ArmResult, qids: Optional[Sequence[str]] = None
          ) -> List[Dict[str, float]]:
    """Score and oracle of the aggregator over nested agent pools: the first
    n sub-agents plus the identity agent, for n = 1..N."""
    qids = list(ctx.data.splits["test"] if qids is None else qids)
    agents = arm_result.extra["agents"]
    model = arm_result.extra["models"][0]
    k = ctx.cfg.eval_k
    full = group_records(ctx.agent_log(arm_result.arm, agents, qids, "greedy", 1))
    out = []
    prev: Dict[str, Set[str]] = {}
    for n in range(1, len(agents) + 1):
        keep = {f"agent{i}" for i in range(n)} | {"identity"}
        recs = [r for q in qids for r in full[q] if r["agent_id"] in keep]
        res = _aggregated_arm(ctx, arm_result.arm, recs, [model], "product", qids)
        pools = {q: {c.doc_id for c in dedupe_and_rank_score([r for r in full[q] if r["agent_id"] in keep])}
                 for q in qids}
        for q in qids:
            if q in prev and not prev[q] <= pools[q]:
                raise AssertionError("candidate pools are not nested")
        prev = pools
        out.append({"n": n, f"R@{k}": res.metrics[f"R@{k}"],
                    "oracle": float(np.mean(list(res.oracle.values())))})
    return out


def write_sweep_dat(points: Sequence[Mapping[str, float]], k: int, path) -> None:
    lines = [f"# n_agents\tR@{k}\toracle\n"]
    lines += [f"{p['n']}\t{p[f'R@{k}']:.6f}\t{p['oracle']:.6f}\n" for p in points]
    _atomic_write(Path(path), lambda p: Path(p).write_text("".join(lines), encoding="utf-8"))


@dataclass
class SeedReport:
    seed: int
    arms: Dict[str, ArmResult]
    diversity: Dict[str, Dict[str, float]]
    ablation: Optional[Dict[str, float]]
    failed: Dict[str, str]
    sweep: Optional[List[Dict[str, float]]] = None


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Optional[Path] = None) -> SeedReport:
    seed_dir = Path(out_dir) / f"seed_{seed}" if out_dir is not None else None
    ctx = SeedContext(cfg, seed, seed_dir / "logs" if seed_dir is not None else None)
    arms: Dict[str, ArmResult] = {}
    failed: Dict[str, str] = {}
    for arm in cfg.arms:
        try:
            arms[arm] = run_arm(ctx, arm)
        except (ValueError, FloatingPointError) as exc:
            log.error("arm %s failed at seed %d: %s", arm, seed, exc)
            failed[arm] = str(exc)
            if isinstance(exc, FloatingPointError):
                raise
    results = [arms[a] for a in cfg.arms if a in arms]
    div = diversity_report(results, cfg.eval_k)
    abl = ablation(ctx, arms["sub"]) if cfg.ablation and "sub" in arms else None
    pts = sweep(ctx, arms["sub"]) if "sub" in arms else None
    if seed_dir is not None:
        seed_dir.mkdir(parents=True, exist_ok=True)
        k = cfg.eval_k
        write_tsv(metric_rows(results, k), seed_dir / "retrieval.tsv")
        write_tsv(diversity_rows(results, k), seed_dir / "diversity.tsv")
        if abl is not None:
            write_tsv(ablation_rows(abl), seed_dir / "ablation.tsv")
        if pts is not None:
            write_sweep_dat(pts, k, seed_dir / "agent_sweep.dat")
        t8 = [arms[a] for a in ("rl-rnn", "rnn-greedy-agg", "rnn-sampled-agg", "rnn-beam-agg", "sub")
              if a in arms]
        if len(t8) > 1:
            rows = metric_rows(t8, k)
            write_tsv(rows, seed_dir / "single_reformulator.tsv")
        for a, r in arms.items():
            M.write_run(r.run, seed_dir / f"run_{a}.tsv")
        write_json({"seed": seed, "metrics": {a: r.metrics for a, r in arms.items()},
                    "oracle": {a: float(np.mean(list(r.oracle.values()))) for a, r in arms.items()},
                    "tuned": {a: {k2: v for k2, v in r.extra.items() if isinstance(v, (int, float))}
                              for a, r in arms.items()},
                    "diversity": div, "ablation": abl, "sweep": pts, "failed": failed},
                   seed_dir / "summary.json")
    return SeedReport(seed, arms, div, abl, failed, pts)


@dataclass
class ExperimentReport:
    cfg: ExperimentConfig
    seeds: List[SeedReport]

    def scores(self, arm: str, metric: Optional[str] = None) -> List[float]:
        metric = metric or f"R@{self.cfg.eval_k}"
        return [s.arms[arm].metrics[metric] for s in self.seeds if arm in s.arms]


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentReport:
    out = Path(out_dir) if out_dir is not None else None
    reports = [run_seed(cfg, s, out) for s in cfg.seeds]
    rep = ExperimentReport(cfg, reports)
    if out is not None:
        write_json(cfg.to_dict(), out / "config.json")
        k = cfg.eval_k
        rows = [["seed"] + [arm_label(a, cfg.n_agents, cfg.n_rewrites) for a in cfg.arms]]
        for s in reports:
            rows.append([str(s.seed)] + [_fmt(s.arms[a].metrics[f"R@{k}"]) if a in s.arms else "missing"
                                         for a in cfg.arms])
        write_tsv(rows, out / "retrieval_by_seed.tsv")
        missing = {s.seed: s.failed for s in reports if s.failed}
        write_json({"arms": cfg.arms, "seeds": cfg.seeds, "missing": missing,
                    f"mean_R@{k}": {a: float(np.mean(rep.scores(a))) for a in cfg.arms
                                    if rep.scores(a)}}, out / "summary.json")
    return rep


# --- studies -----------------------------------------------------------------------------

def stability_report(cfg: ExperimentConfig, n_seeds: int = 10, seeds: Optional[Sequence[int]] = None,
                     report: Optional[ExperimentReport] = None, multi_arm: str = "sub",
                     single_arm: str = "rl-rnn") -> Dict[str, object]:
    """Variance of test scores across seeds for the single-agent and the
    multi-agent arm (scores in percent, so variances are comparable with
    the reference values)."""
    seeds = list(seeds) if seeds is not None else list(range(n_seeds))
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    if report is None:
        report = run_experiment(cfg.with_overrides(seeds=seeds, arms=[single_arm, multi_arm],
                                                   ablation=False))
    by_seed = {s.seed: s for s in report.seeds}
    k = cfg.eval_k

    def scores(arm):
        return [100 * by_seed[s].arms[arm].metrics[f"R@{k}"] for s in seeds]

    single, multi = scores(single_arm), scores(multi_arm)
    v_s = float(np.var(single, ddof=1))
    v_m = float(np.var(multi, ddof=1))
    return {"seeds": seeds, "single_arm": single_arm, "multi_arm": multi_arm,
            "single_scores": single, "multi_scores": multi,
            "single_variance": v_s, "multi_variance": v_m,
            "ratio": (v_m / v_s) if v_s > 0 else (0.0 if v_m == 0 else float("inf")),
            "reference": STABILITY_ANCHOR}


def partition_study(cfg: ExperimentConfig, seed: int,
                    strategies: Sequence[str] = ("kmeans-Q", "kmeans-A", "kmeans-QA", "random"),
                    ctx: Optional[SeedContext] = None) -> Dict[str, Dict[str, float]]:
    """For each strategy: train N sub-agents on its partitions, score every
    agent on every partition's queries (Recall@reward_k), and report the
    out-of-partition diagnostics with the aggregated test score."""
    ctx = ctx or SeedContext(cfg, seed)
    out = {}
    for strat in strategies:
        part = sub_partition(ctx, strat)
        agents = ctx.train_agents([(s, 400 + 10 * strategies.index(strat) + i, None)
                                   for i, s in enumerate(part.subsets)])

        def score(agent, qs):
            pol = agent[1]
            return 100 * float(np.mean([ctx.env.reward(q, ctx.reformulations(pol, q)[0].query)
                                        for q in qs]))

        ev = evaluate_partitioning(agents, part.subsets, score)
        train_recs = ctx.agent_log(f"part-{strat}", agents, ctx.train)
        test_recs = ctx.agent_log(f"part-{strat}", agents, ctx.data.splits["test"])
        res = _aggregated_arm(ctx, "sub", test_recs, [ctx.aggregator(train_recs)])
        out[strat] = ev.row(100 * res.metrics[f"R@{cfg.eval_k}"])
        out[strat]["sizes"] = part.sizes()
    return out


def partition_rows(study: Mapping[str, Mapping[str, float]], k: int) -> List[List[str]]:
    names = {"kmeans-Q": "Q", "kmeans-A": "A", "kmeans-QA": "Q+A", "random": "Rand."}
    cols = ["E_i[e_i]", "E_i[E_j!=i[s_ij]]", "E_i[V_j!=i[s_ij]]"]
    rows = [["strategy"] + cols + [f"R@{k}"]]
    for s, r in study.items():
        rows.append([names.get(s, s)] + [f"{r[c]:.2f}" for c in cols] + [f"{r['score']:.2f}"])
    return rows
