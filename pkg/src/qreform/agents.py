"""Term-appending reformulation agents trained with REINFORCE.

A policy scores the terms of a candidate pool (terms harvested from the
documents retrieved by the original query) and picks them one at a time,
without replacement, until it emits a stop action. The reformulation is
the original query followed by the picked terms.

Sampling uses the fact that sequential softmax selection without
replacement is a Plackett-Luce draw: one Gumbel-perturbed sort gives the
term order, and the stop decisions are then Bernoulli draws against the
remaining probability mass.
"""
from __future__ import annotations

import json
import math
import subprocess
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .nn import Adam, ModelParams, NonFiniteError, SGD, make_optimizer
from .search import Environment, InvertedIndex, RankedList

N_FEATURES = 6
FEATURE_NAMES = ("tfidf", "idf", "inv_rank", "doc_share", "score_share", "in_query")


@dataclass
class CandidatePool:
    """Candidate expansion terms for one query with their features."""

    terms: List[str]
    term_ids: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.terms)


def build_candidate_pool(q0: Sequence[str], index: InvertedIndex, k_docs: int = 10,
                         m_terms: int = 20) -> CandidatePool:
    """Top ``m_terms`` tf-idf terms of each of the top ``k_docs`` documents for ``q0``."""
    if k_docs < 1 or m_terms < 1:
        raise ValueError("k_docs and m_terms must be >= 1")
    pos, scores = index.search_positions(list(q0), k_docs)
    n_ret = pos.size
    if n_ret == 0:
        return CandidatePool([], np.zeros(0, dtype=np.int64), np.zeros((0, N_FEATURES)))
    log_n = math.log(index.n_docs)
    qset = set(q0)
    first_rank: Dict[int, int] = {}
    best_tfidf: Dict[int, float] = {}
    doc_count: Dict[int, int] = {}
    doc_mass: Dict[int, float] = {}
    weights = scores / scores.sum()
    for rank, (p, wd) in enumerate(zip(pos.tolist(), weights.tolist()), start=1):
        dtf = index.doc_tf[p]
        for tid in dtf:
            doc_count[tid] = doc_count.get(tid, 0) + 1
            doc_mass[tid] = doc_mass.get(tid, 0.0) + wd
        scored = sorted(((tf * (log_n - math.log(index.df[tid])), tid) for tid, tf in dtf.items()),
                        key=lambda x: (-x[0], index.corpus.id_to_term[x[1]]))
        for s, tid in scored[:m_terms]:
            if tid not in first_rank:
                first_rank[tid] = rank
                best_tfidf[tid] = s
            else:
                best_tfidf[tid] = max(best_tfidf[tid], s)
    order = list(first_rank)
    ids = np.array(order, dtype=np.int64)
    tfidf = np.array([best_tfidf[t] for t in order])
    feats = np.empty((len(order), N_FEATURES))
    feats[:, 0] = tfidf / max(tfidf.max(), 1e-12)
    feats[:, 1] = (log_n - np.log(index.df[ids].astype(np.float64))) / max(log_n, 1e-12)
    feats[:, 2] = 1.0 / np.array([first_rank[t] for t in order], dtype=np.float64)
    feats[:, 3] = np.array([doc_count[t] for t in order], dtype=np.float64) / n_ret
    vocab = index.corpus.id_to_term
    feats[:, 4] = [doc_mass[t] for t in order]
    feats[:, 5] = [1.0 if vocab[t] in qset else 0.0 for t in order]
    return CandidatePool([vocab[t] for t in order], ids, feats)


@dataclass
class Reformulation:
    q0: List[str]
    added: List[str]
    agent_id: str = "agent"
    method: str = "greedy"
    log_prob: float = 0.0
    rewrite: Optional[List[str]] = None   # free-form rewrite from an external reformulator

    @property
    def query(self) -> List[str]:
        if self.rewrite is not None:
            return list(self.rewrite)
        return list(self.q0) + list(self.added)


@dataclass
class AgentResult:
    qid: str
    reformulation: Reformulation
    ranked: RankedList
    reward: float

    def to_json(self) -> dict:
        return {
            "qid": self.qid,
            "agent_id": self.reformulation.agent_id,
            "reformulation": self.reformulation.query,
            "ranked_doc_ids": self.ranked.doc_ids,
            "reward": self.reward,
        }


def write_agent_results(results: Iterable[AgentResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_agent_results(path) -> List[dict]:
    """Records of an agent-result log; each has qid, agent_id, reformulation,
    ranked_doc_ids and reward."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def identity_agent(q0: Sequence[str]) -> Reformulation:
    return Reformulation(list(q0), [], agent_id="identity", method="identity", log_prob=0.0)


# --- policy -------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    embed_dim: int = 16
    t_max: int = 10
    k_docs: int = 10
    m_terms: int = 20
    tie_embeddings: bool = True


def init_policy(cfg: PolicyConfig, rng: np.random.Generator) -> ModelParams:
    p = ModelParams()
    a = math.sqrt(6.0 / (N_FEATURES + 1))
    p.add("feat_w", rng.uniform(-a, a, size=N_FEATURES))
    p.add("t_emb", rng.normal(0.0, 0.1, size=(cfg.vocab_size, cfg.embed_dim)))
    if not cfg.tie_embeddings:
        p.add("q_emb", rng.normal(0.0, 0.1, size=(cfg.vocab_size, cfg.embed_dim)))
    p.add("t_bias", np.zeros(cfg.vocab_size))
    p.add("stop_w", np.zeros(2))
    return p


def _query_ids(q0: Sequence[str], vocab: Dict[str, int]) -> np.ndarray:
    return np.array([vocab[t] for t in q0 if t in vocab], dtype=np.int64)


class Policy:
    """A policy bound to its vocabulary; parameters live in ``params``."""

    def __init__(self, params: ModelParams, cfg: PolicyConfig, vocab: Dict[str, int],
                 agent_id: str = "agent"):
        self.params = params
        self.cfg = cfg
        self.vocab = vocab
        self.agent_id = agent_id

    def query_vector(self, q0: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        qids = _query_ids(q0, self.vocab)
        if qids.size == 0:
            return np.zeros(self.cfg.embed_dim), qids
        return self.params[self.q_table][qids].mean(axis=0), qids

    @property
    def q_table(self) -> str:
        return "q_emb" if "q_emb" in self.params else "t_emb"

    def term_logits(self, q0: Sequence[str], pool: CandidatePool) -> np.ndarray:
        if len(pool) == 0:
            return np.zeros(0)
        p = self.params
        h, _ = self.query_vector(q0)
        return pool.features @ p["feat_w"] + p["t_emb"][pool.term_ids] @ h + p["t_bias"][pool.term_ids]

    def stop_logit(self, step: int) -> float:
        w = self.params["stop_w"]
        return float(w[0] + w[1] * step / max(self.cfg.t_max, 1))


def _logaddexp_all(a: np.ndarray) -> float:
    m = np.max(a)
    return float(m + np.log(np.sum(np.exp(a - m))))


def sequence_log_prob(logits: np.ndarray, stop_logits: Sequence[float], picks: Sequence[int],
                      t_max: int) -> float:
    """Exact log-probability of picking ``picks`` (pool indices) and then stopping."""
    remaining = np.ones(logits.size, dtype=bool)
    lp = 0.0
    steps = len(picks)
    for s in range(steps + 1):
        if s == t_max or not remaining.any():
            if s < steps:
                return -math.inf
            break
        z = _logaddexp_all(np.append(logits[remaining], stop_logits[s]))
        if s < steps:
            a = picks[s]
            if not remaining[a]:
                return -math.inf
            lp += logits[a] - z
            remaining[a] = False
        else:
            lp += stop_logits[s] - z
    return lp


@dataclass
class Episode:
    picks: List[int]
    log_prob: float
    dlogits: np.ndarray          # d log p / d term logits
    dstop: np.ndarray            # d log p / d stop_w


def _batch_stats(logits: np.ndarray, stop_l: np.ndarray, orders: np.ndarray,
                 n_pick: np.ndarray, t_max: int):
    """Log-probs and gradients for a batch of episodes.

    Row e picks ``orders[e, :n_pick[e]]`` and then stops (or is cut off by
    ``t_max`` / an exhausted pool). Returns (log_probs, dlogits, dstop) with
    dlogits of shape (n, m) indexed by pool position.
    """
    n, m = orders.shape
    T = min(t_max, m)
    lp = np.zeros(n)
    dlogits = np.zeros((n, m))
    dstop = np.zeros((n, 2))
    if T == 0:
        return lp, dlogits, dstop
    n_dec = np.minimum(np.minimum(n_pick + 1, t_max), m)
    vol = (n_pick < t_max) & (n_pick < m)
    ordered = logits[orders]
    mx = max(float(logits.max()), float(stop_l[:T].max()))
    e = np.exp(ordered - mx)
    # mass of terms still available at step s = sum over order[s:]
    tail = np.cumsum(e[:, ::-1], axis=1)[:, ::-1][:, :T]
    es = np.exp(stop_l[:T] - mx)
    z = tail + es
    steps = np.arange(T)
    live = steps[None, :] < n_dec[:, None]
    logz = np.log(z) + mx
    picked = steps[None, :] < n_pick[:, None]
    lp = np.sum(np.where(picked, ordered[:, :T] - logz, 0.0), axis=1)
    rows = np.arange(n)
    at = np.minimum(n_pick, T - 1)
    lp += np.where(vol, stop_l[at] - logz[rows, at], 0.0)
    inv = np.where(live, 1.0 / z, 0.0)
    cinv = np.cumsum(inv, axis=1)
    # term at order position j is in the softmax for steps 0..min(j, n_dec-1)
    last = np.minimum(np.arange(m)[None, :], (n_dec - 1)[:, None])
    d_ordered = -e * np.take_along_axis(cinv, last, axis=1)
    d_ordered += np.arange(m)[None, :] < n_pick[:, None]
    np.put_along_axis(dlogits, orders, d_ordered, axis=1)
    g_stop = -es * inv
    g_stop[rows[vol], n_pick[vol]] += 1.0
    frac = steps / max(t_max, 1)
    dstop[:, 0] = g_stop.sum(axis=1)
    dstop[:, 1] = g_stop @ frac
    return lp, dlogits, dstop


def _episode_stats(logits: np.ndarray, stop_l: np.ndarray, order: np.ndarray, n_pick: int,
                   t_max: int) -> Episode:
    """Log-prob and its gradient for picking ``order[:n_pick]`` then stopping."""
    order = np.asarray(order, dtype=np.int64)
    lp, dl, ds = _batch_stats(logits, stop_l, order[None, :], np.array([n_pick]), t_max)
    return Episode(order[:n_pick].tolist(), float(lp[0]), dl[0], ds[0])


def _sample_batch(logits: np.ndarray, stop_l: np.ndarray, t_max: int, n: int,
                  rng: np.random.Generator):
    m = logits.size
    orders = np.argsort(-(logits + rng.gumbel(size=(n, m))), axis=1, kind="stable")
    limit = min(t_max, m)
    n_pick = np.zeros(n, dtype=np.int64)
    if limit:
        mx = max(float(logits.max()), float(stop_l.max()))
        e = np.exp(logits[orders] - mx)
        tail = np.cumsum(e[:, ::-1], axis=1)[:, ::-1][:, :limit]
        es = np.exp(stop_l[:limit] - mx)
        # stop decisions against the remaining mass at each step
        stop = rng.random((n, limit)) < es / (es + tail)
        n_pick = np.where(stop.any(axis=1), stop.argmax(axis=1), limit)
    return orders, n_pick


def sample_episodes(logits: np.ndarray, stop_l: np.ndarray, t_max: int, n: int,
                    rng: np.random.Generator) -> List[Episode]:
    orders, n_pick = _sample_batch(logits, stop_l, t_max, n, rng)
    lp, dl, ds = _batch_stats(logits, stop_l, orders, n_pick, t_max)
    return [Episode(orders[i, :n_pick[i]].tolist(), float(lp[i]), dl[i], ds[i]) for i in range(n)]


def _stop_logits(policy: Policy) -> np.ndarray:
    return np.array([policy.stop_logit(s) for s in range(policy.cfg.t_max + 1)])


def _greedy_order(logits: np.ndarray, stop_l: np.ndarray, t_max: int) -> Tuple[np.ndarray, int]:
    order = np.lexsort((np.arange(logits.size), -logits))
    n_pick = 0
    while n_pick < min(t_max, logits.size) and logits[order[n_pick]] > stop_l[n_pick]:
        n_pick += 1
    return order, n_pick


def decode(policy: Policy, pool: CandidatePool, q0: Sequence[str], mode: str = "greedy",
           t_max: Optional[int] = None, beam_width: int = 20, n_samples: int = 8,
           rng_seed: Optional[int] = None) -> List[Reformulation]:
    """Reformulations of ``q0`` by ``mode`` in {"greedy", "sample", "beam"}."""
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    t_max = policy.cfg.t_max if t_max is None else t_max
    if t_max < 0:
        raise ValueError("t_max must be >= 0")
    logits = policy.term_logits(q0, pool)
    stop_l = np.array([policy.stop_logit(s) for s in range(t_max + 1)])

    def make(picks, lp, method):
        return Reformulation(list(q0), [pool.terms[i] for i in picks], policy.agent_id, method, lp)

    if mode == "greedy":
        order, n_pick = _greedy_order(logits, stop_l, t_max)
        ep = _episode_stats(logits, stop_l, order, n_pick, t_max)
        return [make(ep.picks, ep.log_prob, "greedy")]
    if mode == "sample":
        rng = np.random.default_rng(rng_seed)
        return [make(ep.picks, ep.log_prob, "sample")
                for ep in sample_episodes(logits, stop_l, t_max, n_samples, rng)]
    if mode == "beam":
        return [make(picks, lp, "beam")
                for picks, lp in beam_search(logits, stop_l, t_max, beam_width)]
    raise ValueError(f"unknown decode mode {mode!r}")


def beam_search(logits: np.ndarray, stop_l: np.ndarray, t_max: int,
                width: int) -> List[Tuple[List[int], float]]:
    """Highest log-probability pick sequences; the greedy path is always a candidate."""
    m = logits.size
    finished: List[Tuple[float, Tuple[int, ...]]] = []
    live: List[Tuple[float, Tuple[int, ...]]] = [(0.0, ())]
    for s in range(t_max + 1):
        cands: List[Tuple[float, Tuple[int, ...]]] = []
        for lp, seq in live:
            avail = np.ones(m, dtype=bool)
            avail[list(seq)] = False
            if s == t_max or not avail.any():
                finished.append((lp, seq))
                continue
            idx = np.flatnonzero(avail)
            z = _logaddexp_all(np.append(logits[idx], stop_l[s]))
            finished.append((lp + stop_l[s] - z, seq))
            step_lp = logits[idx] - z
            top = idx[np.argsort(-step_lp, kind="stable")[:width]]
            for a in top.tolist():
                cands.append((lp + logits[a] - z, seq + (a,)))
        finished.sort(key=lambda x: (-x[0], x[1]))
        finished = finished[:width]
        cands.sort(key=lambda x: (-x[0], x[1]))
        live = cands[:width]
        # log-probs only decrease along a path
        if not live or (len(finished) >= width and live[0][0] < finished[-1][0]):
            break
    order, n_pick = _greedy_order(logits, stop_l, t_max)
    g = tuple(order[:n_pick].tolist())
    if all(seq != g for _, seq in finished):
        finished.append((_episode_stats(logits, stop_l, order, n_pick, t_max).log_prob, g))
        finished.sort(key=lambda x: (-x[0], x[1]))
        finished = finished[:width]
    return [(list(seq), lp) for lp, seq in finished]


def ensemble_decode(policies: Sequence[Policy], pool: CandidatePool, q0: Sequence[str],
                    t_max: Optional[int] = None, agent_id: str = "ensemble") -> Reformulation:
    """Greedy decoding on the step-wise average of the policies' action distributions."""
    if not policies:
        raise ValueError("need at least one policy")
    t_max = policies[0].cfg.t_max if t_max is None else t_max
    m = len(pool)
    logits = [p.term_logits(q0, pool) for p in policies]
    stops = [[p.stop_logit(s) for s in range(t_max + 1)] for p in policies]
    avail = np.ones(m, dtype=bool)
    picks: List[int] = []
    lp = 0.0
    for s in range(t_max + 1):
        if s == t_max or not avail.any():
            break
        idx = np.flatnonzero(avail)
        probs = np.zeros(idx.size + 1)
        for lg, st in zip(logits, stops):
            a = np.append(lg[idx], st[s])
            a = np.exp(a - a.max())
            probs += a / a.sum()
        probs /= len(policies)
        best = int(np.argmax(probs))
        lp += math.log(probs[best])
        if best == idx.size:
            break
        picks.append(int(idx[best]))
        avail[idx[best]] = False
    return Reformulation(list(q0), [pool.terms[i] for i in picks], agent_id, "ensemble", lp)


# --- training -------------------------------------------------------------------

@dataclass
class MovingAverage:
    decay: float = 0.99
    value: Optional[float] = None

    def update(self, rewards: Iterable[float]) -> None:
        for r in rewards:
            self.value = r if self.value is None else self.decay * self.value + (1 - self.decay) * r


def backprop_policy(policy: Policy, q0: Sequence[str], pool: CandidatePool,
                    dlogits: np.ndarray, dstop: np.ndarray, scale: float = 1.0) -> None:
    """Accumulate ``scale * d(objective)`` given gradients w.r.t. logits and stop weights."""
    p = policy.params
    g = p.grads
    if len(pool):
        h, qids = policy.query_vector(q0)
        d = scale * dlogits
        g["feat_w"] += pool.features.T @ d
        np.add.at(g["t_bias"], pool.term_ids, d)
        np.add.at(g["t_emb"], pool.term_ids, np.outer(d, h))
        if qids.size:
            dh = p["t_emb"][pool.term_ids].T @ d
            np.add.at(g[policy.q_table], qids, np.broadcast_to(dh / qids.size, (qids.size, dh.size)))
    g["stop_w"] += scale * dstop


@dataclass
class TrainStats:
    mean_reward: float
    baseline: float
    n_episodes: int


def reinforce_step(policy: Policy, batch: Sequence[Tuple[str, Sequence[str]]],
                   env: Environment, pools: Dict[str, CandidatePool], n_samples: int,
                   baseline: MovingAverage, optimizer, rng: np.random.Generator,
                   baseline_kind: str = "loo") -> TrainStats:
    """One REINFORCE update on ``batch`` of (qid, q0) pairs.

    Minimises -sum (r - b) log p(reformulation). With ``baseline_kind="ema"``
    ``b`` is the moving average of past rewards taken before this batch; with
    ``"loo"`` each sample is compared with the mean of the other samples of
    the same query (falls back to the moving average when ``n_samples == 1``).
    """
    if baseline_kind not in ("loo", "ema"):
        raise ValueError(f"unknown baseline {baseline_kind!r}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    t_max = policy.cfg.t_max
    stop_l = _stop_logits(policy)
    collected = []
    rewards = []
    for qid, q0 in batch:
        pool = pools[qid]
        logits = policy.term_logits(q0, pool)
        orders, n_pick = _sample_batch(logits, stop_l, t_max, n_samples, rng)
        _, dl, ds = _batch_stats(logits, stop_l, orders, n_pick, t_max)
        eps = (orders, dl, ds)
        rs = [env.reward(qid, list(q0) + [pool.terms[i] for i in orders[e, :n_pick[e]]])
              for e in range(n_samples)]
        collected.append((q0, pool, eps, rs))
        rewards.extend(rs)
    b = float(np.mean(rewards)) if baseline.value is None else baseline.value
    for q0, pool, eps, rs in collected:
        rs = np.asarray(rs)
        if baseline_kind == "loo" and rs.size > 1:
            adv = (rs - rs.mean()) * rs.size / (rs.size - 1)
        else:
            adv = rs - b
        if not np.any(adv):
            continue
        backprop_policy(policy, q0, pool, adv @ eps[1], adv @ eps[2], scale=-1.0)
    policy.params.check_finite()
    optimizer.step(policy.params)
    baseline.update(rewards)
    return TrainStats(float(np.mean(rewards)), b, len(rewards))


def surrogate_loss(policy: Policy, q0: Sequence[str], pool: CandidatePool,
                   picks: Sequence[Sequence[int]], advantages: Sequence[float]) -> float:
    """-sum_e adv_e log p(picks_e) for frozen samples; used for gradient checks."""
    logits = policy.term_logits(q0, pool)
    stop_l = _stop_logits(policy)
    return -sum(a * sequence_log_prob(logits, stop_l, pk, policy.cfg.t_max)
                for pk, a in zip(picks, advantages))


def surrogate_grad(policy: Policy, q0: Sequence[str], pool: CandidatePool,
                   picks: Sequence[Sequence[int]], advantages: Sequence[float]) -> None:
    """Fill ``policy.params.grads`` with the gradient of :func:`surrogate_loss`."""
    policy.params.zero_grad()
    logits = policy.term_logits(q0, pool)
    stop_l = _stop_logits(policy)
    m = logits.size
    dl = np.zeros(m)
    ds = np.zeros(2)
    for pk, a in zip(picks, advantages):
        rest = [i for i in np.lexsort((np.arange(m), -logits)).tolist() if i not in set(pk)]
        order = np.array(list(pk) + rest, dtype=np.int64)
        ep = _episode_stats(logits, stop_l, order, len(pk), policy.cfg.t_max)
        dl += a * ep.dlogits
        ds += a * ep.dstop
    backprop_policy(policy, q0, pool, dl, ds, scale=-1.0)


@dataclass
class AgentTrainConfig:
    steps: int = 60
    batch_size: int = 32
    n_samples: int = 8
    lr: float = 0.03
    optimizer: str = "adam"
    baseline_decay: float = 0.99
    baseline: str = "loo"


def train_agent(policy: Policy, qids: Sequence[str], queries: Dict[str, Sequence[str]],
                env: Environment, pools: Dict[str, CandidatePool], cfg: AgentTrainConfig,
                seed) -> List[float]:
    """Train ``policy`` on ``qids`` (duplicates allowed) and return per-step mean rewards."""
    rng = np.random.default_rng(seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    baseline = MovingAverage(cfg.baseline_decay)
    qids = list(qids)
    curve = []
    order: List[int] = []
    for _ in range(cfg.steps):
        if len(order) < min(cfg.batch_size, len(qids)):
            order.extend(rng.permutation(len(qids)).tolist())
        take, order = order[:cfg.batch_size], order[cfg.batch_size:]
        batch = [(qids[i], queries[qids[i]]) for i in take]
        stats = reinforce_step(policy, batch, env, pools, cfg.n_samples, baseline, opt, rng,
                               cfg.baseline)
        curve.append(stats.mean_reward)
    return curve


class ExternalReformulator:
    """Adapter for a reformulator executable: query on stdin, one rewrite per stdout line."""

    def __init__(self, command: Sequence[str], agent_id: str = "external", timeout: float = 30.0):
        self.command = list(command)
        self.agent_id = agent_id
        self.timeout = timeout

    def reformulate(self, q0: Sequence[str]) -> List[Reformulation]:
        proc = subprocess.run(self.command, input=" ".join(q0), capture_output=True,
                              text=True, timeout=self.timeout, check=True)
        from .search import tokenize

        out = []
        for line in proc.stdout.splitlines():
            toks = tokenize(line)
            if toks:
                out.append(Reformulation(list(q0), [], self.agent_id, "external", 0.0, rewrite=toks))
        return out
