import itertools
import math

import numpy as np
import pytest

from qreform.agents import (AgentResult, CandidatePool, MovingAverage, N_FEATURES, Policy,
                            PolicyConfig, Reformulation, _batch_stats, build_candidate_pool,
                            decode, ensemble_decode, identity_agent, init_policy,
                            read_agent_results, reinforce_step, sample_episodes,
                            sequence_log_prob, surrogate_grad, surrogate_loss, train_agent,
                            write_agent_results, ExternalReformulator)
from qreform.baselines import tfidf_terms
from qreform.nn import SGD, make_optimizer
from qreform.search import Corpus, Document, Environment, RankedList, build_index

from bandit import BanditEnv, first_step_probs, make_bandit, run_bandit


def tiny_policy(seed=0, m=3, t_max=2, vocab_size=6):
    rng = np.random.default_rng(seed)
    vocab = {f"w{i}": i for i in range(vocab_size)}
    pool = CandidatePool([f"w{i}" for i in range(1, m + 1)], np.arange(1, m + 1),
                         rng.uniform(0, 1, size=(m, N_FEATURES)))
    cfg = PolicyConfig(vocab_size, embed_dim=3, t_max=t_max)
    params = init_policy(cfg, rng)
    params.values["stop_w"][:] = rng.normal(size=2)
    params.values["t_bias"][:] = rng.normal(size=vocab_size)
    return Policy(params, cfg, vocab), pool, ["w0", "w4"]


def test_candidate_pool(hand_corpus, small_index, small_data):
    idx = build_index(hand_corpus)
    assert len(build_candidate_pool(["zzz"], idx)) == 0
    pool = build_candidate_pool(["egg"], idx, k_docs=1, m_terms=3)
    assert pool.terms == [t for t, _ in tfidf_terms(idx, 2)[:3]]
    big = build_candidate_pool(small_data.queries["q0000"], small_index, 10, 20)
    assert len(set(big.terms)) == len(big.terms) <= 200
    with pytest.raises(ValueError):
        build_candidate_pool(["egg"], idx, 0, 3)


def test_log_probs_sum_to_one():
    for seed, (m, t_max) in itertools.product(range(3), [(1, 1), (2, 2), (3, 2), (3, 1)]):
        pol, pool, q0 = tiny_policy(seed, m, t_max)
        logits = pol.term_logits(q0, pool)
        stop = [pol.stop_logit(s) for s in range(t_max + 1)]
        total = 0.0
        for n in range(min(t_max, m) + 1):
            for seq in itertools.permutations(range(m), n):
                total += math.exp(sequence_log_prob(logits, stop, seq, t_max))
        assert abs(total - 1.0) < 1e-9


def test_batch_stats_log_prob_matches_sequential():
    pol, pool, q0 = tiny_policy(1, 3, 2)
    logits = pol.term_logits(q0, pool)
    stop = np.array([pol.stop_logit(s) for s in range(3)])
    orders = np.array([[2, 0, 1], [1, 2, 0], [0, 1, 2]])
    n_pick = np.array([0, 1, 2])
    lp, _, _ = _batch_stats(logits, stop, orders, n_pick, 2)
    for o, n, v in zip(orders, n_pick, lp):
        assert v == pytest.approx(sequence_log_prob(logits, stop, o[:n].tolist(), 2))


def test_decode_modes():
    pol, pool, q0 = tiny_policy(2, 3, 2)
    assert decode(pol, pool, q0, t_max=0)[0].added == []
    lp0 = decode(pol, pool, q0, t_max=0)[0].log_prob
    assert lp0 == pytest.approx(0.0)   # only action available: stop
    g = decode(pol, pool, q0, "greedy")[0]
    beams = decode(pol, pool, q0, "beam", beam_width=4)
    assert beams[0].log_prob >= g.log_prob - 1e-12
    assert any(b.added == g.added for b in beams)
    samples = decode(pol, pool, q0, "sample", n_samples=5, rng_seed=3)
    assert len(samples) == 5
    for r in [g] + beams + samples:
        assert r.query[:len(q0)] == q0 and r.log_prob <= 0
        assert len(set(r.added)) == len(r.added)
    with pytest.raises(ValueError):
        decode(pol, pool, q0, "beam", beam_width=0)
    with pytest.raises(ValueError):
        decode(pol, pool, q0, t_max=-1)


def test_forced_single_term_path():
    pol, pool, q0 = tiny_policy(0, 1, 3)
    pol.params.values["stop_w"][:] = [-1e3, 0.0]
    r = decode(pol, pool, q0, "greedy")[0]
    assert r.query == q0 + [pool.terms[0]]


def test_sampling_frequencies():
    pol, pool, q0 = tiny_policy(4, 2, 1)
    logits = pol.term_logits(q0, pool)
    stop = np.array([pol.stop_logit(s) for s in range(2)])
    p = first_step_probs(pol, pool, q0)
    n = 100_000
    eps = sample_episodes(logits, stop, 1, n, np.random.default_rng(0))
    counts = np.zeros(3)
    for e in eps:
        counts[e.picks[0] if e.picks else 2] += 1
    for c, pi in zip(counts, p):
        assert abs(c - n * pi) <= 3 * math.sqrt(n * pi * (1 - pi)) + 1


@pytest.mark.parametrize("seed", range(20))
def test_surrogate_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pol, pool, q0 = tiny_policy(seed, 3, 2)
    picks = [rng.permutation(3)[:int(rng.integers(0, 3))].tolist() for _ in range(3)]
    adv = rng.normal(size=3)
    surrogate_grad(pol, q0, pool, picks, adv)
    h = 1e-5
    for name in pol.params.names():
        v = pol.params[name].reshape(-1)
        g = pol.params.grads[name].reshape(-1)
        for i in range(v.size):
            old = v[i]
            v[i] = old + h
            lp = surrogate_loss(pol, q0, pool, picks, adv)
            v[i] = old - h
            lm = surrogate_loss(pol, q0, pool, picks, adv)
            v[i] = old
            num = (lp - lm) / (2 * h)
            if abs(num) < 1e-8 and abs(g[i]) < 1e-8:
                continue
            assert abs(num - g[i]) / max(abs(num), abs(g[i])) < 1e-4, (name, i)


class ConstEnv:
    def reward(self, qid, q):
        return 0.5


def test_reinforce_zero_advantage_no_update():
    pol, pool, q0 = tiny_policy(5)
    before = {k: v.copy() for k, v in pol.params.values.items()}
    for kind in ("loo", "ema"):
        base = MovingAverage(0.99, 0.5)
        reinforce_step(pol, [("q", q0)], ConstEnv(), {"q": pool}, 4, base, SGD(0.1),
                       np.random.default_rng(0), kind)
    for k in before:
        assert np.array_equal(before[k], pol.params[k])


def test_reinforce_deterministic_path_zero_gradient():
    pol, pool, q0 = tiny_policy(0, 1, 1)
    pol.params.values["t_bias"][:] = 0
    pol.params.values["stop_w"][:] = [-1e4, 0]   # the only live path has probability 1
    eps = sample_episodes(pol.term_logits(q0, pool), np.array([-1e4, -1e4]), 1, 4,
                          np.random.default_rng(0))
    for e in eps:
        assert e.log_prob == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(e.dlogits, 0) and np.allclose(e.dstop, 0)


def test_bandit_learns_rewarding_term():
    steps, p = run_bandit(seed=0)
    assert p > 0.9 and steps <= 500
    assert run_bandit(seed=0) == (steps, p)


def test_ensemble_decode():
    pol, pool, q0 = tiny_policy(6, 3, 2)
    single = decode(pol, pool, q0, "greedy")[0]
    assert ensemble_decode([pol], pool, q0).added == single.added
    assert ensemble_decode([pol, pol, pol], pool, q0).added == single.added
    with pytest.raises(ValueError):
        ensemble_decode([], pool, q0)


def test_ensemble_hand_average():
    # two single-step policies over (term, stop): softmax (0.9, 0.1) and (0.2, 0.8)
    vocab = {"w0": 0, "w1": 1}
    pool = CandidatePool(["w1"], np.array([1]), np.zeros((1, N_FEATURES)))
    cfg = PolicyConfig(2, embed_dim=2, t_max=1)
    pols = []
    for p_term in (0.9, 0.2):
        params = init_policy(cfg, np.random.default_rng(0))
        params.values["t_emb"][:] = 0
        params.values["t_bias"][1] = math.log(p_term / (1 - p_term))
        pols.append(Policy(params, cfg, vocab))
    r = ensemble_decode(pols, pool, ["w0"])
    assert r.added == ["w1"]                       # 0.55 > 0.45
    assert r.log_prob == pytest.approx(math.log(0.55))


def test_identity_agent():
    r = identity_agent(["a", "b"])
    assert r.query == ["a", "b"] and r.log_prob == 0 and r.agent_id == "identity"
    assert identity_agent([]).query == []


def test_agent_result_log_roundtrip(tmp_path):
    res = AgentResult("q1", Reformulation(["a"], ["b"], "agent0"), RankedList([("d1", 1.0)]), 0.5)
    write_agent_results([res], tmp_path / "log.jsonl")
    recs = read_agent_results(tmp_path / "log.jsonl")
    assert recs == [{"qid": "q1", "agent_id": "agent0", "reformulation": ["a", "b"],
                     "ranked_doc_ids": ["d1"], "reward": 0.5}]


def test_train_agent_improves_and_is_deterministic(small_data, small_index):
    env = Environment(small_index, 10, small_data.qrels)
    tr = small_data.splits["train"]
    pools = {q: build_candidate_pool(small_data.queries[q], small_index) for q in tr}
    cfg = PolicyConfig(len(small_data.corpus.vocab))
    from qreform.agents import AgentTrainConfig

    def run():
        pol = Policy(init_policy(cfg, np.random.default_rng(1)), cfg, small_data.corpus.vocab)
        curve = train_agent(pol, tr, small_data.queries, env, pools,
                            AgentTrainConfig(steps=40, batch_size=16), 1)
        return pol, curve
    a, ca = run()
    b, cb = run()
    assert ca == cb
    for k in a.params.names():
        assert np.array_equal(a.params[k], b.params[k])
    assert np.mean(ca[-10:]) >= np.mean(ca[:10])


def test_external_reformulator():
    ext = ExternalReformulator(["python3", "-c",
                                "import sys; q=sys.stdin.read(); print(q+' x'); print(q.upper())"])
    out = ext.reformulate(["a", "b"])
    assert [r.query for r in out] == [["a", "b", "x"], ["a", "b"]]
