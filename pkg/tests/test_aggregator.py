import math

import numpy as np
import pytest

from qreform.aggregator import (AggregatorConfig, CandidateResult, RelevanceModel,
                                aggregate, batch_loss, build_examples, dedupe_and_rank_score,
                                ensemble_aggregators, final_ranking, oracle_ranking, query_loss,
                                score_candidates, train_aggregator)
from qreform.search import Corpus, Document

SMALL = dict(embed_dim=4, cnn_layers=((2, 3),), output_dim=3, hidden=5, doc_len=8)


def rec(qid, docs, agent="a"):
    return {"qid": qid, "agent_id": agent, "reformulation": [], "ranked_doc_ids": docs, "reward": 0.0}


def test_accumulated_rank_score():
    cands = dedupe_and_rank_score([rec("q", ["d1", "d2"]), rec("q", ["d3", "d1"]),
                                   rec("q", ["d2", "d4", "d1"])])
    s = {c.doc_id: c.s_a for c in cands}
    assert s["d1"] == pytest.approx(1 + 1 / 2 + 1 / 3)
    assert s["d2"] == pytest.approx(1 / 2 + 1)
    assert s["d3"] == 1.0 and s["d4"] == 0.5
    assert [c.doc_id for c in cands] == ["d1", "d2", "d3", "d4"]
    cnt = {c.doc_id: c.s_a for c in dedupe_and_rank_score(
        [rec("q", ["d1", "d2"]), rec("q", ["d2"])], "count_rank")}
    assert cnt == {"d1": 1.0, "d2": 2.0}
    # a duplicate inside one list counts once, at its best rank
    one = dedupe_and_rank_score([rec("q", ["d1", "d2", "d1"])])
    assert one[0].s_a == 1.0
    assert dedupe_and_rank_score([]) == []
    with pytest.raises(ValueError):
        dedupe_and_rank_score([], "nope")


def test_final_ranking_hand_example():
    cands = [CandidateResult("a", {0: 1}, 1.75, 0.2), CandidateResult("b", {0: 2}, 0.5, 0.9),
             CandidateResult("c", {1: 1}, 1.0, 0.5), CandidateResult("d", {1: 2}, 0.7, 0.5)]
    # products: 0.35, 0.45, 0.5, 0.35
    assert final_ranking(cands, "product", 4).doc_ids == ["c", "b", "a", "d"]
    assert final_ranking(cands, "rank_only", 2).doc_ids == ["a", "c"]
    assert final_ranking(cands, "relevance_only", 4).doc_ids == ["b", "c", "d", "a"]
    with pytest.raises(ValueError):
        final_ranking(cands, k=0)
    with pytest.raises(ValueError):
        final_ranking(cands, "nope")


def test_scaling_s_r_keeps_ranking():
    rng = np.random.default_rng(0)
    cands = [CandidateResult(f"d{i}", {0: i + 1}, float(rng.uniform(0.1, 2)),
                             float(rng.uniform(0.01, 0.5))) for i in range(12)]
    base = final_ranking(cands, "product", 12).doc_ids
    for c in cands:
        c.s_r *= 1.9
    assert final_ranking(cands, "product", 12).doc_ids == base


def test_oracle_ranking_and_dominance():
    cands = [CandidateResult("a", {}, 2.0), CandidateResult("b", {}, 1.0), CandidateResult("c", {}, 0.5)]
    assert oracle_ranking(cands, {"c"}, 2).doc_ids == ["c", "a"]
    from qreform.metrics import recall_at_k
    rng = np.random.default_rng(1)
    for _ in range(50):
        for c in cands:
            c.s_r = float(rng.uniform())
        rel = {d for d in "abc" if rng.uniform() < 0.5} or {"b"}
        for k in (1, 2, 3):
            assert (recall_at_k(oracle_ranking(cands, rel, k).doc_ids, rel, k)
                    >= recall_at_k(final_ranking(cands, "product", k).doc_ids, rel, k))


def toy_corpus():
    docs = [Document(f"g{i}", ["good", "alpha", f"w{i}"]) for i in range(4)]
    docs += [Document(f"b{i}", ["bad", "beta", f"w{i}"]) for i in range(4)]
    return Corpus(docs)


def toy_records():
    recs, qrels, queries = [], {}, {}
    for j in range(6):
        qid = f"q{j}"
        queries[qid] = ["find", f"w{j % 4}"]
        qrels[qid] = {f"g{j % 4}", f"g{(j + 1) % 4}"}
        recs.append(rec(qid, [f"b{j % 4}", f"g{j % 4}", f"b{(j + 2) % 4}"], "a0"))
        recs.append(rec(qid, [f"g{(j + 1) % 4}", f"b{(j + 1) % 4}"], "a1"))
    return recs, queries, qrels


def test_zero_head_gives_half_and_n_ln2_loss():
    corpus = toy_corpus()
    recs, queries, qrels = toy_records()
    model = RelevanceModel.create(AggregatorConfig(**SMALL), corpus, np.random.default_rng(0))
    model.params.values["W2"][:] = 0
    model.params.values["b2"][:] = 0
    exs = build_examples(recs, queries, qrels)
    assert np.allclose(model.score(queries["q0"], exs[0].candidates), 0.5)
    n_mean = np.mean([len(e.candidates) for e in exs])
    assert batch_loss(model, exs) == pytest.approx(n_mean * math.log(2), abs=1e-12)


def test_separable_toy_set_is_learned():
    corpus = toy_corpus()
    recs, queries, qrels = toy_records()
    cfg = AggregatorConfig(**SMALL, epochs=200, batch_size=6, lr=0.02)
    model, curve = train_aggregator(recs, queries, qrels, corpus, cfg, seed=0)
    assert curve[-1] < 0.05 < curve[0]
    ranked, _ = aggregate([r for r in recs if r["qid"] == "q0"], queries["q0"], [model], k=2)
    assert set(ranked.doc_ids) == qrels["q0"]


def test_training_deterministic():
    corpus = toy_corpus()
    recs, queries, qrels = toy_records()
    cfg = AggregatorConfig(**SMALL, epochs=5, batch_size=4)
    a, ca = train_aggregator(recs, queries, qrels, corpus, cfg, seed=3)
    b, cb = train_aggregator(recs, queries, qrels, corpus, cfg, seed=3)
    assert ca == cb
    for k in a.params.names():
        assert np.array_equal(a.params[k], b.params[k])


def test_no_positive_training_query():
    corpus = toy_corpus()
    recs, queries, _ = toy_records()
    with pytest.raises(ValueError):
        train_aggregator(recs, queries, {}, corpus, AggregatorConfig(**SMALL, epochs=1))


@pytest.mark.parametrize("features,indicators,shared", [("full", False, True), ("concat", False, True),
                                                        ("full", True, True), ("full", False, False)])
@pytest.mark.parametrize("seed", range(3))
def test_model_gradients_finite_differences(seed, features, indicators, shared):
    corpus = toy_corpus()
    recs, queries, qrels = toy_records()
    cfg = AggregatorConfig(**SMALL, features=features, agent_indicators=indicators,
                           n_reformulations=2 if indicators else 0, shared_embeddings=shared)
    model = RelevanceModel.create(cfg, corpus, np.random.default_rng(seed))
    exs = build_examples(recs, queries, qrels)[:3]
    batch_loss(model, exs)
    grads = {k: model.params.grads[k].copy() for k in model.params.names()}
    h = 1e-6
    for name in model.params.names():
        v = model.params[name].reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(v.size):
            old = v[i]
            v[i] = old + h
            lp = batch_loss(model, exs)
            v[i] = old - h
            lm = batch_loss(model, exs)
            v[i] = old
            num = (lp - lm) / (2 * h)
            if max(abs(num), abs(g[i])) < 1e-7:
                continue
            assert abs(num - g[i]) / max(abs(num), abs(g[i])) < 1e-4, (name, i)


def test_ensemble_averages_scores():
    corpus = toy_corpus()
    recs, queries, _ = toy_records()
    cfg = AggregatorConfig(**SMALL)
    models = [RelevanceModel.create(cfg, corpus, np.random.default_rng(s)) for s in range(3)]
    q0 = queries["q0"]
    cands = dedupe_and_rank_score([r for r in recs if r["qid"] == "q0"])
    expect = np.mean([m.score(q0, cands) for m in models], axis=0)
    ranked = ensemble_aggregators(models, q0, cands, k=5)
    assert np.allclose([c.s_r for c in cands], expect)
    assert ranked.doc_ids == final_ranking(cands, "product", 5).doc_ids
    with pytest.raises(ValueError):
        score_candidates([], q0, cands)


def test_config_roundtrip_and_validation():
    cfg = AggregatorConfig(**SMALL)
    assert AggregatorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        AggregatorConfig(features="x")
    with pytest.raises(ValueError):
        AggregatorConfig(agent_indicators=True)


@pytest.mark.parametrize("features,indicators", [("full", False), ("concat", True)])
def test_batched_step_equals_per_query_loop(features, indicators):
    corpus = toy_corpus()
    recs, queries, qrels = toy_records()
    queries["q1"] = ["find", "w1", "more"]          # mixed query lengths in one batch
    cfg = AggregatorConfig(**SMALL, features=features, agent_indicators=indicators,
                           n_reformulations=2 if indicators else 0)
    model = RelevanceModel.create(cfg, corpus, np.random.default_rng(0))
    exs = build_examples(recs, queries, qrels)
    model.params.zero_grad()
    loop = sum(query_loss(model, ex.q0, ex.candidates, ex.labels, scale=0.5) for ex in exs)
    want = {k: model.params.grads[k].copy() for k in model.params.names()}
    model.params.zero_grad()
    assert model.batch_step(exs, 0.5) == pytest.approx(loop, rel=1e-12)
    for k in want:
        assert np.allclose(model.params.grads[k], want[k], rtol=1e-10, atol=1e-13), k
