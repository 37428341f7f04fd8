import json

import numpy as np
import pytest

from qreform import metrics as M
from qreform import pipeline as P
from qreform.search import bm25_search

from conftest import SMALL_SPEC

TINY = dict(synthetic=dict(SMALL_SPEC), seeds=[0], steps=20, pretrain_steps=10,
            aggregator={"epochs": 3}, n_agents=3)


def tiny(**kw):
    return P.ExperimentConfig.from_dict({**TINY, **kw})


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny(arms=["bm25", "prf", "rm3", "rl-rnn", "ensemble", "full", "bagging", "sub",
                     "sub-pretrained", "rnn-greedy-agg", "rnn-beam-agg"])
    return cfg, P.run_experiment(cfg, out), out


def test_config_validation_and_roundtrip(tmp_path):
    cfg = tiny()
    assert P.ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert P.ExperimentConfig.load(tmp_path / "c.json") == cfg
    for bad in (dict(n_agents=0), dict(arms=["nope"]), dict(seeds=[]), dict(decode="x"),
                dict(synthetic=None), dict(aggregator={"no_such": 1})):
        with pytest.raises(P.ConfigError):
            tiny(**bad)
    with pytest.raises(P.ConfigError):
        P.ExperimentConfig.from_dict({**TINY, "unknown_key": 1})


def test_arm_labels():
    assert P.arm_label("sub", 4) == "RL-4-Sub"
    assert P.arm_label("bm25", 4) == "BM25"


def test_reports_written(tiny_run):
    cfg, rep, out = tiny_run
    seed_dir = out / "seed_0"
    for f in ("retrieval.tsv", "diversity.tsv", "ablation.tsv", "single_reformulator.tsv",
              "agent_sweep.dat", "summary.json", "run_sub.tsv"):
        assert (seed_dir / f).exists(), f
    assert (out / "retrieval_by_seed.tsv").exists() and (out / "config.json").exists()
    assert not rep.seeds[0].failed
    header = (seed_dir / "retrieval.tsv").read_text().splitlines()[0].split("\t")
    assert header[1:] == ["R@10", "MAP", "R-Prec", "MRR", "NDCG", "Oracle R@10"]
    div = (seed_dir / "diversity.tsv").read_text()
    assert "14.2" in div and "94.5" in div


def test_bm25_arm_matches_direct_search(tiny_run):
    cfg, rep, _ = tiny_run
    ctx = P.SeedContext(cfg, 0)
    for q in ctx.data.splits["test"]:
        direct = bm25_search(ctx.index, ctx.data.queries[q], cfg.result_depth)
        assert rep.seeds[0].arms["bm25"].run[q] == direct.items


def test_oracle_dominates_every_query(tiny_run):
    _, rep, _ = tiny_run
    for arm, res in rep.seeds[0].arms.items():
        for q, o in res.oracle.items():
            assert o >= res.per_query[q]["R@10"] - 1e-12, (arm, q)


def test_sweep_oracle_non_decreasing(tiny_run):
    _, rep, _ = tiny_run
    pts = rep.seeds[0].sweep
    assert [p["n"] for p in pts] == [1, 2, 3]
    assert all(b["oracle"] >= a["oracle"] - 1e-12 for a, b in zip(pts, pts[1:]))


def test_sub_with_one_agent_equals_rnn_plus_aggregator():
    cfg = tiny(n_agents=1, arms=["sub", "rnn-greedy-agg"], ablation=False)
    rep = P.run_experiment(cfg)
    a, b = rep.seeds[0].arms["sub"], rep.seeds[0].arms["rnn-greedy-agg"]
    assert a.run == b.run and a.metrics == b.metrics


def test_deterministic_reports(tmp_path):
    cfg = tiny(arms=["bm25", "rl-rnn", "sub"])
    P.run_experiment(cfg, tmp_path / "a")
    P.run_experiment(cfg, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file() and "logs" not in f.parts:
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes(), f


def test_stability_duplicated_seed_has_zero_variance():
    cfg = tiny(arms=["rl-rnn", "sub"], ablation=False)
    rep = P.run_experiment(cfg.with_overrides(seeds=[0]))
    st = P.stability_report(cfg, seeds=[0, 0], report=rep)
    assert st["single_variance"] == 0 and st["multi_variance"] == 0 and st["ratio"] == 0
    assert st["reference"] == {"multi_agent": 0.20, "single_agent": 1.07}
    with pytest.raises(ValueError):
        P.stability_report(cfg, seeds=[0])


def test_partition_study_rows():
    cfg = tiny(steps=10, aggregator={"epochs": 2})
    study = P.partition_study(cfg, 0)
    assert list(study) == ["kmeans-Q", "kmeans-A", "kmeans-QA", "random"]
    rows = P.partition_rows(study, 10)
    assert [r[0] for r in rows[1:]] == ["Q", "A", "Q+A", "Rand."]
    assert rows[0][1:] == ["E_i[e_i]", "E_i[E_j!=i[s_ij]]", "E_i[V_j!=i[s_ij]]", "R@10"]


def test_data_dir_roundtrip(tmp_path):
    from qreform.search import write_corpus_jsonl, write_qrels_tsv, write_queries_tsv
    cfg = tiny(arms=["bm25"], ablation=False)
    d = P.load_dataset(cfg, 0)
    write_corpus_jsonl(d.corpus, tmp_path / "corpus.jsonl")
    write_queries_tsv({q: " ".join(t) for q, t in d.queries.items()}, tmp_path / "queries.tsv")
    write_qrels_tsv(d.qrels, tmp_path / "qrels.tsv")
    P.write_splits_tsv(d.splits, tmp_path / "splits.tsv")
    cfg2 = cfg.with_overrides(synthetic=None, data_dir=str(tmp_path))
    d2 = P.load_dataset(cfg2, 0)
    assert d2.fingerprint() == d.fingerprint()
    a = P.run_experiment(cfg).seeds[0].arms["bm25"].metrics
    b = P.run_experiment(cfg2).seeds[0].arms["bm25"].metrics
    assert a == b
    (tmp_path / "qrels.tsv").write_text("")
    with pytest.raises(P.DataError):
        P.load_dataset(cfg2, 0)
