"""A complete, scaled-down experiment: baselines, a single agent, and
four sub-agents trained on a random partition and combined by the aggregator.

Takes about twenty seconds. At this size each sub-agent sees fewer than
forty training queries, too few to learn much, so RL-4-Sub usually trails
RL-RNN here. Its Oracle R@10 is still the highest: the slices produce the
most varied result lists, which is what the full-size run turns into a gain.
The full benchmark is `python -m qreform run`.

    python demos/small_experiment.py [out_dir]
"""
import sys
from pathlib import Path

from qreform.pipeline import ExperimentConfig, run_experiment

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
cfg = ExperimentConfig(
    synthetic=dict(n_topics=60, n_train=150, n_dev=40, n_test=40, vocab_size=4000,
                   synonym_table_size=500, query_topics=10),
    seeds=[0], steps=80, aggregator={"epochs": 10},
    arms=["bm25", "prf", "rm3", "rl-rnn", "full", "sub"])
run_experiment(cfg, out)

for name in ("retrieval.tsv", "diversity.tsv"):
    print(f"== {name}")
    print((out / "seed_0" / name).read_text())
