"""The four diversity measures on hand-made reformulation sets.

A set of near-copies scores high on pCos and pBLEU and low on PINC; a set
of distinct rewrites does the opposite.

    python demos/diversity_metrics.py
"""
from qreform.metrics import diversity

q = "cheap flights to lisbon".split()

copies = [q, q + ["cheap"], q + ["flights"], q]
varied = [q,
          q + ["tap", "portugal", "deals"],
          ["lisbon", "airfare", "budget"],
          ["low", "cost", "airline", "portugal", "capital", "travel"]]

for name, Q in [("near copies", copies), ("varied", varied)]:
    d = diversity([Q])   # a list of reformulation sets, one per query
    print(f"{name:12s} " + "  ".join(f"{k}={v:6.2f}" for k, v in d.items()))
