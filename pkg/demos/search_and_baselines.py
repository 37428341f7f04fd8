"""Walk through the search environment and the two expansion baselines.

Builds a small synthetic benchmark, shows how vocabulary mismatch hurts
BM25, then shows what PRF and RM3 add for one query.

    python demos/search_and_baselines.py
"""
import numpy as np

from qreform.baselines import RM3Config, prf_expand, rm3_expand, rm3_terms
from qreform.search import build_index, recall
from qreform.synth import SyntheticSpec, synth_corpus

spec = SyntheticSpec(n_topics=40, n_train=60, n_dev=20, n_test=20, vocab_size=3500,
                     synonym_table_size=300)
data = synth_corpus(spec, seed=0)
index = build_index(data.corpus)
print(f"{len(data.corpus.documents)} documents, {len(data.corpus.vocab)} terms, "
      f"{len(data.queries)} queries")

# One query, three ways.
qid = data.splits["test"][0]
q0 = data.queries[qid]
rel = data.qrels[qid]
print(f"\nquery {qid}: {' '.join(q0)}  ({len(rel)} relevant docs)")

prf_q = prf_expand(q0, index, n_terms=3, k_docs=5)
rm3_q = rm3_expand(q0, index, RM3Config(n_terms=20))
for name, q in [("BM25", q0), ("PRF", prf_q), ("RM3", rm3_q)]:
    r = recall(index.search(q, 10).doc_ids, rel)
    print(f"  {name:5s} R@10 = {r:.2f}   ({len(q)} tokens)")

print("\ntop RM3 expansion terms:")
for term, w in rm3_terms(q0, index, RM3Config(n_terms=5)):
    print(f"  {term}  {w:.4f}")

# Averaged over the test split.
print("\nmean R@10 on the test split:")
for name, fn in [("BM25", lambda q: q),
                 ("PRF", lambda q: prf_expand(q, index, 3, 5)),
                 ("RM3", lambda q: rm3_expand(q, index, RM3Config(n_terms=20)))]:
    scores = [recall(index.search(fn(data.queries[i]), 10).doc_ids, data.qrels[i])
              for i in data.splits["test"]]
    print(f"  {name:5s} {np.mean(scores):.3f}")
