"""Random versus k-means partitions of the training queries.

k-means groups queries by topic, which makes each sub-agent a narrow
specialist. The random split keeps every subset representative of the whole.

    python demos/partitioning.py
"""
from collections import Counter

from qreform.partitioning import make_partition
from qreform.synth import SyntheticSpec, synth_corpus

spec = SyntheticSpec(n_topics=40, n_train=120, n_dev=20, n_test=20, vocab_size=3500,
                     synonym_table_size=300, query_topics=8)
data = synth_corpus(spec, seed=0)
train = data.splits["train"]

for strategy in ("random", "kmeans-Q", "kmeans-QA"):
    part = make_partition(strategy, train, 4, seed=0, queries=data.queries,
                          qrels=data.qrels, corpus=data.corpus)
    print(f"{strategy:9s} sizes {part.sizes()}")
    for j, subset in enumerate(part.subsets):
        topics = Counter(data.query_topic[q] for q in subset)
        print(f"   subset {j}: {len(topics)} topics, largest share "
              f"{topics.most_common(1)[0][1] / len(subset):.2f}")
