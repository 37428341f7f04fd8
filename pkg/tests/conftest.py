import sys

import numpy as np
import pytest

from qreform.search import Corpus, Document, build_index
from qreform.synth import SyntheticSpec, synth_corpus

SMALL_SPEC = dict(n_topics=20, docs_per_topic=5, vocab_size=1500, background_words=300,
                  distractor_words=100, generic_words=20, synonym_table_size=200,
                  n_train=60, n_dev=20, n_test=20)


@pytest.fixture(scope="session")
def small_data():
    return synth_corpus(SyntheticSpec(**SMALL_SPEC), seed=0)


@pytest.fixture(scope="session")
def small_index(small_data):
    return build_index(small_data.corpus)


@pytest.fixture
def hand_corpus():
    return Corpus([
        Document("d1", ("apple", "banana", "apple", "cherry")),
        Document("d2", ("banana", "banana", "date")),
        Document("d3", ("cherry", "date", "egg", "fig", "apple")),
    ])


def random_corpus(rng, n_docs, vocab=12, max_len=15):
    words = [f"t{i}" for i in range(vocab)]
    docs = []
    for i in range(n_docs):
        n = int(rng.integers(1, max_len + 1))
        docs.append(Document(f"doc{i:03d}", tuple(rng.choice(words, size=n).tolist())))
    return Corpus(docs), words


def pytest_terminal_summary(terminalreporter):
    # acceptance lines are printed during the run too, but output capture hides them
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
