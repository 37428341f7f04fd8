"""Multi-agent query reformulation on a BM25 search engine.

Sub-agents trained by REINFORCE on disjoint partitions of the training
queries each rewrite a query; an aggregator pools their retrieved results
and ranks them by accumulated rank score times a learned relevance score.
"""
from .search import Corpus, Document, Environment, InvertedIndex, RankedList, build_index, bm25_search
from .metrics import diversity, ranking_metrics, recall_at_k
from .synth import SyntheticSpec, synth_corpus
from .pipeline import ExperimentConfig, run_experiment, stability_report

__all__ = ["Corpus", "Document", "Environment", "InvertedIndex", "RankedList", "build_index",
           "bm25_search", "diversity", "ranking_metrics", "recall_at_k", "SyntheticSpec",
           "synth_corpus", "ExperimentConfig", "run_experiment", "stability_report"]
__version__ = "0.1.0"
