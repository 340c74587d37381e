"""kgrag: knowledge-graph RAG with a trainable triple-scoring retriever."""

__version__ = "0.1.0"

from .kg import KnowledgeGraph, QuerySample, Triple, load_dataset, load_triples

__all__ = [
    "KnowledgeGraph",
    "QuerySample",
    "Triple",
    "load_dataset",
    "load_triples",
    "__version__",
]
