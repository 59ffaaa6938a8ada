"""Functional retrofitting of embeddings to typed knowledge graphs."""

__version__ = "0.1.0"

from .embeddings import EmbeddingFormat, EmbeddingSet, align, load_embeddings, pmi_l2_normalize, save_embeddings
from .engine import RetrofitConfig, RetrofitResult, SGDConfig, objective, retrofit
from .errors import InputError, NumericalError, ParseError, RetrofitError
from .evaluation import leave_one_relation_out, repeat_eval, synth_graph, word_similarity
from .graph import Edge, KnowledgeGraph, graph_stats, load_edgelist, remove_relation, sample_negative_edges
from .penalty import PenaltyKind, RelationParams, penalty_gradients, penalty_value

__all__ = [
    "Edge", "EmbeddingFormat", "EmbeddingSet", "InputError", "KnowledgeGraph", "NumericalError",
    "ParseError", "PenaltyKind", "RelationParams", "RetrofitConfig", "RetrofitError", "RetrofitResult",
    "SGDConfig", "align", "graph_stats", "leave_one_relation_out", "load_edgelist", "load_embeddings",
    "objective", "penalty_gradients", "penalty_value", "pmi_l2_normalize", "remove_relation",
    "repeat_eval", "retrofit", "sample_negative_edges", "save_embeddings", "synth_graph", "word_similarity",
]
