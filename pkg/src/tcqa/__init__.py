"""Typed fuzzy-logic complex query answering over a calibrated sparse neural adjacency matrix."""

from .adjacency import (
    CalibrationParams,
    NeuralAdjacencyMatrix,
    build_base_matrix,
    calibrated_entry,
    exact_matrix,
    load_matrix,
    save_matrix,
    storage_report,
)
from .evaluation import EvalReport, evaluate, rank_hard_answer
from .executor import AdapterParams, Executor, Gradients, Trace, execute, project, t_and, t_or
from .kg import KnowledgeGraph, TypeAnnotations, Vocab, graph_view, load_kg, load_triples, load_types
from .kge import KgeConfig, KgeModel, load_model, save_model, score_row, train_kge
from .queries import (
    STRUCTURES,
    And,
    Anchor,
    LabeledQuery,
    Or,
    Projection,
    Query,
    build_structure,
    generate_queries,
    parse_query,
    serialize_query,
    structure_of,
    symbolic_answers,
)
from .trainer import TrainConfig, TrainState, bce_loss, load_params, save_params, train_adapter
from .typegraphs import TypedEntityRelationGraphs, build_type_graphs, compat_mask

__version__ = "0.1.0"
