"""Knowledge-graph context-enhanced diversified recommendation."""

from kgdiv.config import PRESETS, TrainConfig
from kgdiv.data import (
    Dataset,
    DatasetSplit,
    IdMaps,
    InteractionGraph,
    KnowledgeGraph,
    RawInteractions,
    apply_k_core,
    build_dataset,
    build_interaction_graph,
    build_kg,
    load_interactions,
    load_kg,
    split,
)
from kgdiv.evaluator import MetricReport, coverage, evaluate_embeddings, recall_ndcg, topk
from kgdiv.model import Model, ParameterStore
from kgdiv.trainer import Checkpoint, TrainResult, train

__version__ = "0.1.0"
