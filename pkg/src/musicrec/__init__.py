"""Sequence-aware multimodal graph recommender with cross-view alignment."""
from .core import ConfigError, DataError, HyperParams, InteractionLog, ModelParams, reindex
from .data import Split, SequenceSet, build_sequences, five_core_filter, leave_two_out, load_features
from .evaluation import EvalReport, bucket_evaluate, evaluate
from .model import Ablation, ForwardState, MuSICRec
from .pipeline import build_graphs, build_model, prepare_split
from .train import TrainingDivergence, fit

__all__ = [
    "Ablation", "ConfigError", "DataError", "EvalReport", "ForwardState", "HyperParams", "InteractionLog",
    "ModelParams", "MuSICRec", "SequenceSet", "Split", "TrainingDivergence", "bucket_evaluate",
    "build_graphs", "build_model", "build_sequences", "evaluate", "fit", "five_core_filter",
    "leave_two_out", "load_features", "prepare_split", "reindex",
]
__version__ = "0.1.0"
