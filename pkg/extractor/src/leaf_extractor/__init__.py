"""Gradient-boosted-tree trainer exporting leaf assignments for similarity search."""

from .core import (
    TrainError,
    TrainSpec,
    export_leaves,
    leaf_assignments,
    load_features,
    load_model,
    save_model,
    train_classifier,
)
from .formats import ExportError, write_leaf_matrix, write_meta_jsonl

__version__ = "0.1.0"

__all__ = [
    "TrainSpec",
    "TrainError",
    "ExportError",
    "train_classifier",
    "save_model",
    "load_model",
    "load_features",
    "leaf_assignments",
    "export_leaves",
    "write_leaf_matrix",
    "write_meta_jsonl",
]
