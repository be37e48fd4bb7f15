"""Training and leaf export for the gradient-boosted similarity substrate.

A binary classifier is fit on the labeled train split of a tabular
feature matrix; per-sample terminal-node indices are then exported in the
similarity toolkit's file formats. Tree inference is deterministic, so
identical feature rows always map to identical leaf vectors and
re-exports are byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import joblib
import numpy as np
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.metrics import roc_auc_score

from .formats import (
    ExportError,
    read_meta_jsonl,
    synth_sha256,
    write_leaf_matrix,
    write_meta_jsonl,
)

PathLike = Union[str, Path]


class TrainError(Exception):
    pass


@dataclass
class TrainSpec:
    """Inputs and hyperparameters for one training run.

    Hyperparameter defaults follow the reference malware-classifier
    configuration; ``eta`` is the boosting learning rate and
    ``colsample_bytree`` the fraction of features considered per split.
    """

    features: PathLike
    meta: PathLike
    max_depth: int = 17
    eta: float = 0.15
    n_estimators: int = 2048
    colsample_bytree: float = 1.0
    seed: int = 0
    out_model: Optional[PathLike] = None

    def __post_init__(self) -> None:
        if self.max_depth < 1:
            raise TrainError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.eta <= 0:
            raise TrainError(f"eta must be positive, got {self.eta}")
        if self.n_estimators < 1:
            raise TrainError(f"n_estimators must be >= 1, got {self.n_estimators}")
        if not 0 < self.colsample_bytree <= 1:
            raise TrainError(
                f"colsample_bytree must be in (0, 1], got {self.colsample_bytree}"
            )


def load_features(path: PathLike) -> np.ndarray:
    """Load a dense N x D feature matrix from ``.npz`` (key "X") or CSV."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as archive:
            if "X" not in archive:
                raise TrainError(f"{path} has no 'X' array (found {list(archive)})")
            x = np.asarray(archive["X"], dtype=np.float64)
    else:
        skip = 0
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline()
        try:
            [float(v) for v in first.strip().split(",")]
        except ValueError:
            skip = 1  # header row
        x = np.loadtxt(path, delimiter=",", skiprows=skip, dtype=np.float64, ndmin=2)
    if x.ndim != 2:
        raise TrainError(f"feature matrix must be 2-D, got shape {x.shape}")
    return x


def _split_rows(meta_rows: List[dict]) -> Tuple[List[int], List[int]]:
    train = [m["row"] for m in meta_rows if m["subset"] == "train"]
    test = [m["row"] for m in meta_rows if m["subset"] == "test"]
    return train, test


def train_classifier(spec: TrainSpec) -> Tuple[GradientBoostingClassifier, float]:
    """Fit the ensemble on the train split and report held-out ROC AUC.

    Only labeled rows participate; the run is fully deterministic for a
    fixed seed.
    """
    x = load_features(spec.features)
    meta_rows = read_meta_jsonl(spec.meta)
    if len(meta_rows) != x.shape[0]:
        raise TrainError(
            f"metadata rows {len(meta_rows)} do not match feature rows {x.shape[0]}"
        )
    labels = np.asarray([m["label"] for m in meta_rows])
    bad = set(np.unique(labels)) - {-1, 0, 1}
    if bad:
        raise TrainError(f"labels must be -1, 0 or 1; found {sorted(bad)}")
    train_rows, test_rows = _split_rows(meta_rows)
    train_rows = [r for r in train_rows if labels[r] >= 0]
    test_rows = [r for r in test_rows if labels[r] >= 0]
    if not train_rows:
        raise TrainError("no labeled training rows")
    if not test_rows:
        raise TrainError("no labeled test rows to evaluate on")
    y_train = labels[train_rows]
    if len(np.unique(y_train)) < 2:
        raise TrainError("training labels contain a single class")

    model = GradientBoostingClassifier(
        n_estimators=spec.n_estimators,
        learning_rate=spec.eta,
        max_depth=spec.max_depth,
        max_features=spec.colsample_bytree if spec.colsample_bytree < 1 else None,
        random_state=spec.seed,
    )
    model.fit(x[train_rows], y_train)
    scores = model.decision_function(x[test_rows])
    auc = float(roc_auc_score(labels[test_rows], scores))
    return model, auc


def save_model(model: GradientBoostingClassifier, auc: float, spec: TrainSpec, path: PathLike) -> None:
    payload = {
        "model": model,
        "auc": auc,
        "hyperparameters": {
            "max_depth": spec.max_depth,
            "eta": spec.eta,
            "n_estimators": spec.n_estimators,
            "colsample_bytree": spec.colsample_bytree,
            "seed": spec.seed,
        },
    }
    joblib.dump(payload, path)


def load_model(path: PathLike) -> GradientBoostingClassifier:
    payload = joblib.load(path)
    return payload["model"]


def leaf_assignments(model: GradientBoostingClassifier, x: np.ndarray) -> np.ndarray:
    """Terminal-node index per (sample, boosting stage).

    Binary boosting fits one tree per stage, so the per-class axis of
    ``apply`` collapses to the stage axis.
    """
    leaves = model.apply(x)
    if leaves.ndim == 3:
        if leaves.shape[2] != 1:
            raise ExportError(
                f"expected one tree per stage, got {leaves.shape[2]} (non-binary model?)"
            )
        leaves = leaves[:, :, 0]
    return leaves.astype(np.int64)


def export_leaves(
    model: GradientBoostingClassifier,
    features: np.ndarray,
    out_lsim: PathLike,
    meta_rows: Optional[List[dict]] = None,
) -> Path:
    """Write leaf assignments as ``.lsim`` plus a ``.meta.jsonl`` sidecar.

    When no metadata is supplied, placeholder identities are synthesized
    from the feature rows and every sample is marked unlabeled.
    """
    out_lsim = Path(out_lsim)
    leaves = leaf_assignments(model, features)
    if meta_rows is not None and len(meta_rows) != leaves.shape[0]:
        raise ExportError(
            f"metadata rows {len(meta_rows)} do not match feature rows {leaves.shape[0]}"
        )
    write_leaf_matrix(leaves, out_lsim)
    sidecar = out_lsim.with_suffix(".meta.jsonl")
    if meta_rows is None:
        n = leaves.shape[0]
        write_meta_jsonl(
            sidecar,
            n,
            shas=[synth_sha256(i, features[i]) for i in range(n)],
            labels=[-1] * n,
            subsets=["unlabeled"] * n,
        )
    else:
        write_meta_jsonl(
            sidecar,
            len(meta_rows),
            shas=[m["sha256"] for m in meta_rows],
            labels=[m["label"] for m in meta_rows],
            subsets=[m["subset"] for m in meta_rows],
            appeared=[m.get("appeared") for m in meta_rows],
        )
    return sidecar
