"""Gradient-boosted regression trees with exact greedy splits.

Plain squared-error boosting: each round fits a depth-limited tree to the
current residuals, choosing every split by exhaustive variance-reduction
search over all (feature, midpoint-threshold) pairs.  Ties break toward the
lowest feature index, then the lowest threshold, so fits are deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .cohort import CONFOUNDER_FLAGS, SYMPTOM_FLAGS, WEARABLE_CHANNELS, PatientRecord

FEATURE_NAMES = (
    ("age_years", "prior_pasc_score")
    + tuple(f"flag_{c}" for c in CONFOUNDER_FLAGS)
    + tuple(f"symptom_{s}" for s in SYMPTOM_FLAGS)
    + tuple(f"mean_{c}" for c in WEARABLE_CHANNELS)
)


def feature_vector(record: PatientRecord) -> np.ndarray:
    """Numeric view of a record in the fixed FEATURE_NAMES order."""
    values = [float(record.age_years), record.prior_pasc_score]
    values += [float(getattr(record, c)) for c in CONFOUNDER_FLAGS]
    values += [float(s in record.symptom_flags) for s in SYMPTOM_FLAGS]
    values += [float(np.mean(record.wearable_weekly_means[c])) for c in WEARABLE_CHANNELS]
    return np.array(values)


def feature_matrix(records: list) -> np.ndarray:
    return np.stack([feature_vector(r) for r in records])


def labels(records: list) -> np.ndarray:
    return np.array([r.pasc_score_future for r in records])


@dataclass
class BoostedModel:
    base_prediction: float
    shrinkage: float
    max_depth: int
    trees: list = field(default_factory=list)          # nested dict nodes
    train_mse: list = field(default_factory=list)      # per completed round
    n_features: int = len(FEATURE_NAMES)
    feature_names: tuple = FEATURE_NAMES

    def to_dict(self) -> dict:
        return {
            "base_prediction": self.base_prediction,
            "shrinkage": self.shrinkage,
            "max_depth": self.max_depth,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "train_mse": list(self.train_mse),
            "trees": self.trees,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedModel":
        return cls(
            base_prediction=float(d["base_prediction"]),
            shrinkage=float(d["shrinkage"]),
            max_depth=int(d["max_depth"]),
            trees=list(d["trees"]),
            train_mse=[float(x) for x in d.get("train_mse", [])],
            n_features=int(d["n_features"]),
            feature_names=tuple(d["feature_names"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "BoostedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build_tree(x, residual, index, depth, max_depth, min_leaf) -> dict:
    if depth >= max_depth or index.size < 2 * min_leaf:
        return {"leaf": float(residual[index].mean())}
    feat, thresh, gain, found = kernels.best_split(
        np.ascontiguousarray(x[index]), np.ascontiguousarray(residual[index]), min_leaf
    )
    if not found or gain <= 0.0:
        return {"leaf": float(residual[index].mean())}
    left = index[x[index, feat] <= thresh]
    right = index[x[index, feat] > thresh]
    return {
        "feature": int(feat),
        "threshold": float(thresh),
        "left": _build_tree(x, residual, left, depth + 1, max_depth, min_leaf),
        "right": _build_tree(x, residual, right, depth + 1, max_depth, min_leaf),
    }


def _tree_predict(node: dict, x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0])
    stack = [(node, np.arange(x.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if "leaf" in nd:
            out[idx] = nd["leaf"]
            continue
        mask = x[idx, nd["feature"]] <= nd["threshold"]
        stack.append((nd["left"], idx[mask]))
        stack.append((nd["right"], idx[~mask]))
    return out


def fit(x: np.ndarray, y: np.ndarray, rounds: int = 200, learning_rate: float = 0.1,
        max_depth: int = 4, min_leaf: int = 1) -> BoostedModel:
    """Boost depth-limited regression trees against squared error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"feature matrix {x.shape} does not match targets {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")

    model = BoostedModel(
        base_prediction=float(y.mean()),
        shrinkage=learning_rate,
        max_depth=max_depth,
        n_features=x.shape[1],
        feature_names=FEATURE_NAMES if x.shape[1] == len(FEATURE_NAMES) else tuple(
            f"f{i}" for i in range(x.shape[1])
        ),
    )
    predictions = np.full(y.shape, model.base_prediction)
    for _ in range(rounds):
        residual = y - predictions
        tree = _build_tree(x, residual, np.arange(x.shape[0]), 0, max_depth, min_leaf)
        if "leaf" in tree:
            break  # no usable split anywhere: residuals are flat
        model.trees.append(tree)
        predictions = predictions + learning_rate * _tree_predict(tree, x)
        model.train_mse.append(float(np.mean((y - predictions) ** 2)))
    return model


def predict(model: BoostedModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ValueError(
            f"feature matrix {x.shape} does not match model with {model.n_features} features"
        )
    out = np.full(x.shape[0], model.base_prediction)
    for tree in model.trees:
        out = out + model.shrinkage * _tree_predict(tree, x)
    return out
