"""Per-entity model selection: tuned fits for four estimator kinds.

For each kind, hyperparameters are tuned by Bayesian optimization against a
mean cross-validated weighted F1, then the incumbent is refit on the full
entity dataset. Wall-clock duration is recorded per kind.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolationError, UnsupportedModelError
from ..evalstat import confusion, f1_weighted
from .baseline import StratifiedBaseline
from .bayesopt import Dim, SearchSpace, bayes_optimize
from .boost import GradientBoostedTrees, _Tree
from .cv import choose_cv_splits, stratified_folds
from .linear import SoftmaxRegression
from .mlp import MLPClassifier

MODEL_KINDS = ("dummy", "logreg", "gbt", "mlp")

HYPERPARAM_SPACES = {
    "dummy": SearchSpace({}),
    "logreg": SearchSpace({
        "l2": Dim(1e-4, 1e2, "logfloat"),
    }),
    "gbt": SearchSpace({
        "rounds": Dim(10, 200, "int"),
        "depth": Dim(1, 6, "int"),
        "learning_rate": Dim(0.01, 0.5, "float"),
        "subsample": Dim(0.5, 1.0, "float"),
        "leaf_l2": Dim(0.0, 10.0, "float"),
    }),
    "mlp": SearchSpace({
        "hidden": Dim(4, 64, "int"),
        "learning_rate": Dim(1e-4, 1e-1, "logfloat"),
        "epochs": Dim(10, 200, "int"),
    }),
}


@dataclass
class AutomlConfig:
    budget: int = 25
    cv_max_splits: int = 10
    kinds: tuple = MODEL_KINDS


@dataclass
class TrainedModel:
    kind: str
    estimator: object
    hyperparams: dict
    cv_splits: int
    cv_score: float
    duration_s: float
    feature_names: list = field(default_factory=list)
    n_classes: int = 3
    cv_confusion: object = None


def _kind_seed(seed: int, kind: str) -> int:
    digest = hashlib.sha256(f"{seed}:{kind}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _make_estimator(kind: str, hyperparams: dict, seed: int):
    hp = hyperparams
    if kind == "dummy":
        return StratifiedBaseline(seed=seed)
    if kind == "logreg":
        return SoftmaxRegression(l2=hp.get("l2", 1e-3))
    if kind == "gbt":
        return GradientBoostedTrees(
            n_rounds=hp.get("rounds", 80),
            max_depth=hp.get("depth", 3),
            learning_rate=hp.get("learning_rate", 0.3),
            subsample=hp.get("subsample", 1.0),
            leaf_l2=hp.get("leaf_l2", 1.0),
            seed=seed)
    if kind == "mlp":
        return MLPClassifier(
            n_hidden=hp.get("hidden", 16),
            lr=hp.get("learning_rate", 0.01),
            epochs=hp.get("epochs", 50),
            seed=seed)
    raise UnsupportedModelError(f"unknown model kind {kind!r}")


def train(kind: str, X, y, n_classes: int = 3, hyperparams: dict | None = None,
          seed: int = 0, feature_names=None) -> TrainedModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ContractViolationError("empty dataset")
    if np.unique(y).size < 2:
        raise ContractViolationError("single-class dataset")
    hp = dict(hyperparams or {})
    t0 = time.perf_counter()
    est = _make_estimator(kind, hp, seed).fit(X, y, n_classes)
    duration = time.perf_counter() - t0
    return TrainedModel(
        kind=kind, estimator=est, hyperparams=hp, cv_splits=0,
        cv_score=float("nan"), duration_s=duration,
        feature_names=list(feature_names or []), n_classes=n_classes)


def predict_proba(model: TrainedModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    probs = model.estimator.predict_proba(x)
    return probs[0] if single else probs


def feature_importance(model: TrainedModel) -> dict:
    """Gain share per feature name; defined for boosted-tree models only."""
    if model.kind != "gbt":
        raise UnsupportedModelError(
            f"feature importance needs a gbt model, got {model.kind!r}")
    shares = model.estimator.importance_shares()
    if shares.sum() <= 0:
        return {}
    names = model.feature_names or [f"f{i}" for i in range(len(shares))]
    return {names[i]: float(shares[i]) for i in range(len(shares))}


def _cv_eval(kind, X, y, n_classes, folds, seed, hyperparams):
    """Mean per-fold weighted F1 plus the pooled out-of-fold confusion."""
    scores = []
    pooled = np.zeros((n_classes, n_classes), dtype=np.int64)
    for train_idx, test_idx in folds:
        est = _make_estimator(kind, hyperparams, seed)
        est.fit(X[train_idx], y[train_idx], n_classes)
        pred = est.predict(X[test_idx])
        mat = confusion(y[test_idx], pred, n_classes)
        pooled += mat.counts
        scores.append(f1_weighted(mat))
    return float(np.mean(scores)), pooled


def _cv_objective(kind, X, y, n_classes, folds, seed):
    def objective(hyperparams):
        return _cv_eval(kind, X, y, n_classes, folds, seed, hyperparams)[0]
    return objective


def automl_entity(X, y, config: AutomlConfig | None = None, seed: int = 0,
                  n_classes: int = 3, feature_names=None) -> dict:
    """Tune, fit, and time one model per kind on a single entity's data."""
    config = config or AutomlConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_splits = choose_cv_splits(y, config.cv_max_splits)
    folds = stratified_folds(y, n_splits, seed)
    out = {}
    for kind in config.kinds:
        t0 = time.perf_counter()
        space = HYPERPARAM_SPACES[kind]
        objective = _cv_objective(kind, X, y, n_classes, folds, seed)
        if space.n_dims == 0:
            best_hp = {}
        else:
            result = bayes_optimize(space, objective, config.budget,
                                    seed=_kind_seed(seed, kind))
            best_hp = result.best_params
        # one more CV pass at the incumbent pools the out-of-fold confusion
        cv_score, cv_conf = _cv_eval(kind, X, y, n_classes, folds, seed,
                                     best_hp)
        est = _make_estimator(kind, best_hp, seed).fit(X, y, n_classes)
        duration = time.perf_counter() - t0
        out[kind] = TrainedModel(
            kind=kind, estimator=est, hyperparams=best_hp,
            cv_splits=n_splits, cv_score=float(cv_score),
            duration_s=duration, feature_names=list(feature_names or []),
            n_classes=n_classes, cv_confusion=cv_conf)
    return out


# -- serialization ------------------------------------------------------------


def model_to_dict(model: TrainedModel) -> dict:
    est = model.estimator
    if model.kind == "dummy":
        payload = {
            "seed": est.seed,
            "class_probs": [float(v) for v in est.class_probs_],
        }
    elif model.kind == "logreg":
        payload = {
            "l2": est.l2,
            "weights": [[float(v) for v in row] for row in est.W_],
        }
    elif model.kind == "mlp":
        W1, b1, W2, b2 = est.params_
        payload = {
            "n_hidden": est.n_hidden,
            "W1": [[float(v) for v in row] for row in W1],
            "b1": [float(v) for v in b1],
            "W2": [[float(v) for v in row] for row in W2],
            "b2": [float(v) for v in b2],
        }
    elif model.kind == "gbt":
        payload = {
            "trees": [[t.to_dict() for t in rnd] for rnd in est.trees_],
            "bin_values": [[float(v) for v in u] for u in est.bin_values_],
            "gain_sums": [float(v) for v in est.gain_sums_],
        }
    else:
        raise UnsupportedModelError(f"cannot serialize kind {model.kind!r}")
    return {
        "format_version": 1,
        "kind": model.kind,
        "hyperparams": model.hyperparams,
        "cv_splits": model.cv_splits,
        "cv_score": model.cv_score,
        "duration_s": model.duration_s,
        "feature_names": list(model.feature_names),
        "n_classes": model.n_classes,
        "cv_confusion": (None if model.cv_confusion is None
                         else np.asarray(model.cv_confusion).tolist()),
        "payload": payload,
    }


def model_from_dict(d: dict) -> TrainedModel:
    kind = d["kind"]
    payload = d["payload"]
    n_classes = int(d["n_classes"])
    if kind == "dummy":
        est = StratifiedBaseline(seed=int(payload["seed"]))
        est.class_probs_ = np.array(payload["class_probs"], dtype=np.float64)
        est.n_classes_ = n_classes
    elif kind == "logreg":
        est = SoftmaxRegression(l2=float(payload["l2"]))
        est.W_ = np.array(payload["weights"], dtype=np.float64)
        est.n_classes_ = n_classes
    elif kind == "mlp":
        hp = d["hyperparams"]
        est = MLPClassifier(n_hidden=int(payload["n_hidden"]),
                            lr=float(hp.get("learning_rate", 0.01)),
                            epochs=int(hp.get("epochs", 50)))
        est.params_ = (np.array(payload["W1"], dtype=np.float64),
                       np.array(payload["b1"], dtype=np.float64),
                       np.array(payload["W2"], dtype=np.float64),
                       np.array(payload["b2"], dtype=np.float64))
        est.n_classes_ = n_classes
    elif kind == "gbt":
        hp = d["hyperparams"]
        est = GradientBoostedTrees(
            n_rounds=int(hp.get("rounds", 80)),
            max_depth=int(hp.get("depth", 3)),
            learning_rate=float(hp.get("learning_rate", 0.3)),
            subsample=float(hp.get("subsample", 1.0)),
            leaf_l2=float(hp.get("leaf_l2", 1.0)))
        est.trees_ = [[_Tree.from_dict(t) for t in rnd]
                      for rnd in payload["trees"]]
        est.bin_values_ = [np.array(u, dtype=np.float64)
                           for u in payload["bin_values"]]
        est.gain_sums_ = np.array(payload["gain_sums"], dtype=np.float64)
        est.n_classes_ = n_classes
    else:
        raise UnsupportedModelError(f"cannot deserialize kind {kind!r}")
    conf = d.get("cv_confusion")
    return TrainedModel(
        kind=kind, estimator=est, hyperparams=dict(d["hyperparams"]),
        cv_splits=int(d["cv_splits"]), cv_score=float(d["cv_score"]),
        duration_s=float(d["duration_s"]),
        feature_names=list(d["feature_names"]), n_classes=n_classes,
        cv_confusion=None if conf is None else np.asarray(conf, dtype=np.int64))
