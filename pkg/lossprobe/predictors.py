"""
Base predictors p: X -> [0, 1] and the feature views that loss predictors
and test functions consume.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, ClassVar, Dict, List, Mapping, Tuple

import numpy as np
from scipy.special import expit

from lossprobe.config import LossprobeConfig
from lossprobe.data import Dataset
from lossprobe.exceptions import (
    ArityError,
    ConfigError,
    DataError,
    UnsupportedRepresentation,
)
from lossprobe.logger import child_logger
from lossprobe.regression import RegressionStump, RegressionTree, fit_stump_ensemble


logger = child_logger(__name__)


class ViewLevel:
    """
    Levels of the loss-predictor hierarchy. Representation-aware views are
    requested as internal (exposed by the model) or external (supplied by
    the caller)
    """

    PREDICTION_ONLY = "prediction-only"
    INPUT_AWARE = "input-aware"
    REPRESENTATION_AWARE = "representation-aware"
    INTERNAL = "representation-aware/internal"
    EXTERNAL = "representation-aware/external"

    ALL = (PREDICTION_ONLY, INPUT_AWARE, INTERNAL, EXTERNAL)

    @staticmethod
    def validate(level: str) -> str:
        if level not in ViewLevel.ALL:
            raise ConfigError(f"unknown view level '{level}', options are {list(ViewLevel.ALL)}")
        return level

    @staticmethod
    def rank(level: str) -> int:
        return {
            ViewLevel.PREDICTION_ONLY: 0,
            ViewLevel.INPUT_AWARE: 1,
            ViewLevel.INTERNAL: 2,
            ViewLevel.EXTERNAL: 2,
        }[ViewLevel.validate(level)]


@dataclass(frozen=True)
class FeatureView:
    """
    phi(p, x) for one example
    """

    level: str
    prediction: float
    input_features: Tuple[float, ...] | None = None
    representation: Tuple[float, ...] | None = None
    representation_source: str | None = None


@dataclass(frozen=True)
class ViewBatch:
    """
    phi(p, x) for a batch of rows. Subgroup masks ride along so subgroup
    indicators can be evaluated on the same rows
    """

    level: str
    predictions: np.ndarray
    inputs: np.ndarray | None = None
    representation: np.ndarray | None = None
    representation_source: str | None = None
    groups: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.predictions)

    def matrix(self) -> np.ndarray:
        """
        Columns: prediction, then inputs, then representation
        """
        blocks = [self.predictions[:, None]]
        if self.inputs is not None:
            blocks.append(self.inputs)
        if self.representation is not None:
            blocks.append(self.representation)
        return np.hstack(blocks)

    def with_predictions(self, predictions: np.ndarray) -> "ViewBatch":
        return ViewBatch(
            level=self.level,
            predictions=predictions,
            inputs=self.inputs,
            representation=self.representation,
            representation_source=self.representation_source,
            groups=self.groups,
        )

    def take(self, rows: np.ndarray) -> "ViewBatch":
        return ViewBatch(
            level=self.level,
            predictions=self.predictions[rows],
            inputs=None if self.inputs is None else self.inputs[rows],
            representation=None if self.representation is None else self.representation[rows],
            representation_source=self.representation_source,
            groups={k: v[rows] for k, v in self.groups.items()},
        )

    def row(self, i: int) -> FeatureView:
        return FeatureView(
            level=ViewLevel.REPRESENTATION_AWARE
            if self.representation is not None
            else self.level,
            prediction=float(self.predictions[i]),
            input_features=None if self.inputs is None else tuple(self.inputs[i].tolist()),
            representation=None
            if self.representation is None
            else tuple(self.representation[i].tolist()),
            representation_source=self.representation_source,
        )


class Predictor(ABC):
    """
    A model p: X -> [0, 1]
    """

    family: ClassVar[str]
    arity: int | None
    training_log: List[str]

    def __init__(self, arity: int | None = None) -> None:
        self.arity = arity
        self.training_log = []

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ArityError(f"expected a 2-d batch of examples, got {X.ndim} dimensions")
        if self.arity is not None and X.shape[1] != self.arity:
            raise ArityError(f"{self.family} expects {self.arity} features, got {X.shape[1]}")
        return X

    @abstractmethod
    def _predict(self, X: np.ndarray) -> np.ndarray: ...

    def predict_batch(self, X) -> np.ndarray:
        return np.clip(self._predict(self._check(X)), 0.0, 1.0)

    def predict(self, x) -> float:
        """
        p(x) for a single example
        """
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ArityError("a single example must be a 1-d vector")
        return float(self.predict_batch(x[None, :])[0])

    def internal_representation(self, X) -> np.ndarray:
        raise UnsupportedRepresentation(f"{self.family} predictors expose no internal representation")

    @abstractmethod
    def to_dict(self) -> Dict[str, Any]: ...


class ConstantPredictor(Predictor):
    family = "constant"

    def __init__(self, value: float, arity: int | None = None) -> None:
        super().__init__(arity)
        if not 0.0 <= value <= 1.0:
            raise ConfigError("a constant prediction must lie in [0, 1]")
        self.value = float(value)

    def _predict(self, X):
        return np.full(len(X), self.value)

    def to_dict(self):
        return {"family": self.family, "value": self.value, "arity": self.arity}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["value"], doc.get("arity"))


def _key(row) -> Tuple[float, ...]:
    return tuple(float(v) for v in row)


class TablePredictor(Predictor):
    """
    Lookup table from exact feature vectors to probabilities. Unseen keys
    fall back to `default`
    """

    family = "table"

    def __init__(self, table: Mapping[Tuple[float, ...], float], default: float, arity: int) -> None:
        super().__init__(arity)
        for key, value in table.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"table entry {key} -> {value} outside [0, 1]")
        self.table = {_key(k): float(v) for k, v in table.items()}
        self.default = float(default)

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> "TablePredictor":
        keys, inverse = np.unique(X, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        sums = np.bincount(inverse, weights=y, minlength=len(keys))
        counts = np.bincount(inverse, minlength=len(keys))
        table = {_key(k): float(s / c) for k, s, c in zip(keys, sums, counts)}
        predictor = cls(table, float(np.mean(y)), X.shape[1])
        predictor.training_log.append(f"table: {len(table)} keys")
        return predictor

    def predict_keys(self, keys) -> np.ndarray:
        return np.array([self.table.get(_key(k), self.default) for k in keys], dtype=float)

    def _predict(self, X):
        return self.predict_keys(X)

    def to_dict(self):
        return {
            "family": self.family,
            "arity": self.arity,
            "default": self.default,
            "entries": [{"key": list(k), "value": v} for k, v in sorted(self.table.items())],
        }

    @classmethod
    def from_dict(cls, doc):
        table = {_key(e["key"]): e["value"] for e in doc["entries"]}
        return cls(table, doc["default"], doc["arity"])


class LogisticPredictor(Predictor):
    family = "logistic"

    def __init__(self, weights, bias: float) -> None:
        weights = np.asarray(weights, dtype=float)
        super().__init__(len(weights))
        self.weights = weights
        self.bias = float(bias)

    @classmethod
    def fit(cls, X, y, learning_rate: float, iterations: int) -> "LogisticPredictor":
        """
        Full-batch gradient descent on the log loss from a zero start
        """
        n, d = X.shape
        weights = np.zeros(d)
        bias = 0.0
        for _ in range(iterations):
            residual = expit(X @ weights + bias) - y
            weights = weights - learning_rate * (X.T @ residual) / n
            bias = bias - learning_rate * float(residual.mean())
        predictor = cls(weights, bias)
        predictor.training_log.append(
            f"logistic: {iterations} iterations at learning rate {learning_rate}"
        )
        return predictor

    def margin(self, X) -> np.ndarray:
        return self._check(X) @ self.weights + self.bias

    def _predict(self, X):
        return expit(X @ self.weights + self.bias)

    def internal_representation(self, X):
        return self.margin(X)[:, None]

    def to_dict(self):
        return {"family": self.family, "weights": self.weights.tolist(), "bias": self.bias}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["weights"], doc["bias"])


class NaiveBayesPredictor(Predictor):
    """
    Gaussian naive Bayes with per-feature class-conditional means and
    variances (floored)
    """

    family = "naive-bayes"

    def __init__(self, prior: float, means, variances) -> None:
        means = np.asarray(means, dtype=float)
        super().__init__(means.shape[1])
        self.prior = float(prior)
        self.means = means
        self.variances = np.asarray(variances, dtype=float)

    @classmethod
    def fit(cls, X, y, variance_floor: float) -> "NaiveBayesPredictor":
        if np.all(y == y[0]):
            raise DataError("naive-bayes needs both labels in the training data")
        means = np.vstack([X[y == c].mean(axis=0) for c in (0, 1)])
        variances = np.vstack([X[y == c].var(axis=0) for c in (0, 1)])
        predictor = cls(float(np.mean(y)), means, np.maximum(variances, variance_floor))
        predictor.training_log.append(f"naive-bayes: variance floor {variance_floor}")
        return predictor

    def _predict(self, X):
        def log_density(c: int) -> np.ndarray:
            var = self.variances[c]
            return -0.5 * (np.log(2.0 * np.pi * var) + (X - self.means[c]) ** 2 / var).sum(axis=1)

        log_odds = np.log(self.prior) - np.log1p(-self.prior) + log_density(1) - log_density(0)
        return expit(log_odds)

    def to_dict(self):
        return {
            "family": self.family,
            "prior": self.prior,
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["prior"], doc["means"], doc["variances"])


class TreePredictor(Predictor):
    family = "tree"

    def __init__(self, tree: RegressionTree, arity: int) -> None:
        super().__init__(arity)
        self.tree = tree

    @classmethod
    def fit(cls, X, y, max_depth: int, min_leaf: int) -> "TreePredictor":
        predictor = cls(RegressionTree.fit(X, y.astype(float), max_depth, min_leaf), X.shape[1])
        predictor.training_log.append(
            f"tree: depth <= {max_depth}, min leaf {min_leaf}, {predictor.tree.n_leaves} leaves"
        )
        return predictor

    def _predict(self, X):
        return self.tree.predict(X)

    def internal_representation(self, X):
        leaves = self.tree.leaf_index(self._check(X))
        return np.eye(self.tree.n_leaves)[leaves]

    def to_dict(self):
        return {"family": self.family, "arity": self.arity, **self.tree.to_dict()}

    @classmethod
    def from_dict(cls, doc):
        return cls(RegressionTree.from_dict(doc), doc["arity"])


class StumpEnsemblePredictor(Predictor):
    """
    init + learning_rate * sum of stump outputs, clamped into [0, 1]
    """

    family = "stump-ensemble"

    def __init__(
        self,
        init: float,
        stumps: List[RegressionStump],
        learning_rate: float,
        arity: int | None = None,
    ) -> None:
        super().__init__(arity)
        self.init = float(init)
        self.stumps = list(stumps)
        self.learning_rate = float(learning_rate)

    @classmethod
    def fit(cls, X, y, rounds: int, learning_rate: float) -> "StumpEnsemblePredictor":
        init, stumps = fit_stump_ensemble(X, y.astype(float), rounds, learning_rate)
        predictor = cls(init, stumps, learning_rate, X.shape[1])
        predictor.training_log.append(f"stump-ensemble: {len(stumps)} stumps")
        return predictor

    def _predict(self, X):
        out = np.full(len(X), self.init)
        for stump in self.stumps:
            out = out + self.learning_rate * stump.predict(X)
        return out

    def internal_representation(self, X):
        X = self._check(X)
        if not self.stumps:
            return np.zeros((len(X), 0))
        return np.column_stack([stump.predict(X) for stump in self.stumps])

    def to_dict(self):
        return {
            "family": self.family,
            "arity": self.arity,
            "init": self.init,
            "learning_rate": self.learning_rate,
            "stumps": [s.to_dict() for s in self.stumps],
        }

    @classmethod
    def from_dict(cls, doc):
        stumps = [RegressionStump.from_dict(s) for s in doc["stumps"]]
        return cls(doc["init"], stumps, doc["learning_rate"], doc.get("arity"))


class BlendedPredictor(Predictor):
    """
    (1 - theta) * base + theta * constant: a controlled way to miscalibrate
    a trained model
    """

    family = "blend"

    def __init__(self, base: Predictor, theta: float, constant: float) -> None:
        super().__init__(base.arity)
        if not 0.0 <= theta <= 1.0 or not 0.0 <= constant <= 1.0:
            raise ConfigError("blend theta and constant must lie in [0, 1]")
        self.base = base
        self.theta = float(theta)
        self.constant = float(constant)

    def _predict(self, X):
        return (1.0 - self.theta) * self.base.predict_batch(X) + self.theta * self.constant

    def internal_representation(self, X):
        return self.base.internal_representation(X)

    def to_dict(self):
        return {
            "family": self.family,
            "theta": self.theta,
            "constant": self.constant,
            "base": self.base.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(predictor_from_dict(doc["base"]), doc["theta"], doc["constant"])


def _setting(spec: Mapping[str, Any], section: str, key: str, typ: type):
    return typ(spec.get(key, LossprobeConfig.get(section, key, typ=typ)))


FITTERS: Dict[str, Callable[[Mapping[str, Any], np.ndarray, np.ndarray], Predictor]] = {
    "constant": lambda spec, X, y: ConstantPredictor(float(spec.get("value", 0.5)), X.shape[1]),
    "table": lambda spec, X, y: TablePredictor.fit(X, y),
    "logistic": lambda spec, X, y: LogisticPredictor.fit(
        X,
        y,
        _setting(spec, "logistic", "learning_rate", float),
        _setting(spec, "logistic", "iterations", int),
    ),
    "naive-bayes": lambda spec, X, y: NaiveBayesPredictor.fit(
        X, y, _setting(spec, "naive_bayes", "variance_floor", float)
    ),
    "tree": lambda spec, X, y: TreePredictor.fit(
        X, y, _setting(spec, "tree", "max_depth", int), _setting(spec, "tree", "min_leaf", int)
    ),
    "stump-ensemble": lambda spec, X, y: StumpEnsemblePredictor.fit(
        X,
        y,
        _setting(spec, "stump_ensemble", "rounds", int),
        _setting(spec, "stump_ensemble", "learning_rate", float),
    ),
}


def fit(spec: Mapping[str, Any], data: Dataset) -> Predictor:
    """
    Trains the family named by spec['family'] on `data`. Training is
    deterministic given the spec and the data
    """
    family = spec.get("family")
    if family not in FITTERS:
        raise ConfigError(f"unknown predictor family '{family}', options are {sorted(FITTERS)}")
    if data.n == 0:
        raise DataError("cannot fit a predictor on an empty dataset")
    predictor = FITTERS[family](spec, data.features, data.labels)
    for line in predictor.training_log:
        logger.debug(line)
    return predictor


PREDICTOR_TYPES: Dict[str, Any] = {
    cls.family: cls
    for cls in (
        ConstantPredictor,
        TablePredictor,
        LogisticPredictor,
        NaiveBayesPredictor,
        TreePredictor,
        StumpEnsemblePredictor,
        BlendedPredictor,
    )
}


def predictor_from_dict(doc: Mapping[str, Any]) -> Predictor:
    family = doc.get("family")
    if family not in PREDICTOR_TYPES:
        raise ConfigError(f"cannot deserialize predictor family '{family}'")
    return PREDICTOR_TYPES[family].from_dict(doc)


def feature_views(
    level: str,
    p: Predictor,
    X,
    ext_repr: np.ndarray | None = None,
    groups: Mapping[str, np.ndarray] | None = None,
) -> ViewBatch:
    """
    phi(p, x) for every row of X at the requested level. External
    representations must be supplied exactly when the level asks for them
    """
    ViewLevel.validate(level)
    X = np.asarray(X, dtype=float)
    if (ext_repr is not None) != (level == ViewLevel.EXTERNAL):
        raise ConfigError("an external representation is required by, and only by, the external level")
    predictions = p.predict_batch(X)
    inputs = None
    representation = None
    source = None
    if level != ViewLevel.PREDICTION_ONLY:
        inputs = X
        if not np.all(np.isfinite(inputs)):
            raise DataError("input features must be finite")
    if level == ViewLevel.INTERNAL:
        representation = np.asarray(p.internal_representation(X), dtype=float)
        source = "internal"
    elif level == ViewLevel.EXTERNAL:
        representation = np.asarray(ext_repr, dtype=float)
        if representation.ndim == 1:
            representation = representation[:, None]
        if representation.shape[0] != len(X):
            raise DataError("external representation needs one row per example")
        source = "external"
    if representation is not None and not np.all(np.isfinite(representation)):
        raise DataError("representations must be finite")
    return ViewBatch(
        level=level,
        predictions=predictions,
        inputs=inputs,
        representation=representation,
        representation_source=source,
        groups=dict(groups or {}),
    )


def data_views(level: str, p: Predictor, data: Dataset) -> ViewBatch:
    """
    Views over a whole dataset, using its representation for the external level
    """
    ext = data.representation if level == ViewLevel.EXTERNAL else None
    if level == ViewLevel.EXTERNAL and ext is None:
        raise ConfigError("the dataset carries no external representation")
    return feature_views(level, p, data.features, ext, data.subgroups)


def feature_view(level: str, p: Predictor, x, ext_repr=None) -> FeatureView:
    """
    phi(p, x) for a single example
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ArityError("a single example must be a 1-d vector")
    ext = None if ext_repr is None else np.asarray(ext_repr, dtype=float)[None, :]
    return feature_views(level, p, x[None, :], ext).row(0)
