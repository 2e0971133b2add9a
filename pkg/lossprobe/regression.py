"""
Small least-squares regressors shared by the base predictors and the loss
predictors: regression stumps, gradient-boosted stump ensembles, CART
trees and ridge regression
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

import numpy as np


@dataclass(frozen=True)
class RegressionStump:
    """
    x[feature] < threshold -> left_value, otherwise right_value
    """

    feature: int
    threshold: float
    left_value: float
    right_value: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.where(X[:, self.feature] >= self.threshold, self.right_value, self.left_value)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left_value": self.left_value,
            "right_value": self.right_value,
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RegressionStump":
        return cls(
            feature=int(doc["feature"]),
            threshold=float(doc["threshold"]),
            left_value=float(doc["left_value"]),
            right_value=float(doc["right_value"]),
        )


Split = Tuple[float, int, float, float, float]


def best_split(X: np.ndarray, r: np.ndarray, min_leaf: int = 1) -> Split | None:
    """
    Exhaustive squared-error split search over every feature using sorted
    cumulative sums. Returns (gain, feature, threshold, left mean, right mean),
    or None when no split leaves `min_leaf` rows on both sides.
    Ties go to the lowest feature, then the lowest threshold
    """
    n = len(r)
    if n < 2 * min_leaf or n < 2:
        return None
    total = r.sum()
    base = total * total / n
    best: Split | None = None
    counts = np.arange(1, n)
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        left_sum = np.cumsum(r[order])[:-1]
        right_sum = total - left_sum
        gain = left_sum**2 / counts + right_sum**2 / (n - counts) - base
        valid = (xs[:-1] < xs[1:]) & (counts >= min_leaf) & (n - counts >= min_leaf)
        if not np.any(valid):
            continue
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))
        if best is None or gain[k] > best[0]:
            best = (
                float(gain[k]),
                j,
                float((xs[k] + xs[k + 1]) / 2.0),
                float(left_sum[k] / counts[k]),
                float(right_sum[k] / (n - counts[k])),
            )
    return best


def fit_stump_ensemble(
    X: np.ndarray, y: np.ndarray, rounds: int, learning_rate: float
) -> Tuple[float, List[RegressionStump]]:
    """
    Gradient boosting of regression stumps on squared error, starting from
    the mean of `y`
    """
    init = float(np.mean(y))
    preds = np.full(len(y), init)
    stumps: List[RegressionStump] = []
    for _ in range(rounds):
        split = best_split(X, y - preds)
        if split is None or split[0] <= 1e-15:
            break
        _, feature, threshold, left, right = split
        stump = RegressionStump(feature, threshold, left, right)
        preds = preds + learning_rate * stump.predict(X)
        stumps.append(stump)
    return init, stumps


class RegressionTree:
    """
    Greedy CART tree on squared-error impurity. Nodes are kept in a flat list;
    leaves carry a leaf id numbered in depth-first order
    """

    nodes: List[Dict[str, Any]]

    def __init__(self, nodes: List[Dict[str, Any]]) -> None:
        self.nodes = nodes

    @property
    def n_leaves(self) -> int:
        return sum(1 for node in self.nodes if "leaf" in node)

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray, max_depth: int, min_leaf: int) -> "RegressionTree":
        nodes: List[Dict[str, Any]] = []
        leaves = [0]

        def grow(rows: np.ndarray, depth: int) -> int:
            index = len(nodes)
            nodes.append({})
            split = None
            if depth < max_depth:
                split = best_split(X[rows], y[rows], min_leaf)
            if split is None or split[0] <= 1e-15:
                nodes[index] = {"leaf": leaves[0], "value": float(np.mean(y[rows]))}
                leaves[0] += 1
                return index
            _, feature, threshold, _, _ = split
            goes_right = X[rows, feature] >= threshold
            left = grow(rows[~goes_right], depth + 1)
            right = grow(rows[goes_right], depth + 1)
            nodes[index] = {"feature": feature, "threshold": threshold, "left": left, "right": right}
            return index

        grow(np.arange(len(y)), 0)
        return cls(nodes)

    def _route(self, X: np.ndarray) -> np.ndarray:
        position = np.zeros(len(X), dtype=int)
        while True:
            internal = np.array(["leaf" not in self.nodes[k] for k in position], dtype=bool)
            if not np.any(internal):
                return position
            for k in np.unique(position[internal]):
                node = self.nodes[k]
                at = position == k
                right = X[:, node["feature"]] >= node["threshold"]
                position[at & right] = node["right"]
                position[at & ~right] = node["left"]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.array([self.nodes[k]["value"] for k in self._route(X)], dtype=float)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        return np.array([self.nodes[k]["leaf"] for k in self._route(X)], dtype=int)

    def to_dict(self) -> Dict[str, Any]:
        return {"nodes": [dict(node) for node in self.nodes]}

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RegressionTree":
        return cls([dict(node) for node in doc["nodes"]])


@dataclass(frozen=True)
class RidgeModel:
    """
    Linear model on standardized columns
    """

    weights: tuple[float, ...]
    bias: float
    center: tuple[float, ...]
    scale: tuple[float, ...]

    def predict(self, M: np.ndarray) -> np.ndarray:
        A = (M - np.asarray(self.center)) / np.asarray(self.scale)
        return A @ np.asarray(self.weights) + self.bias

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weights": list(self.weights),
            "bias": self.bias,
            "center": list(self.center),
            "scale": list(self.scale),
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RidgeModel":
        return cls(
            weights=tuple(doc["weights"]),
            bias=float(doc["bias"]),
            center=tuple(doc["center"]),
            scale=tuple(doc["scale"]),
        )


def fit_ridge(M: np.ndarray, z: np.ndarray, penalty: float) -> RidgeModel:
    """
    Closed-form ridge regression; the penalty is per row (scaled by n)
    """
    n, k = M.shape
    center = M.mean(axis=0)
    scale = M.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    A = (M - center) / scale
    bias = float(z.mean())
    gram = A.T @ A + penalty * n * np.eye(k)
    weights = np.linalg.solve(gram, A.T @ (z - bias))
    return RidgeModel(
        weights=tuple(weights.tolist()),
        bias=bias,
        center=tuple(center.tolist()),
        scale=tuple(scale.tolist()),
    )
