"""
General (not necessarily proper) losses over a finite action set: the
optimal post-processing of a probability into an action, properization,
latent predictors of action-valued hypotheses and swap-optimality audits.
"""

import itertools
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from lossprobe.config import LossprobeConfig
from lossprobe.data import Dataset
from lossprobe.exceptions import ConfigError, DomainError
from lossprobe.losses import ProperLoss, eval_loss, piecewise_loss
from lossprobe.predictors import Predictor, TablePredictor
from lossprobe.utils import check_probability, dense_grid


MAX_FINITE_ACTIONS = 64

Hypothesis = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GeneralLoss:
    """
    loss(y, a) for y in {0, 1} and a in `actions`, stored as a 2 x |A| table
    (row y). Discretized losses stand in for the action interval [0, 1] and
    may exceed the finite action limit
    """

    name: str
    actions: Tuple[float, ...]
    table: np.ndarray
    discretized: bool = False

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        actions = tuple(float(a) for a in self.actions)
        if not actions:
            raise ConfigError("a loss needs at least one action")
        if table.shape != (2, len(actions)):
            raise ConfigError(f"expected a 2 x {len(actions)} loss table, got {table.shape}")
        if not np.all(np.isfinite(table)) or np.any(table < 0.0) or np.any(table > 1.0):
            raise DomainError("loss entries must lie in [0, 1]")
        if len(set(actions)) != len(actions):
            raise ConfigError("actions must be distinct")
        if not self.discretized and len(actions) > MAX_FINITE_ACTIONS:
            raise ConfigError(f"at most {MAX_FINITE_ACTIONS} actions, discretize larger action sets")
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "table", table)

    @property
    def k(self) -> int:
        return len(self.actions)

    def index_of(self, actions) -> np.ndarray:
        """
        Positions of `actions` in the action list; DomainError for unknown actions
        """
        lookup = {a: j for j, a in enumerate(self.actions)}
        try:
            return np.array([lookup[float(a)] for a in np.asarray(actions).reshape(-1)], dtype=int)
        except KeyError as e:
            raise DomainError(f"unknown action {e.args[0]}") from e

    def expected(self, v) -> np.ndarray:
        """
        v loss(1, a) + (1 - v) loss(0, a): one row per v, one column per action
        """
        v = np.atleast_1d(check_probability(v, "prediction"))
        return v[:, None] * self.table[1][None, :] + (1.0 - v[:, None]) * self.table[0][None, :]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "actions": list(self.actions),
            "loss_0": self.table[0].tolist(),
            "loss_1": self.table[1].tolist(),
            "discretized": self.discretized,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "GeneralLoss":
        return cls(
            name=doc.get("name", "general"),
            actions=tuple(doc["actions"]),
            table=np.array([doc["loss_0"], doc["loss_1"]], dtype=float),
            discretized=bool(doc.get("discretized", False)),
        )


def l1_loss() -> GeneralLoss:
    """
    |y - a| on the actions {0, 1}
    """
    return GeneralLoss("l1", (0.0, 1.0), np.array([[0.0, 1.0], [1.0, 0.0]]))


def grid_loss(
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray], name: str, grid_points: int | None = None
) -> GeneralLoss:
    """
    fn(y, a) on a uniform grid of actions over [0, 1]
    """
    if grid_points is None:
        grid_points = LossprobeConfig.get("nonproper", "grid_points", typ=int)
    if grid_points < 2:
        raise ConfigError("the action grid needs at least 2 points")
    actions = dense_grid(grid_points - 1)
    table = np.vstack([fn(np.zeros_like(actions), actions), fn(np.ones_like(actions), actions)])
    return GeneralLoss(name, tuple(actions.tolist()), table, discretized=True)


def discretize(loss: ProperLoss, grid_points: int | None = None) -> GeneralLoss:
    """
    A proper loss restricted to a grid of predictions
    """
    return grid_loss(lambda y, a: eval_loss(loss, y, a), f"{loss.name}-grid", grid_points)


def optimal_action_index(loss: GeneralLoss, v) -> np.ndarray:
    """
    argmin over actions of the expected loss at v, lowest index on ties
    """
    return np.argmin(loss.expected(v), axis=1)


def optimal_action(loss: GeneralLoss, v) -> float:
    """
    k(v): the action with the least expected loss when y ~ Ber(v)
    """
    return loss.actions[int(optimal_action_index(loss, v)[0])]


def properize(loss: GeneralLoss) -> ProperLoss:
    """
    The proper loss loss(y, k(v)). Its entropy is the lower envelope over
    actions of the lines v -> loss(0, a) + v (loss(1, a) - loss(0, a)),
    traced exactly from v = 0 by switching to the first line that crosses
    below. At a kink the superderivative is the mean of the two slopes
    """
    intercept = loss.table[0]
    slope = loss.table[1] - loss.table[0]

    eps = 1e-12

    def lowest(candidates: np.ndarray, at: float) -> int:
        values = intercept[candidates] + at * slope[candidates]
        best = candidates[values <= values.min() + eps]
        # among lines meeting at `at`, the smallest slope is lowest to the right
        return int(best[np.argmin(slope[best])])

    current = lowest(np.arange(loss.k), 0.0)
    position = 0.0
    breakpoints = [0.0]
    while True:
        steeper_down = np.flatnonzero(slope < slope[current])
        if len(steeper_down) == 0:
            break
        crossings = (intercept[steeper_down] - intercept[current]) / (
            slope[current] - slope[steeper_down]
        )
        ahead = (crossings > position + eps) & (crossings < 1.0)
        if not np.any(ahead):
            break
        at = float(crossings[ahead].min())
        current = lowest(steeper_down[ahead & (crossings <= at + eps)], at)
        position = at
        breakpoints.append(at)
    breakpoints.append(1.0)

    bp = np.asarray(breakpoints)
    values = np.min(intercept[None, :] + bp[:, None] * slope[None, :], axis=1)
    return piecewise_loss(bp, np.clip(values, 0.0, 1.0), name=f"properized-{loss.name}")


class LatentPredictor(Predictor):
    """
    p_h(x) = E[y | h(x)]: the mean label among training rows sharing the
    action h assigns to x
    """

    family = "latent"

    def __init__(self, h: Hypothesis, table: TablePredictor) -> None:
        super().__init__(None)
        self.h = h
        self.table = table

    def _predict(self, X):
        actions = np.asarray(self.h(X), dtype=float).reshape(-1, 1)
        return self.table.predict_keys(actions)

    def to_dict(self):
        # h is code, only the action table is data
        return {"family": self.family, "table": self.table.to_dict()}


def latent_predictor(h: Hypothesis, data: Dataset) -> LatentPredictor:
    actions = np.asarray(h(data.features), dtype=float).reshape(-1, 1)
    return LatentPredictor(h, TablePredictor.fit(actions, data.labels.astype(float)))


@dataclass(frozen=True)
class SwapAuditReport:
    """
    Per realized action: group size, mean label, the best response and the
    per-row gain of switching to it. `gain` is the total gain per row of
    the data
    """

    is_swap_optimal: bool
    improving_kappa: Dict[float, float] | None
    gain: float
    groups: List[Dict[str, float]]
    best_response_holds: bool

    @property
    def equivalence_holds(self) -> bool:
        return self.is_swap_optimal == self.best_response_holds

    def to_dict(self) -> Dict[str, Any]:
        return {
            "is_swap_optimal": self.is_swap_optimal,
            "improving_kappa": None
            if self.improving_kappa is None
            else [{"from": a, "to": b} for a, b in sorted(self.improving_kappa.items())],
            "gain": self.gain,
            "groups": self.groups,
            "best_response_holds": self.best_response_holds,
            "equivalence_holds": self.equivalence_holds,
        }


def _realized(h: Hypothesis, loss: GeneralLoss, data: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    index = loss.index_of(h(data.features))
    realized = np.unique(index)
    return index, realized


def swap_audit(h: Hypothesis, loss: GeneralLoss, data: Dataset) -> SwapAuditReport:
    """
    h is swap optimal when no relabeling of its actions lowers the loss.
    Relabelings act per action, so each realized action a is checked against
    the best response to the mean label of its group. The verdict is cross
    checked against h(x) being among the optimal actions for p_h(x)
    """
    tol = LossprobeConfig.get("numerics", "tolerance", typ=float)
    index, realized = _realized(h, loss, data)
    labels = data.labels.astype(float)
    n = len(labels)

    kappa: Dict[float, float] = {}
    groups: List[Dict[str, float]] = []
    total_gain = 0.0
    best_response = True
    for a in realized:
        rows = index == a
        q = float(labels[rows].mean())
        expected = loss.expected(q)[0]
        b = int(np.argmin(expected))
        gain = float(expected[a] - expected[b])
        if gain > tol:
            kappa[loss.actions[a]] = loss.actions[b]
            total_gain += gain * rows.sum() / n
        if expected[a] > expected.min() + tol:
            best_response = False
        groups.append(
            {
                "action": loss.actions[a],
                "size": int(rows.sum()),
                "mean_label": q,
                "best_response": loss.actions[b],
                "gain": max(gain, 0.0),
            }
        )

    optimal = not kappa
    return SwapAuditReport(
        is_swap_optimal=optimal,
        improving_kappa=None if optimal else kappa,
        gain=total_gain,
        groups=groups,
        best_response_holds=best_response,
    )


MAX_KAPPAS = 1_000_000


def brute_force_swap_optimal(h: Hypothesis, loss: GeneralLoss, data: Dataset) -> Tuple[bool, float]:
    """
    Enumerates every map kappa from realized actions to actions and returns
    (no kappa lowers the mean loss, largest reduction found)
    """
    tol = LossprobeConfig.get("numerics", "tolerance", typ=float)
    index, realized = _realized(h, loss, data)
    if loss.k ** len(realized) > MAX_KAPPAS:
        raise ConfigError(f"{loss.k}^{len(realized)} relabelings are too many to enumerate")
    labels = data.labels.astype(int)
    baseline = float(loss.table[labels, index].mean())
    position = {int(a): j for j, a in enumerate(realized)}
    slots = np.array([position[int(a)] for a in index])

    best_gain = 0.0
    for kappa in itertools.product(range(loss.k), repeat=len(realized)):
        mapped = np.asarray(kappa)[slots]
        best_gain = max(best_gain, baseline - float(loss.table[labels, mapped].mean()))
    return best_gain <= tol, best_gain


def post_processed(p: Predictor, loss: GeneralLoss) -> Hypothesis:
    """
    x -> k(p(x)), the hypothesis that best-responds to p
    """

    def h(X: np.ndarray) -> np.ndarray:
        return np.asarray(loss.actions)[optimal_action_index(loss, p.predict_batch(X))]

    return h


def action_table_hypothesis(actions: Sequence[float], keys: Sequence[Sequence[float]]) -> Hypothesis:
    """
    Hypothesis defined by an explicit table from feature vectors to actions
    """
    table = {tuple(float(v) for v in key): float(a) for key, a in zip(keys, actions)}

    def h(X: np.ndarray) -> np.ndarray:
        return np.array([table[tuple(float(v) for v in row)] for row in np.asarray(X)], dtype=float)

    return h
