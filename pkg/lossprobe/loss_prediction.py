"""
Loss predictors: the self-entropy predictor, regressors trained on realized
losses, the advantage functional, and the constructions turning a loss
predictor into a multicalibration witness and back.
"""

from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from typing import Any, ClassVar, Dict, List, Mapping, Tuple

import numpy as np

from lossprobe.config import LossprobeConfig
from lossprobe.data import Dataset
from lossprobe.exceptions import ConfigError, DataError, DomainError
from lossprobe.logger import child_logger
from lossprobe.losses import ProperLoss, eval_loss, expected_loss, loss_from_dict
from lossprobe.predictors import Predictor, ViewBatch, ViewLevel, data_views
from lossprobe.regression import (
    RegressionStump,
    RegressionTree,
    RidgeModel,
    fit_ridge,
    fit_stump_ensemble,
)
from lossprobe.utils import check_probability
from lossprobe.weight_functions import (
    LossWeightedTest,
    TestFunction,
    weight_function_from_dict,
)


logger = child_logger(__name__)


class LossPredictor(ABC):
    """
    LP(phi(p, x)): an estimate of the loss the predictor incurs at x
    """

    form: ClassVar[str]
    output_range: ClassVar[Tuple[float, float]] = (0.0, 1.0)
    level: str
    loss: ProperLoss

    def __init__(self, loss: ProperLoss, level: str) -> None:
        self.loss = loss
        self.level = ViewLevel.validate(level)

    @property
    def id(self) -> str:
        return f"{self.form}[{self.level}]"

    @abstractmethod
    def _raw(self, views: ViewBatch) -> np.ndarray: ...

    def predict_views(self, views: ViewBatch) -> np.ndarray:
        """
        Predictions clamped into [0, 1]
        """
        return np.clip(self._raw(views), 0.0, 1.0)

    def _base(self) -> Dict[str, Any]:
        return {"form": self.form, "level": self.level, "loss": self.loss.to_dict()}

    @abstractmethod
    def to_dict(self) -> Dict[str, Any]: ...


class SelfEntropyPredictor(LossPredictor):
    """
    The model's own loss estimate, H(p(x))
    """

    form = "self-entropy"

    def __init__(self, loss: ProperLoss) -> None:
        super().__init__(loss, ViewLevel.PREDICTION_ONLY)

    def _raw(self, views):
        return self.loss.entropy_fn(views.predictions)

    def to_dict(self):
        return self._base()

    @classmethod
    def from_dict(cls, doc):
        return cls(loss_from_dict(doc["loss"]))


class ConstantLossPredictor(LossPredictor):
    form = "constant"

    def __init__(self, loss: ProperLoss, value: float, level: str = ViewLevel.PREDICTION_ONLY) -> None:
        super().__init__(loss, level)
        self.value = float(value)

    @property
    def id(self):
        return f"constant({self.value!r})"

    def _raw(self, views):
        return np.full(len(views), self.value)

    def to_dict(self):
        return {**self._base(), "value": self.value}

    @classmethod
    def from_dict(cls, doc):
        return cls(loss_from_dict(doc["loss"]), doc["value"], doc["level"])


class _ColumnsMixin:
    """
    Regressors trained on the first `n_columns` columns of the view matrix,
    so richer views can be passed in unchanged
    """

    n_columns: int

    def _columns(self, views: ViewBatch) -> np.ndarray:
        M = views.matrix()
        if M.shape[1] < self.n_columns:
            raise DataError(f"views have {M.shape[1]} columns, the regressor needs {self.n_columns}")
        return M[:, : self.n_columns]


class RidgeLossPredictor(_ColumnsMixin, LossPredictor):
    form = "ridge"

    def __init__(self, loss: ProperLoss, level: str, model: RidgeModel, n_columns: int) -> None:
        super().__init__(loss, level)
        self.model = model
        self.n_columns = n_columns

    def _raw(self, views):
        return self.model.predict(self._columns(views))

    def to_dict(self):
        return {**self._base(), "n_columns": self.n_columns, "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, doc):
        return cls(
            loss_from_dict(doc["loss"]), doc["level"], RidgeModel.from_dict(doc["model"]), doc["n_columns"]
        )


class StumpEnsembleLossPredictor(_ColumnsMixin, LossPredictor):
    form = "stump-ensemble"

    def __init__(
        self,
        loss: ProperLoss,
        level: str,
        init: float,
        stumps: List[RegressionStump],
        learning_rate: float,
        n_columns: int,
    ) -> None:
        super().__init__(loss, level)
        self.init = float(init)
        self.stumps = list(stumps)
        self.learning_rate = float(learning_rate)
        self.n_columns = n_columns

    def _raw(self, views):
        M = self._columns(views)
        out = np.full(len(M), self.init)
        for stump in self.stumps:
            out = out + self.learning_rate * stump.predict(M)
        return out

    def to_dict(self):
        return {
            **self._base(),
            "n_columns": self.n_columns,
            "init": self.init,
            "learning_rate": self.learning_rate,
            "stumps": [s.to_dict() for s in self.stumps],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            loss_from_dict(doc["loss"]),
            doc["level"],
            doc["init"],
            [RegressionStump.from_dict(s) for s in doc["stumps"]],
            doc["learning_rate"],
            doc["n_columns"],
        )


class TreeLossPredictor(_ColumnsMixin, LossPredictor):
    form = "tree"

    def __init__(self, loss: ProperLoss, level: str, tree: RegressionTree, n_columns: int) -> None:
        super().__init__(loss, level)
        self.tree = tree
        self.n_columns = n_columns

    def _raw(self, views):
        return self.tree.predict(self._columns(views))

    def to_dict(self):
        return {**self._base(), "n_columns": self.n_columns, **self.tree.to_dict()}

    @classmethod
    def from_dict(cls, doc):
        return cls(loss_from_dict(doc["loss"]), doc["level"], RegressionTree.from_dict(doc), doc["n_columns"])


class ShiftedLossPredictor(LossPredictor):
    """
    Projection of H(p(x)) + beta * delta(phi) onto [0, 1]
    """

    form = "shifted"

    def __init__(self, loss: ProperLoss, delta: TestFunction, beta: float) -> None:
        super().__init__(loss, delta.level)
        self.delta = delta
        self.beta = float(beta)

    @property
    def id(self):
        return f"shifted({self.delta.id},{self.beta!r})"

    def _raw(self, views):
        return self.loss.entropy_fn(views.predictions) + self.beta * self.delta.evaluate(views)

    def to_dict(self):
        return {**self._base(), "delta": self.delta.to_dict(), "beta": self.beta}

    @classmethod
    def from_dict(cls, doc):
        return cls(loss_from_dict(doc["loss"]), weight_function_from_dict(doc["delta"]), doc["beta"])


class AugmentedLossPredictor(LossPredictor):
    """
    Projection of (1 - beta) H(p(x)) + beta f(phi) onto [0, 1], beta in [-1, 1]
    """

    form = "augmented"

    def __init__(self, f: LossPredictor, beta: float) -> None:
        if not -1.0 <= beta <= 1.0:
            raise DomainError("beta must lie in [-1, 1]")
        super().__init__(f.loss, f.level)
        self.f = f
        self.beta = float(beta)

    @property
    def id(self):
        return f"augmented({self.f.id},{self.beta!r})"

    def _raw(self, views):
        entropy = self.loss.entropy_fn(views.predictions)
        return (1.0 - self.beta) * entropy + self.beta * self.f.predict_views(views)

    def to_dict(self):
        return {**self._base(), "f": self.f.to_dict(), "beta": self.beta}

    @classmethod
    def from_dict(cls, doc):
        return cls(loss_predictor_from_dict(doc["f"]), doc["beta"])


LOSS_PREDICTOR_TYPES: Dict[str, Any] = {
    cls.form: cls
    for cls in (
        SelfEntropyPredictor,
        ConstantLossPredictor,
        RidgeLossPredictor,
        StumpEnsembleLossPredictor,
        TreeLossPredictor,
        ShiftedLossPredictor,
        AugmentedLossPredictor,
    )
}


def loss_predictor_from_dict(doc: Mapping[str, Any]) -> LossPredictor:
    form = doc.get("form")
    if form not in LOSS_PREDICTOR_TYPES:
        raise ConfigError(f"cannot deserialize loss predictor form '{form}'")
    return LOSS_PREDICTOR_TYPES[form].from_dict(doc)


def self_entropy(loss: ProperLoss, v):
    """
    H(v): the expected loss of predicting v when v is the true probability
    """
    check_probability(v, "prediction")
    return loss.entropy(v)


def bayes_loss_oracle(loss: ProperLoss, p_star, p):
    """
    L(p*(x); p(x)), the best possible loss prediction. Only available
    when p* is known, i.e. on synthetic data
    """
    return expected_loss(loss, p_star, p)


LP_ALGORITHMS = ("ridge", "stump-ensemble", "tree", "constant")


def train_loss_predictor(
    algo: str,
    loss: ProperLoss,
    p: Predictor,
    level: str,
    data: Dataset,
    seed: int = 0,
    params: Mapping[str, Any] | None = None,
) -> LossPredictor:
    """
    Regresses the realized losses loss(y, p(x)) on the view phi(p, x).
    All algorithms are deterministic; `seed` is recorded in the log only
    """
    params = dict(params or {})
    if algo not in LP_ALGORITHMS:
        raise ConfigError(f"unknown loss-predictor algorithm '{algo}', options are {list(LP_ALGORITHMS)}")
    if data.n == 0:
        raise DataError("cannot train a loss predictor on an empty dataset")
    views = data_views(level, p, data)
    targets = np.asarray(eval_loss(loss, data.labels, views.predictions), dtype=float)
    M = views.matrix()

    lp: LossPredictor
    if algo == "constant":
        lp = ConstantLossPredictor(loss, float(targets.mean()), level)
    elif algo == "ridge":
        penalty = float(params.get("penalty", LossprobeConfig.get("ridge", "penalty", typ=float)))
        lp = RidgeLossPredictor(loss, level, fit_ridge(M, targets, penalty), M.shape[1])
    elif algo == "stump-ensemble":
        rounds = int(params.get("rounds", LossprobeConfig.get("stump_ensemble", "rounds", typ=int)))
        rate = float(
            params.get("learning_rate", LossprobeConfig.get("stump_ensemble", "learning_rate", typ=float))
        )
        init, stumps = fit_stump_ensemble(M, targets, rounds, rate)
        lp = StumpEnsembleLossPredictor(loss, level, init, stumps, rate, M.shape[1])
    else:
        depth = int(params.get("max_depth", LossprobeConfig.get("tree", "max_depth", typ=int)))
        min_leaf = int(params.get("min_leaf", LossprobeConfig.get("tree", "min_leaf", typ=int)))
        lp = TreeLossPredictor(loss, level, RegressionTree.fit(M, targets, depth, min_leaf), M.shape[1])
    logger.debug("trained %s loss predictor at level %s (seed %d, n=%d)", algo, level, seed, data.n)
    return lp


@dataclass(frozen=True)
class AdvantageReport:
    """
    sep_sq_error - lp_sq_error, with a noise scale of `noise_sigmas`
    standard errors of the per-row difference
    """

    sep_sq_error: float
    lp_sq_error: float
    advantage: float
    n: int
    noise: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def advantage_from_values(losses: np.ndarray, sep: np.ndarray, lp: np.ndarray) -> AdvantageReport:
    """
    Advantage of loss predictions `lp` over self-entropy predictions `sep`
    against realized `losses`
    """
    n = len(losses)
    if n == 0:
        return AdvantageReport(0.0, 0.0, 0.0, 0)
    sep_err = (losses - sep) ** 2
    lp_err = (losses - lp) ** 2
    sep_sq = float(sep_err.mean())
    lp_sq = float(lp_err.mean())
    sigmas = LossprobeConfig.get("numerics", "noise_sigmas", typ=float)
    noise = float(sigmas * np.std(sep_err - lp_err) / np.sqrt(n))
    return AdvantageReport(sep_sq, lp_sq, sep_sq - lp_sq, n, noise)


def advantage(
    lp: LossPredictor,
    loss: ProperLoss,
    p: Predictor,
    data: Dataset,
    mask: np.ndarray | None = None,
) -> AdvantageReport:
    """
    Squared error of the self-entropy predictor minus that of `lp`, against
    realized losses; `mask` restricts the average to a subgroup
    """
    views = data_views(lp.level, p, data)
    labels = data.labels
    if mask is not None:
        views = views.take(np.asarray(mask, dtype=bool))
        labels = labels[np.asarray(mask, dtype=bool)]
    losses = np.asarray(eval_loss(loss, labels, views.predictions), dtype=float)
    return advantage_from_values(losses, loss.entropy_fn(views.predictions), lp.predict_views(views))


def witness_from_lp(lp: LossPredictor, loss: ProperLoss, p: Predictor | None = None) -> TestFunction:
    """
    c(phi) = (LP(phi) - H(p(x))) H'(p(x)). It lies in [-1, 1] when the loss
    predictor outputs values in [0, 1]; wider outputs are halved and the
    factor is kept on the returned function
    """
    low, high = lp.output_range
    scale = 1.0 if 0.0 <= low and high <= 1.0 else 0.5
    if p is not None:
        logger.debug("witness for %s over a %s predictor, scale %s", lp.id, p.family, scale)
    return LossWeightedTest(lp, loss, scale)


def lp_from_witness(
    delta: TestFunction, beta: float, loss: ProperLoss, p: Predictor | None = None
) -> LossPredictor:
    """
    Projection of H(p(x)) + beta * delta(phi). When
    E[delta H'(p) (y - p)] >= beta on some data, its advantage there is at least beta^2
    """
    if not 0.0 <= beta <= 1.0:
        raise DomainError("beta must lie in [0, 1]")
    if p is not None:
        logger.debug("shifting the %s self-entropy by %s * %s", p.family, beta, delta.id)
    return ShiftedLossPredictor(loss, delta, beta)


def squared_error_gap(h1: np.ndarray, h2: np.ndarray, z: np.ndarray) -> Tuple[float, float]:
    """
    (sq(h1) - sq(h2), 2 E[(h2 - h1)(z - h1)]); the first never exceeds the second
    """
    gap = float(np.mean((z - h1) ** 2) - np.mean((z - h2) ** 2))
    bound = float(2.0 * np.mean((h2 - h1) * (z - h1)))
    return gap, bound
