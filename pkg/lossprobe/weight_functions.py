"""
Test (weight) functions c: views -> [-1, 1] used to audit multicalibration
and as weak-learner hypotheses
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

from lossprobe.exceptions import ConfigError, EmptySubgroup
from lossprobe.losses import ProperLoss, loss_from_dict
from lossprobe.predictors import ViewBatch, ViewLevel


def _fmt(value: float) -> str:
    return repr(float(value))


def _sign(sign: int) -> str:
    return "+1" if sign > 0 else "-1"


def richest_level(levels: Iterable[str]) -> str:
    """
    The most demanding view level among `levels`
    """
    best = ViewLevel.PREDICTION_ONLY
    for level in levels:
        if ViewLevel.rank(level) > ViewLevel.rank(best):
            best = level
    return best


class TestFunction(ABC):
    """
    A function of the feature view with values in [-1, 1]
    """

    __test__ = False
    level: str = ViewLevel.PREDICTION_ONLY

    @property
    @abstractmethod
    def id(self) -> str: ...

    @abstractmethod
    def evaluate(self, views: ViewBatch) -> np.ndarray: ...

    @abstractmethod
    def to_dict(self) -> Dict[str, Any]: ...

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__} {self.id}>"


class ConstantTest(TestFunction):
    def __init__(self, value: float = 1.0) -> None:
        if not -1.0 <= value <= 1.0:
            raise ConfigError("a constant test function must lie in [-1, 1]")
        self.value = float(value)

    @property
    def id(self):
        return f"const({_fmt(self.value)})"

    def evaluate(self, views):
        return np.full(len(views), self.value)

    def to_dict(self):
        return {"form": "constant", "value": self.value}


class SubgroupTest(TestFunction):
    """
    sign * 1{row in subgroup}
    """

    def __init__(self, subgroup: str, sign: int = 1) -> None:
        self.subgroup = subgroup
        self.sign = 1 if sign > 0 else -1

    @property
    def id(self):
        return f"group({self.subgroup})*{_sign(self.sign)}"

    def evaluate(self, views):
        if self.subgroup not in views.groups:
            raise EmptySubgroup(f"views carry no subgroup '{self.subgroup}'")
        return self.sign * views.groups[self.subgroup].astype(float)

    def to_dict(self):
        return {"form": "subgroup", "subgroup": self.subgroup, "sign": self.sign}


class LevelSetTest(TestFunction):
    """
    sign * 1{low <= p(x) < high}; the interval is closed at 1
    """

    def __init__(self, low: float, high: float, sign: int = 1) -> None:
        self.low = float(low)
        self.high = float(high)
        self.sign = 1 if sign > 0 else -1

    @property
    def id(self):
        return f"level[{_fmt(self.low)},{_fmt(self.high)})*{_sign(self.sign)}"

    def evaluate(self, views):
        p = views.predictions
        upper = p <= self.high if self.high >= 1.0 else p < self.high
        return self.sign * ((p >= self.low) & upper).astype(float)

    def to_dict(self):
        return {"form": "level-set", "low": self.low, "high": self.high, "sign": self.sign}


class StumpTest(TestFunction):
    """
    sign * 1{phi[coordinate] >= threshold} (or < threshold), where phi is the
    view matrix: prediction, inputs, representation
    """

    def __init__(
        self, coordinate: int, threshold: float, direction: str, sign: int, level: str
    ) -> None:
        if direction not in (">=", "<"):
            raise ConfigError("stump direction must be '>=' or '<'")
        self.coordinate = int(coordinate)
        self.threshold = float(threshold)
        self.direction = direction
        self.sign = 1 if sign > 0 else -1
        self.level = ViewLevel.validate(level)

    @property
    def id(self):
        return (
            f"stump({self.coordinate},{self.direction}{_fmt(self.threshold)})*{_sign(self.sign)}"
        )

    def evaluate(self, views):
        column = views.matrix()[:, self.coordinate]
        hit = column >= self.threshold if self.direction == ">=" else column < self.threshold
        return self.sign * hit.astype(float)

    def to_dict(self):
        return {
            "form": "stump",
            "coordinate": self.coordinate,
            "threshold": self.threshold,
            "direction": self.direction,
            "sign": self.sign,
            "level": self.level,
        }


class ProductTest(TestFunction):
    """
    a * b
    """

    def __init__(self, a: TestFunction, b: TestFunction) -> None:
        self.a = a
        self.b = b
        self.level = richest_level((a.level, b.level))

    @property
    def id(self):
        return f"({self.a.id})x({self.b.id})"

    def evaluate(self, views):
        return self.a.evaluate(views) * self.b.evaluate(views)

    def to_dict(self):
        return {"form": "product", "a": self.a.to_dict(), "b": self.b.to_dict()}


class BasisTest(TestFunction):
    """
    A basis function composed with the prediction: 1 (threshold None) or
    1{p(x) >= threshold}
    """

    def __init__(self, threshold: float | None) -> None:
        self.threshold = None if threshold is None else float(threshold)

    @property
    def id(self):
        if self.threshold is None:
            return "basis(1)"
        return f"basis(>={_fmt(self.threshold)})"

    def evaluate(self, views):
        if self.threshold is None:
            return np.ones(len(views))
        return (views.predictions >= self.threshold).astype(float)

    def to_dict(self):
        return {"form": "basis", "threshold": self.threshold}


class EntropyTest(TestFunction):
    """
    sign * H(p(x)), a self-entropy predictor used as a test function
    """

    def __init__(self, loss: ProperLoss, sign: int = 1) -> None:
        self.loss = loss
        self.sign = 1 if sign > 0 else -1

    @property
    def id(self):
        return f"entropy({self.loss.name})*{_sign(self.sign)}"

    def evaluate(self, views):
        return self.sign * self.loss.entropy_fn(views.predictions)

    def to_dict(self):
        return {"form": "entropy", "loss": self.loss.to_dict(), "sign": self.sign}


class SlopeTest(TestFunction):
    """
    H'(p(x))
    """

    def __init__(self, loss: ProperLoss) -> None:
        self.loss = loss

    @property
    def id(self):
        return f"slope({self.loss.name})"

    def evaluate(self, views):
        return self.loss.slope_fn(views.predictions)

    def to_dict(self):
        return {"form": "slope", "loss": self.loss.to_dict()}


class LossWeightedTest(TestFunction):
    """
    scale * (f(phi) - H(p(x))) * H'(p(x)) for a loss predictor f
    """

    def __init__(self, f: Any, loss: ProperLoss, scale: float = 1.0) -> None:
        self.f = f
        self.loss = loss
        self.scale = float(scale)
        self.level = f.level

    @property
    def id(self):
        return f"weighted({self.f.id},{self.loss.name})*{_fmt(self.scale)}"

    def evaluate(self, views):
        p = views.predictions
        return self.scale * (self.f.predict_views(views) - self.loss.entropy_fn(p)) * self.loss.slope_fn(p)

    def to_dict(self):
        return {
            "form": "loss-weighted",
            "f": self.f.to_dict(),
            "loss": self.loss.to_dict(),
            "scale": self.scale,
        }


def subgroup_tests(names: Sequence[str]) -> List[TestFunction]:
    """
    +/- indicators of every named subgroup
    """
    return [SubgroupTest(name, sign) for name in sorted(names) for sign in (1, -1)]


def level_set_tests(values: Sequence[float]) -> List[TestFunction]:
    """
    +/- indicators of the exact prediction level sets {p(x) = v}
    """
    return [
        LevelSetTest(v, np.nextafter(v, np.inf), sign) for v in sorted(set(values)) for sign in (1, -1)
    ]


def weight_function_from_dict(doc: Dict[str, Any]) -> TestFunction:
    form = doc.get("form")
    if form == "constant":
        return ConstantTest(doc["value"])
    if form == "subgroup":
        return SubgroupTest(doc["subgroup"], doc["sign"])
    if form == "level-set":
        return LevelSetTest(doc["low"], doc["high"], doc["sign"])
    if form == "stump":
        return StumpTest(doc["coordinate"], doc["threshold"], doc["direction"], doc["sign"], doc["level"])
    if form == "product":
        return ProductTest(weight_function_from_dict(doc["a"]), weight_function_from_dict(doc["b"]))
    if form == "basis":
        return BasisTest(doc["threshold"])
    if form == "entropy":
        return EntropyTest(loss_from_dict(doc["loss"]), doc["sign"])
    if form == "slope":
        return SlopeTest(loss_from_dict(doc["loss"]))
    if form == "loss-weighted":
        # loss predictors build on test functions, import lazily
        from lossprobe.loss_prediction import loss_predictor_from_dict  # pylint: disable=import-outside-toplevel

        return LossWeightedTest(
            loss_predictor_from_dict(doc["f"]), loss_from_dict(doc["loss"]), doc["scale"]
        )
    raise ConfigError(f"unknown test function form '{form}'")
