"""
Proper losses over binary labels, represented through their entropy function.

A proper loss is determined by a concave entropy H on [0, 1] and a
superderivative H' of it:

    loss(y, v) = H(v) + (y - v) H'(v)

Every function here is vectorized: it accepts floats or numpy arrays and
returns a float for scalar input.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence

import numpy as np

from lossprobe.config import LossprobeConfig
from lossprobe.exceptions import ConfigError, DomainError, RangeError
from lossprobe.utils import check_probability, dense_grid


ArrayFn = Callable[[np.ndarray], np.ndarray]


class LossKind:
    """
    How a loss stores its entropy
    """

    CLOSED_FORM = "closed-form"
    PIECEWISE_LINEAR = "piecewise-linear-entropy"


def _scalar_or_array(result: np.ndarray, *inputs) -> Any:
    if all(np.ndim(x) == 0 for x in inputs):
        return float(result)
    return result


@dataclass(frozen=True)
class ProperLoss:
    """
    A proper loss given by its entropy and superderivative. Piecewise-linear
    entropies also keep their breakpoints and values so they can be serialized
    """

    name: str
    entropy_fn: ArrayFn = field(repr=False)
    slope_fn: ArrayFn = field(repr=False)
    kind: str = LossKind.CLOSED_FORM
    breakpoints: tuple[float, ...] | None = None
    values: tuple[float, ...] | None = None
    params: Dict[str, Any] = field(default_factory=dict, compare=False)

    def entropy(self, v):
        """
        H(v)
        """
        arr = check_probability(v, "prediction")
        return _scalar_or_array(self.entropy_fn(arr), v)

    def superderivative(self, v):
        """
        H'(v) = loss(1, v) - loss(0, v)
        """
        arr = check_probability(v, "prediction")
        return _scalar_or_array(self.slope_fn(arr), v)

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == LossKind.PIECEWISE_LINEAR:
            return {
                "name": self.name,
                "kind": self.kind,
                "breakpoints": list(self.breakpoints or ()),
                "values": list(self.values or ()),
            }
        return {"name": self.name, "kind": self.kind, **self.params}


def _check_labels(y) -> np.ndarray:
    arr = np.asarray(y, dtype=float)
    if np.any((arr != 0.0) & (arr != 1.0)):
        raise DomainError("labels must be 0 or 1")
    return arr


def eval_loss(loss: ProperLoss, y, v):
    """
    loss(y, v) = H(v) + (y - v) H'(v). Values overshooting [0, 1] by at most
    the numeric tolerance are clamped, larger overshoots raise RangeError
    """
    labels = _check_labels(y)
    preds = check_probability(v, "prediction")
    raw = loss.entropy_fn(preds) + (labels - preds) * loss.slope_fn(preds)
    tol = LossprobeConfig.get("numerics", "tolerance", typ=float)
    if np.any(raw < -tol) or np.any(raw > 1.0 + tol):
        worst = float(raw.flat[np.argmax(np.abs(raw - 0.5))])
        raise RangeError(f"loss '{loss.name}' evaluated to {worst}, outside [0, 1]")
    return _scalar_or_array(np.clip(raw, 0.0, 1.0), y, v)


def expected_loss(loss: ProperLoss, p_star, v):
    """
    L(p*; v) = H(v) + (p* - v) H'(v), the expected loss of predicting v
    when y ~ Ber(p*)
    """
    target = check_probability(p_star, "p_star")
    preds = check_probability(v, "prediction")
    result = loss.entropy_fn(preds) + (target - preds) * loss.slope_fn(preds)
    return _scalar_or_array(result, p_star, v)


def pointwise_gap(loss: ProperLoss, p_star, v):
    """
    (p* - v) H'(v): how much the expected loss at v differs from the
    model's own estimate H(v)
    """
    target = check_probability(p_star, "p_star")
    preds = check_probability(v, "prediction")
    result = (target - preds) * loss.slope_fn(preds)
    return _scalar_or_array(result, p_star, v)


def blind_spots(loss: ProperLoss, grid_step: float, tol: float) -> List[float]:
    """
    Grid points where the superderivative vanishes. When H' jumps over zero
    inside a grid cell (a kink) the cell end nearest the interpolated
    crossing is reported
    """
    if not 0.0 < grid_step <= 0.5:
        raise DomainError("grid_step must lie in (0, 0.5]")
    if tol < 0.0:
        raise DomainError("tol must be non-negative")
    n = int(np.floor(1.0 / grid_step + 1e-9))
    if abs(n * grid_step - 1.0) < 1e-9:
        grid = np.arange(n + 1) / n
    else:
        grid = np.arange(n + 1) * grid_step
    slopes = loss.slope_fn(grid)

    spots = set(grid[np.abs(slopes) <= tol].tolist())
    crossing = np.flatnonzero((slopes[:-1] > tol) & (slopes[1:] < -tol))
    for j in crossing:
        zero = grid[j] + slopes[j] / (slopes[j] - slopes[j + 1]) * (grid[j + 1] - grid[j])
        spots.add(float(grid[j] if zero - grid[j] <= grid[j + 1] - zero else grid[j + 1]))
    return sorted(spots)


def squared_loss() -> ProperLoss:
    """
    (y - v)^2, entropy v(1 - v)
    """
    return ProperLoss(
        name="squared",
        entropy_fn=lambda v: v * (1.0 - v),
        slope_fn=lambda v: 1.0 - 2.0 * v,
    )


def half_squared_loss() -> ProperLoss:
    """
    (y - v)^2 / 2, the 1-Lipschitz rescaling of the squared loss
    """
    return ProperLoss(
        name="half-squared",
        entropy_fn=lambda v: 0.5 * v * (1.0 - v),
        slope_fn=lambda v: 0.5 - v,
    )


def cross_entropy_loss(eta: float | None = None) -> ProperLoss:
    """
    Cross-entropy with predictions clipped to [eta, 1 - eta] and divided by
    log(1/eta), so its largest value, loss(1, eta), is exactly 1. Outside the
    clipping interval the entropy continues along its tangent line
    """
    if eta is None:
        eta = LossprobeConfig.get("cross_entropy", "eta", typ=float)
    if not 0.0 < eta < 0.5:
        raise DomainError("eta must lie in (0, 0.5)")
    scale = -np.log(eta)

    def slope(v: np.ndarray) -> np.ndarray:
        c = np.clip(v, eta, 1.0 - eta)
        return (np.log1p(-c) - np.log(c)) / scale

    def entropy(v: np.ndarray) -> np.ndarray:
        c = np.clip(v, eta, 1.0 - eta)
        inner = -(c * np.log(c) + (1.0 - c) * np.log1p(-c)) / scale
        return inner + (v - c) * slope(c)

    return ProperLoss(
        name="cross-entropy",
        entropy_fn=entropy,
        slope_fn=slope,
        params={"eta": eta},
    )


BUILTIN_LOSSES: Dict[str, Callable[..., ProperLoss]] = {
    "squared": squared_loss,
    "half-squared": half_squared_loss,
    "cross-entropy": cross_entropy_loss,
}


def get_loss(name: str, **params) -> ProperLoss:
    """
    A built-in loss by name
    """
    if name not in BUILTIN_LOSSES:
        raise ConfigError(
            f"unknown loss '{name}', options are {sorted(BUILTIN_LOSSES.keys())}"
        )
    return BUILTIN_LOSSES[name](**params)


def _piecewise_slope(breakpoints: np.ndarray, values: np.ndarray) -> ArrayFn:
    slopes = np.diff(values) / np.diff(breakpoints)

    def slope(v: np.ndarray) -> np.ndarray:
        idx = np.clip(np.searchsorted(breakpoints, v, side="right") - 1, 0, len(slopes) - 1)
        out = slopes[idx]
        # kinks take the mean of the one-sided slopes
        kink = (breakpoints[idx] == v) & (idx > 0)
        return np.where(kink, 0.5 * (slopes[np.maximum(idx - 1, 0)] + out), out)

    return slope


def piecewise_loss(
    breakpoints: Sequence[float], values: Sequence[float], name: str = "piecewise"
) -> ProperLoss:
    """
    The proper loss of the piecewise-linear entropy interpolating `values`
    at `breakpoints` (0 = v_0 < ... < v_k = 1)
    """
    bp = np.asarray(breakpoints, dtype=float)
    vals = np.asarray(values, dtype=float)
    tol = LossprobeConfig.get("numerics", "tolerance", typ=float)
    if bp.ndim != 1 or len(bp) < 2 or len(bp) != len(vals):
        raise DomainError("breakpoints and values must be equal-length lists of at least 2")
    if bp[0] != 0.0 or bp[-1] != 1.0 or np.any(np.diff(bp) <= 0.0):
        raise DomainError("breakpoints must increase strictly from 0 to 1")
    if np.any(vals < -tol) or np.any(vals > 1.0 + tol):
        raise DomainError("entropy values must lie in [0, 1]")
    slopes = np.diff(vals) / np.diff(bp)
    if np.any(np.abs(slopes) > 1.0 + tol):
        raise DomainError("entropy slopes must lie in [-1, 1]")
    if np.any(np.diff(slopes) > tol):
        raise DomainError("entropy must be concave (slopes non-increasing)")

    return ProperLoss(
        name=name,
        entropy_fn=lambda v: np.interp(v, bp, vals),
        slope_fn=_piecewise_slope(bp, vals),
        kind=LossKind.PIECEWISE_LINEAR,
        breakpoints=tuple(bp.tolist()),
        values=tuple(vals.tolist()),
    )


def loss_from_slopes(
    slopes: Sequence[float],
    breakpoints: Sequence[float] = (),
    h0: float = 0.0,
    name: str = "piecewise",
) -> ProperLoss:
    """
    Piecewise-linear entropy starting at H(0) = h0 with the given segment
    slopes; `breakpoints` are the interior knots
    """
    knots = np.concatenate(([0.0], np.asarray(breakpoints, dtype=float), [1.0]))
    if len(slopes) != len(knots) - 1:
        raise DomainError("need one slope per segment")
    vals = h0 + np.concatenate(([0.0], np.cumsum(np.asarray(slopes) * np.diff(knots))))
    return piecewise_loss(knots, vals, name=name)


def threshold_loss(u: float) -> ProperLoss:
    """
    The proper loss of the threshold decision at u: H_u(v) = min(v(1 - u), u(1 - v)),
    whose superderivative is the step (1 - u) - 1{v >= u}
    """
    if not 0.0 < u < 1.0:
        raise DomainError("the threshold must lie in (0, 1)")
    return piecewise_loss((0.0, u, 1.0), (0.0, u * (1.0 - u), 0.0), name=f"threshold-{u!r}")


def sample_lipschitz_loss(seed: int, pieces: int, mesh: int | None = None) -> ProperLoss:
    """
    Random 1-Lipschitz proper loss.

    The superderivative follows a random continuous, non-increasing profile
    made of `pieces` linear pieces, with values in [-1, 1] and slope magnitude
    at most 1. The entropy is stored piecewise-linear on the `mesh` grid with
    the profile's midpoint values as slopes, and shifted so the loss stays
    inside [0, 1]
    """
    if pieces < 1:
        raise DomainError("pieces must be at least 1")
    if mesh is None:
        mesh = LossprobeConfig.get("numerics", "dense_grid", typ=int)
    rng = np.random.default_rng(seed)
    knots = np.concatenate(([0.0], np.sort(rng.uniform(0.0, 1.0, pieces - 1)), [1.0]))
    drops = rng.uniform(0.0, 1.0, pieces) * np.diff(knots)
    start = rng.uniform(-1.0 + drops.sum(), 1.0)
    profile = start - np.concatenate(([0.0], np.cumsum(drops)))

    bp = dense_grid(mesh)
    slopes = np.interp((np.arange(mesh) + 0.5) / mesh, knots, profile)
    heights = np.concatenate(([0.0], np.cumsum(slopes) / mesh))
    heights -= min(0.0, heights[-1])
    return piecewise_loss(bp, np.clip(heights, 0.0, 1.0), name=f"lipschitz-{seed}-{pieces}")


def loss_from_dict(doc: Dict[str, Any]) -> ProperLoss:
    """
    Inverse of ProperLoss.to_dict; also accepts a bare {breakpoints, values}
    document or a built-in name
    """
    if "breakpoints" in doc:
        return piecewise_loss(doc["breakpoints"], doc["values"], name=doc.get("name", "piecewise"))
    params = {k: v for k, v in doc.items() if k not in ("name", "kind")}
    return get_loss(doc.get("name", ""), **params)
