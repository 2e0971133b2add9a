"""
Multicalibration auditing: empirical multicalibration error over finite test
classes, calibration metrics (binned and kernel-smoothed), subgroup maxima,
the proper calibration error estimate and the advantage/MCE sandwich check
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from lossprobe.config import LossprobeConfig
from lossprobe.data import Dataset
from lossprobe.exceptions import ConfigError, DomainError, EmptySubgroup, SandwichViolation
from lossprobe.logger import child_logger
from lossprobe.loss_prediction import LossPredictor, advantage
from lossprobe.losses import ProperLoss, eval_loss
from lossprobe.predictors import Predictor, ViewBatch, data_views
from lossprobe.weight_functions import LossWeightedTest, TestFunction, richest_level


if TYPE_CHECKING:
    from lossprobe.mc_boost import Basis


logger = child_logger(__name__)


@dataclass(frozen=True)
class MceReport:
    """
    value = max over the class of |E[c(phi) (y - p(x))]|. `argmax` is the
    maximizing test function; ties go to the smallest function id
    """

    value: float
    argmax: TestFunction
    per_function: List[Tuple[str, float]]
    n: int
    max_advantage: float | None = None
    advantage_bound_holds: bool | None = None

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {
            "value": self.value,
            "n": self.n,
            "argmax": self.argmax.to_dict(),
            "argmax_id": self.argmax.id,
            "per_function": [{"id": fid, "correlation": corr} for fid, corr in self.per_function],
        }
        if self.max_advantage is not None:
            doc["max_advantage"] = self.max_advantage
            doc["advantage_bound_holds"] = self.advantage_bound_holds
        return doc


def correlations(C: Sequence[TestFunction], views: ViewBatch, residuals: np.ndarray) -> np.ndarray:
    """
    E[c(phi) r] for every c in C
    """
    if len(views) == 0:
        return np.zeros(len(C))
    return np.array([float(np.mean(c.evaluate(views) * residuals)) for c in C])


def mce_from_views(C: Sequence[TestFunction], views: ViewBatch, residuals: np.ndarray) -> MceReport:
    if not C:
        raise ConfigError("the test class must not be empty")
    corr = correlations(C, views, residuals)
    magnitude = np.abs(corr)
    best = float(magnitude.max())
    # deterministic tie-break: smallest id among the maximizers
    winners = [k for k in range(len(C)) if magnitude[k] == best]
    k = min(winners, key=lambda j: C[j].id)
    return MceReport(
        value=best,
        argmax=C[k],
        per_function=[(c.id, float(v)) for c, v in zip(C, corr)],
        n=len(views),
    )


def mce_finite(C: Sequence[TestFunction], p: Predictor, data: Dataset) -> MceReport:
    """
    Exact empirical multicalibration error of p over the finite class C.
    Views are built once at the richest level any function of C needs
    """
    if not C:
        raise ConfigError("the test class must not be empty")
    views = data_views(richest_level(c.level for c in C), p, data)
    return mce_from_views(C, views, data.labels - views.predictions)


def loss_class_tests(F: Sequence[LossPredictor], Ls: Sequence[ProperLoss]) -> List[TestFunction]:
    """
    C_L = {(f - H(p)) H'(p) : f in F, loss in Ls}, unscaled
    """
    return [LossWeightedTest(f, loss, 1.0) for f in F for loss in Ls]


def mce_loss_class(
    F: Sequence[LossPredictor], Ls: Sequence[ProperLoss], p: Predictor, data: Dataset
) -> MceReport:
    """
    MCE over the loss-weighted class, plus the check that no f in F has an
    advantage larger than twice that value for any loss in Ls
    """
    if not F or not Ls:
        raise ConfigError("need at least one loss predictor and one loss")
    report = mce_finite(loss_class_tests(F, Ls), p, data)
    max_adv = max(advantage(f, loss, p, data).advantage for f in F for loss in Ls)
    holds = max_adv <= 2.0 * report.value + 1e-9
    if not holds:
        logger.warning(
            "advantage %s exceeds twice the loss-class MCE %s", max_adv, report.value
        )
    return MceReport(
        value=report.value,
        argmax=report.argmax,
        per_function=report.per_function,
        n=report.n,
        max_advantage=float(max_adv),
        advantage_bound_holds=holds,
    )


def binned_ce_values(predictions: np.ndarray, labels: np.ndarray, bins: int) -> float:
    """
    Sum over equal-width bins of (n_b / n) |mean_b(y) - mean_b(p)|; the last
    bin is closed at 1
    """
    if bins < 1:
        raise DomainError("bins must be at least 1")
    n = len(predictions)
    if n == 0:
        return 0.0
    index = np.minimum(np.floor(predictions * bins).astype(int), bins - 1)
    residual = np.bincount(index, weights=labels - predictions, minlength=bins)
    return float(np.abs(residual).sum() / n)


def binned_ce(p: Predictor, data: Dataset, bins: int | None = None) -> float:
    if bins is None:
        bins = LossprobeConfig.get("numerics", "default_bins", typ=int)
    return binned_ce_values(p.predict_batch(data.features), data.labels.astype(float), bins)


def _reflected_gaussian(t: np.ndarray, v: np.ndarray, bandwidth: float) -> np.ndarray:
    """
    Gaussian kernel on [0, 1] with its mass reflected back at both ends
    """
    norm = 1.0 / (bandwidth * np.sqrt(2.0 * np.pi))
    out = np.zeros((len(v), len(t)))
    for center in (v, -v, 2.0 - v):
        out += np.exp(-0.5 * ((t[None, :] - center[:, None]) / bandwidth) ** 2)
    return norm * out


def smoothed_ce_values(
    predictions: np.ndarray, residuals: np.ndarray, bandwidth: float, chunk: int = 1024
) -> float:
    """
    Integral over t in [0, 1] of |(1/n) sum_i K(t, p_i) r_i|, that is the
    smoothed residual weighted by the smoothed density. The trapezoid grid
    has at least `numerics.smoothing_grid` cells and at least 8 per bandwidth
    """
    if bandwidth <= 0.0:
        raise DomainError("bandwidth must be positive")
    n = len(predictions)
    if n == 0:
        return 0.0
    cells = max(
        LossprobeConfig.get("numerics", "smoothing_grid", typ=int), int(np.ceil(8.0 / bandwidth))
    )
    t = np.arange(cells + 1) / cells
    smoothed = np.zeros(cells + 1)
    for start in range(0, n, chunk):
        rows = slice(start, start + chunk)
        smoothed += residuals[rows] @ _reflected_gaussian(t, predictions[rows], bandwidth)
    return float(np.trapezoid(np.abs(smoothed / n), t))


def smoothed_ce(p: Predictor, data: Dataset, bandwidth: float | None = None) -> float:
    if bandwidth is None:
        bandwidth = LossprobeConfig.get("numerics", "default_bandwidth", typ=float)
    predictions = p.predict_batch(data.features)
    return smoothed_ce_values(predictions, data.labels - predictions, bandwidth)


CE_METRICS = ("binned", "smoothed")


def calibration_error(
    predictions: np.ndarray, labels: np.ndarray, metric: str, params: Mapping[str, Any] | None = None
) -> float:
    params = params or {}
    if metric == "binned":
        bins = int(params.get("bins", LossprobeConfig.get("numerics", "default_bins", typ=int)))
        return binned_ce_values(predictions, labels.astype(float), bins)
    if metric == "smoothed":
        bandwidth = float(
            params.get("bandwidth", LossprobeConfig.get("numerics", "default_bandwidth", typ=float))
        )
        return smoothed_ce_values(predictions, labels - predictions, bandwidth)
    raise ConfigError(f"unknown calibration metric '{metric}', options are {list(CE_METRICS)}")


def subgroup_ce(
    p: Predictor, data: Dataset, metric: str, params: Mapping[str, Any] | None = None
) -> Dict[str, float]:
    """
    The metric restricted to every nonempty subgroup, keyed by name in
    sorted order. Empty subgroups are skipped with a warning
    """
    predictions = p.predict_batch(data.features)
    values: Dict[str, float] = {}
    for name in sorted(data.subgroups):
        mask = data.subgroups[name]
        if not mask.any():
            logger.warning("subgroup '%s' selects no rows, skipping it", name)
            continue
        values[name] = calibration_error(predictions[mask], data.labels[mask], metric, params)
    return values


def max_subgroup_ce(
    p: Predictor, data: Dataset, metric: str = "smoothed", params: Mapping[str, Any] | None = None
) -> Tuple[float, str]:
    """
    (max value, subgroup name); ties go to the lexicographically first name
    """
    if not data.subgroups:
        raise EmptySubgroup("the dataset carries no subgroups")
    values = subgroup_ce(p, data, metric, params)
    if not values:
        raise EmptySubgroup("every subgroup is empty")
    best_name = None
    best = -np.inf
    for name, value in values.items():
        if value > best:
            best_name, best = name, value
    return float(best), str(best_name)


@dataclass(frozen=True)
class PceReport:
    """
    estimate = lam * raw + epsilon, an upper bound on the proper calibration
    error over all 1-Lipschitz proper losses
    """

    raw: float
    estimate: float
    lam: float
    epsilon: float
    argmax_id: str
    n: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "raw": self.raw,
            "estimate": self.estimate,
            "lambda": self.lam,
            "epsilon": self.epsilon,
            "argmax_id": self.argmax_id,
            "n": self.n,
        }


def pce_estimate(p: Predictor, data: Dataset, basis: "Basis") -> PceReport:
    report = mce_finite(basis.functions, p, data)
    return PceReport(
        raw=report.value,
        estimate=basis.lam * report.value + basis.epsilon,
        lam=basis.lam,
        epsilon=basis.epsilon,
        argmax_id=report.argmax.id,
        n=report.n,
    )


@dataclass(frozen=True)
class SandwichReport:
    """
    A = max advantage over F, M = MCE of the loss-weighted class of F,
    B = max advantage over the augmented class F'
    """

    A: float
    M: float
    B: float
    grid_tolerance: float
    beta_grid: int
    lower_holds: bool
    upper_holds: bool
    per_function: List[Dict[str, float]] = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return self.lower_holds and self.upper_holds

    def to_dict(self) -> Dict[str, Any]:
        return {
            "A": self.A,
            "M": self.M,
            "B": self.B,
            "grid_tolerance": self.grid_tolerance,
            "beta_grid": self.beta_grid,
            "lower_holds": self.lower_holds,
            "upper_holds": self.upper_holds,
            "per_function": self.per_function,
        }


def sandwich_check(
    F: Sequence[LossPredictor], loss: ProperLoss, p: Predictor, data: Dataset, beta_grid: int = 1001
) -> SandwichReport:
    """
    Checks A / 2 <= M <= sqrt(B) on data. B is maximized over a uniform
    beta grid on [-1, 1], so the upper side allows for the grid spacing.
    Raises SandwichViolation when either side fails
    """
    if beta_grid < 3:
        raise ConfigError("beta_grid must be at least 3")
    if not F:
        raise ConfigError("F must not be empty")
    betas = np.linspace(-1.0, 1.0, beta_grid)
    cache: Dict[str, ViewBatch] = {}
    A = M = B = 0.0
    spread = 0.0
    rows: List[Dict[str, float]] = []
    for f in F:
        if f.level not in cache:
            cache[f.level] = data_views(f.level, p, data)
        views = cache[f.level]
        preds = views.predictions
        z = np.asarray(eval_loss(loss, data.labels, preds), dtype=float)
        H = loss.entropy_fn(preds)
        lp = f.predict_views(views)

        sep_sq = float(np.mean((z - H) ** 2))
        adv = sep_sq - float(np.mean((z - lp) ** 2))
        corr = float(np.mean((lp - H) * loss.slope_fn(preds) * (data.labels - preds)))
        augmented = np.clip((1.0 - betas[:, None]) * H[None, :] + betas[:, None] * lp[None, :], 0.0, 1.0)
        adv_aug = sep_sq - np.mean((z[None, :] - augmented) ** 2, axis=1)

        A = max(A, adv)
        M = max(M, abs(corr))
        B = max(B, float(adv_aug.max()))
        spread = max(spread, float(np.mean((lp - H) ** 2)))
        rows.append({"advantage": adv, "correlation": corr, "augmented_advantage": float(adv_aug.max())})

    tolerance = 2.0 / (beta_grid - 1) * (M + spread)
    lower = A / 2.0 <= M + 1e-9
    upper = M <= np.sqrt(B + tolerance) + 1e-9
    report = SandwichReport(
        A=A,
        M=M,
        B=B,
        grid_tolerance=tolerance,
        beta_grid=beta_grid,
        lower_holds=bool(lower),
        upper_holds=bool(upper),
        per_function=rows,
    )
    if not report.holds:
        raise SandwichViolation(f"A/2={A / 2.0}, M={M}, sqrt(B)={np.sqrt(B)}", report)
    return report
