"""
Multicalibration boosting.

The weak agnostic learner scans a finite stump class over feature views,
product_class_mc runs the product-class boosting loop against a list B of
functions, and mc_all_lipschitz instantiates B with the finite basis for
superderivatives of 1-Lipschitz proper losses.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np

from lossprobe.config import LossprobeConfig
from lossprobe.data import Dataset
from lossprobe.exceptions import BasisViolation, ConfigError, DataError, DomainError, IterationCap
from lossprobe.logger import child_logger
from lossprobe.losses import (
    ProperLoss,
    eval_loss,
    half_squared_loss,
    sample_lipschitz_loss,
    squared_loss,
    threshold_loss,
)
from lossprobe.predictors import (
    PREDICTOR_TYPES,
    ConstantPredictor,
    Predictor,
    ViewBatch,
    ViewLevel,
    data_views,
    feature_views,
    predictor_from_dict,
)
from lossprobe.utils import dense_grid
from lossprobe.weight_functions import (
    BasisTest,
    ConstantTest,
    EntropyTest,
    ProductTest,
    StumpTest,
    TestFunction,
    richest_level,
    weight_function_from_dict,
)


logger = child_logger(__name__)


def _tolerance() -> float:
    return LossprobeConfig.get("numerics", "tolerance", typ=float)


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 1.0:
        raise ConfigError("alpha must lie in (0, 1]")


def round_cap(alpha: float) -> int:
    """
    ceil(4 / alpha^2), the most update rounds boosting can take
    """
    _check_alpha(alpha)
    return math.ceil(round(4.0 / alpha**2, 9))


@dataclass(frozen=True)
class WalOutcome:
    """
    The learner's answer: a hypothesis with its correlation on the sample,
    or no hypothesis (bottom) with the best correlation it saw
    """

    hypothesis: TestFunction | None
    achieved_correlation: float

    @property
    def is_bottom(self) -> bool:
        return self.hypothesis is None


_STUMP_ORIENTATIONS = ((">=", 1), (">=", -1), ("<", 1), ("<", -1))

Block = Tuple[np.ndarray, Callable[[int], TestFunction]]


def _stump_decoder(coordinate: int, thresholds: np.ndarray, level: str) -> Callable[[int], TestFunction]:
    def decode(k: int) -> TestFunction:
        direction, sign = _STUMP_ORIENTATIONS[k % 4]
        return StumpTest(coordinate, float(thresholds[k // 4]), direction, sign, level)

    return decode


@dataclass(frozen=True)
class StumpClass:
    """
    Finite learner class over the view matrix (prediction, inputs,
    representation): the constants +1 and -1, signed stumps
    sign * 1{phi[j] >= t} and sign * 1{phi[j] < t} with thresholds at
    `quantiles` + 1 evenly spaced data quantiles of every coordinate, and
    any `extra` test functions. The class is closed under negation except
    for `extra`, which callers add in +/- pairs.

    Candidates are ordered constants first, then stumps by coordinate,
    threshold, direction (>= first) and sign (+1 first), then extras; the
    learner keeps the first of equally good candidates
    """

    quantiles: int | None = None
    extra: Tuple[TestFunction, ...] = ()
    include_constants: bool = True

    def with_extra(self, extra: Sequence[TestFunction]) -> "StumpClass":
        return StumpClass(self.quantiles, tuple(self.extra) + tuple(extra), self.include_constants)

    def thresholds(self, column: np.ndarray) -> np.ndarray:
        q = self.quantiles or LossprobeConfig.get("wal", "quantiles", typ=int)
        return np.unique(np.quantile(column, np.linspace(0.0, 1.0, q + 1)))

    def scan(self, views: ViewBatch, z: np.ndarray) -> List[Block]:
        """
        E[a(phi) z] for every candidate, in blocks that carry a decoder from
        position to test function. Stump sums come from one sort per coordinate
        """
        n = len(views)
        blocks: List[Block] = []
        if self.include_constants:
            mean = float(z.sum() / n)
            blocks.append(
                (np.array([mean, -mean]), lambda k: ConstantTest(1.0 if k == 0 else -1.0))
            )
        M = views.matrix()
        total = z.sum()
        for j in range(M.shape[1]):
            column = M[:, j]
            thresholds = self.thresholds(column)
            order = np.argsort(column, kind="stable")
            prefix = np.concatenate(([0.0], np.cumsum(z[order])))
            below = prefix[np.searchsorted(column[order], thresholds, side="left")]
            above = total - below
            values = np.stack([above, -above, below, -below], axis=1).reshape(-1) / n
            blocks.append((values, _stump_decoder(j, thresholds, views.level)))
        if self.extra:
            values = np.array([float(np.mean(e.evaluate(views) * z)) for e in self.extra])
            extra = self.extra
            blocks.append((values, lambda k: extra[k]))
        return blocks

    def enumerate(self, views: ViewBatch) -> List[TestFunction]:
        """
        Every candidate the learner scores on these views, in scan order
        """
        functions: List[TestFunction] = []
        for values, decode in self.scan(views, np.zeros(len(views))):
            functions.extend(decode(k) for k in range(len(values)))
        return functions

    def to_dict(self) -> Dict[str, Any]:
        return {
            "quantiles": self.quantiles,
            "include_constants": self.include_constants,
            "extra": [e.to_dict() for e in self.extra],
        }


def weak_agnostic_learn(
    views: ViewBatch, z: np.ndarray, stump_class: StumpClass, alpha: float
) -> WalOutcome:
    """
    Exhaustive scan of the class for the largest E[a(phi) z]. Returns the best
    candidate when its correlation is at least alpha / 2 (inclusive, up to
    the numeric tolerance), otherwise bottom
    """
    _check_alpha(alpha)
    z = np.asarray(z, dtype=float)
    if len(views) == 0:
        raise DataError("the learner needs at least one sample")
    if z.shape != (len(views),):
        raise DataError("need one target per view")

    blocks = stump_class.scan(views, z)
    if not blocks:
        raise ConfigError("the learner class is empty")
    values = np.concatenate([b[0] for b in blocks])
    k = int(np.argmax(values))
    best = float(values[k])
    if best < alpha / 2.0 - _tolerance():
        return WalOutcome(None, best)
    for block_values, decode in blocks:
        if k < len(block_values):
            return WalOutcome(decode(k), best)
        k -= len(block_values)
    raise AssertionError("argmax outside the candidate blocks")


@dataclass(frozen=True)
class BoostUpdate:
    delta: TestFunction
    step: float

    def to_dict(self) -> Dict[str, Any]:
        return {"delta": self.delta.to_dict(), "step": self.step}


class BoostedPredictor(Predictor):
    """
    p_t stored as the base predictor plus its updates
    p <- clip(p + step * delta(phi(p, x))), applied in order. Views keep the
    base's inputs and representation; only the prediction column moves.
    Updates that use subgroup indicators can only be evaluated through
    `apply` on views carrying the masks
    """

    family = "boosted"

    def __init__(
        self,
        base: Predictor,
        level: str = ViewLevel.PREDICTION_ONLY,
        updates: Sequence[BoostUpdate] = (),
    ) -> None:
        if ViewLevel.validate(level) == ViewLevel.EXTERNAL:
            raise ConfigError("boosted predictors cannot depend on external representations")
        super().__init__(base.arity)
        self.base = base
        self.level = level
        self.updates = tuple(updates)

    def updated(self, delta: TestFunction, step: float) -> "BoostedPredictor":
        return BoostedPredictor(self.base, self.level, self.updates + (BoostUpdate(delta, float(step)),))

    def base_views(self, X) -> ViewBatch:
        return feature_views(self.level, self.base, X)

    def apply(self, views: ViewBatch) -> np.ndarray:
        """
        Final predictions from views of the base predictor
        """
        preds = views.predictions
        for update in self.updates:
            current = views.with_predictions(preds)
            preds = np.clip(preds + update.step * update.delta.evaluate(current), 0.0, 1.0)
        return preds

    def _predict(self, X):
        return self.apply(self.base_views(X))

    def internal_representation(self, X):
        return self.base.internal_representation(X)

    def to_dict(self):
        return {
            "family": self.family,
            "level": self.level,
            "base": self.base.to_dict(),
            "updates": [u.to_dict() for u in self.updates],
        }

    @classmethod
    def from_dict(cls, doc):
        updates = [BoostUpdate(weight_function_from_dict(u["delta"]), u["step"]) for u in doc["updates"]]
        return cls(predictor_from_dict(doc["base"]), doc["level"], updates)


PREDICTOR_TYPES[BoostedPredictor.family] = BoostedPredictor


def gd_update(
    p: Predictor, delta: TestFunction, beta: float, level: str | None = None
) -> Predictor:
    """
    x -> clip(p(x) + beta * delta(phi(p, x))). When E[delta (z - p)] >= beta
    for targets z, the squared error to z drops by at least beta^2
    """
    if not 0.0 <= beta <= 1.0:
        raise DomainError("beta must lie in [0, 1]")
    if beta == 0.0:
        return p
    if isinstance(p, BoostedPredictor) and level in (None, p.level):
        return p.updated(delta, beta)
    return BoostedPredictor(p, level or delta.level).updated(delta, beta)


@dataclass(frozen=True)
class BoostRound:
    round: int
    b_id: str
    a_id: str
    correlation: float
    potential: float
    p_star_distance: float | None = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "round": self.round,
            "b": self.b_id,
            "a": self.a_id,
            "correlation": self.correlation,
            "potential": self.potential,
            "p_star_distance": self.p_star_distance,
        }


@dataclass
class BoostTrace:
    """
    One record per update round. `potential` is the mean squared distance
    to the boosting target after the round
    """

    alpha: float
    cap: int
    target: str
    initial_potential: float
    initial_p_star_distance: float | None = None
    rounds: List[BoostRound] = field(default_factory=list)
    terminated_by: str | None = None
    wal_calls: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alpha": self.alpha,
            "cap": self.cap,
            "target": self.target,
            "initial_potential": self.initial_potential,
            "initial_p_star_distance": self.initial_p_star_distance,
            "rounds": [r.to_dict() for r in self.rounds],
            "terminated_by": self.terminated_by,
            "wal_calls": self.wal_calls,
        }

    def json_lines(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.rounds)


BOOST_TARGETS = ("labels", "p_star")


def product_class_mc(
    data: Dataset,
    learner: StumpClass,
    B: Sequence[TestFunction],
    alpha: float,
    level: str = ViewLevel.PREDICTION_ONLY,
    initial: Predictor | None = None,
    target: str = "labels",
    shard_size: int | None = None,
) -> Tuple[BoostedPredictor, BoostTrace]:
    """
    Product-class multicalibration boosting.

    Starting from `initial` (the constant 1/2 by default), B is scanned in
    order; for each b the learner is asked for a with
    E[a(phi) b(phi) (target - p)] >= alpha / 2. The first success updates
    p <- clip(p + alpha/2 * a b) and restarts the scan from the first b.
    When every b comes back bottom, no member of the learner class times B
    correlates with the residual by more than alpha / 2.

    With `target="p_star"` the residuals are taken against the known p*
    instead of the labels. `shard_size` hands each learner call its own
    block of rows while disjoint blocks remain
    """
    _check_alpha(alpha)
    if not B:
        raise ConfigError("B must not be empty")
    if target not in BOOST_TARGETS:
        raise ConfigError(f"unknown boosting target '{target}', options are {list(BOOST_TARGETS)}")
    if target == "p_star" and data.p_star is None:
        raise ConfigError("boosting against p* needs a dataset with known p*")
    if data.n == 0:
        raise DataError("cannot boost on an empty dataset")

    level = richest_level([level, *(b.level for b in B)])
    predictor = BoostedPredictor(initial or ConstantPredictor(0.5, data.d), level)
    views = data_views(level, predictor.base, data)
    preds = views.predictions
    targets = data.labels.astype(float) if target == "labels" else data.p_star

    def p_star_distance(values: np.ndarray) -> float | None:
        if data.p_star is None:
            return None
        return float(np.mean((data.p_star - values) ** 2))

    cap = round_cap(alpha)
    trace = BoostTrace(
        alpha=alpha,
        cap=cap,
        target=target,
        initial_potential=float(np.mean((targets - preds) ** 2)),
        initial_p_star_distance=p_star_distance(preds),
    )
    log = child_logger(__name__, name="product-class-mc")
    if shard_size is not None and shard_size < 1:
        raise ConfigError("shard_size must be at least 1")
    if shard_size is not None and shard_size > data.n:
        log.warning(
            "shard_size %d exceeds the %d rows, every learner call sees the whole sample", shard_size, data.n
        )
    shards = data.n // shard_size if shard_size else 0
    warned = False

    while True:
        current = views.with_predictions(preds)
        for b in B:
            z = b.evaluate(current) * (targets - preds)
            sample, sample_z = current, z
            if shards:
                if trace.wal_calls >= shards and not warned:
                    log.warning("ran out of disjoint shards after %d learner calls, reusing rows", shards)
                    warned = True
                k = trace.wal_calls % shards
                rows = np.arange(k * shard_size, (k + 1) * shard_size)
                sample, sample_z = current.take(rows), z[rows]
            outcome = weak_agnostic_learn(sample, sample_z, learner, alpha)
            trace.wal_calls += 1
            if outcome.hypothesis is None:
                continue
            if len(trace.rounds) >= cap:
                trace.terminated_by = "iteration-cap"
                raise IterationCap(f"boosting exceeded {cap} rounds at alpha={alpha}", trace)
            delta = ProductTest(b, outcome.hypothesis)
            preds = np.clip(preds + alpha / 2.0 * delta.evaluate(current), 0.0, 1.0)
            predictor = predictor.updated(delta, alpha / 2.0)
            trace.rounds.append(
                BoostRound(
                    round=len(trace.rounds) + 1,
                    b_id=b.id,
                    a_id=outcome.hypothesis.id,
                    correlation=outcome.achieved_correlation,
                    potential=float(np.mean((targets - preds) ** 2)),
                    p_star_distance=p_star_distance(preds),
                )
            )
            log.debug(
                "round %d: b=%s a=%s correlation=%s",
                len(trace.rounds),
                b.id,
                outcome.hypothesis.id,
                outcome.achieved_correlation,
            )
            break
        else:
            trace.terminated_by = "audit-clean"
            break

    log.info("finished after %d rounds and %d learner calls", len(trace.rounds), trace.wal_calls)
    return predictor, trace


@dataclass(frozen=True)
class Basis:
    """
    g_1 = 1 and the steps 1{v >= u} at `thresholds`. Every non-increasing
    superderivative of a 1-Lipschitz proper loss is within `epsilon` of a
    combination of them with coefficient l1-norm at most `lam`
    """

    epsilon: float
    thresholds: Tuple[float, ...]
    lam: float = 4.0

    @property
    def d(self) -> int:
        return len(self.thresholds) + 1

    @property
    def functions(self) -> List[TestFunction]:
        return [BasisTest(None)] + [BasisTest(u) for u in self.thresholds]

    def evaluate(self, v) -> np.ndarray:
        """
        The len(v) x d matrix of basis values
        """
        v = np.asarray(v, dtype=float)
        steps = (v[:, None] >= np.asarray(self.thresholds)[None, :]).astype(float)
        return np.hstack([np.ones((len(v), 1)), steps])

    def combine(self, coefficients, v) -> np.ndarray:
        return self.evaluate(v) @ np.asarray(coefficients, dtype=float)

    def to_dict(self) -> Dict[str, Any]:
        return {"epsilon": self.epsilon, "lambda": self.lam, "d": self.d, "thresholds": list(self.thresholds)}


def lipschitz_basis(epsilon: float) -> Basis:
    """
    d = ceil(2 / epsilon + 1) functions: the constant and d - 1 steps at
    u_i = i / (d - 1), spaced at most epsilon / 2 apart
    """
    if not 0.0 < epsilon <= 1.0:
        raise DomainError("epsilon must lie in (0, 1]")
    d = math.ceil(round(2.0 / epsilon + 1.0, 9))
    return Basis(epsilon=float(epsilon), thresholds=tuple(i / (d - 1) for i in range(1, d)))


@dataclass(frozen=True)
class BasisFit:
    coefficients: Tuple[float, ...]
    sup_error: float
    norm: float
    epsilon: float
    lam: float

    @property
    def within_bounds(self) -> bool:
        return self.sup_error <= self.epsilon + 1e-12 and self.norm <= self.lam + 1e-12

    def to_dict(self) -> Dict[str, Any]:
        return {
            "coefficients": list(self.coefficients),
            "sup_error": self.sup_error,
            "norm": self.norm,
            "epsilon": self.epsilon,
            "lambda": self.lam,
        }


def basis_fit(basis: Basis, target: Callable[[np.ndarray], np.ndarray], monotone: bool = False) -> BasisFit:
    """
    Staircase fit on the dense grid: between consecutive thresholds the
    combination takes the midrange of the target, so the coefficients are
    the first value and the successive jumps. With `monotone` set (the
    target is a superderivative of a 1-Lipschitz proper loss) a fit outside
    the epsilon / lambda guarantee raises BasisViolation
    """
    grid = dense_grid()
    values = np.asarray(target(grid), dtype=float) * np.ones(len(grid))
    cells = np.searchsorted(np.asarray(basis.thresholds), grid, side="right")

    levels = np.zeros(basis.d)
    for k in range(basis.d):
        in_cell = values[cells == k]
        if len(in_cell):
            levels[k] = 0.5 * (in_cell.max() + in_cell.min())
        elif k > 0:
            levels[k] = levels[k - 1]
    coefficients = np.concatenate(([levels[0]], np.diff(levels)))
    error = float(np.max(np.abs(values - basis.combine(coefficients, grid))))
    fit = BasisFit(
        coefficients=tuple(coefficients.tolist()),
        sup_error=error,
        norm=float(np.abs(coefficients).sum()),
        epsilon=basis.epsilon,
        lam=basis.lam,
    )
    if monotone and not fit.within_bounds:
        raise BasisViolation(
            f"fit error {fit.sup_error} (epsilon {basis.epsilon}), norm {fit.norm} (lambda {basis.lam})",
            fit,
        )
    return fit


def lipschitz_learner(learner: StumpClass, basis: Basis) -> StumpClass:
    """
    Adds +/- the self-entropies of the threshold losses at the interior
    basis knots and of the built-in 1-Lipschitz losses to the learner class
    """
    losses: List[ProperLoss] = [threshold_loss(u) for u in basis.thresholds if u < 1.0]
    losses += [half_squared_loss(), squared_loss()]
    return learner.with_extra([EntropyTest(loss, sign) for loss in losses for sign in (1, -1)])


@dataclass(frozen=True)
class PanelReport:
    """
    Best advantage a loss predictor clip(H + beta * a) reaches over the
    panel of losses and the enumerated learner class.

    The panel only measures this shifted family: a ranges over the learner
    class and beta is the fitted best step. Trained loss predictors
    (ridge, tree, stump ensembles) are not evaluated here; use
    `loss_prediction.advantage` for those.
    """

    max_advantage: float
    loss: str
    function: str

    def to_dict(self) -> Dict[str, Any]:
        return {"max_advantage": self.max_advantage, "loss": self.loss, "function": self.function}


def panel_advantage(
    p: Predictor, data: Dataset, learner: StumpClass, losses: Sequence[ProperLoss], level: str
) -> PanelReport:
    """
    For every loss and class member a, beta = clip(E[a H'(p) (y - p)] / E[a^2], -1, 1)
    is the best step for the shifted predictor; returns the best measured advantage.

    Only the family clip(H + beta * a) is scored, so the result is a lower
    bound on the best advantage any loss predictor over the same views reaches.
    """
    views = data_views(level, p, data)
    functions = learner.enumerate(views)
    A = np.vstack([f.evaluate(views) for f in functions])
    preds = views.predictions
    labels = data.labels.astype(float)
    energy = np.mean(A**2, axis=1)

    best = PanelReport(0.0, "", "")
    for loss in losses:
        z = np.asarray(eval_loss(loss, labels, preds), dtype=float)
        H = loss.entropy_fn(preds)
        c = A @ ((labels - preds) * loss.slope_fn(preds)) / len(preds)
        beta = np.clip(np.divide(c, energy, out=np.zeros_like(c), where=energy > 0), -1.0, 1.0)
        lp = np.clip(H[None, :] + beta[:, None] * A, 0.0, 1.0)
        adv = np.mean((z - H) ** 2) - np.mean((z[None, :] - lp) ** 2, axis=1)
        k = int(np.argmax(adv))
        if adv[k] > best.max_advantage:
            best = PanelReport(float(adv[k]), loss.name, functions[k].id)
    return best


@dataclass(frozen=True)
class Certificate:
    """
    Guarantee of the Lipschitz pipeline: every loss predictor built from the
    learner class has advantage at most 4 * lambda * alpha + 4 * epsilon for
    every 1-Lipschitz proper loss. `panel_before` / `panel_after` are the
    measured advantages on the sampled panel
    """

    alpha: float
    epsilon: float
    lam: float
    d: int
    bound: float
    rounds: int
    terminated_by: str
    panel_losses: int
    panel_before: PanelReport
    panel_after: PanelReport
    trace: BoostTrace = field(compare=False, repr=False)

    @property
    def holds(self) -> bool:
        return self.panel_after.max_advantage <= self.bound

    def to_dict(self) -> Dict[str, Any]:
        return {
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "lambda": self.lam,
            "d": self.d,
            "bound": self.bound,
            "rounds": self.rounds,
            "terminated_by": self.terminated_by,
            "panel_losses": self.panel_losses,
            "panel_before": self.panel_before.to_dict(),
            "panel_after": self.panel_after.to_dict(),
            "holds": self.holds,
        }


def panel_losses(size: int, seed: int, pieces: int = 4) -> List[ProperLoss]:
    return [sample_lipschitz_loss(seed + k, pieces) for k in range(size)]


def mc_all_lipschitz(
    data: Dataset,
    learner: StumpClass,
    alpha: float,
    epsilon: float,
    level: str = ViewLevel.PREDICTION_ONLY,
    initial: Predictor | None = None,
    target: str = "labels",
    panel_size: int = 20,
    panel_seed: int = 0,
    shard_size: int | None = None,
) -> Tuple[BoostedPredictor, Certificate]:
    """
    Boosts against the Lipschitz basis composed with the prediction, using a
    learner class that contains the threshold-loss and built-in
    self-entropies, then audits the result on a panel of sampled losses
    """
    basis = lipschitz_basis(epsilon)
    A = lipschitz_learner(learner, basis)
    losses = panel_losses(panel_size, panel_seed)
    start = initial or ConstantPredictor(0.5, data.d)
    before = panel_advantage(start, data, A, losses, level) if losses else PanelReport(0.0, "", "")

    predictor, trace = product_class_mc(
        data, A, basis.functions, alpha, level=level, initial=start, target=target, shard_size=shard_size
    )
    after = panel_advantage(predictor, data, A, losses, level) if losses else PanelReport(0.0, "", "")
    certificate = Certificate(
        alpha=alpha,
        epsilon=epsilon,
        lam=basis.lam,
        d=basis.d,
        bound=4.0 * basis.lam * alpha + 4.0 * epsilon,
        rounds=len(trace.rounds),
        terminated_by=str(trace.terminated_by),
        panel_losses=len(losses),
        panel_before=before,
        panel_after=after,
        trace=trace,
    )
    if not certificate.holds:
        logger.warning(
            "panel advantage %s exceeds the certified bound %s",
            after.max_advantage,
            certificate.bound,
        )
    return predictor, certificate

