"""
Command logic behind the CLI. Every run_* function takes a normalized
command config and returns a report document (with its `tables` and
`plots` sections) plus the list of failed assertions
"""

import itertools
import math
from typing import Any, Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from lossprobe.config import LossprobeConfig
from lossprobe.data import Dataset, load_csv, split, synth_generate
from lossprobe.exceptions import ConfigError, SandwichViolation
from lossprobe.logger import child_logger
from lossprobe.loss_prediction import (
    advantage,
    advantage_from_values,
    bayes_loss_oracle,
    train_loss_predictor,
    witness_from_lp,
)
from lossprobe.losses import (
    ProperLoss,
    blind_spots,
    eval_loss,
    get_loss,
    loss_from_dict,
    sample_lipschitz_loss,
)
from lossprobe.mc_boost import (
    StumpClass,
    basis_fit,
    lipschitz_basis,
    mc_all_lipschitz,
)
from lossprobe.multicalibration import (
    binned_ce,
    calibration_error,
    max_subgroup_ce,
    mce_finite,
    pce_estimate,
    sandwich_check,
    smoothed_ce,
    subgroup_ce,
)
from lossprobe.predictors import BlendedPredictor, Predictor, ViewLevel, data_views, fit
from lossprobe.utils import run_keyed


logger = child_logger(__name__)

Report = Dict[str, Any]
Violations = List[str]

DEFAULT_SPLITS = (0.4, 0.3, 0.3)


def _finite_or_none(value: float) -> float | None:
    return float(value) if math.isfinite(value) else None


def with_seed(config: Mapping[str, Any], seed: int | None) -> Dict[str, Any]:
    """
    The config with the command-line seed applied and a default seed of 0
    """
    resolved = dict(config)
    if seed is not None:
        resolved["seed"] = int(seed)
    resolved.setdefault("seed", 0)
    return resolved


def _required(config: Mapping[str, Any], key: str) -> Any:
    if key not in config:
        raise ConfigError(f"the config needs '{key}'")
    return config[key]


def build_dataset(doc: Mapping[str, Any], seed: int) -> Dataset:
    """
    {"source": "synthetic", "spec": {...}} or {"source": "csv", "path": ..., "schema": {...}}.
    A dataset-level seed takes precedence over the run seed
    """
    source = doc.get("source", "synthetic")
    if source == "synthetic":
        return synth_generate(_required(doc, "spec"), int(doc.get("seed", seed)))
    if source == "csv":
        return load_csv(_required(doc, "path"), doc.get("schema", {}))
    raise ConfigError(f"unknown dataset source '{source}', options are ['csv', 'synthetic']")


def build_loss(doc: str | Mapping[str, Any]) -> ProperLoss:
    """
    A built-in name, a serialized loss, or {"lipschitz": {"seed": s, "pieces": k}}
    """
    if isinstance(doc, str):
        return get_loss(doc)
    if "lipschitz" in doc:
        params = doc["lipschitz"]
        return sample_lipschitz_loss(int(params.get("seed", 0)), int(params.get("pieces", 4)))
    return loss_from_dict(dict(doc))


def build_predictor(spec: Mapping[str, Any], train: Dataset) -> Predictor:
    """
    Fits the family and blends it with the warp constant at weight theta.
    theta comes from the predictor spec, else from the synthetic dataset
    """
    theta = float(spec.get("theta", train.provenance.get("theta", 0.0)))
    base = fit(spec, train)
    if theta == 0.0:
        return base
    constant = LossprobeConfig.get("experiment", "warp_constant", typ=float)
    return BlendedPredictor(base, theta, constant)


def _splits(config: Mapping[str, Any]) -> Tuple[float, ...]:
    fractions = tuple(config.get("splits", DEFAULT_SPLITS))
    if len(fractions) != 3:
        raise ConfigError("splits must list three fractions: base model, loss predictor, held out")
    return fractions


def _level(config: Mapping[str, Any], default: str = ViewLevel.INPUT_AWARE) -> str:
    return ViewLevel.validate(config.get("level", default))


def _blind_spot_share(loss: ProperLoss, predictions: np.ndarray) -> float:
    if len(predictions) == 0:
        return 0.0
    tol = LossprobeConfig.get("numerics", "tolerance", typ=float)
    return float(np.mean(np.abs(loss.slope_fn(predictions)) <= tol))


def _trained(config: Mapping[str, Any]):
    seed = int(config["seed"])
    data = build_dataset(_required(config, "dataset"), seed)
    base_split, lp_split, test_split = split(data, _splits(config), seed)
    loss = build_loss(config.get("loss", "squared"))
    p = build_predictor(_required(config, "predictor"), base_split)
    level = _level(config)
    algorithm = config.get("lp_algorithm", "ridge")
    lp = train_loss_predictor(algorithm, loss, p, level, lp_split, seed, config.get("lp_params"))
    return data, (base_split, lp_split, test_split), loss, p, lp


def run_audit(config: Mapping[str, Any]) -> Tuple[Report, Violations]:
    """
    Trains a loss predictor for the configured model and reports its
    held-out advantage, the witness it induces, and calibration metrics
    """
    log = child_logger(__name__, name="audit")
    _, (_, _, test), loss, p, lp = _trained(config)
    violations: Violations = []
    tol = LossprobeConfig.get("numerics", "tolerance", typ=float)

    adv = advantage(lp, loss, p, test)
    witness = witness_from_lp(lp, loss, p)
    mce = mce_finite([witness], p, test)
    correlation = mce.per_function[0][1]
    bound_holds = correlation >= adv.advantage / 2.0 - tol
    if not bound_holds:
        violations.append(
            f"witness correlation {correlation} is below half the advantage {adv.advantage}"
        )

    predictions = p.predict_batch(test.features)
    share = _blind_spot_share(loss, predictions)
    if share >= 0.5:
        log.warning(
            "%.0f%% of held-out predictions sit on a blind spot of %s, loss prediction is trivial there",
            100 * share,
            loss.name,
        )

    try:
        sandwich = sandwich_check([lp], loss, p, test).to_dict()
    except SandwichViolation as e:
        sandwich = e.report.to_dict()
        violations.append(e.reason)

    subgroup_rows = []
    ce_values = subgroup_ce(p, test, config.get("metric", "smoothed"), config.get("metric_params"))
    for name, ce in ce_values.items():
        restricted = advantage(lp, loss, p, test, test.subgroups[name])
        subgroup_rows.append({"subgroup": name, "ce": ce, "advantage": restricted.advantage, "n": restricted.n})
    max_ce = None
    if ce_values:
        value, name = max_subgroup_ce(p, test, config.get("metric", "smoothed"), config.get("metric_params"))
        max_ce = {"value": value, "subgroup": name}

    report: Report = {
        "command": "audit",
        "loss": loss.name,
        "level": lp.level,
        "loss_predictor": lp.id,
        "advantage": adv.to_dict(),
        "witness": {
            "function": witness.to_dict(),
            "correlation": correlation,
            "mce": mce.value,
            "bound_holds": bound_holds,
        },
        "blind_spots": {
            "points": blind_spots(loss, 1.0 / LossprobeConfig.get("numerics", "dense_grid", typ=int), tol),
            "prediction_share": share,
            "dominated": share >= 0.5,
        },
        "calibration": {
            "binned": binned_ce(p, test),
            "smoothed": smoothed_ce(p, test),
            "max_subgroup": max_ce,
            "pce": pce_estimate(p, test, lipschitz_basis(float(config.get("pce_epsilon", 0.1)))).to_dict(),
        },
        "sandwich": sandwich,
        "tables": {
            "subgroup-ce": {"columns": ["subgroup", "ce", "advantage", "n"], "rows": subgroup_rows},
        },
        "plots": {},
        "violations": violations,
    }
    if subgroup_rows:
        report["plots"]["subgroup-ce"] = {
            "table": "subgroup-ce",
            "x": "ce",
            "y": "advantage",
            "label": ["subgroup"],
            "title": "Subgroup advantage vs calibration error",
            "x_label": "subgroup calibration error",
            "y_label": "restricted advantage",
        }
    log.info("advantage %s, witness correlation %s", adv.advantage, correlation)
    return report, violations


def run_train_lp(config: Mapping[str, Any]) -> Tuple[Report, Violations, Dict[str, Any]]:
    """
    Trains and serializes the model and its loss predictor. Returns the
    report and the artifacts to write next to it
    """
    _, (_, lp_split, test), loss, p, lp = _trained(config)
    report: Report = {
        "command": "train-lp",
        "loss": loss.name,
        "level": lp.level,
        "loss_predictor": lp.id,
        "advantage": {
            "train": advantage(lp, loss, p, lp_split).to_dict(),
            "held_out": advantage(lp, loss, p, test).to_dict(),
        },
        "tables": {},
        "plots": {},
        "violations": [],
    }
    if test.p_star is not None:
        views = data_views(ViewLevel.PREDICTION_ONLY, p, test)
        losses = np.asarray(eval_loss(loss, test.labels, views.predictions), dtype=float)
        oracle = np.asarray(bayes_loss_oracle(loss, test.p_star, views.predictions), dtype=float)
        report["advantage"]["bayes_oracle"] = advantage_from_values(
            losses, loss.entropy_fn(views.predictions), oracle
        ).to_dict()
    artifacts = {"predictor.json": p.to_dict(), "loss-predictor.json": lp.to_dict()}
    return report, [], artifacts


def sign_concordance(x: Sequence[float], y: Sequence[float]) -> Tuple[int, int]:
    """
    (concordant, discordant) pairs; pairs tied in either coordinate are skipped
    """
    concordant = discordant = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        s = np.sign(x[j] - x[i]) * np.sign(y[j] - y[i])
        if s > 0:
            concordant += 1
        elif s < 0:
            discordant += 1
    return concordant, discordant


def _correlation(rows: Sequence[Mapping[str, Any]], x: str, y: str) -> Dict[str, Any]:
    xs = [float(r[x]) for r in rows]
    ys = [float(r[y]) for r in rows]
    rho = None
    if len(rows) >= 2 and len(set(xs)) > 1 and len(set(ys)) > 1:
        rho = _finite_or_none(float(spearmanr(xs, ys).statistic))
    concordant, discordant = sign_concordance(xs, ys)
    counted = concordant + discordant
    return {
        "spearman_rho": rho,
        "concordant_pairs": concordant,
        "discordant_pairs": discordant,
        "concordance": concordant / counted if counted else None,
        "points": len(rows),
    }


EXPERIMENT_CHECKS = ("min_spearman", "min_concordance", "calibrated_within_noise")


def experiment_checks(config: Mapping[str, Any]) -> Dict[str, Any]:
    """
    Acceptance thresholds from the `experiment` settings, overridden by the
    config's `checks` block
    """
    overrides = dict(config.get("checks") or {})
    unknown = sorted(set(overrides) - set(EXPERIMENT_CHECKS))
    if unknown:
        raise ConfigError(f"unknown experiment checks {unknown}, options are {list(EXPERIMENT_CHECKS)}")
    return {
        "min_spearman": float(
            overrides.get("min_spearman", LossprobeConfig.get("experiment", "min_spearman", typ=float))
        ),
        "min_concordance": float(
            overrides.get("min_concordance", LossprobeConfig.get("experiment", "min_concordance", typ=float))
        ),
        "calibrated_within_noise": bool(
            overrides.get(
                "calibrated_within_noise",
                LossprobeConfig.get("experiment", "calibrated_within_noise", typ=bool),
            )
        ),
    }


def experiment_violations(cells: Sequence[Mapping[str, Any]], checks: Mapping[str, Any]) -> Violations:
    """
    The trend between max subgroup calibration error and advantage is only
    asserted when the cells span more than one miscalibration level theta
    """
    violations: Violations = []
    if len({c["theta"] for c in cells}) > 1:
        trend = _correlation(cells, "max_subgroup_ce", "advantage")
        rho = trend["spearman_rho"]
        if rho is None or rho <= checks["min_spearman"]:
            violations.append(
                f"spearman rho(max subgroup CE, advantage) = {rho}, needs > {checks['min_spearman']}"
            )
        concordance = trend["concordance"]
        if concordance is None or concordance < checks["min_concordance"]:
            violations.append(
                f"sign concordance {concordance} over {trend['points']} cells, needs >= {checks['min_concordance']}"
            )
    if checks["calibrated_within_noise"]:
        for c in cells:
            if c["theta"] == 0.0 and abs(c["advantage"]) > c["noise"]:
                violations.append(
                    f"calibrated cell {c['dataset']}/{c['family']}/{c['algorithm']}: "
                    f"|advantage| {abs(c['advantage'])} exceeds noise {c['noise']}"
                )
    return violations


def _experiment_job(
    name: str,
    splits: Tuple[Dataset, Dataset, Dataset],
    spec: Mapping[str, Any],
    algorithms: Sequence[str],
    loss: ProperLoss,
    config: Mapping[str, Any],
) -> Callable[[], Dict[str, List[Dict[str, Any]]]]:
    def job():
        family = spec["family"]
        log = child_logger(__name__, name=f"{name}-{family}")
        base_split, lp_split, test = splits
        p = build_predictor(spec, base_split)
        theta = float(spec.get("theta", base_split.provenance.get("theta", 0.0)))
        metric = config.get("metric", "smoothed")
        params = config.get("metric_params")
        global_ce = calibration_error(p.predict_batch(test.features), test.labels, metric, params)
        max_ce, max_name = max_subgroup_ce(p, test, metric, params)
        ce_values = subgroup_ce(p, test, metric, params)

        cells = []
        subgroups = []
        for k, algorithm in enumerate(algorithms):
            lp = train_loss_predictor(
                algorithm, loss, p, _level(config), lp_split, int(config["seed"]), config.get("lp_params")
            )
            adv = advantage(lp, loss, p, test)
            cells.append(
                {
                    "dataset": name,
                    "family": family,
                    "algorithm": algorithm,
                    "theta": theta,
                    "max_subgroup_ce": max_ce,
                    "max_subgroup": max_name,
                    "global_ce": global_ce,
                    "advantage": adv.advantage,
                    "noise": adv.noise,
                    "n": adv.n,
                }
            )
            if k == 0:
                for group, ce in ce_values.items():
                    restricted = advantage(lp, loss, p, test, test.subgroups[group])
                    subgroups.append(
                        {
                            "dataset": name,
                            "family": family,
                            "algorithm": algorithm,
                            "subgroup": group,
                            "ce": ce,
                            "advantage": restricted.advantage,
                            "noise": restricted.noise,
                            "n": restricted.n,
                        }
                    )
            log.info("%s: advantage %s (noise %s), max subgroup CE %s", algorithm, adv.advantage, adv.noise, max_ce)
        return {"cells": cells, "subgroups": subgroups}

    return job


def run_experiment(config: Mapping[str, Any]) -> Tuple[Report, Violations]:
    """
    Advantage against calibration error over a grid of datasets, base
    model families and loss-predictor algorithms. Cells run concurrently
    and merge in cell-id order
    """
    seed = int(config["seed"])
    datasets = list(_required(config, "datasets"))
    families = [f if isinstance(f, Mapping) else {"family": f} for f in _required(config, "families")]
    algorithms = list(_required(config, "lp_algorithms"))
    if len(families) < 3:
        raise ConfigError("an experiment needs at least three base model families")
    if len(algorithms) < 2:
        raise ConfigError("an experiment needs at least two loss-predictor algorithms")
    if not datasets:
        raise ConfigError("an experiment needs at least one dataset")
    names = [str(d.get("name", f"dataset-{k}")) for k, d in enumerate(datasets)]
    if len(set(names)) != len(names):
        raise ConfigError("dataset names must be unique")
    family_names = [f["family"] for f in families]
    if len(set(family_names)) != len(family_names):
        raise ConfigError("base model families must be unique")
    loss = build_loss(config.get("loss", "squared"))
    checks = experiment_checks(config)

    jobs = {}
    for k, (name, doc) in enumerate(zip(names, datasets)):
        parts = split(build_dataset(doc, seed + k), _splits(config), seed)
        for spec in families:
            jobs[f"{name}/{spec['family']}"] = _experiment_job(name, parts, spec, algorithms, loss, config)
    results = run_keyed(jobs)

    cells = [row for key in sorted(results) for row in results[key]["cells"]]
    subgroups = [row for key in sorted(results) for row in results[key]["subgroups"]]
    calibrated = [c for c in cells if c["theta"] == 0.0]
    violations = experiment_violations(cells, checks)
    report: Report = {
        "command": "experiment",
        "loss": loss.name,
        "level": _level(config),
        "correlation": {
            "max_ce_vs_advantage": _correlation(cells, "max_subgroup_ce", "advantage"),
            "per_algorithm": {
                a: _correlation([c for c in cells if c["algorithm"] == a], "max_subgroup_ce", "advantage")
                for a in algorithms
            },
            "subgroup_ce_vs_advantage": _correlation(subgroups, "ce", "advantage"),
        },
        "calibrated_cells_within_noise": {
            "cells": len(calibrated),
            "within": sum(1 for c in calibrated if abs(c["advantage"]) <= c["noise"]),
        },
        "tables": {
            "advantage-vs-max-ce": {
                "columns": [
                    "dataset",
                    "family",
                    "algorithm",
                    "theta",
                    "max_subgroup_ce",
                    "max_subgroup",
                    "global_ce",
                    "advantage",
                    "noise",
                    "n",
                ],
                "rows": cells,
            },
            "subgroup-advantage": {
                "columns": ["dataset", "family", "algorithm", "subgroup", "ce", "advantage", "noise", "n"],
                "rows": subgroups,
            },
        },
        "plots": {
            "advantage-vs-max-ce": {
                "table": "advantage-vs-max-ce",
                "x": "max_subgroup_ce",
                "y": "advantage",
                "series": "family",
                "label": ["dataset", "family", "algorithm"],
                "title": "Loss-prediction advantage vs max subgroup calibration error",
                "x_label": "max subgroup calibration error",
                "y_label": "held-out advantage",
            },
            "subgroup-advantage": {
                "table": "subgroup-advantage",
                "x": "ce",
                "y": "advantage",
                "series": "family",
                "label": ["dataset", "family", "subgroup"],
                "title": "Per-subgroup advantage vs subgroup calibration error",
                "x_label": "subgroup calibration error",
                "y_label": "restricted advantage",
            },
        },
        "checks": checks,
        "violations": violations,
    }
    return report, violations


def run_boost(config: Mapping[str, Any]) -> Tuple[Report, Violations, Dict[str, Any]]:
    """
    Lipschitz-basis boosting with its certificate. Returns the report, the
    violations and the artifacts (boosted predictor, JSON-lines trace).
    IterationCap propagates with the trace attached
    """
    seed = int(config["seed"])
    data = build_dataset(_required(config, "dataset"), seed)
    alpha = float(_required(config, "alpha"))
    epsilon = float(_required(config, "epsilon"))
    level = _level(config, ViewLevel.PREDICTION_ONLY)
    initial = build_predictor(config["initial"], data) if "initial" in config else None
    learner = StumpClass(quantiles=config.get("quantiles"))
    predictor, certificate = mc_all_lipschitz(
        data,
        learner,
        alpha,
        epsilon,
        level=level,
        initial=initial,
        target=config.get("target", "labels"),
        panel_size=int(config.get("panel_size", 20)),
        panel_seed=int(config.get("panel_seed", seed)),
        shard_size=config.get("shard_size"),
    )
    violations: Violations = []
    if not certificate.holds:
        violations.append(
            f"panel advantage {certificate.panel_after.max_advantage} exceeds the bound {certificate.bound}"
        )
    if certificate.rounds > certificate.trace.cap:
        violations.append(f"{certificate.rounds} rounds exceed the cap {certificate.trace.cap}")
    report: Report = {
        "command": "boost",
        "certificate": certificate.to_dict(),
        "trace": certificate.trace.to_dict(),
        "tables": {
            "boost-trace": {
                "columns": ["round", "b", "a", "correlation", "potential", "p_star_distance"],
                "rows": [r.to_dict() for r in certificate.trace.rounds],
            }
        },
        "plots": {},
        "violations": violations,
    }
    if certificate.trace.rounds:
        report["plots"]["boost-potential"] = {
            "table": "boost-trace",
            "x": "round",
            "y": "potential",
            "label": ["b", "a"],
            "title": "Boosting potential by round",
            "x_label": "round",
            "y_label": "mean squared distance to the target",
        }
    artifacts = {"predictor.json": predictor.to_dict(), "trace.jsonl": certificate.trace.json_lines()}
    return report, violations, artifacts


def run_basis_check(epsilon: float, n_losses: int, seed: int, pieces: int = 4) -> Tuple[Report, Violations]:
    """
    Fits the superderivatives of n_losses sampled 1-Lipschitz losses with
    the basis and checks the error and norm guarantees
    """
    log = child_logger(__name__, name="basis-check")
    basis = lipschitz_basis(epsilon)
    if n_losses < 0:
        raise ConfigError("n_losses must be non-negative")
    if n_losses == 0:
        log.warning("no losses to check, the basis check passes trivially")

    rows = []
    violations: Violations = []
    for k in range(n_losses):
        loss = sample_lipschitz_loss(seed + k, pieces)
        fit_ = basis_fit(basis, loss.slope_fn)
        rows.append(
            {"loss": loss.name, "sup_error": fit_.sup_error, "norm": fit_.norm, "within_bounds": fit_.within_bounds}
        )
        if not fit_.within_bounds:
            violations.append(
                f"{loss.name}: sup error {fit_.sup_error} (epsilon {basis.epsilon}), "
                f"norm {fit_.norm} (lambda {basis.lam})"
            )
    report: Report = {
        "command": "basis-check",
        "basis": basis.to_dict(),
        "n_losses": n_losses,
        "seed": seed,
        "pieces": pieces,
        "max_sup_error": max((r["sup_error"] for r in rows), default=0.0),
        "max_norm": max((r["norm"] for r in rows), default=0.0),
        "tables": {"basis-fits": {"columns": ["loss", "sup_error", "norm", "within_bounds"], "rows": rows}},
        "plots": {},
        "violations": violations,
    }
    if rows:
        report["plots"]["basis-fits"] = {
            "table": "basis-fits",
            "x": "norm",
            "y": "sup_error",
            "label": ["loss"],
            "title": f"Basis fits at epsilon={epsilon}",
            "x_label": "coefficient l1 norm",
            "y_label": "sup error",
        }
    log.info("d=%d, max sup error %s, max norm %s", basis.d, report["max_sup_error"], report["max_norm"])
    return report, violations
