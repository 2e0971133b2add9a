# pylint: skip-file
import unittest
from unittest.mock import patch

import numpy as np

from lossprobe.data import Dataset, synth_generate
from lossprobe.exceptions import BasisViolation, ConfigError, DataError, DomainError, IterationCap
from lossprobe.losses import sample_lipschitz_loss, squared_loss
from lossprobe.mc_boost import (
    BoostedPredictor,
    StumpClass,
    basis_fit,
    gd_update,
    lipschitz_basis,
    lipschitz_learner,
    mc_all_lipschitz,
    product_class_mc,
    round_cap,
    weak_agnostic_learn,
)
from lossprobe.multicalibration import mce_from_views
from lossprobe.predictors import ConstantPredictor, ViewBatch, ViewLevel, data_views, predictor_from_dict
from lossprobe.weight_functions import BasisTest, ConstantTest, ProductTest, SubgroupTest


def one_point() -> Dataset:
    return Dataset(np.zeros((1, 1)), np.array([1]))


def prediction_views(values) -> ViewBatch:
    return ViewBatch(level=ViewLevel.PREDICTION_ONLY, predictions=np.asarray(values, dtype=float))


class TestRoundCap(unittest.TestCase):

    def test_values(self):
        self.assertEqual(round_cap(1.0), 4)
        self.assertEqual(round_cap(0.2), 100)
        self.assertEqual(round_cap(0.1), 400)
        self.assertEqual(round_cap(0.3), 45)

    def test_alpha(self):
        for alpha in (0.0, -0.1, 1.5):
            with self.assertRaises(ConfigError):
                round_cap(alpha)


class TestWeakLearner(unittest.TestCase):

    def test_inclusive_threshold(self):
        views = prediction_views([0.2, 0.4, 0.6])
        outcome = weak_agnostic_learn(views, np.full(3, 0.3), StumpClass(quantiles=2), 0.6)
        self.assertFalse(outcome.is_bottom)
        self.assertEqual(outcome.hypothesis.id, "const(1.0)")
        self.assertAlmostEqual(outcome.achieved_correlation, 0.3)

    def test_bottom(self):
        views = prediction_views([0.2, 0.4, 0.6])
        outcome = weak_agnostic_learn(views, np.full(3, 0.3), StumpClass(quantiles=2), 0.7)
        self.assertTrue(outcome.is_bottom)
        self.assertAlmostEqual(outcome.achieved_correlation, 0.3)

    def test_finds_stump(self):
        views = prediction_views([0.1, 0.2, 0.8, 0.9])
        z = np.array([-0.5, -0.5, 0.5, 0.5])
        outcome = weak_agnostic_learn(views, z, StumpClass(quantiles=4), 0.5)
        self.assertEqual(outcome.hypothesis.direction, ">=")
        self.assertAlmostEqual(outcome.achieved_correlation, 0.25)
        np.testing.assert_array_equal(outcome.hypothesis.evaluate(views), [0, 0, 1, 1])

    def test_scan_matches_enumeration(self):
        rng = np.random.default_rng(2)
        inputs = rng.standard_normal((40, 2))
        views = ViewBatch(
            level=ViewLevel.INPUT_AWARE,
            predictions=rng.random(40),
            inputs=inputs,
            groups={"g": inputs[:, 0] > 0},
        )
        z = rng.standard_normal(40)
        learner = StumpClass(quantiles=5, extra=(SubgroupTest("g"), SubgroupTest("g", -1)))
        direct = [float(np.mean(f.evaluate(views) * z)) for f in learner.enumerate(views)]
        scanned = np.concatenate([values for values, _ in learner.scan(views, z)])
        np.testing.assert_allclose(scanned, direct, atol=1e-12)

    def test_enumeration_size(self):
        functions = StumpClass(quantiles=2).enumerate(prediction_views([0.1, 0.5, 0.9]))
        self.assertEqual(len(functions), 2 + 3 * 4)

    def test_errors(self):
        with self.assertRaises(DataError):
            weak_agnostic_learn(prediction_views([]), np.zeros(0), StumpClass(), 0.5)
        with self.assertRaises(DataError):
            weak_agnostic_learn(prediction_views([0.5]), np.zeros(2), StumpClass(), 0.5)
        with self.assertRaises(ConfigError):
            weak_agnostic_learn(prediction_views([0.5]), np.zeros(1), StumpClass(), 0.0)


class TestGdUpdate(unittest.TestCase):

    def test_step(self):
        p = ConstantPredictor(0.2, 1)
        updated = gd_update(p, ConstantTest(1.0), 0.5)
        self.assertAlmostEqual(updated.predict([0.0]), 0.7)
        twice = gd_update(updated, ConstantTest(1.0), 0.5)
        self.assertEqual(len(twice.updates), 2)
        self.assertEqual(twice.predict([0.0]), 1.0)

    def test_zero_step(self):
        p = ConstantPredictor(0.2, 1)
        self.assertIs(gd_update(p, ConstantTest(1.0), 0.0), p)

    def test_beta(self):
        with self.assertRaises(DomainError):
            gd_update(ConstantPredictor(0.2), ConstantTest(1.0), 1.5)

    def test_squared_error_drop(self):
        rng = np.random.default_rng(1)
        z = rng.random(50)
        p = ConstantPredictor(0.2, 1)
        X = np.zeros((50, 1))
        beta = float(np.mean(z - 0.2))
        updated = gd_update(p, ConstantTest(1.0), beta)
        before = np.mean((z - p.predict_batch(X)) ** 2)
        after = np.mean((z - updated.predict_batch(X)) ** 2)
        self.assertGreaterEqual(before - after, beta**2 - 1e-12)

    def test_external_forbidden(self):
        with self.assertRaises(ConfigError):
            BoostedPredictor(ConstantPredictor(0.5), ViewLevel.EXTERNAL)


class TestProductClassMc(unittest.TestCase):

    def test_one_point_takes_five_rounds(self):
        predictor, trace = product_class_mc(one_point(), StumpClass(), [BasisTest(None)], 0.2)
        self.assertEqual(len(trace.rounds), 5)
        self.assertEqual(trace.terminated_by, "audit-clean")
        self.assertEqual(trace.cap, 100)
        self.assertAlmostEqual(predictor.predict([0.0]), 1.0)
        potentials = [r.potential for r in trace.rounds]
        self.assertTrue(all(b < a for a, b in zip(potentials, potentials[1:])))
        self.assertEqual(len(trace.json_lines().splitlines()), 5)

    def test_iteration_cap(self):
        with patch("lossprobe.mc_boost.round_cap", return_value=2):
            with self.assertRaises(IterationCap) as ctx:
                product_class_mc(one_point(), StumpClass(), [BasisTest(None)], 0.2)
        trace = ctx.exception.trace
        self.assertEqual(len(trace.rounds), 2)
        self.assertEqual(trace.terminated_by, "iteration-cap")

    def test_round_trip(self):
        predictor, _ = product_class_mc(one_point(), StumpClass(), [BasisTest(None)], 0.2)
        again = predictor_from_dict(predictor.to_dict())
        self.assertAlmostEqual(again.predict([0.0]), predictor.predict([0.0]))

    def test_subgroups_multicalibrated(self):
        data = synth_generate({"n": 400, "d": 3}, seed=3)
        B = [SubgroupTest(name) for name in sorted(data.subgroups)]
        alpha = 0.1
        predictor, trace = product_class_mc(data, StumpClass(), B, alpha, level=ViewLevel.INPUT_AWARE)
        self.assertEqual(trace.terminated_by, "audit-clean")
        self.assertLessEqual(len(trace.rounds), round_cap(alpha))
        views = data_views(predictor.level, predictor.base, data)
        final = views.with_predictions(predictor.apply(views))
        for b in B:
            z = b.evaluate(final) * (data.labels - final.predictions)
            self.assertTrue(weak_agnostic_learn(final, z, StumpClass(), alpha).is_bottom, b.id)

    def test_p_star_target(self):
        data = synth_generate({"n": 200, "d": 2}, seed=0)
        _, trace = product_class_mc(data, StumpClass(), [BasisTest(None)], 0.2, target="p_star")
        self.assertEqual(trace.target, "p_star")
        for r in trace.rounds:
            self.assertEqual(r.potential, r.p_star_distance)
            self.assertLess(r.p_star_distance, trace.initial_p_star_distance)

    def test_arguments(self):
        with self.assertRaises(ConfigError):
            product_class_mc(one_point(), StumpClass(), [], 0.2)
        with self.assertRaises(ConfigError):
            product_class_mc(one_point(), StumpClass(), [BasisTest(None)], 0.2, target="p_star")
        with self.assertRaises(ConfigError):
            product_class_mc(one_point(), StumpClass(), [BasisTest(None)], 0.2, target="oracle")

    def test_shard_size(self):
        with self.assertRaises(ConfigError):
            product_class_mc(one_point(), StumpClass(), [BasisTest(None)], 0.2, shard_size=0)
        with self.assertLogs("lossprobe.mc_boost", level="WARNING") as logs:
            _, trace = product_class_mc(one_point(), StumpClass(), [BasisTest(None)], 0.2, shard_size=5)
        self.assertIn("exceeds the 1 rows", logs.output[0])
        self.assertEqual(len(trace.rounds), 5)


class TestBasis(unittest.TestCase):

    def test_size(self):
        basis = lipschitz_basis(0.5)
        self.assertEqual(basis.d, 5)
        self.assertEqual(basis.thresholds, (0.25, 0.5, 0.75, 1.0))
        self.assertEqual(lipschitz_basis(0.1).d, 21)
        self.assertEqual(lipschitz_basis(1.0).d, 3)
        self.assertEqual([f.id for f in basis.functions][:2], ["basis(1)", "basis(>=0.25)"])
        with self.assertRaises(DomainError):
            lipschitz_basis(0.0)

    def test_fits_within_bounds(self):
        for epsilon in (0.5, 0.2, 0.1):
            basis = lipschitz_basis(epsilon)
            losses = [sample_lipschitz_loss(seed, 1 + seed % 4) for seed in range(100)]
            losses.append(squared_loss())
            for loss in losses:
                fit = basis_fit(basis, loss.slope_fn, monotone=True)
                self.assertTrue(fit.within_bounds, loss.name)
                self.assertEqual(len(fit.coefficients), basis.d)

    def test_violation(self):
        basis = lipschitz_basis(0.5)
        fit = basis_fit(basis, lambda v: np.sin(40.0 * v))
        self.assertFalse(fit.within_bounds)
        with self.assertRaises(BasisViolation):
            basis_fit(basis, lambda v: np.sin(40.0 * v), monotone=True)


class TestLipschitzPipeline(unittest.TestCase):

    def test_certificate(self):
        data = synth_generate({"n": 400, "d": 3, "weight_scale": 3.0}, seed=7)
        predictor, certificate = mc_all_lipschitz(
            data, StumpClass(quantiles=8), alpha=0.1, epsilon=0.5, level=ViewLevel.INPUT_AWARE, panel_size=5
        )
        self.assertTrue(certificate.holds)
        self.assertEqual(certificate.d, 5)
        self.assertAlmostEqual(certificate.bound, 4.0 * 4.0 * 0.1 + 4.0 * 0.5)
        self.assertEqual(certificate.terminated_by, "audit-clean")
        self.assertGreater(certificate.rounds, 0)
        self.assertLessEqual(certificate.rounds, 400)
        self.assertEqual(certificate.to_dict()["panel_losses"], 5)
        self.assertEqual(predictor.level, ViewLevel.INPUT_AWARE)


class TestBoostingGuarantees(unittest.TestCase):
    """
    Seeded runs at n = 2000, alpha = 0.1 over the Lipschitz basis
    """

    alpha = 0.1
    epsilon = 0.5

    def boost(self, seed: int, target: str):
        data = synth_generate({"n": 2000, "d": 3, "weight_scale": 3.0}, seed=seed)
        predictor, certificate = mc_all_lipschitz(
            data,
            StumpClass(quantiles=8),
            alpha=self.alpha,
            epsilon=self.epsilon,
            level=ViewLevel.INPUT_AWARE,
            target=target,
            panel_size=2,
            panel_seed=seed,
        )
        return data, predictor, certificate

    def assert_potential_drops(self, start, values):
        previous = start
        for value in values:
            self.assertGreaterEqual(previous - value, self.alpha**2 / 4.0 - 1e-9)
            previous = value

    def test_exhaustive_product_class_error(self):
        basis = lipschitz_basis(self.epsilon)
        for seed in range(20):
            with self.subTest(seed=seed):
                data, predictor, certificate = self.boost(seed, "labels")
                trace = certificate.trace
                self.assertEqual(trace.terminated_by, "audit-clean")
                self.assertLessEqual(len(trace.rounds), round_cap(self.alpha))
                self.assertTrue(certificate.holds)
                self.assert_potential_drops(trace.initial_potential, [r.potential for r in trace.rounds])

                views = data_views(predictor.level, predictor.base, data)
                final = views.with_predictions(predictor.apply(views))
                A = lipschitz_learner(StumpClass(quantiles=8), basis).enumerate(final)
                C = [ProductTest(b, a) for b in basis.functions for a in A]
                report = mce_from_views(C, final, data.labels - final.predictions)
                self.assertLessEqual(report.value, self.alpha / 2.0 + 1e-9)

    def test_p_star_distance_drops(self):
        for seed in range(20):
            with self.subTest(seed=seed):
                _, _, certificate = self.boost(seed, "p_star")
                trace = certificate.trace
                self.assertEqual(trace.terminated_by, "audit-clean")
                distances = [r.p_star_distance for r in trace.rounds]
                self.assert_potential_drops(trace.initial_p_star_distance, distances)

    def test_panel_decreases_on_miscalibrated_start(self):
        data = synth_generate({"n": 1000, "d": 3, "p_star_form": "interaction"}, seed=11)
        _, certificate = mc_all_lipschitz(
            data,
            StumpClass(quantiles=8),
            alpha=self.alpha,
            epsilon=self.epsilon,
            level=ViewLevel.INPUT_AWARE,
            initial=ConstantPredictor(0.9, data.d),
            panel_size=5,
        )
        self.assertGreater(certificate.rounds, 0)
        self.assertGreater(certificate.panel_before.max_advantage, 0.0)
        self.assertLess(certificate.panel_after.max_advantage, certificate.panel_before.max_advantage)


if __name__ == "__main__":
    unittest.main()
