# pylint: skip-file
import unittest

import numpy as np

from lossprobe.data import Dataset, synth_generate
from lossprobe.exceptions import ArityError, ConfigError, DataError, UnsupportedRepresentation
from lossprobe.predictors import (
    BlendedPredictor,
    ConstantPredictor,
    FeatureView,
    LogisticPredictor,
    StumpEnsemblePredictor,
    TablePredictor,
    TreePredictor,
    ViewLevel,
    data_views,
    feature_view,
    feature_views,
    fit,
    predictor_from_dict,
)
from lossprobe.regression import RegressionStump, RegressionTree


def toy_tree() -> TreePredictor:
    X = np.arange(8.0)[:, None]
    y = np.array([0, 0, 1, 1, 2, 2, 3, 3]) / 3
    return TreePredictor(RegressionTree.fit(X, y, max_depth=2, min_leaf=1), 1)


class TestFit(unittest.TestCase):

    def test_constant(self):
        data = synth_generate({"n": 20}, seed=0)
        p = fit({"family": "constant", "value": 0.5}, data)
        np.testing.assert_array_equal(p.predict_batch(data.features), 0.5)

    def test_logistic_separable(self):
        X = np.array([[-1.0]] * 100 + [[1.0]] * 100)
        y = np.array([0] * 100 + [1] * 100)
        p = fit({"family": "logistic"}, Dataset(X, y))
        accuracy = np.mean((p.predict_batch(X) >= 0.5) == (y == 1))
        self.assertEqual(accuracy, 1.0)

    def test_table_is_empirical_mean(self):
        X = np.array([[0.0], [0.0], [0.0], [1.0], [1.0]])
        y = np.array([1, 0, 1, 0, 0])
        p = fit({"family": "table"}, Dataset(X, y))
        self.assertAlmostEqual(p.predict([0.0]), 2 / 3)
        self.assertEqual(p.predict([1.0]), 0.0)
        self.assertAlmostEqual(p.predict([5.0]), 0.4)

    def test_table_calibrated(self):
        rng = np.random.default_rng(0)
        X = rng.integers(0, 4, size=(300, 2)).astype(float)
        y = (rng.random(300) < 0.3 + 0.1 * X[:, 0]).astype(int)
        p = fit({"family": "table"}, Dataset(X, y))
        preds = p.predict_batch(X)
        for v in np.unique(preds):
            self.assertAlmostEqual(float(y[preds == v].mean()), float(v))

    def test_families_stay_in_range(self):
        data = synth_generate({"n": 200, "d": 3}, seed=1)
        for family in ("logistic", "naive-bayes", "tree", "stump-ensemble", "table"):
            p = fit({"family": family}, data)
            preds = p.predict_batch(data.features)
            self.assertTrue(np.all((preds >= 0.0) & (preds <= 1.0)), family)
            self.assertTrue(p.training_log, family)

    def test_errors(self):
        data = synth_generate({"n": 20}, seed=0)
        with self.assertRaises(ConfigError):
            fit({"family": "svm"}, data)
        with self.assertRaises(DataError):
            fit({"family": "logistic"}, Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int)))
        with self.assertRaises(DataError):
            fit({"family": "naive-bayes"}, Dataset(np.ones((4, 1)), np.ones(4, dtype=int)))

    def test_settings_override(self):
        data = synth_generate({"n": 60}, seed=2)
        p = fit({"family": "stump-ensemble", "rounds": 3}, data)
        self.assertLessEqual(len(p.stumps), 3)


class TestPredict(unittest.TestCase):

    def test_constant(self):
        self.assertEqual(ConstantPredictor(0.7).predict([1.0, 2.0, 3.0]), 0.7)
        with self.assertRaises(ConfigError):
            ConstantPredictor(1.5)

    def test_zero_logistic(self):
        self.assertEqual(LogisticPredictor([0.0, 0.0], 0.0).predict([3.0, -1.0]), 0.5)

    def test_ensemble_clamped(self):
        p = StumpEnsemblePredictor(1.0, [RegressionStump(0, 0.0, 0.3, 0.3)], 1.0)
        self.assertEqual(p.predict([2.0]), 1.0)

    def test_arity(self):
        with self.assertRaises(ArityError):
            LogisticPredictor([1.0, 2.0], 0.0).predict([1.0])
        with self.assertRaises(ArityError):
            ConstantPredictor(0.5).predict([[1.0]])

    def test_blend(self):
        p = BlendedPredictor(ConstantPredictor(0.1), 0.5, 0.9)
        self.assertAlmostEqual(p.predict([0.0]), 0.5)
        with self.assertRaises(ConfigError):
            BlendedPredictor(ConstantPredictor(0.1), 1.5, 0.9)


class TestSerialization(unittest.TestCase):

    def test_round_trips(self):
        data = synth_generate({"n": 120, "d": 3}, seed=3)
        predictors = [
            fit({"family": family}, data)
            for family in ("constant", "table", "logistic", "naive-bayes", "tree", "stump-ensemble")
        ]
        predictors.append(BlendedPredictor(predictors[2], 0.25, 0.9))
        for p in predictors:
            again = predictor_from_dict(p.to_dict())
            self.assertEqual(again.family, p.family)
            np.testing.assert_allclose(
                again.predict_batch(data.features), p.predict_batch(data.features), rtol=0, atol=1e-15
            )

    def test_unknown_family(self):
        with self.assertRaises(ConfigError):
            predictor_from_dict({"family": "svm"})


class TestFeatureViews(unittest.TestCase):

    def test_prediction_only(self):
        view = feature_view(ViewLevel.PREDICTION_ONLY, ConstantPredictor(0.5), [1.0, 2.0])
        self.assertEqual(view, FeatureView(level=ViewLevel.PREDICTION_ONLY, prediction=0.5))

    def test_input_aware(self):
        view = feature_view(ViewLevel.INPUT_AWARE, ConstantPredictor(0.5), [1.0, 2.0])
        self.assertEqual(view.input_features, (1.0, 2.0))
        self.assertIsNone(view.representation)

    def test_internal_tree(self):
        tree = toy_tree()
        self.assertEqual(tree.tree.n_leaves, 4)
        view = feature_view(ViewLevel.INTERNAL, tree, [5.0])
        self.assertEqual(view.representation, (0.0, 0.0, 1.0, 0.0))
        self.assertEqual(view.representation_source, "internal")
        self.assertEqual(view.level, ViewLevel.REPRESENTATION_AWARE)

    def test_internal_families(self):
        p = LogisticPredictor([2.0], -1.0)
        view = feature_view(ViewLevel.INTERNAL, p, [1.0])
        self.assertEqual(view.representation, (1.0,))
        ensemble = StumpEnsemblePredictor(0.5, [RegressionStump(0, 0.0, -0.1, 0.2)], 0.5, 1)
        self.assertEqual(feature_view(ViewLevel.INTERNAL, ensemble, [1.0]).representation, (0.2,))
        with self.assertRaises(UnsupportedRepresentation):
            feature_view(ViewLevel.INTERNAL, ConstantPredictor(0.5), [1.0])

    def test_external(self):
        p = ConstantPredictor(0.5)
        with self.assertRaises(ConfigError):
            feature_view(ViewLevel.EXTERNAL, p, [1.0])
        with self.assertRaises(ConfigError):
            feature_view(ViewLevel.INPUT_AWARE, p, [1.0], ext_repr=[0.3])
        view = feature_view(ViewLevel.EXTERNAL, p, [1.0], ext_repr=[0.3, 0.4])
        self.assertEqual(view.representation, (0.3, 0.4))
        self.assertEqual(view.representation_source, "external")

    def test_batch_matches_rows(self):
        data = synth_generate({"n": 10, "representation_dims": 2}, seed=0)
        p = fit({"family": "logistic"}, data)
        views = data_views(ViewLevel.EXTERNAL, p, data)
        self.assertEqual(views.matrix().shape, (10, 1 + 4 + 2))
        for i in range(10):
            row = views.row(i)
            single = feature_view(ViewLevel.EXTERNAL, p, data.features[i], data.representation[i])
            self.assertAlmostEqual(row.prediction, single.prediction, places=12)
            self.assertEqual(row.input_features, single.input_features)
            self.assertEqual(row.representation, single.representation)
            self.assertEqual(row.level, single.level)

    def test_unknown_level(self):
        with self.assertRaises(ConfigError):
            feature_views("everything", ConstantPredictor(0.5), np.zeros((1, 1)))

    def test_missing_external(self):
        data = synth_generate({"n": 10}, seed=0)
        with self.assertRaises(ConfigError):
            data_views(ViewLevel.EXTERNAL, ConstantPredictor(0.5), data)


if __name__ == "__main__":
    unittest.main()
