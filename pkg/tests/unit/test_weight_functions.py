# pylint: skip-file
import unittest

import numpy as np

from lossprobe.exceptions import ConfigError, EmptySubgroup
from lossprobe.loss_prediction import ConstantLossPredictor
from lossprobe.losses import squared_loss
from lossprobe.predictors import ViewBatch, ViewLevel
from lossprobe.weight_functions import (
    BasisTest,
    ConstantTest,
    EntropyTest,
    LevelSetTest,
    LossWeightedTest,
    ProductTest,
    SlopeTest,
    StumpTest,
    SubgroupTest,
    level_set_tests,
    richest_level,
    subgroup_tests,
    weight_function_from_dict,
)


def views() -> ViewBatch:
    return ViewBatch(
        level=ViewLevel.INPUT_AWARE,
        predictions=np.array([0.0, 0.25, 0.5, 1.0]),
        inputs=np.array([[1.0], [-1.0], [2.0], [0.0]]),
        groups={"a": np.array([True, False, True, False])},
    )


class TestForms(unittest.TestCase):

    def test_constant(self):
        np.testing.assert_array_equal(ConstantTest(-1.0).evaluate(views()), -1.0)
        with self.assertRaises(ConfigError):
            ConstantTest(2.0)

    def test_subgroup(self):
        np.testing.assert_array_equal(SubgroupTest("a", -1).evaluate(views()), [-1, 0, -1, 0])
        with self.assertRaises(EmptySubgroup):
            SubgroupTest("b").evaluate(views())

    def test_level_set_closed_at_one(self):
        np.testing.assert_array_equal(LevelSetTest(0.5, 1.0).evaluate(views()), [0, 0, 1, 1])
        np.testing.assert_array_equal(LevelSetTest(0.0, 0.5).evaluate(views()), [1, 1, 0, 0])

    def test_exact_level_sets(self):
        tests = level_set_tests([0.25, 1.0, 0.25])
        self.assertEqual(len(tests), 4)
        np.testing.assert_array_equal(tests[0].evaluate(views()), [0, 1, 0, 0])
        np.testing.assert_array_equal(tests[2].evaluate(views()), [0, 0, 0, 1])

    def test_stump(self):
        np.testing.assert_array_equal(
            StumpTest(1, 0.5, ">=", 1, ViewLevel.INPUT_AWARE).evaluate(views()), [1, 0, 1, 0]
        )
        np.testing.assert_array_equal(
            StumpTest(0, 0.5, "<", -1, ViewLevel.PREDICTION_ONLY).evaluate(views()), [-1, -1, 0, 0]
        )
        with self.assertRaises(ConfigError):
            StumpTest(0, 0.5, ">", 1, ViewLevel.PREDICTION_ONLY)

    def test_product_level(self):
        product = ProductTest(BasisTest(0.5), StumpTest(1, 0.0, ">=", 1, ViewLevel.INPUT_AWARE))
        self.assertEqual(product.level, ViewLevel.INPUT_AWARE)
        np.testing.assert_array_equal(product.evaluate(views()), [0, 0, 1, 1])

    def test_basis(self):
        np.testing.assert_array_equal(BasisTest(None).evaluate(views()), 1.0)
        np.testing.assert_array_equal(BasisTest(0.25).evaluate(views()), [0, 1, 1, 1])
        self.assertEqual(BasisTest(0.25).id, "basis(>=0.25)")

    def test_entropy_and_slope(self):
        loss = squared_loss()
        np.testing.assert_allclose(EntropyTest(loss, -1).evaluate(views()), [0, -0.1875, -0.25, 0])
        np.testing.assert_allclose(SlopeTest(loss).evaluate(views()), [1, 0.5, 0, -1])

    def test_loss_weighted(self):
        loss = squared_loss()
        f = ConstantLossPredictor(loss, 0.5, ViewLevel.PREDICTION_ONLY)
        c = LossWeightedTest(f, loss, 0.5)
        expected = 0.5 * (0.5 - np.array([0, 0.1875, 0.25, 0])) * np.array([1, 0.5, 0, -1])
        np.testing.assert_allclose(c.evaluate(views()), expected)

    def test_richest_level(self):
        self.assertEqual(richest_level([]), ViewLevel.PREDICTION_ONLY)
        self.assertEqual(
            richest_level([ViewLevel.INPUT_AWARE, ViewLevel.INTERNAL, ViewLevel.PREDICTION_ONLY]),
            ViewLevel.INTERNAL,
        )

    def test_subgroup_tests(self):
        ids = [t.id for t in subgroup_tests(["b", "a"])]
        self.assertEqual(ids, ["group(a)*+1", "group(a)*-1", "group(b)*+1", "group(b)*-1"])


class TestSerialization(unittest.TestCase):

    def test_round_trip(self):
        loss = squared_loss()
        functions = [
            ConstantTest(0.5),
            SubgroupTest("a", -1),
            LevelSetTest(0.0, 0.5, -1),
            StumpTest(1, 0.5, "<", 1, ViewLevel.INPUT_AWARE),
            ProductTest(BasisTest(0.5), ConstantTest(-1.0)),
            BasisTest(None),
            EntropyTest(loss, -1),
            SlopeTest(loss),
            LossWeightedTest(ConstantLossPredictor(loss, 0.3, ViewLevel.PREDICTION_ONLY), loss, 1.0),
        ]
        for c in functions:
            again = weight_function_from_dict(c.to_dict())
            self.assertEqual(again.id, c.id)
            np.testing.assert_allclose(again.evaluate(views()), c.evaluate(views()))

    def test_unknown(self):
        with self.assertRaises(ConfigError):
            weight_function_from_dict({"form": "spline"})


if __name__ == "__main__":
    unittest.main()
