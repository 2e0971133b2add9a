# pylint: skip-file
import json
import os
import shutil
import unittest
from types import SimpleNamespace
from unittest.mock import patch

from click.testing import CliRunner

from lossprobe.cli.harness import build_dataset, experiment_checks, experiment_violations, sign_concordance
from lossprobe.cli.main import VERSION_NUM, cli
from lossprobe.cli.utils import load_command_config, snake_keys
from lossprobe.config import LossprobeConfig
from lossprobe.exceptions import ConfigError


ZERO_LABELS = {"source": "synthetic", "spec": {"n": 200, "p_star_form": "constant", "base_rate": 0.0}}

AUDIT_CONFIG = {
    "dataset": ZERO_LABELS,
    "predictor": {"family": "constant", "value": 0.9},
    "lpAlgorithm": "constant",
    "level": "prediction-only",
}


class CliCase(unittest.TestCase):

    def setUp(self):
        self.runner = CliRunner()
        self.addCleanup(LossprobeConfig.reset)
        # Equivalent of TestCase.enterContext (3.11+) for Python 3.10
        _cm = self.runner.isolated_filesystem()
        self.cwd = _cm.__enter__()
        self.addCleanup(_cm.__exit__, None, None, None)

    def write_config(self, doc, name: str = "config.json") -> str:
        with open(name, "w", encoding="utf-8") as f:
            json.dump(doc, f)
        return name

    def invoke(self, *args: str, code: int = 0):
        result = self.runner.invoke(cli, list(args))
        self.assertEqual(result.exit_code, code, result.output)
        return result

    def report(self, out: str = "out"):
        with open(os.path.join(out, "report.json"), encoding="utf-8") as f:
            return json.load(f)


class TestVersion(CliCase):

    def test_version(self):
        result = self.invoke("version")
        self.assertEqual(result.output.strip(), VERSION_NUM)


class TestBasisCheck(CliCase):

    def test_small_basis(self):
        self.invoke("basis-check", "--epsilon", "0.5", "--n-losses", "3", "--out", "out")
        report = self.report()
        self.assertEqual(report["basis"]["d"], 5)
        self.assertEqual(report["violations"], [])
        self.assertLessEqual(report["max_sup_error"], 0.5)
        for name in ("tables/basis-fits.csv", "plots/basis-fits.svg", "tables/SCHEMA.md", "settings.toml"):
            self.assertTrue(os.path.isfile(os.path.join("out", name)), name)
        with open("out/resolved-config.json", encoding="utf-8") as f:
            self.assertEqual(json.load(f)["n_losses"], 3)

    def test_no_losses(self):
        self.invoke("basis-check", "--n-losses", "0")
        report = self.report()
        self.assertEqual(report["max_sup_error"], 0.0)
        self.assertFalse(os.path.exists("out/plots/basis-fits.svg"))

    def test_negative_losses(self):
        result = self.invoke("basis-check", "--n-losses", "-1", code=2)
        self.assertIn("ConfigError", result.stderr)

    def test_settings_file(self):
        with open("custom.toml", "w", encoding="utf-8") as f:
            f.write("[numerics]\ndense_grid = 256\n")
        self.invoke("--settings", "custom.toml", "basis-check", "--n-losses", "1")
        with open("out/settings.toml", encoding="utf-8") as f:
            self.assertIn("dense_grid = 256", f.read())


class TestAudit(CliCase):

    def test_constant_model(self):
        # p = 0.9 everywhere, labels all zero
        self.invoke("audit", "--config", self.write_config(AUDIT_CONFIG), "--seed", "3")
        report = self.report()
        self.assertAlmostEqual(report["advantage"]["advantage"], 0.5184)
        self.assertAlmostEqual(report["witness"]["correlation"], 0.5184)
        self.assertTrue(report["witness"]["bound_holds"])
        self.assertEqual(report["blind_spots"]["points"], [0.5])
        self.assertFalse(report["blind_spots"]["dominated"])
        self.assertTrue(report["sandwich"]["lower_holds"])
        self.assertAlmostEqual(report["calibration"]["binned"], 0.9)
        with open("out/resolved-config.json", encoding="utf-8") as f:
            resolved = json.load(f)
        self.assertEqual(resolved["seed"], 3)
        self.assertEqual(resolved["lp_algorithm"], "constant")

    def test_missing_config_file(self):
        self.invoke("audit", "--config", "absent.json", code=2)

    def test_missing_predictor(self):
        doc = {k: v for k, v in AUDIT_CONFIG.items() if k != "predictor"}
        result = self.invoke("audit", "--config", self.write_config(doc), code=2)
        self.assertIn("predictor", result.stderr)

    def test_bad_level(self):
        doc = {**AUDIT_CONFIG, "level": "everything"}
        self.invoke("audit", "--config", self.write_config(doc), code=2)


class TestTrainLp(CliCase):

    def test_artifacts(self):
        doc = {
            "dataset": {"spec": {"n": 300, "d": 3}},
            "predictor": {"family": "logistic"},
            "lp_algorithm": "tree",
        }
        self.invoke("train-lp", "--config", self.write_config(doc))
        report = self.report()
        self.assertIn("bayes_oracle", report["advantage"])
        with open("out/loss-predictor.json", encoding="utf-8") as f:
            self.assertEqual(json.load(f)["form"], "tree")
        with open("out/predictor.json", encoding="utf-8") as f:
            self.assertEqual(json.load(f)["family"], "logistic")


class TestBoost(CliCase):

    def test_certificate(self):
        doc = {"dataset": {"spec": {"n": 200, "d": 2}}, "alpha": 0.5, "epsilon": 0.5, "panel_size": 2}
        self.invoke("boost", "--config", self.write_config(doc))
        report = self.report()
        self.assertTrue(report["certificate"]["holds"])
        self.assertEqual(report["certificate"]["d"], 5)
        self.assertTrue(os.path.isfile("out/trace.jsonl"))
        self.assertTrue(os.path.isfile("out/predictor.json"))

    def test_iteration_cap(self):
        doc = {"dataset": ZERO_LABELS, "alpha": 0.5, "epsilon": 0.5, "panel_size": 1}
        with patch("lossprobe.mc_boost.round_cap", return_value=0):
            result = self.invoke("boost", "--config", self.write_config(doc), code=1)
        self.assertIn("violation:", result.stderr)
        self.assertTrue(os.path.isfile("out/trace.jsonl"))
        self.assertTrue(os.path.isfile("out/resolved-config.json"))
        self.assertFalse(os.path.exists("out/report.json"))

    def test_missing_alpha(self):
        doc = {"dataset": ZERO_LABELS, "epsilon": 0.5}
        self.invoke("boost", "--config", self.write_config(doc), code=2)


class TestExperiment(CliCase):

    def test_grid(self):
        doc = {
            "datasets": [{"name": "calibrated", "spec": {"n": 300, "d": 3}}],
            "families": ["logistic", "tree", {"family": "stump-ensemble", "rounds": 10}],
            "lp_algorithms": ["ridge", "constant"],
            "metric": "binned",
            "checks": {"calibrated_within_noise": False},
        }
        self.invoke("experiment", "--config", self.write_config(doc))
        report = self.report()
        rows = report["tables"]["advantage-vs-max-ce"]["rows"]
        self.assertEqual(len(rows), 6)
        self.assertEqual([r["family"] for r in rows[:2]], ["logistic", "logistic"])
        self.assertEqual(report["correlation"]["max_ce_vs_advantage"]["points"], 6)
        self.assertEqual(report["calibrated_cells_within_noise"]["cells"], 6)
        self.assertEqual(report["violations"], [])
        self.assertFalse(report["checks"]["calibrated_within_noise"])
        self.assertTrue(os.path.isfile("out/plots/advantage-vs-max-ce.svg"))

    def test_too_few_families(self):
        doc = {
            "datasets": [{"spec": {"n": 50}}],
            "families": ["logistic", "tree"],
            "lp_algorithms": ["ridge", "constant"],
        }
        self.invoke("experiment", "--config", self.write_config(doc), code=2)

    def test_failed_trend_exits_with_violation(self):
        doc = {
            "datasets": [
                {"name": "calibrated", "spec": {"n": 300, "d": 3}},
                {"name": "warped", "spec": {"n": 300, "d": 3, "theta": 0.75}},
            ],
            "families": ["logistic", "tree", {"family": "stump-ensemble", "rounds": 10}],
            "lp_algorithms": ["ridge", "constant"],
            "metric": "binned",
            "checks": {"calibrated_within_noise": False},
        }
        with patch("lossprobe.cli.harness.spearmanr", return_value=SimpleNamespace(statistic=-0.5)):
            result = self.invoke("experiment", "--config", self.write_config(doc), code=1)
        self.assertIn("spearman", result.output)
        report = self.report()
        self.assertTrue(any("spearman" in v for v in report["violations"]))

    def test_unknown_check(self):
        doc = {
            "datasets": [{"spec": {"n": 50}}],
            "families": ["logistic", "tree", {"family": "stump-ensemble", "rounds": 10}],
            "lp_algorithms": ["ridge", "constant"],
            "checks": {"min_pearson": 0.5},
        }
        self.invoke("experiment", "--config", self.write_config(doc), code=2)


def cell(theta, max_ce, adv, noise=0.01, family="logistic"):
    return {
        "dataset": f"theta-{theta}",
        "family": family,
        "algorithm": "ridge",
        "theta": theta,
        "max_subgroup_ce": max_ce,
        "advantage": adv,
        "noise": noise,
    }


class TestExperimentChecks(unittest.TestCase):

    def setUp(self):
        self.addCleanup(LossprobeConfig.reset)
        self.checks = {"min_spearman": 0.0, "min_concordance": 0.8, "calibrated_within_noise": True}

    def test_defaults_and_overrides(self):
        checks = experiment_checks({})
        self.assertEqual(checks, self.checks)
        checks = experiment_checks({"checks": {"min_spearman": 0.5, "calibrated_within_noise": False}})
        self.assertEqual(checks["min_spearman"], 0.5)
        self.assertEqual(checks["min_concordance"], 0.8)
        self.assertFalse(checks["calibrated_within_noise"])

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            experiment_checks({"checks": {"min_pearson": 0.5}})

    def test_monotone_grid_passes(self):
        cells = [cell(0.0, 0.01, 0.0), cell(0.5, 0.1, 0.02), cell(1.0, 0.2, 0.05)]
        self.assertEqual(experiment_violations(cells, self.checks), [])

    def test_reversed_grid_fails(self):
        cells = [cell(0.0, 0.01, 0.05), cell(0.5, 0.1, 0.02), cell(1.0, 0.2, 0.0)]
        violations = experiment_violations(cells, self.checks)
        self.assertEqual(len(violations), 3)
        self.assertIn("spearman", violations[0])
        self.assertIn("concordance", violations[1])
        self.assertIn("calibrated cell theta-0.0/logistic/ridge", violations[2])

    def test_single_theta_skips_trend(self):
        cells = [cell(0.0, 0.01, 0.005), cell(0.0, 0.1, 0.0, family="tree")]
        self.assertEqual(experiment_violations(cells, self.checks), [])
        loose = {**self.checks, "calibrated_within_noise": False}
        noisy = [cell(0.0, 0.01, 0.5)]
        self.assertEqual(experiment_violations(noisy, loose), [])
        self.assertEqual(len(experiment_violations(noisy, self.checks)), 1)


class TestLoadCommandConfig(CliCase):

    def test_subgroup_names_are_kept(self):
        doc = {
            "lpAlgorithm": "tree",
            "dataset": {
                "source": "csv",
                "path": "data.csv",
                "schema": {
                    "label": "label",
                    "features": ["x"],
                    "subgroups": {"Primary-Ed": "education=primary", "HighIncome": "income=high"},
                },
            },
        }
        config = load_command_config(self.write_config(doc))
        self.assertEqual(config["lp_algorithm"], "tree")
        subgroups = config["dataset"]["schema"]["subgroups"]
        self.assertEqual(sorted(subgroups), ["HighIncome", "Primary-Ed"])
        self.assertEqual(subgroups["Primary-Ed"], "education=primary")

    def test_loaded_schema_names_subgroups(self):
        with open("data.csv", "w", encoding="utf-8") as f:
            f.write("label,x,education\n0,1,primary\n1,2,secondary\n")
        doc = {
            "dataset": {
                "source": "csv",
                "path": "data.csv",
                "schema": {"label": "label", "features": ["x"], "subgroups": {"Primary-Ed": "education=primary"}},
            }
        }
        config = load_command_config(self.write_config(doc))
        data = build_dataset(config["dataset"], 0)
        self.assertEqual(list(data.subgroups), ["Primary-Ed"])

    def test_nested_keys_normalized(self):
        self.assertEqual(
            snake_keys({"metricParams": {"bins-count": 3}, "items": [{"lpAlgorithm": "tree"}]}),
            {"metric_params": {"bins_count": 3}, "items": [{"lp_algorithm": "tree"}]},
        )


class TestReport(CliCase):

    def test_rerender(self):
        self.invoke("basis-check", "--epsilon", "0.5", "--n-losses", "2")
        shutil.rmtree("out/tables")
        self.invoke("report", "--out", "out")
        self.assertTrue(os.path.isfile("out/tables/basis-fits.csv"))

    def test_missing_report(self):
        self.invoke("report", "--out", "nowhere", code=2)


class TestSignConcordance(unittest.TestCase):

    def test_counts(self):
        self.assertEqual(sign_concordance([1, 2, 3], [1, 2, 3]), (3, 0))
        self.assertEqual(sign_concordance([1, 2, 3], [3, 2, 1]), (0, 3))
        self.assertEqual(sign_concordance([1, 1, 2], [0, 5, 1]), (1, 1))


if __name__ == "__main__":
    unittest.main()
