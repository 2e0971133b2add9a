import contextlib
import json
from importlib.metadata import PackageNotFoundError, version as pyver
from typing import Any, Dict, List, Mapping

import click

from lossprobe.cli.harness import (
    run_audit,
    run_basis_check,
    run_boost,
    run_experiment,
    run_train_lp,
    with_seed,
)
from lossprobe.cli.render import emit_outputs
from lossprobe.cli.utils import create_file, load_command_config, write_json
from lossprobe.config import DEFAULT_SETTINGS_FILE, LossprobeConfig
from lossprobe.exceptions import IterationCap, LossprobeError
from lossprobe.logger import root_logger


try:
    VERSION_NUM = pyver("lossprobe")
except PackageNotFoundError:
    VERSION_NUM = "0.0.0+local"


EXIT_VIOLATION = 1
EXIT_ERROR = 2


@contextlib.contextmanager
def errors_exit(ctx: click.Context):
    """
    Library errors end the command with status 2 and their message on stderr
    """
    try:
        yield
    except LossprobeError as e:
        click.echo(str(e), err=True)
        ctx.exit(EXIT_ERROR)


RUN_OPTIONS = (
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON command config"),
    click.option("--out", "output", default="out", show_default=True, help="Output directory"),
    click.option("--seed", type=int, default=None, help="Overrides the config seed"),
)


def run_options(func):
    """
    --config / --out / --seed, shared by every command that runs from a config
    """
    for option in reversed(RUN_OPTIONS):
        func = option(func)
    return func


def write_artifacts(output: str, artifacts: Mapping[str, Any]):
    for name, doc in sorted(artifacts.items()):
        if isinstance(doc, str):
            create_file(output, name, doc)
        else:
            write_json(output, name, doc)


def finish(
    ctx: click.Context,
    output: str,
    resolved: Mapping[str, Any],
    report: Dict[str, Any],
    violations: List[str],
):
    """
    Writes the report, the resolved config, the effective settings and the
    rendered tables and plots, then exits 1 when any assertion failed
    """
    report = {**report, "violations": list(violations)}
    write_json(output, "report.json", report)
    write_json(output, "resolved-config.json", dict(resolved))
    create_file(output, "settings.toml", LossprobeConfig.dumps())
    emit_outputs(output, report)
    if violations:
        for violation in violations:
            click.echo(f"violation: {violation}", err=True)
        ctx.exit(EXIT_VIOLATION)


@click.group(help=f"lossprobe {VERSION_NUM}: loss prediction and multicalibration audits")
@click.option(
    "--settings",
    "settings_file",
    default=DEFAULT_SETTINGS_FILE,
    help=f"Settings file to use [default: {DEFAULT_SETTINGS_FILE}]",
)
@click.option(
    "-l",
    "--log-level",
    "log_level",
    help="Log level for the app",
)
@click.pass_context
def cli(ctx: click.Context, settings_file, log_level):
    """
    The CLI entrypoint
    """
    ctx.ensure_object(dict)
    ctx.obj["settings_file"] = settings_file
    LossprobeConfig.load(settings_file)
    if log_level is not None:
        root_logger.setLevel(log_level.upper())
    else:
        root_logger.setLevel(LossprobeConfig.get("lossprobe", "log_level", typ=str))


@cli.command("version", help="Get lossprobe version")
def version_cli():
    """
    Get lossprobe version
    """
    click.echo(VERSION_NUM)


@cli.command(help="Audits a model by training a loss predictor for it")
@run_options
@click.pass_context
def audit(ctx: click.Context, config_path, output, seed):
    """
    Held-out advantage, the induced witness and calibration metrics
    """
    with errors_exit(ctx):
        resolved = with_seed(load_command_config(config_path), seed)
        report, violations = run_audit(resolved)
    finish(ctx, output, resolved, report, violations)


@cli.command("train-lp", help="Trains and saves a model and its loss predictor")
@run_options
@click.pass_context
def train_lp(ctx: click.Context, config_path, output, seed):
    """
    Trains and saves a model and its loss predictor
    """
    with errors_exit(ctx):
        resolved = with_seed(load_command_config(config_path), seed)
        report, violations, artifacts = run_train_lp(resolved)
    write_artifacts(output, artifacts)
    finish(ctx, output, resolved, report, violations)


@cli.command(help="Advantage vs calibration error across models and loss predictors")
@run_options
@click.pass_context
def experiment(ctx: click.Context, config_path, output, seed):
    """
    Advantage vs calibration error across models and loss predictors
    """
    with errors_exit(ctx):
        resolved = with_seed(load_command_config(config_path), seed)
        report, violations = run_experiment(resolved)
    finish(ctx, output, resolved, report, violations)


@cli.command(help="Boosts a predictor to multicalibration over the Lipschitz basis")
@run_options
@click.pass_context
def boost(ctx: click.Context, config_path, output, seed):
    """
    Runs the Lipschitz pipeline and writes its trace and certificate
    """
    with errors_exit(ctx):
        resolved = with_seed(load_command_config(config_path), seed)
        try:
            report, violations, artifacts = run_boost(resolved)
        except IterationCap as e:
            create_file(output, "trace.jsonl", e.trace.json_lines())
            write_json(output, "resolved-config.json", resolved)
            click.echo(f"violation: {e.reason}", err=True)
            ctx.exit(EXIT_VIOLATION)
    write_artifacts(output, artifacts)
    finish(ctx, output, resolved, report, violations)


@cli.command("basis-check", help="Checks the Lipschitz basis on sampled losses")
@click.option("--epsilon", type=float, default=0.1, show_default=True)
@click.option("--n-losses", "n_losses", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pieces", type=int, default=4, show_default=True)
@click.option("--out", "output", default="out", show_default=True, help="Output directory")
@click.pass_context
def basis_check(ctx: click.Context, epsilon, n_losses, seed, pieces, output):
    """
    Fits sampled superderivatives with the basis; exits 1 on any bound violation
    """
    resolved = {"epsilon": epsilon, "n_losses": n_losses, "seed": seed, "pieces": pieces}
    with errors_exit(ctx):
        report, violations = run_basis_check(epsilon, n_losses, seed, pieces)
    finish(ctx, output, resolved, report, violations)


@cli.command("report", help="Re-renders tables, plots and the CSV schema from a report.json")
@click.option("--out", "output", default="out", show_default=True, help="Directory holding report.json")
@click.pass_context
def report_cli(ctx: click.Context, output):
    """
    Re-renders tables, plots and the CSV schema from a report.json
    """
    try:
        with open(f"{output}/report.json", "r", encoding="utf-8") as report_file:
            doc = json.load(report_file)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        click.echo(f"cannot read {output}/report.json: {e}", err=True)
        ctx.exit(EXIT_ERROR)
    emit_outputs(output, doc)
