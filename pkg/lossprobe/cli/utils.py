import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

import caseconverter
import click
import numpy as np
import pandas as pd

from lossprobe.exceptions import ConfigError


def create_file(output: str, file_name: str, data: str, overwrite: bool = True, parents: bool = True):
    """
    Creates a file in a given path
    """
    p = Path(output) / file_name
    p.parent.mkdir(parents=parents, exist_ok=True)
    if p.is_file() and not overwrite:
        click.echo(f"not overwritten: {file_name}.")
        return
    try:
        action = "overwritten" if p.is_file() else "created"
        with open(p, "w", encoding="utf-8", newline="\n") as file:
            file.write(data)
        click.echo(f"{action}: {file_name}")
    except Exception as e:
        click.echo(f"error while creating file {p}")
        raise e


VERBATIM_KEYS = frozenset({"subgroups"})


def snake_keys(value: Any) -> Any:
    """
    Normalizes option keys to snake_case, so `lpAlgorithm`, `lp-algorithm`
    and `lp_algorithm` mean the same thing. Mappings under VERBATIM_KEYS
    are keyed by user-chosen names and pass through unchanged
    """
    if isinstance(value, Mapping):
        normalized = {}
        for k, v in value.items():
            key = caseconverter.snakecase(str(k))
            normalized[key] = dict(v) if key in VERBATIM_KEYS and isinstance(v, Mapping) else snake_keys(v)
        return normalized
    if isinstance(value, list):
        return [snake_keys(v) for v in value]
    return value


def load_command_config(path: str | None) -> Dict[str, Any]:
    """
    Reads a JSON command config; no path means an empty config
    """
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as config_file:
            doc = json.load(config_file)
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("a command config must be a JSON object")
    return snake_keys(doc)


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {value.__class__.__name__}")


def dumps_json(doc: Any) -> str:
    """
    Deterministic JSON: sorted keys, two-space indent, trailing newline
    """
    return json.dumps(doc, sort_keys=True, indent=2, default=_jsonable) + "\n"


def write_json(output: str, file_name: str, doc: Any):
    create_file(output, file_name, dumps_json(doc))


def table_csv(rows: Sequence[Mapping[str, Any]], columns: List[str]) -> str:
    frame = pd.DataFrame(list(rows), columns=columns)
    return frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")
