import copy
from typing import Any, Dict, Type, cast, TypeVar

import tomlkit


T = TypeVar("T")


DEFAULT_SETTINGS_FILE = "lossprobe.toml"


class LossprobeConfig:
    """
    Package settings. Library code reads its numeric defaults from here,
    so a `lossprobe.toml` file changes them for every command
    """

    _defaults: Dict[str, Any] = {
        "lossprobe": {
            "name": "lossprobe",
            "log_level": "INFO",
            "workers": 4,
        },
        "numerics": {
            "tolerance": 1e-9,
            "dense_grid": 1024,
            "smoothing_grid": 512,
            "default_bandwidth": 0.1,
            "default_bins": 10,
            "noise_sigmas": 3.0,
        },
        "cross_entropy": {"eta": 0.01},
        "logistic": {"learning_rate": 0.1, "iterations": 2000},
        "naive_bayes": {"variance_floor": 1e-6},
        "tree": {"max_depth": 3, "min_leaf": 5},
        "stump_ensemble": {"rounds": 50, "learning_rate": 0.1},
        "ridge": {"penalty": 1e-3},
        "wal": {"quantiles": 32},
        "nonproper": {"grid_points": 257},
        "experiment": {
            "warp_constant": 0.9,
            "min_spearman": 0.0,
            "min_concordance": 0.8,
            "calibrated_within_noise": True,
        },
    }
    _config: Dict[str, Any] = copy.deepcopy(_defaults)

    @classmethod
    def get(cls, *keys: str, typ: Type[T] = cast(Type[T], None)) -> T:
        """
        Gets a settings field and optionally checks it against the given type.
        Integers are accepted where a float is asked for
        """
        current = cls._config
        for key in keys:
            if key in current:
                current = current[key]
            else:
                raise KeyError(f"config for {'.'.join(keys)} not found")
        if hasattr(current, "unwrap"):
            current = current.unwrap()
        if typ is not None:
            if typ == float and isinstance(current, int) and not isinstance(current, bool):
                return cast(T, float(current))
            if not isinstance(current, typ):
                raise AssertionError(
                    f"type of {'.'.join(keys)} ({current.__class__}) is not {typ}"
                )
        return cast(T, current)

    @staticmethod
    def _merge(default, user):
        for key, value in user.items():
            if (
                isinstance(value, dict)
                and key in default
                and isinstance(default[key], dict)
            ):
                default[key] = LossprobeConfig._merge(default[key], value)
            else:
                default[key] = value
        return default

    @classmethod
    def load(cls, path: str):
        """
        Loads a TOML settings file on top of the current settings.
        A missing file leaves the settings untouched
        """
        try:
            with open(path, "r", encoding="utf-8") as config_file:
                toml_config = tomlkit.loads(config_file.read())
        except FileNotFoundError:
            return
        cls._config = cls._merge(cls._config, toml_config.unwrap())

    @classmethod
    def reset(cls):
        """
        Restores the built-in defaults
        """
        cls._config = copy.deepcopy(cls._defaults)

    @classmethod
    def dumps(cls, *keys: str) -> str:
        """
        Dumps the given sections (all of them when none is given) as TOML
        """
        temp = tomlkit.document()
        for key in keys or tuple(cls._config.keys()):
            temp[key] = cls._config[key]

        return tomlkit.dumps(temp)
