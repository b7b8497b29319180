"""Run configuration: TOML file merged with environment and CLI overrides.

One file drives every command.  Sections mirror the library layers
([model], [train], ...) plus [run] for the seed / output directory and
[data] for input paths.  Precedence, lowest to highest: built-in defaults,
config file, environment variables, --set options, dedicated flags.

Environment overrides use the prefix ``STFACT_`` with section and key
joined by a double underscore, e.g. ``STFACT_TRAIN__EPOCHS=50``.  Values
are parsed as TOML scalars, so strings need no quotes but booleans are
``true``/``false``.  Unknown sections or keys are rejected outright.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import tomli

from .errors import DataError
from .generative import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "STFACT_"

DEFAULTS: dict[str, dict] = {
    "run": {"seed": 0, "out": "out", "threads": 0},
    "model": {
        "k": 2,
        "d_z": 2,
        "d_t": 4,
        "d_e": 8,
        "s": 1,
        "u": 0,
        "factor_head": "rbf",
        "sigma_y": 0.1,
        "variant": "a",
        "transition_form": "gated",
        "emission_form": "mlp",
    },
    "train": {
        "epochs": 200,
        "lr": 0.01,
        "anneal_epochs": 100,
        "batch_size": 0,
        "checkpoint_every": 0,
        "early_stop": False,
        "early_stop_window": 20,
        "early_stop_tol": 1e-4,
    },
    "data": {
        "train": "",
        "test": "",
        "grid": "",
        "controls": "",
        "test_controls": "",
        "truth": "",
        "checkpoint": "",
    },
    "simulate": {
        "kind": "toy",
        "n_instances": 100,
        "t_steps": 15,
        "sigma_y": 0.1,
        "grid_points": 10,
        "n_sources": 30,
        "n_clusters": 3,
        "t_total": 150,
        "block_len": 5,
        "snr_db": 5.0,
        "source_grid_points": 20,
        "n_days": 28,
        "intervals_per_day": 48,
        "n_locations": 20,
        "missing_frac": 0.0,
        "blackout_days": 0,
    },
    "forecast": {"refit_steps": 25, "refit_lr": 0.1},
    "loglik": {"samples": 100, "heldout_steps": 200, "heldout_lr": 0.01},
}


@dataclass
class RunConfig:
    """Validated configuration for one command invocation."""

    sections: dict[str, dict]

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @property
    def seed(self) -> int:
        return self.sections["run"]["seed"]

    @property
    def out(self) -> str:
        return self.sections["run"]["out"]

    def model_config(self, d_obs: int | None = None) -> ModelConfig:
        return ModelConfig(d_obs=d_obs, **self.sections["model"])

    def train_config(self, checkpoint_dir=None) -> TrainConfig:
        return TrainConfig(
            seed=self.seed, checkpoint_dir=checkpoint_dir, **self.sections["train"]
        )


def _check_value(section: str, key: str, value, default):
    """Coerce value to the default's type or reject it."""
    where = f"config key {section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise DataError(f"{where} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise DataError(f"{where} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise DataError(f"{where} expects a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise DataError(f"{where} expects a string, got {value!r}")
    return value


def _merge_one(cfg: dict, section: str, key: str, value) -> None:
    if section not in cfg:
        raise DataError(f"unknown config section '{section}'")
    if key not in cfg[section]:
        raise DataError(f"unknown config key '{section}.{key}'")
    cfg[section][key] = _check_value(section, key, value, DEFAULTS[section][key])


def _parse_scalar(text: str):
    """Parse one override value with TOML scalar rules; bare words stay strings."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def load_config(
    path=None,
    env: Mapping[str, str] | None = None,
    sets: list[str] = (),
    seed: int | None = None,
    out: str | None = None,
    threads: int | None = None,
) -> RunConfig:
    """Assemble the run configuration from all override layers."""
    cfg = copy.deepcopy(DEFAULTS)

    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise DataError(f"cannot read config file {path}: {e}") from e
        try:
            parsed = tomli.loads(text)
        except tomli.TOMLDecodeError as e:
            raise DataError(f"{path}: invalid TOML: {e}") from e
        for section, table in parsed.items():
            if not isinstance(table, dict):
                raise DataError(f"{path}: top-level key '{section}' must be a section")
            for key, value in table.items():
                _merge_one(cfg, section, key, value)

    if env is None:
        env = os.environ
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :]
        if "__" not in rest:
            raise DataError(f"malformed override variable {name}: expected SECTION__KEY")
        section, key = rest.split("__", 1)
        _merge_one(cfg, section.lower(), key.lower(), _parse_scalar(env[name]))

    for entry in sets:
        if "=" not in entry:
            raise DataError(f"malformed --set '{entry}': expected SECTION.KEY=VALUE")
        target, raw = entry.split("=", 1)
        if "." not in target:
            raise DataError(f"malformed --set '{entry}': expected SECTION.KEY=VALUE")
        section, key = target.split(".", 1)
        _merge_one(cfg, section, key, _parse_scalar(raw))

    if seed is not None:
        _merge_one(cfg, "run", "seed", seed)
    if out is not None:
        _merge_one(cfg, "run", "out", out)
    if threads is not None:
        _merge_one(cfg, "run", "threads", threads)
    return RunConfig(cfg)
