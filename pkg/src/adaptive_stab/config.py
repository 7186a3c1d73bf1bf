"""Flat YAML experiment configuration with per-experiment presets."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

EXPERIMENTS = ("osc", "periodic", "pde", "robust-compare", "noise", "switching")


class ConfigError(ValueError):
    pass


# every recognised key with its documentation; values in PRESETS override BASE
SCHEMA: dict[str, str] = {
    "experiment": "one of osc, periodic, pde, robust-compare, noise, switching",
    "grid_n1": "osc: Sigma = {i/N1}; periodic: rho = 1 + i/(2 N1)",
    "grid_n2": "periodic: phases i/N2",
    "grid_n": "pde: Sigma = {2 pi i / N}",
    "training": "explicit list of training parameters (overrides the grid keys)",
    "truth": "true parameter",
    "initial_guess": "initial estimate, must belong to the training set",
    "y0": "initial state (null: the model default)",
    "tau": "update window length",
    "samples": "IO samples per window (null: every auxiliary step)",
    "horizon": "final time",
    "n_global": "random global candidates per window",
    "gamma": "local ball parameter",
    "radius_mode": "linear (radius gamma) or sqrt (radius sqrt(gamma))",
    "noise": "measurement-noise magnitude on auxiliary initial states",
    "seed": "64-bit RNG seed",
    "scheme": "time stepper: euler, cn or cnab",
    "dt_truth": "truth time step",
    "dt_aux": "auxiliary time step",
    "dt_ric": "periodic Riccati time step",
    "ric_tol": "periodic Riccati sweep tolerance (relative to max(1, |Pi|))",
    "are_tol": "algebraic Riccati residual tolerance",
    "max_sweeps": "periodic Riccati sweep cap",
    "phase_shift": "periodic: derive nonzero phases from the zero-phase solution",
    "pde_level_truth": "pde: refinement level of the truth (0, 1 or 2)",
    "pde_level_aux": "pde: refinement level of the auxiliary systems",
    "pde_cells": "pde: cells per side on level 0",
    "pde_nu": "pde: diffusion coefficient",
    "pde_outputs": "pde: number of Neumann eigenfunction outputs",
    "pde_actuators": "pde: actuator boxes [[x1lo, x1hi], [x2lo, x2hi]]",
    "switching": "switching: list of [parameter, dwell] pairs for the truth",
    "ensemble_n": "robust-compare: ensemble size N",
    "ensemble_phase0": "robust-compare: first ensemble phase",
    "rank_phases": "rank-check: ensemble phases",
    "rank_times": "rank-check: evaluation times",
    "norm_every": "decimation of norms.csv rows",
    "jobs": "worker threads",
}

BASE: dict[str, Any] = {
    "experiment": "osc",
    "grid_n1": 5,
    "grid_n2": 1,
    "grid_n": 8,
    "training": None,
    "truth": [0.95],
    "initial_guess": [0.0],
    "y0": [1.0, 1.0],
    "tau": 0.5,
    "samples": None,
    "horizon": 20.0,
    "n_global": 0,
    "gamma": 0.1,
    "radius_mode": "sqrt",
    "noise": 0.0,
    "seed": 0,
    "scheme": "cnab",
    "dt_truth": 1e-3,
    "dt_aux": 1e-3,
    "dt_ric": 1e-2,
    "ric_tol": 1e-9,
    "are_tol": 1e-10,
    "max_sweeps": 200,
    "phase_shift": True,
    "pde_level_truth": 0,
    "pde_level_aux": 0,
    "pde_cells": 8,
    "pde_nu": 0.1,
    "pde_outputs": 3,
    "pde_actuators": [[[0.1, 0.3], [0.1, 0.3]], [[0.7, 0.9], [0.1, 0.3]], [[0.1, 0.3], [0.7, 0.9]], [[0.7, 0.9], [0.7, 0.9]]],
    "switching": None,
    "ensemble_n": 8,
    "ensemble_phase0": 0.05,
    "rank_phases": [0.0, 0.5],
    "rank_times": [0.5],
    "norm_every": 1,
    "jobs": 1,
}

PRESETS: dict[str, dict[str, Any]] = {
    "osc": {},
    "periodic": {
        "grid_n1": 10, "grid_n2": 30, "truth": [1.47, 0.51], "initial_guess": [1.0, 0.0],
        "tau": 0.1, "gamma": 0.02,
    },
    "noise": {
        "grid_n1": 10, "grid_n2": 30, "truth": [1.47, 0.51], "initial_guess": [1.0, 0.0],
        "tau": 0.1, "gamma": 0.02, "noise": 1e-2,
    },
    "pde": {
        "truth": [0.7], "initial_guess": [0.0], "y0": None, "tau": 0.1, "gamma": 1.0, "horizon": 10.0,
    },
    "switching": {
        "truth": [0.7], "initial_guess": [0.0], "y0": None, "tau": 0.1, "gamma": 1.0, "horizon": 28.0,
        "switching": [[0.7, 7.0], [2.0, 7.0], [3.6, 7.0], [5.2, 7.0]],
    },
    "robust-compare": {
        "truth": [1.0, 0.51], "initial_guess": [1.0, 0.05], "tau": 0.2, "gamma": 0.1, "horizon": 20.0,
    },
}


def defaults(experiment: str) -> dict[str, Any]:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    cfg = copy.deepcopy(BASE)
    cfg.update(copy.deepcopy(PRESETS[experiment]))
    cfg["experiment"] = experiment
    return cfg


def _check(cfg: dict[str, Any]) -> None:
    def positive(key):
        if not (isinstance(cfg[key], (int, float)) and cfg[key] > 0):
            raise ConfigError(f"{key} must be a positive number")

    for key in ("tau", "horizon", "dt_truth", "dt_aux", "dt_ric", "ric_tol", "are_tol"):
        positive(key)
    for key in ("n_global", "max_sweeps", "jobs", "norm_every", "grid_n1", "grid_n2", "grid_n", "pde_cells", "pde_outputs"):
        if not isinstance(cfg[key], int) or isinstance(cfg[key], bool) or cfg[key] < 0:
            raise ConfigError(f"{key} must be a nonnegative integer")
    if cfg["jobs"] < 1 or cfg["norm_every"] < 1:
        raise ConfigError("jobs and norm_every must be at least 1")
    if cfg["gamma"] < 0 or cfg["noise"] < 0:
        raise ConfigError("gamma and noise must be nonnegative")
    if cfg["radius_mode"] not in ("linear", "sqrt"):
        raise ConfigError("radius_mode must be linear or sqrt")
    if cfg["scheme"] not in ("euler", "cn", "cnab"):
        raise ConfigError("scheme must be euler, cn or cnab")
    if cfg["samples"] is not None and (not isinstance(cfg["samples"], int) or cfg["samples"] < 2):
        raise ConfigError("samples must be an integer >= 2 or null")
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    for key in ("pde_level_truth", "pde_level_aux"):
        if cfg[key] not in (0, 1, 2):
            raise ConfigError(f"{key} must be 0, 1 or 2")
    if cfg["training"] is not None and len(cfg["training"]) == 0:
        raise ConfigError("training set is empty")
    if cfg["experiment"] == "switching" and not cfg["switching"]:
        raise ConfigError("switching experiment needs a switching schedule")


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def dump(self) -> str:
        return yaml.safe_dump(self.values, sort_keys=False)

    def replace(self, **changes) -> "ExperimentConfig":
        return from_dict({**self.values, **changes})


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    cfg = defaults(raw.get("experiment", "osc"))
    cfg.update(copy.deepcopy(raw))
    # accept integral floats for integer keys written as 1e3 and friends
    for key in ("seed", "jobs", "n_global", "max_sweeps", "norm_every", "grid_n1", "grid_n2", "grid_n"):
        if isinstance(cfg[key], float) and cfg[key].is_integer():
            cfg[key] = int(cfg[key])
    for key in ("tau", "horizon", "dt_truth", "dt_aux", "dt_ric", "ric_tol", "are_tol", "gamma", "noise"):
        if isinstance(cfg[key], str):
            try:
                cfg[key] = float(cfg[key])
            except ValueError:
                raise ConfigError(f"{key} must be a number") from None
    _check(cfg)
    return ExperimentConfig(cfg)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return from_dict(raw or {})
