"""Experiment assembly shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import models
from .adaptive import (
    AdaptiveRunResult,
    OnlineConfig,
    SubsetPolicy,
    build_switched,
    run_adaptive,
    switching_schedule,
)
from .config import ExperimentConfig
from .core import ControlSystem, IntegratorConfig, integrate_closed_loop, quadratic_cost
from .library import (
    FeedbackLibrary,
    GainSchedule,
    LibraryConfig,
    build_library,
    build_phase_shift_library,
    schedule_from_solution,
    solve_riccati,
)
from .riccati import silverman_meadows_QB, silverman_meadows_QC, solve_periodic_riccati

log = logging.getLogger(__name__)


@dataclass
class Experiment:
    family: str
    training: np.ndarray
    builder: Callable[..., ControlSystem]
    aux_builder: Callable[..., ControlSystem]
    truth: ControlSystem
    y0: np.ndarray
    transfer: Optional[Callable[[np.ndarray], np.ndarray]]
    box: Optional[tuple]


def family_of(cfg: ExperimentConfig) -> str:
    return {"osc": "osc", "periodic": "periodic", "noise": "periodic", "robust-compare": "periodic",
            "pde": "pde", "switching": "pde"}[cfg.experiment]


def training_grid(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.training is not None:
        return np.array(cfg.training, dtype=float).reshape(len(cfg.training), -1)
    fam = family_of(cfg)
    if cfg.experiment == "robust-compare":
        N = cfg.ensemble_n
        return np.array([(1.0, cfg.ensemble_phase0 + i / N) for i in range(N)])
    if fam == "osc":
        return models.oscillator_grid(cfg.grid_n1)
    if fam == "periodic":
        return models.periodic_grid(cfg.grid_n1, cfg.grid_n2)
    return models.parabolic_grid(cfg.grid_n)


def pde_settings(cfg: ExperimentConfig) -> models.ParabolicSettings:
    acts = tuple(tuple(tuple(float(v) for v in ax) for ax in box) for box in cfg.pde_actuators)
    return models.ParabolicSettings(cfg.pde_cells, float(cfg.pde_nu), int(cfg.pde_outputs), acts)


def make_experiment(cfg: ExperimentConfig) -> Experiment:
    fam = family_of(cfg)
    grid = training_grid(cfg)
    transfer = None
    if fam == "osc":
        builder = lambda s: models.build_oscillator(s[0])
        aux_builder = builder
        box = ((-1.0,), (1.0,))
        y0 = np.array(cfg.y0 if cfg.y0 is not None else [1.0, 1.0], dtype=float)
    elif fam == "periodic":
        builder = lambda s: models.build_periodic(s[0], s[1])
        aux_builder = builder
        box = None
        y0 = np.array(cfg.y0 if cfg.y0 is not None else [1.0, 1.0], dtype=float)
    else:
        st = pde_settings(cfg)
        lt, la = cfg.pde_level_truth, cfg.pde_level_aux
        builder = lambda s: models.build_parabolic(s[0], 0, st)
        aux_builder = lambda s: models.build_parabolic(s[0], la, st)
        box = ((0.0,), (2.0 * np.pi,))
        ct, ca = st.cells(lt), st.cells(la)
        if cfg.y0 is None:
            y0 = models.initial_state_pde(models.Grid(ct))
        else:
            y0 = np.array(cfg.y0, dtype=float)
        if ct > ca:
            transfer = lambda y: models.restrict(y, ca, ct)
        elif ct < ca:
            transfer = lambda y: models.prolong(y, ct, ca)
        truth_builder = lambda s: models.build_parabolic(s[0], lt, st)
    if fam != "pde":
        truth_builder = aux_builder
    if cfg.experiment == "switching":
        sched = switching_schedule([(tuple(np.atleast_1d(v)), d) for v, d in cfg.switching])
        truth = build_switched(truth_builder, sched)
    else:
        truth = truth_builder(tuple(cfg.truth))
    if len(y0) != truth.n:
        raise ValueError(f"y0 has {len(y0)} entries, the truth has dimension {truth.n}")
    return Experiment(fam, grid, builder, aux_builder, truth, y0, transfer, box)


def library_config(cfg: ExperimentConfig) -> LibraryConfig:
    return LibraryConfig(cfg.dt_ric, cfg.ric_tol, cfg.are_tol, cfg.max_sweeps)


def build_offline(cfg: ExperimentConfig, jobs: int = 1) -> FeedbackLibrary:
    exp = make_experiment(cfg)
    lcfg = library_config(cfg)
    if exp.family == "periodic" and cfg.phase_shift and cfg.training is None and cfg.experiment != "robust-compare":
        rhos = sorted({float(r) for r in exp.training[:, 0]})
        phases = sorted({float(p) for p in exp.training[:, 1]})
        lib = build_phase_shift_library(models.build_periodic, rhos, phases, lcfg, jobs=jobs, box=exp.box)
    else:
        systems = [exp.builder(tuple(s)) for s in exp.training]
        lib = build_library(systems, lcfg, jobs=jobs, box=exp.box, discretization=exp.family)
    lib.metadata["experiment"] = cfg.experiment
    return lib


def online_config(cfg: ExperimentConfig, jobs: int = 1) -> OnlineConfig:
    return OnlineConfig(
        tau=cfg.tau, horizon=cfg.horizon, initial_guess=tuple(cfg.initial_guess), samples=cfg.samples,
        noise=cfg.noise, truth=IntegratorConfig(cfg.scheme, cfg.dt_truth),
        aux=IntegratorConfig(cfg.scheme, cfg.dt_aux), jobs=jobs,
    )


def policy(cfg: ExperimentConfig, seed: Optional[int] = None) -> SubsetPolicy:
    return SubsetPolicy(cfg.n_global, cfg.gamma, cfg.seed if seed is None else seed, cfg.radius_mode)


def run_online(cfg: ExperimentConfig, lib: FeedbackLibrary, jobs: int = 1, seed: Optional[int] = None) -> AdaptiveRunResult:
    exp = make_experiment(cfg)
    if len(lib.training) != len(exp.training) or not np.allclose(lib.training.points, exp.training):
        raise ValueError("library training set does not match the configuration")
    systems = [exp.aux_builder(tuple(s)) for s in lib.training.points]
    return run_adaptive(
        exp.truth, systems, lib, online_config(cfg, jobs), policy(cfg, seed), exp.y0,
        transfer=exp.transfer, fit=True,
    )


def robust_compare(cfg: ExperimentConfig, lib: Optional[FeedbackLibrary] = None, jobs: int = 1, seed: Optional[int] = None) -> dict:
    """Costs over the horizon of the true-parameter, adaptive and robust ensemble feedbacks."""
    exp = make_experiment(cfg)
    lcfg = library_config(cfg)
    if lib is None:
        lib = build_offline(cfg, jobs)
    truth = exp.truth
    icfg = IntegratorConfig(cfg.scheme, cfg.dt_truth)

    optimal = schedule_from_solution(truth, solve_riccati(truth, lcfg))
    ens = models.build_ensemble([exp.builder(tuple(s)) for s in exp.training])
    sol = solve_periodic_riccati(ens.system, lcfg.dt_ric, lcfg.tol, lcfg.max_sweeps)
    robust = GainSchedule((float("nan"),), sol.period, sol.mesh, ens.robust_gains(sol.pis))

    tr_opt = integrate_closed_loop(truth, optimal, exp.y0, 0.0, cfg.horizon, icfg)
    tr_rob = integrate_closed_loop(truth, robust, exp.y0, 0.0, cfg.horizon, icfg)
    adaptive = run_online(cfg, lib, jobs, seed)
    return {
        "optimal": quadratic_cost(tr_opt),
        "adaptive": adaptive.cost,
        "robust": quadratic_cost(tr_rob),
        "trajectories": {"optimal": tr_opt, "robust": tr_rob},
        "adaptive_run": adaptive,
        "ensemble_iterations": sol.iterations,
    }


def rank_check(cfg: ExperimentConfig) -> list:
    """Silverman-Meadows certificates of the phase ensemble at the configured times."""
    systems = [models.build_periodic(1.0, float(phi)) for phi in cfg.rank_phases]
    ens = models.build_ensemble(systems)
    out = []
    for t in cfg.rank_times:
        out.append((silverman_meadows_QB(ens.system.A, ens.system.B, float(t)),
                    silverman_meadows_QC(ens.system.A, ens.system.C, float(t))))
    return out
