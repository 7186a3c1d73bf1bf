"""Online stage: IO comparison over a window, estimate update, concatenation."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    BlowUpError,
    Constant,
    ControlSystem,
    IntegratorConfig,
    TimePeriodicOperator,
    Windowed,
    integrate_closed_loop,
)
from .library import FeedbackLibrary, TrainingSet

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# configuration and records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SubsetPolicy:
    """``n_global`` random draws plus the ball of radius ``gamma`` around the estimate.

    ``radius_mode="sqrt"`` uses ``sqrt(gamma)`` as the ball radius instead.
    """

    n_global: int = 0
    gamma: float = 0.0
    seed: int = 0
    radius_mode: str = "linear"

    def __post_init__(self):
        if self.n_global < 0 or self.gamma < 0:
            raise ValueError("n_global and gamma must be nonnegative")
        if self.radius_mode not in ("linear", "sqrt"):
            raise ValueError("radius_mode must be 'linear' or 'sqrt'")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def radius(self) -> float:
        return math.sqrt(self.gamma) if self.radius_mode == "sqrt" else self.gamma


@dataclass(frozen=True)
class OnlineConfig:
    tau: float
    horizon: float
    initial_guess: tuple
    samples: Optional[int] = None
    noise: float = 0.0
    truth: IntegratorConfig = IntegratorConfig("cnab", 1e-3)
    aux: IntegratorConfig = IntegratorConfig("cnab", 1e-3)
    jobs: int = 1

    def __post_init__(self):
        if not (self.tau > 0 and self.horizon > 0):
            raise ValueError("tau and horizon must be positive")
        if self.samples is not None and self.samples < 2:
            raise ValueError("need at least two IO samples per window")
        if self.noise < 0:
            raise ValueError("noise magnitude must be nonnegative")
        object.__setattr__(self, "initial_guess", tuple(float(x) for x in np.atleast_1d(self.initial_guess)))

    @property
    def window_samples(self) -> int:
        if self.samples is not None:
            return int(self.samples)
        return self.aux.steps(self.tau) + 1

    @property
    def windows(self) -> int:
        return int(math.ceil(self.horizon / self.tau - 1e-9))


@dataclass
class IORecord:
    window: int
    t: np.ndarray
    u: np.ndarray  # (m, samples)
    z: np.ndarray  # (p, samples)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.z))):
            raise ValueError("non-finite IO data")


@dataclass
class WindowResult:
    y_new: np.ndarray
    estimate: np.ndarray
    index: int
    subset: np.ndarray
    E: np.ndarray
    truth_io: IORecord
    trajectory: object


@dataclass
class AdaptiveRunResult:
    window_starts: np.ndarray
    estimates: np.ndarray  # estimate in force on each window
    updates: np.ndarray  # estimate produced at the end of each window
    t: np.ndarray
    norm: np.ndarray
    comparisons: list  # (subset indices, E) per window
    cost: float
    window_states: np.ndarray
    decay: Optional[tuple] = None
    training: Optional[TrainingSet] = None

    @property
    def final_estimate(self) -> np.ndarray:
        return self.updates[-1]


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def comparison_functional(dz, du, tau: float) -> float:
    """Trapezoidal ``||dz||^2 + ||du||^2`` over a window of length ``tau``.

    ``dz`` is ``(p, k)`` and ``du`` is ``(m, k)`` on the same uniform mesh.
    """
    dz = np.atleast_2d(np.asarray(dz, dtype=float))
    du = np.atleast_2d(np.asarray(du, dtype=float))
    if dz.size and du.size and dz.shape[1] != du.shape[1]:
        raise ValueError("input and output differences live on different meshes")
    k = dz.shape[1] if dz.size else du.shape[1]
    if k < 2:
        raise ValueError("need at least two samples")
    h = tau / (k - 1)
    w = np.full(k, h)
    w[[0, -1]] *= 0.5
    total = 0.0
    if dz.size:
        total += float(np.sum((dz * dz) @ w))
    if du.size:
        total += float(np.sum((du * du) @ w))
    return total


def update_estimate(E, subset):
    """``subset[j]`` with ``j`` the first index attaining ``min E``."""
    E = np.asarray(E, dtype=float)
    if len(subset) == 0 or len(E) == 0:
        raise ValueError("empty subset")
    if len(E) != len(subset):
        raise ValueError("one comparison value per candidate required")
    j = int(np.argmin(E))
    return j, subset[j]


def select_subset(training: TrainingSet, sigma_hat, policy: SubsetPolicy, rng: np.random.Generator) -> np.ndarray:
    """Training indices of the local ball plus de-duplicated random draws, ascending."""
    r = policy.radius
    d = training.distances(sigma_hat)
    local = np.nonzero(d <= r + 1e-9 * max(1.0, r))[0]
    chosen = set(local.tolist())
    if policy.n_global > 0:
        chosen.update(rng.integers(0, len(training), size=policy.n_global).tolist())
    chosen.add(training.index(sigma_hat))
    return np.array(sorted(chosen), dtype=int)


def inject_measurement_noise(y_old, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """``y + magnitude * (v - 1/2)`` with ``v`` uniform on the unit cube."""
    y_old = np.asarray(y_old, dtype=float)
    if magnitude < 0:
        raise ValueError("noise magnitude must be nonnegative")
    if magnitude == 0:
        return y_old.copy()
    return y_old + magnitude * (rng.random(y_old.shape) - 0.5)


def sample_io(traj, mesh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-node sampling of ``(u, z)`` on ``mesh``; returns ``(m, k)``, ``(p, k)``."""
    idx = np.searchsorted(traj.t, mesh)
    idx = np.clip(idx, 1, len(traj.t) - 1)
    left = traj.t[idx - 1]
    idx = np.where(np.abs(mesh - left) <= np.abs(traj.t[idx] - mesh), idx - 1, idx)
    return traj.u[idx].T, traj.z[idx].T


def window_mesh(t0: float, tau: float, samples: int) -> np.ndarray:
    return t0 + tau * np.arange(samples) / (samples - 1)


# --------------------------------------------------------------------------
# windows
# --------------------------------------------------------------------------


def run_window(
    truth: ControlSystem,
    aux_systems: Sequence[ControlSystem],
    lib: FeedbackLibrary,
    sigma_hat,
    y_old,
    t0: float,
    cfg: OnlineConfig,
    subset: Optional[np.ndarray] = None,
    aux_initial: Optional[np.ndarray] = None,
    window: int = 0,
) -> WindowResult:
    """One update window with the estimate ``sigma_hat`` held fixed.

    ``aux_systems[i]`` belongs to training index ``subset[i]``.
    ``aux_initial`` is the (possibly noisy, possibly restricted) auxiliary
    initial state; by default ``y_old`` itself.
    """
    if subset is None:
        subset = np.arange(len(aux_systems))
    if len(subset) != len(aux_systems):
        raise ValueError("one auxiliary system per subset index")
    gain = lib.schedule(sigma_hat)
    t1 = t0 + cfg.tau
    mesh = window_mesh(t0, cfg.tau, cfg.window_samples)

    traj = integrate_closed_loop(truth, gain, y_old, t0, t1, cfg.truth)
    u_true, z_true = sample_io(traj, mesh)
    record = IORecord(window, mesh, u_true, z_true)
    y_aux0 = np.asarray(y_old if aux_initial is None else aux_initial, dtype=float)

    def compare(sys):
        try:
            tr = integrate_closed_loop(sys, gain, y_aux0, t0, t1, cfg.aux)
        except BlowUpError as exc:
            log.warning("auxiliary run %s blew up at t=%.4g", sys.label, exc.time)
            return math.inf
        u_i, z_i = sample_io(tr, mesh)
        return comparison_functional(z_i - z_true, u_i - u_true, cfg.tau)

    if cfg.jobs > 1 and len(aux_systems) > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
            E = np.array(list(ex.map(compare, aux_systems)))
    else:
        E = np.array([compare(s) for s in aux_systems])
    j, idx = update_estimate(E, list(subset))
    return WindowResult(traj.y[-1].copy(), lib.training[idx].copy(), int(idx), np.asarray(subset), E, record, traj)


def _trapz(values, t):
    if len(t) < 2:
        return 0.0
    return float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(t)))


def run_adaptive(
    truth: ControlSystem,
    systems: Sequence[ControlSystem],
    lib: FeedbackLibrary,
    cfg: OnlineConfig,
    policy: SubsetPolicy,
    y0,
    transfer: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    fit: bool = False,
) -> AdaptiveRunResult:
    """Concatenate update windows over ``[0, horizon]``.

    ``systems[i]`` is the auxiliary model of training parameter ``i``;
    ``transfer`` maps a truth state to the auxiliary state space (identity by
    default).
    """
    training = lib.training
    if len(systems) != len(training):
        raise ValueError("one auxiliary system per training parameter")
    rng = np.random.default_rng(int(policy.seed))
    sigma_hat = training[training.index(cfg.initial_guess)].copy()
    y = np.asarray(y0, dtype=float).copy()
    t_chunks, n_chunks = [], []
    starts, est, upd, comps, states = [], [], [], [], [y.copy()]
    cost = 0.0
    J = cfg.windows
    for j in range(J):
        t0 = j * cfg.tau
        tau = min(cfg.tau, cfg.horizon - t0)
        wcfg = cfg if tau == cfg.tau else _shorter(cfg, tau)
        subset = select_subset(training, sigma_hat, policy, rng)
        y_aux = y if transfer is None else transfer(y)
        y_aux = inject_measurement_noise(y_aux, cfg.noise, rng)
        res = run_window(
            truth, [systems[i] for i in subset], lib, sigma_hat, y, t0, wcfg,
            subset=subset, aux_initial=y_aux, window=j,
        )
        tr = res.trajectory
        cost += _trapz(np.sum(tr.z**2, axis=1) + np.sum(tr.u**2, axis=1), tr.t)
        keep = slice(None) if j == 0 else slice(1, None)
        t_chunks.append(tr.t[keep])
        n_chunks.append(tr.norm[keep])
        starts.append(t0)
        est.append(sigma_hat.copy())
        upd.append(res.estimate.copy())
        comps.append((res.subset.copy(), res.E.copy()))
        y = res.y_new
        states.append(y.copy())
        sigma_hat = res.estimate
        log.debug("window %d: estimate %s, E_min %.3e", j, tuple(sigma_hat), float(np.min(res.E)))
    t = np.concatenate(t_chunks)
    norm = np.concatenate(n_chunks)
    out = AdaptiveRunResult(
        np.array(starts), np.array(est), np.array(upd), t, norm, comps, cost, np.array(states),
        training=training,
    )
    if fit:
        out.decay = fit_decay(t, norm)
    return out


def _shorter(cfg: OnlineConfig, tau: float) -> OnlineConfig:
    k = cfg.window_samples
    samples = max(2, int(round((k - 1) * tau / cfg.tau)) + 1)
    return OnlineConfig(tau, cfg.horizon, cfg.initial_guess, samples, cfg.noise, cfg.truth, cfg.aux, cfg.jobs)


# --------------------------------------------------------------------------
# switching, decay, plateaus
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SwitchingSchedule:
    """Piecewise-constant parameter ``sigma(t)``; the last value holds forever."""

    values: tuple
    switch_times: tuple

    def __call__(self, t: float) -> tuple:
        k = int(np.searchsorted(np.asarray(self.switch_times), t, side="right"))
        return self.values[k]

    def pieces(self):
        edges = (0.0,) + tuple(self.switch_times) + (math.inf,)
        return [(v, edges[i], edges[i + 1]) for i, v in enumerate(self.values)]


def switching_schedule(values) -> SwitchingSchedule:
    """``[(sigma, dwell), ...]`` to a schedule switching after each dwell."""
    if len(values) == 0:
        raise ValueError("empty schedule")
    params, times, t = [], [], 0.0
    for k, (sigma, dwell) in enumerate(values):
        if not dwell > 0:
            raise ValueError("dwell times must be positive")
        params.append(tuple(float(x) for x in np.atleast_1d(sigma)))
        t += float(dwell)
        if k < len(values) - 1:
            times.append(t)
    return SwitchingSchedule(tuple(params), tuple(times))


def build_switched(builder: Callable[[tuple], ControlSystem], schedule: SwitchingSchedule) -> ControlSystem:
    """Plant whose operator is ``A_{sigma(t)}(t)`` (aperiodic)."""
    pieces = schedule.pieces()
    systems = [builder(v) for v, _, _ in pieces]
    base = systems[0]
    if len(pieces) == 1:
        return base
    terms, coefs = [], []
    for sys, (_, a, b) in zip(systems, pieces):
        for M, c in zip(sys.A.terms, sys.A.coefficients):
            terms.append(M)
            coefs.append(Windowed(c, a, b))
    op = TimePeriodicOperator(tuple(terms), tuple(coefs), None)
    return ControlSystem(
        op, base.B, base.C, base.Q, parameter=base.parameter, norm_weights=base.norm_weights,
        feedback_index=base.feedback_index, label="switched",
    )


def dwell_time_bound(C: float, mu: float) -> float:
    """Dwell time above which switching among ``(C, mu)``-stable pieces is stable."""
    if C < 1 or mu <= 0:
        raise ValueError("need C >= 1 and mu > 0")
    return math.log(C) / mu


def fit_decay(t, norms) -> tuple[float, float]:
    """Least-squares fit of ``log ||y||``; ``mu = -slope`` and the tightest ``zeta``."""
    t = np.asarray(t, dtype=float)
    norms = np.asarray(norms, dtype=float)
    if len(t) < 3 or len(t) != len(norms):
        raise ValueError("need at least three samples")
    if np.any(norms <= 0):
        raise ValueError("norms must be positive")
    slope, _ = np.polyfit(t, np.log(norms), 1)
    mu = -float(slope)
    zeta = float(np.max(norms * np.exp(mu * t)))
    return zeta, mu


def plateau_radius(t, norms, fraction: float = 0.25) -> float:
    """Largest norm over the final ``fraction`` of the run."""
    t = np.asarray(t, dtype=float)
    start = t[-1] - fraction * (t[-1] - t[0])
    return float(np.max(np.asarray(norms)[t >= start]))


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    return f"{float(x):.15g}"


def write_run_artifacts(result: AdaptiveRunResult, outdir, config_echo: dict, seed: int, every: int = 1) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    s = result.estimates.shape[1]
    with open(out / "estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "t"] + [f"sigma_{k + 1}" for k in range(s)])
        for j, (t0, sig) in enumerate(zip(result.window_starts, result.estimates)):
            w.writerow([j + 1, _fmt(t0)] + [_fmt(x) for x in sig])
        # estimate produced by the last window, in force from the end of the run
        w.writerow([len(result.estimates) + 1, _fmt(result.t[-1])] + [_fmt(x) for x in result.final_estimate])
    with open(out / "norms.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "norm_y"])
        for t, v in zip(result.t[::every], result.norm[::every]):
            w.writerow([_fmt(t), _fmt(v)])
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "candidate_index", "sigma", "E"])
        for j, (idx, E) in enumerate(result.comparisons):
            for i, e in zip(idx, E):
                sig = result.training[int(i)] if result.training is not None else [i]
                w.writerow([j + 1, int(i), " ".join(_fmt(x) for x in sig), _fmt(e)])
    summary = {
        "cost": result.cost,
        "decay": None if result.decay is None else {"zeta": result.decay[0], "mu": result.decay[1]},
        "final_estimate": result.final_estimate.tolist(),
        "initial_norm": float(result.norm[0]),
        "final_norm": float(result.norm[-1]),
        "max_norm": float(np.max(result.norm)),
        "seed": int(seed),
        "config": config_echo,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    return out


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if hasattr(x, "__dataclass_fields__"):
        return asdict(x)
    return str(x)
