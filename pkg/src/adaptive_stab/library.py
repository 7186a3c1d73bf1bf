"""Offline feedback library: one Riccati gain schedule per training parameter."""

from __future__ import annotations

import itertools
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .core import ControlSystem, periodic_interp
from .riccati import (
    NonConvergence,
    NotStabilizable,
    RiccatiSolution,
    feedback_gains,
    is_hurwitz,
    solve_are,
    solve_periodic_riccati,
)

log = logging.getLogger(__name__)

MAGIC = b"ASGAINLB"
FORMAT_VERSION = 1


class UnknownParameter(KeyError):
    pass


class LibraryBuildError(RuntimeError):
    def __init__(self, parameter, cause):
        super().__init__(f"Riccati solve failed for parameter {tuple(parameter)}: {cause}")
        self.parameter = tuple(parameter)
        self.cause = cause


# --------------------------------------------------------------------------
# training sets
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Ordered, pairwise distinct parameters inside an axis-aligned box."""

    points: np.ndarray
    box: Optional[tuple] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if len(pts) == 0:
            raise ValueError("training set is empty")
        for i, j in itertools.combinations(range(len(pts)), 2):
            if np.array_equal(pts[i], pts[j]):
                raise ValueError(f"training parameters {i} and {j} coincide")
        if self.box is not None:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), pts.shape[1:]) for b in self.box)
            if np.any(pts < lo - 1e-12) or np.any(pts > hi + 1e-12):
                raise ValueError("training parameter outside the box")
            object.__setattr__(self, "box", (lo.copy(), hi.copy()))
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i) -> np.ndarray:
        return self.points[i]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def index(self, sigma, atol: float = 1e-12) -> int:
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        d = np.max(np.abs(self.points - sigma), axis=1)
        hits = np.nonzero(d <= atol)[0]
        if len(hits) == 0:
            raise UnknownParameter(f"{tuple(sigma)} is not a training parameter")
        return int(hits[0])

    def distances(self, sigma) -> np.ndarray:
        return np.linalg.norm(self.points - np.atleast_1d(np.asarray(sigma, dtype=float)), axis=1)


def nearest_training(training: TrainingSet, sigma) -> np.ndarray:
    """Closest training parameter; ties go to the smallest index."""
    if len(training) == 0:
        raise ValueError("empty training set")
    return training[int(np.argmin(training.distances(sigma)))]


def epsilon_density(training: TrainingSet, box, eps: float, probe_count: int = 101) -> bool:
    """Check ``eps``-density on a tensor probe grid (``probe_count`` points per axis plus training midpoints)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in box)
    axes = []
    for k, (a, b) in enumerate(zip(lo, hi)):
        # training coordinates and their midpoints are where the worst case sits in 1-D
        c = np.unique(training.points[:, k])
        ax = np.concatenate([np.linspace(a, b, probe_count), c, 0.5 * (c[1:] + c[:-1])])
        axes.append(np.unique(np.clip(ax, a, b)))
    probes = np.array(list(itertools.product(*axes)))
    pts = training.points
    # chunk to bound memory for large grids
    worst = 0.0
    for start in range(0, len(probes), 4096):
        P = probes[start:start + 4096]
        d = np.sqrt(((P[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
        worst = max(worst, float(d.max()))
    return worst <= eps + 1e-12


# --------------------------------------------------------------------------
# schedules and libraries
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GainSchedule:
    """``K(t)`` stored on a mesh of ``[0, period)``; shape ``(M, m, q)``."""

    parameter: tuple
    period: float
    mesh: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        mesh = np.asarray(self.mesh, dtype=float)
        gains = np.asarray(self.gains, dtype=float)
        if gains.ndim == 2:
            gains = gains[None]
        if len(mesh) != len(gains):
            raise ValueError("mesh and gains lengths differ")
        if len(mesh) > 1 and np.any(np.diff(mesh) <= 0):
            raise ValueError("mesh must be strictly increasing")
        if mesh[0] < 0 or mesh[-1] >= self.period:
            raise ValueError("mesh must lie in [0, period)")
        object.__setattr__(self, "mesh", mesh)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "parameter", tuple(float(x) for x in np.atleast_1d(self.parameter)))

    @property
    def shape(self):
        return self.gains.shape[1:]

    def at(self, times) -> np.ndarray:
        return periodic_interp(self.mesh, self.gains, self.period, times)

    def shifted(self, phase: float, parameter=None) -> "GainSchedule":
        """Schedule of ``t -> K(t + period * phase)`` on the same mesh.

        Off-mesh shifts use a periodic cubic spline: linear interpolation
        would cost O(h^2) in the gains, well above the Riccati accuracy.
        """
        t = np.mod(self.mesh + self.period * phase, self.period)
        if len(self.mesh) < 4:
            K = self.at(t)
        else:
            x = np.append(self.mesh, self.period)
            y = np.concatenate([self.gains, self.gains[:1]])
            K = CubicSpline(x, y, axis=0, bc_type="periodic")(t)
            # shifts landing on nodes keep the stored values exactly
            k = np.searchsorted(self.mesh, t)
            k = np.minimum(k, len(self.mesh) - 1)
            hit = np.isclose(self.mesh[k], t, rtol=0.0, atol=1e-12 * self.period)
            K[hit] = self.gains[k[hit]]
        return GainSchedule(parameter if parameter is not None else self.parameter, self.period, self.mesh, K)


@dataclass(frozen=True, eq=False)
class FeedbackLibrary:
    training: TrainingSet
    schedules: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.schedules) != len(self.training):
            raise ValueError("need exactly one schedule per training parameter")
        shapes = {s.shape for s in self.schedules}
        if len(shapes) != 1:
            raise ValueError("schedules disagree on gain shape")
        object.__setattr__(self, "schedules", tuple(self.schedules))

    def __len__(self) -> int:
        return len(self.schedules)

    def schedule(self, sigma) -> GainSchedule:
        return self.schedules[self.training.index(sigma)]

    @property
    def gain_shape(self):
        return self.schedules[0].shape


def lookup_gain(lib: FeedbackLibrary, sigma, t) -> np.ndarray:
    """Gain of ``sigma`` at time ``t`` (periodic wrap, linear in time)."""
    return lib.schedule(sigma).at([t])[0]


@dataclass(frozen=True)
class LibraryConfig:
    dt_ric: float = 1e-2
    tol: float = 1e-9
    are_tol: float = 1e-10
    max_sweeps: int = 200


def solve_riccati(sys: ControlSystem, cfg: LibraryConfig = LibraryConfig()) -> RiccatiSolution:
    if sys.A.autonomous:
        return solve_are(sys.A.evaluate(0.0), sys.B, sys.Q, tol=cfg.are_tol)
    return solve_periodic_riccati(sys, cfg.dt_ric, cfg.tol, cfg.max_sweeps)


def schedule_from_solution(sys: ControlSystem, sol: RiccatiSolution) -> GainSchedule:
    K = feedback_gains(sys.B, sol)
    # K = -B^T Pi holds by construction; keep the audit cheap but explicit
    gap = np.abs(K + np.einsum("ji,kjl->kil", sys.B, sol.pis)).max()
    if gap > 1e-12 * (1.0 + np.abs(K).max()):
        raise LibraryBuildError(sys.parameter, f"gain consistency gap {gap:.2e}")
    if sys.A.autonomous:
        if not is_hurwitz(sys.A.evaluate(0.0) + sys.B @ K[0]):
            raise LibraryBuildError(sys.parameter, "closed loop is not Hurwitz")
        return GainSchedule(sys.parameter, 1.0, np.zeros(1), K)
    return GainSchedule(sys.parameter, sol.period, sol.mesh, K)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _metadata(cfg: LibraryConfig, discretization: str, extra: Optional[dict] = None) -> dict:
    meta = {
        "dt_ric": cfg.dt_ric,
        "tol": cfg.tol,
        "are_tol": cfg.are_tol,
        "max_sweeps": cfg.max_sweeps,
        "built": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "discretization": discretization,
    }
    if extra:
        meta.update(extra)
    return meta


def build_library(
    systems: Sequence[ControlSystem],
    cfg: LibraryConfig = LibraryConfig(),
    jobs: int = 1,
    box=None,
    discretization: str = "",
) -> FeedbackLibrary:
    """Solve one Riccati problem per system and store ``K = -B^T Pi``."""
    if len(systems) == 0:
        raise ValueError("no training systems given")
    training = TrainingSet(np.array([s.parameter for s in systems]), box)

    def one(sys):
        try:
            return schedule_from_solution(sys, solve_riccati(sys, cfg))
        except (NonConvergence, NotStabilizable, np.linalg.LinAlgError, ValueError) as exc:
            raise LibraryBuildError(sys.parameter, exc) from exc

    schedules = _map(one, list(systems), jobs)
    return FeedbackLibrary(training, tuple(schedules), _metadata(cfg, discretization))


def build_phase_shift_library(
    builder,
    rhos: Sequence[float],
    phases: Sequence[float],
    cfg: LibraryConfig = LibraryConfig(),
    jobs: int = 1,
    box=None,
) -> FeedbackLibrary:
    """Periodic family whose phase only shifts time.

    Solves once per period ``rho`` at zero phase and derives every other
    phase by ``Pi_(rho, phi)(t) = Pi_(rho, 0)(t + rho phi)``.  Parameters are
    ordered with ``rho`` major and ``phi`` minor.
    """
    base_sys = [builder(rho, 0.0) for rho in rhos]

    def one(sys):
        try:
            return schedule_from_solution(sys, solve_riccati(sys, cfg))
        except (NonConvergence, NotStabilizable, np.linalg.LinAlgError, ValueError) as exc:
            raise LibraryBuildError(sys.parameter, exc) from exc

    bases = _map(one, base_sys, jobs)
    schedules, params = [], []
    for rho, base in zip(rhos, bases):
        for phi in phases:
            params.append((rho, phi))
            schedules.append(base if phi == 0.0 else base.shifted(phi, (rho, phi)))
    lib_meta = _metadata(cfg, "phase-shift", {"phase_shift": True})
    return FeedbackLibrary(TrainingSet(np.array(params), box), tuple(schedules), lib_meta)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_library(lib: FeedbackLibrary, path) -> Path:
    """Binary little-endian library file plus a JSON sidecar with the same header."""
    path = Path(path)
    m, q = lib.gain_shape
    s = lib.training.dim
    N = len(lib)
    tol = float(lib.metadata.get("tol", 0.0))
    dt = float(lib.metadata.get("dt_ric", 0.0))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<qqqqqdd", FORMAT_VERSION, q, m, s, N, dt, tol))
        for sigma, sch in zip(lib.training.points, lib.schedules):
            fh.write(np.asarray(sigma, dtype="<f8").tobytes())
            fh.write(struct.pack("<dq", sch.period, len(sch.mesh)))
            fh.write(sch.mesh.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(sch.gains, dtype="<f8").tobytes())
    meta = {
        "format": "adaptive-stab gain library",
        "version": FORMAT_VERSION,
        "n": q,
        "m": m,
        "s": s,
        "N": N,
        "parameters": lib.training.points.tolist(),
        "box": None if lib.training.box is None else [np.asarray(b).tolist() for b in lib.training.box],
        "metadata": lib.metadata,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_library(path) -> FeedbackLibrary:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a gain library file")
    off = 8
    version, q, m, s, N, dt, tol = struct.unpack_from("<qqqqqdd", data, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported library version {version}")
    off += struct.calcsize("<qqqqqdd")
    params, schedules = [], []
    for _ in range(N):
        sigma = np.frombuffer(data, "<f8", s, off).astype(float)
        off += 8 * s
        period, M = struct.unpack_from("<dq", data, off)
        off += 16
        mesh = np.frombuffer(data, "<f8", M, off).astype(float)
        off += 8 * M
        gains = np.frombuffer(data, "<f8", M * m * q, off).astype(float).reshape(M, m, q)
        off += 8 * M * m * q
        params.append(sigma)
        schedules.append(GainSchedule(tuple(sigma), period, mesh, gains))
    side = _sidecar(path)
    meta, box = {"dt_ric": dt, "tol": tol}, None
    if side.exists():
        info = json.loads(side.read_text())
        meta = info.get("metadata", meta)
        if info.get("box") is not None:
            box = tuple(np.asarray(b, dtype=float) for b in info["box"])
    return FeedbackLibrary(TrainingSet(np.array(params), box), tuple(schedules), meta)
