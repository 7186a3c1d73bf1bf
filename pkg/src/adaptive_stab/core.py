"""Dense/sparse operator types and fixed-step closed-loop integrators.

Every free-dynamics operator in this package is affine in a handful of
scalar time functions::

    A(t) = sum_k c_k(t) M_k

with constant matrices ``M_k`` (dense or scipy.sparse) and scalar
coefficients ``c_k``.  That covers autonomous plants (one constant
coefficient), the Psi-modulated periodic family, the reaction term of the
parabolic model, block-diagonal ensembles and switched plants, and it lets
the stepping kernels work from a small coefficient table instead of a stack
of assembled matrices.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels

BLOWUP_NORM = 1e12

SCHEMES = ("euler", "cn", "cnab")


class BlowUpError(RuntimeError):
    """Raised when a state norm exceeds the blow-up guard."""

    def __init__(self, time: float, norm: float):
        super().__init__(f"state norm {norm:.3e} exceeded blow-up guard at t={time:.6g}")
        self.time = time
        self.norm = norm


# --------------------------------------------------------------------------
# scalar coefficients
# --------------------------------------------------------------------------


class Coefficient(Protocol):
    def __call__(self, t: np.ndarray) -> np.ndarray: ...

    def derivative(self, t: np.ndarray, order: int) -> np.ndarray: ...


@dataclass(frozen=True)
class Constant:
    value: float = 1.0
    is_constant = True

    def __call__(self, t):
        return np.full(np.shape(t), self.value, dtype=float)

    def derivative(self, t, order):
        if order == 0:
            return self(t)
        return np.zeros(np.shape(t))


@dataclass(frozen=True)
class Sinusoid:
    """``offset + amplitude * sin(2*pi*(frequency*t + phase))``."""

    offset: float
    amplitude: float
    frequency: float
    phase: float = 0.0
    is_constant = False

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.offset + self.amplitude * np.sin(2.0 * np.pi * (self.frequency * t + self.phase))

    def derivative(self, t, order):
        if order == 0:
            return self(t)
        t = np.asarray(t, dtype=float)
        w = 2.0 * np.pi * self.frequency
        arg = 2.0 * np.pi * (self.frequency * t + self.phase) + order * np.pi / 2.0
        return self.amplitude * w**order * np.sin(arg)


@dataclass(frozen=True)
class Windowed:
    """Coefficient active on ``[start, stop)`` only (used for switched plants)."""

    inner: Coefficient
    start: float
    stop: float
    is_constant = False

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        active = (t >= self.start) & (t < self.stop)
        return np.where(active, self.inner(t), 0.0)

    def derivative(self, t, order):
        t = np.asarray(t, dtype=float)
        active = (t >= self.start) & (t < self.stop)
        return np.where(active, self.inner.derivative(t, order), 0.0)


# --------------------------------------------------------------------------
# operators and systems
# --------------------------------------------------------------------------


def _as_matrix(M):
    if sp.issparse(M):
        return sp.csr_matrix(M, dtype=float)
    M = np.array(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("operator terms must be 2-D")
    return M


@dataclass(frozen=True, eq=False)
class TimePeriodicOperator:
    """``t -> sum_k c_k(t) M_k`` with optional period.

    ``period=None`` marks an aperiodic operator (switched plants).  For
    autonomous operators the period is irrelevant and reported as 1.
    """

    terms: tuple
    coefficients: tuple
    period: Optional[float] = 1.0

    def __post_init__(self):
        terms = tuple(_as_matrix(M) for M in self.terms)
        if len(terms) == 0 or len(terms) != len(self.coefficients):
            raise ValueError("need one coefficient per term")
        n = terms[0].shape[0]
        for M in terms:
            if M.shape != (n, n):
                raise ValueError(f"term shape {M.shape} incompatible with n={n}")
        if self.period is not None and not self.period > 0:
            raise ValueError("period must be positive")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def constant(cls, A) -> "TimePeriodicOperator":
        return cls((A,), (Constant(1.0),), 1.0)

    @property
    def n(self) -> int:
        return self.terms[0].shape[0]

    @property
    def autonomous(self) -> bool:
        return all(getattr(c, "is_constant", False) for c in self.coefficients)

    def reduce(self, t):
        if self.period is None or self.autonomous:
            return np.asarray(t, dtype=float)
        return np.mod(np.asarray(t, dtype=float), self.period)

    def coefficient_table(self, times) -> np.ndarray:
        """Coefficient values, shape ``(len(times), n_terms)``."""
        tr = self.reduce(np.atleast_1d(times))
        return np.stack([np.broadcast_to(c(tr), tr.shape) for c in self.coefficients], axis=1)

    def combine(self, weights) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for w, M in zip(weights, self.terms):
            if w == 0.0:
                continue
            if sp.issparse(M):
                A += w * M.toarray()
            else:
                A += w * M
        return A

    def evaluate(self, t: float) -> np.ndarray:
        return self.combine(self.coefficient_table([t])[0])

    __call__ = evaluate

    def derivative(self, t: float, order: int, h: Optional[float] = None) -> np.ndarray:
        """d^order A / dt^order at ``t``.

        Uses the coefficients' analytic derivatives unless ``h`` is given or a
        coefficient lacks them, in which case central differences are used.
        """
        if order == 0:
            return self.evaluate(t)
        if h is None:
            try:
                tr = self.reduce(np.array([t]))
                w = [float(np.asarray(c.derivative(tr, order)).ravel()[0]) for c in self.coefficients]
                return self.combine(w)
            except (AttributeError, NotImplementedError):
                pass
        return _central_difference(self.evaluate, t, order, h, self.period or 1.0)

    def constant_index(self) -> int:
        """Index of a term with constant coefficient, or -1."""
        for k, c in enumerate(self.coefficients):
            if getattr(c, "is_constant", False):
                return k
        return -1


def fd_step(order: int, scale: float = 1.0) -> float:
    """Default central-difference step: 1e-6 for first derivatives, larger for higher orders."""
    if order == 1:
        return 1e-6 * max(1.0, scale)
    return np.finfo(float).eps ** (1.0 / (order + 2)) * max(1.0, scale)


def _central_difference(f, t, order, h, scale):
    if h is None:
        h = fd_step(order, scale)
    # minimal symmetric stencil: 2r+1 nodes
    r = max(1, (order + 1) // 2)
    nodes = np.arange(-r, r + 1, dtype=float)
    V = np.vander(nodes, increasing=True).T
    rhs = np.zeros(len(nodes))
    rhs[order] = math.factorial(order)
    w = np.linalg.solve(V, rhs)
    acc = 0.0
    for wk, sk in zip(w, nodes):
        if wk != 0.0:
            acc = acc + wk * f(t + sk * h)
    return acc / h**order


@dataclass(frozen=True, eq=False)
class ControlSystem:
    """Plant ``y' = A(t) y + B u``, output ``z = C y``, Riccati weight ``Q``.

    ``norm_weights`` (optional) are quadrature weights defining the state
    norm ``sqrt(sum w_i y_i^2)``; ``feedback_index`` (optional) maps the
    state to the coordinates a stored gain acts on (injection restriction).
    """

    A: TimePeriodicOperator
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    parameter: tuple = ()
    box: Optional[tuple] = None
    norm_weights: Optional[np.ndarray] = None
    feedback_index: Optional[np.ndarray] = None
    label: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = self.A.n
        B = np.atleast_2d(np.array(self.B, dtype=float))
        C = np.atleast_2d(np.array(self.C, dtype=float))
        Q = np.atleast_2d(np.array(self.Q, dtype=float))
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n or Q.shape[1] != n:
            raise ValueError("C and Q must have n columns")
        for M in (B, C, Q):
            if not np.all(np.isfinite(M)):
                raise ValueError("non-finite matrix entries")
        param = tuple(float(x) for x in np.atleast_1d(self.parameter))
        if self.box is not None:
            lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in self.box)
            if np.any(np.asarray(param) < lo - 1e-12) or np.any(np.asarray(param) > hi + 1e-12):
                raise ValueError(f"parameter {param} outside box {self.box}")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "parameter", param)
        if self.norm_weights is not None:
            object.__setattr__(self, "norm_weights", np.asarray(self.norm_weights, dtype=float))
        if self.feedback_index is not None:
            object.__setattr__(self, "feedback_index", np.asarray(self.feedback_index, dtype=np.intp))

    @property
    def n(self) -> int:
        return self.A.n

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def period(self) -> Optional[float]:
        return self.A.period

    def norm(self, y: np.ndarray) -> np.ndarray:
        """State norm along the last axis."""
        if self.norm_weights is None:
            return np.linalg.norm(y, axis=-1)
        return np.sqrt(np.sum(self.norm_weights * y * y, axis=-1))

    def gain_dim(self) -> int:
        return self.n if self.feedback_index is None else len(self.feedback_index)


# --------------------------------------------------------------------------
# gains
# --------------------------------------------------------------------------


class Gain(Protocol):
    def at(self, times: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ConstantGain:
    K: np.ndarray

    def at(self, times):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        return np.broadcast_to(K, (len(np.atleast_1d(times)),) + K.shape)


def zero_gain(sys: ControlSystem) -> ConstantGain:
    return ConstantGain(np.zeros((sys.m, sys.gain_dim())))


# --------------------------------------------------------------------------
# integration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "cnab"
    dt: float = 1e-3

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def steps(self, horizon: float) -> int:
        S = int(round(horizon / self.dt))
        if S < 1 or abs(S * self.dt - horizon) > 1e-9 * max(horizon, self.dt):
            raise ValueError(f"dt={self.dt} does not divide horizon {horizon}")
        return S


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray
    u: np.ndarray
    z: np.ndarray
    norm: np.ndarray

    def to_csv(self, path) -> None:
        n, m, p = self.y.shape[1], self.u.shape[1], self.z.shape[1]
        header = (
            ["t"]
            + [f"y_{i + 1}" for i in range(n)]
            + [f"u_{i + 1}" for i in range(m)]
            + [f"z_{i + 1}" for i in range(p)]
            + ["norm_y"]
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            rows = np.column_stack([self.t, self.y, self.u, self.z, self.norm])
            for row in rows:
                w.writerow([f"{x:.15g}" for x in row])


def _prepared(sys: ControlSystem, cfg: IntegratorConfig):
    key = ("prep", cfg.scheme, float(cfg.dt))
    prep = sys._cache.get(key)
    if prep is None:
        prep = kernels.prepare(sys.A, cfg.scheme, cfg.dt)
        sys._cache[key] = prep
    return prep


def integrate_states(
    sys: ControlSystem,
    gain: Gain,
    y0: np.ndarray,
    t0: float,
    t1: float,
    cfg: IntegratorConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw stepping: returns node times ``(S+1,)`` and states ``(S+1, n, r)``.

    ``y0`` may be a vector or an ``(n, r)`` block of initial states.
    """
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    y0 = np.asarray(y0, dtype=float)
    vector = y0.ndim == 1
    Y0 = y0.reshape(sys.n, -1) if vector else y0
    if Y0.shape[0] != sys.n:
        raise ValueError(f"initial state has {Y0.shape[0]} rows, expected {sys.n}")
    if not np.all(np.isfinite(Y0)):
        raise ValueError("non-finite initial state")

    S = cfg.steps(t1 - t0)
    h = (t1 - t0) / S
    nodes = t0 + h * np.arange(S + 1)
    gidx = sys.feedback_index if sys.feedback_index is not None else np.arange(sys.n, dtype=np.intp)
    if cfg.scheme == "cn":
        eval_times = nodes[:-1] + 0.5 * h
    else:
        eval_times = nodes[:-1]
    coef = sys.A.coefficient_table(eval_times)
    gains = np.ascontiguousarray(gain.at(eval_times), dtype=float)
    prep = _prepared(sys, cfg)

    Y1 = None
    if cfg.scheme == "cnab":
        # bootstrap with one Crank-Nicolson step at the midpoint
        tm = t0 + 0.5 * h
        M = sys.A.evaluate(tm)
        M[:, gidx] += sys.B @ gain.at(np.array([tm]))[0]
        I = np.eye(sys.n)
        Y1 = np.linalg.solve(I - 0.5 * h * M, (I + 0.5 * h * M) @ Y0)

    Y, fail = kernels.integrate(
        prep, cfg.scheme, h, Y0, Y1, coef, sys.B, gains, gidx, BLOWUP_NORM
    )
    if fail >= 0:
        raise BlowUpError(float(nodes[fail]), float(np.linalg.norm(Y[fail])))
    return nodes, Y


def integrate_closed_loop(
    sys: ControlSystem,
    gain: Gain,
    y0: np.ndarray,
    t0: float,
    t1: float,
    cfg: IntegratorConfig,
) -> Trajectory:
    """Integrate ``y' = (A(t) + B K(t)) y`` on ``[t0, t1]`` and sample IO data."""
    nodes, Y = integrate_states(sys, gain, np.asarray(y0, dtype=float).ravel(), t0, t1, cfg)
    y = Y[:, :, 0]
    gidx = sys.feedback_index if sys.feedback_index is not None else slice(None)
    K = gain.at(nodes)
    u = np.einsum("kij,kj->ki", K, y[:, gidx])
    z = y @ sys.C.T
    return Trajectory(nodes, y, u, z, sys.norm(y))


def monodromy(sys: ControlSystem, gain: Gain, cfg: IntegratorConfig, t0: float = 0.0) -> np.ndarray:
    """Closed-loop state-transition matrix over one period starting at ``t0``."""
    period = sys.period if (sys.period is not None and not sys.A.autonomous) else 1.0
    _, Y = integrate_states(sys, gain, np.eye(sys.n), t0, t0 + period, cfg)
    return Y[-1]


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def explicit_euler_transition(A_K: np.ndarray, xi: float) -> np.ndarray:
    """One explicit Euler transition matrix ``I + xi * A_K``."""
    if not xi > 0:
        raise ValueError("xi must be positive")
    A_K = np.atleast_2d(np.asarray(A_K, dtype=float))
    return np.eye(A_K.shape[0]) + xi * A_K


def euler_product(factors: Sequence[np.ndarray]) -> np.ndarray:
    """``factors[-1] @ ... @ factors[0]``."""
    out = np.eye(factors[0].shape[0])
    for F in factors:
        out = F @ out
    return out


def periodic_interp(mesh: np.ndarray, values: np.ndarray, period: float, times) -> np.ndarray:
    """Piecewise-linear periodic interpolation of ``values`` stored on ``mesh``.

    ``mesh`` is strictly increasing inside ``[0, period)``; the node at
    ``period`` wraps to ``values[0]``.  Returns an array of shape
    ``(len(times),) + values.shape[1:]``.
    """
    mesh = np.asarray(mesh, dtype=float)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if len(mesh) == 1:
        return np.broadcast_to(values[0], (len(times),) + values.shape[1:]).copy()
    tbar = np.mod(times, period)
    ext = np.append(mesh, period)
    k = np.searchsorted(ext, tbar, side="right") - 1
    k = np.clip(k, 0, len(mesh) - 1)
    w = (tbar - ext[k]) / (ext[k + 1] - ext[k])
    nxt = (k + 1) % len(mesh)
    shape = (-1,) + (1,) * (values.ndim - 1)
    w = w.reshape(shape)
    out = (1.0 - w) * values[k] + w * values[nxt]
    # exact nodes return the stored value verbatim
    on_node = (w.reshape(-1) == 0.0)
    if np.any(on_node):
        out[on_node] = values[k[on_node]]
    return out


def trapezoid(values: np.ndarray, times: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    dt = np.diff(times)
    return float(np.sum(0.5 * dt * (values[1:] + values[:-1])))


def quadratic_cost(traj: Trajectory) -> float:
    """``int (|z|^2 + |u|^2) dt`` by the trapezoidal rule on the trajectory mesh."""
    integrand = np.sum(traj.z**2, axis=1) + np.sum(traj.u**2, axis=1)
    return trapezoid(integrand, traj.t)


def as_callable(op: TimePeriodicOperator) -> Callable[[float], np.ndarray]:
    return op.evaluate
