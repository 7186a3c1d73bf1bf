"""Benchmark plants: damped oscillator, Psi-modulated periodic family,
finite-difference parabolic model with a three-level grid hierarchy, and
the block-diagonal ensemble used for robust feedback."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .core import Constant, ControlSystem, Sinusoid, TimePeriodicOperator

B_ODE = np.array([[0.0], [1.0]])
C_ODE = np.array([[1.0, 0.0]])
SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


# --------------------------------------------------------------------------
# finite-dimensional families
# --------------------------------------------------------------------------


def build_oscillator(sigma: float) -> ControlSystem:
    """``A = [[0, 1], [-1, sigma]]``, ``B = e_2``, ``C = e_1^T``, ``Q = C``."""
    sigma = float(np.ravel(sigma)[0])
    A = np.array([[0.0, 1.0], [-1.0, sigma]])
    return ControlSystem(
        TimePeriodicOperator.constant(A), B_ODE, C_ODE, C_ODE,
        parameter=(sigma,), box=((-1.0,), (1.0,)), label=f"osc({sigma:g})",
    )


def psi(s):
    return 1.0 + 6.0 * np.sin(2.0 * np.pi * np.asarray(s, dtype=float))


def build_periodic(rho: float, phi: float = 0.0) -> ControlSystem:
    """``A(t) = Psi(t / rho + phi) [[0, 1], [1, 0]]`` with ``Psi(s) = 1 + 6 sin(2 pi s)``."""
    rho, phi = float(rho), float(phi)
    if rho <= 0:
        raise ValueError("period must be positive")
    op = TimePeriodicOperator((SWAP,), (Sinusoid(1.0, 6.0, 1.0 / rho, phi),), rho)
    return ControlSystem(op, B_ODE, C_ODE, np.eye(2), parameter=(rho, phi), label=f"per({rho:g},{phi:g})")


def oscillator_grid(N1: int) -> np.ndarray:
    """``{i / N1 : -N1 <= i <= N1}`` as an ``(2 N1 + 1, 1)`` array."""
    return (np.arange(-N1, N1 + 1) / N1).reshape(-1, 1)


def periodic_grid(N1: int, N2: int) -> np.ndarray:
    """``{(1 + i1 / (2 N1), i2 / N2)}``, ``i1`` major, ``i2`` minor."""
    rows = [(1.0 + i1 / (2.0 * N1), i2 / N2) for i1 in range(-N1, N1 + 1) for i2 in range(N2)]
    return np.array(rows)


def parabolic_grid(N: int) -> np.ndarray:
    return (2.0 * np.pi * np.arange(N) / N).reshape(-1, 1)


# --------------------------------------------------------------------------
# parabolic model on the unit square
# --------------------------------------------------------------------------

DEFAULT_ACTUATORS = (
    ((0.1, 0.3), (0.1, 0.3)),
    ((0.7, 0.9), (0.1, 0.3)),
    ((0.1, 0.3), (0.7, 0.9)),
    ((0.7, 0.9), (0.7, 0.9)),
)


@dataclass(frozen=True)
class ParabolicSettings:
    coarse_cells: int = 8
    nu: float = 0.1
    outputs: int = 3
    actuators: tuple = DEFAULT_ACTUATORS

    def cells(self, level: int) -> int:
        if level not in (0, 1, 2):
            raise ValueError(f"invalid refinement level {level}")
        return self.coarse_cells * 2**level


@dataclass(frozen=True)
class Grid:
    cells: int

    @property
    def side(self) -> int:
        return self.cells + 1

    @property
    def h(self) -> float:
        return 1.0 / self.cells

    @property
    def n(self) -> int:
        return self.side**2

    def coords(self):
        """Node coordinates ``(x1, x2)``, x1 varying fastest."""
        s = np.linspace(0.0, 1.0, self.side)
        X1, X2 = np.meshgrid(s, s, indexing="xy")
        return X1.ravel(), X2.ravel()

    def weights(self) -> np.ndarray:
        w1 = np.full(self.side, self.h)
        w1[[0, -1]] *= 0.5
        return np.kron(w1, w1)


def _lap1d(k: int, h: float) -> sp.csr_matrix:
    main = -2.0 * np.ones(k)
    off = np.ones(k - 1)
    L = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    L[0, 1] = 2.0
    L[k - 1, k - 2] = 2.0
    return sp.csr_matrix(L) / h**2


def _grad1d(k: int, h: float) -> sp.csr_matrix:
    off = 0.5 * np.ones(k - 1)
    D = sp.diags([-off, off], [-1, 1], format="lil")
    # reflected ghost node: derivative vanishes on the boundary
    D[0, 1] = 0.0
    D[k - 1, k - 2] = 0.0
    return sp.csr_matrix(D) / h


def laplacian(grid: Grid) -> sp.csr_matrix:
    """Five-point Neumann Laplacian (ghost reflection)."""
    k, h = grid.side, grid.h
    I = sp.identity(k, format="csr")
    L1 = _lap1d(k, h)
    return sp.csr_matrix(sp.kron(I, L1) + sp.kron(L1, I))


def gradients(grid: Grid):
    k, h = grid.side, grid.h
    I = sp.identity(k, format="csr")
    D1 = _grad1d(k, h)
    return sp.csr_matrix(sp.kron(I, D1)), sp.csr_matrix(sp.kron(D1, I))


def convection(sigma: float):
    return np.array([-0.5 * math.cos(sigma), math.sin(sigma)])


def neumann_modes(p: int, limit: int = 6):
    """First ``p`` index pairs ``(j, k)`` of ``cos(j pi x1) cos(k pi x2)``.

    Ordered by eigenvalue ``j^2 + k^2``; ties put the x1 mode first.
    """
    pairs = [(j, k) for j in range(limit) for k in range(limit)]
    pairs.sort(key=lambda jk: (jk[0] ** 2 + jk[1] ** 2, jk[1], jk[0]))
    return pairs[:p]


def eigenfunctions(grid: Grid, p: int) -> np.ndarray:
    """Sampled Neumann eigenfunctions, unit norm in the discrete L2 product; shape ``(p, n)``."""
    x1, x2 = grid.coords()
    W = grid.weights()
    E = []
    for j, k in neumann_modes(p):
        e = np.cos(j * np.pi * x1) * np.cos(k * np.pi * x2)
        E.append(e / math.sqrt(np.sum(W * e * e)))
    return np.array(E)


def actuator_matrix(grid: Grid, actuators) -> np.ndarray:
    x1, x2 = grid.coords()
    tol = 1e-12
    cols = []
    for (a1, b1), (a2, b2) in actuators:
        ind = (x1 >= a1 - tol) & (x1 <= b1 + tol) & (x2 >= a2 - tol) & (x2 <= b2 + tol)
        cols.append(ind.astype(float))
    return np.array(cols).T


def initial_state_pde(grid: Grid) -> np.ndarray:
    x1, _ = grid.coords()
    return 1.0 - 3.0 * x1 * np.sin(x1)


def injection_index(coarse: Grid, fine: Grid) -> np.ndarray:
    """Fine-grid indices of the nodes shared with the coarse grid."""
    r = fine.cells // coarse.cells
    if r * coarse.cells != fine.cells or r < 1:
        raise ValueError("grids are not nested")
    idx = np.arange(coarse.side) * r
    J, I = np.meshgrid(idx, idx, indexing="ij")
    return (J * fine.side + I).ravel()


def restrict(field: np.ndarray, coarse_cells: int, fine_cells: int) -> np.ndarray:
    """Injection from the fine to the coarse nested grid."""
    return np.asarray(field)[..., injection_index(Grid(coarse_cells), Grid(fine_cells))]


def _prolong1d(kc: int, r: int) -> sp.csr_matrix:
    kf = (kc - 1) * r + 1
    P = sp.lil_matrix((kf, kc))
    for i in range(kf):
        c, rem = divmod(i, r)
        if rem == 0:
            P[i, c] = 1.0
        else:
            w = rem / r
            P[i, c] = 1.0 - w
            P[i, c + 1] = w
    return sp.csr_matrix(P)


def prolong(field: np.ndarray, coarse_cells: int, fine_cells: int) -> np.ndarray:
    """Bilinear interpolation from the coarse to the fine nested grid."""
    r = fine_cells // coarse_cells
    if r * coarse_cells != fine_cells or r < 1:
        raise ValueError("grids are not nested")
    P1 = _prolong1d(coarse_cells + 1, r)
    P = sp.kron(P1, P1, format="csr")
    return (P @ np.asarray(field).T).T


def level_cells(level: int, settings: ParabolicSettings = ParabolicSettings()) -> int:
    return settings.cells(level)


@lru_cache(maxsize=16)
def _parabolic_parts(cells: int, nu: float, outputs: int, actuators: tuple):
    grid = Grid(cells)
    L = laplacian(grid)
    Dx1, Dx2 = gradients(grid)
    x1, _ = grid.coords()
    W = grid.weights()
    E = eigenfunctions(grid, outputs)
    C = E * W[None, :]
    B = actuator_matrix(grid, actuators)
    return grid, L, Dx1, Dx2, sp.diags(1.0 + x1, format="csr"), W, C, B


def build_parabolic(
    sigma: float,
    level: int = 0,
    settings: ParabolicSettings = ParabolicSettings(),
    feedback_level: Optional[int] = 0,
) -> ControlSystem:
    """``A(t) = nu Lap - I + (1 + 5 sin 2 pi t)(1 + x1) - b_sigma . grad`` on the level grid.

    Stored gains live on ``feedback_level`` and act on the state by
    injection onto that grid.
    """
    sigma = float(np.ravel(sigma)[0])
    cells = settings.cells(level)
    grid, L, Dx1, Dx2, R, W, C, B = _parabolic_parts(cells, settings.nu, settings.outputs, tuple(settings.actuators))
    b = convection(sigma)
    M0 = settings.nu * L - sp.identity(grid.n, format="csr") - b[0] * Dx1 - b[1] * Dx2
    op = TimePeriodicOperator((sp.csr_matrix(M0), R), (Constant(1.0), Sinusoid(1.0, 5.0, 1.0, 0.0)), 1.0)
    Q = np.diag(np.sqrt(W))
    fidx = None
    if feedback_level is not None and feedback_level != level:
        fidx = injection_index(Grid(settings.cells(feedback_level)), grid)
    return ControlSystem(
        op, B, C, Q, parameter=(sigma,), box=((0.0,), (2.0 * np.pi,)),
        norm_weights=W, feedback_index=fidx, label=f"pde({sigma:.4g},L{level})",
    )


# --------------------------------------------------------------------------
# ensembles
# --------------------------------------------------------------------------


def replication(n: int, N: int) -> np.ndarray:
    """``E : R^n -> R^{nN}``, ``x -> [x; x; ...; x]``."""
    return np.tile(np.eye(n), (N, 1))


@dataclass(frozen=True, eq=False)
class EnsembleSystem:
    members: tuple
    system: ControlSystem
    E: np.ndarray

    @property
    def N(self) -> int:
        return len(self.members)

    def robust_gains(self, pis: np.ndarray) -> np.ndarray:
        """``K = -B^T E^T Pi E`` for a stack of extended Riccati matrices."""
        B = self.members[0].B
        return -np.einsum("ji,kjl->kil", B, self.E.T @ pis @ self.E)


def build_ensemble(systems: Sequence[ControlSystem]) -> EnsembleSystem:
    """Block-diagonal extended system with replicated input and averaged output weight."""
    if len(systems) == 0:
        raise ValueError("empty ensemble")
    s0 = systems[0]
    n, N = s0.n, len(systems)
    for s in systems:
        if s.n != n or s.B.shape != s0.B.shape or s.C.shape != s0.C.shape:
            raise ValueError("ensemble members have mixed dimensions")
        if not (np.array_equal(s.B, s0.B) and np.array_equal(s.C, s0.C)):
            raise ValueError("ensemble members must share B and C")
    periods = {s.period for s in systems if not s.A.autonomous}
    if len(periods) > 1:
        raise ValueError("ensemble members must share the period")
    period = periods.pop() if periods else 1.0
    terms, coefs = [], []
    for i, s in enumerate(systems):
        for M, c in zip(s.A.terms, s.A.coefficients):
            blk = sp.lil_matrix((n * N, n * N))
            blk[i * n:(i + 1) * n, i * n:(i + 1) * n] = M.toarray() if sp.issparse(M) else M
            terms.append(blk.toarray())
            coefs.append(c)
    op = TimePeriodicOperator(tuple(terms), tuple(coefs), period)
    E = replication(n, N)
    C_ext = s0.C @ E.T
    ext = ControlSystem(op, E @ s0.B, C_ext, C_ext / math.sqrt(N), label=f"ensemble(N={N})")
    return EnsembleSystem(tuple(systems), ext, E)


BUILDERS: dict[str, Callable[..., ControlSystem]] = {
    "osc": lambda s, **kw: build_oscillator(s[0]),
    "periodic": lambda s, **kw: build_periodic(s[0], s[1]),
    "pde": lambda s, **kw: build_parabolic(s[0], **kw),
}
