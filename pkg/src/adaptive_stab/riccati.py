"""Algebraic and periodic differential Riccati solvers, rank certificates."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.linalg as sla
import scipy.signal

from .core import ControlSystem, TimePeriodicOperator, fd_step, periodic_interp

log = logging.getLogger(__name__)


class NonConvergence(RuntimeError):
    pass


class NotStabilizable(RuntimeError):
    pass


@dataclass
class RiccatiSolution:
    """Riccati solution on a periodic mesh (a single node for the algebraic case)."""

    mesh: np.ndarray
    pis: np.ndarray
    period: float
    residual: float
    iterations: int
    terminal: Optional[np.ndarray] = None
    history: list = field(default_factory=list)

    @property
    def pi(self) -> np.ndarray:
        return self.pis[0]

    @property
    def periodicity_gap(self) -> float:
        if self.terminal is None:
            return 0.0
        return float(np.linalg.norm(self.pis[0] - self.terminal))

    def at(self, times) -> np.ndarray:
        return periodic_interp(self.mesh, self.pis, self.period, times)


def _sym(X):
    return 0.5 * (X + X.T)


def solve_lyapunov(A: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Solve ``A^T X + X A + W = 0``."""
    return _sym(sla.solve_continuous_lyapunov(A.T, -W))


def are_residual(A, B, W, Pi) -> np.ndarray:
    return A.T @ Pi + Pi @ A - Pi @ B @ B.T @ Pi + W


def is_hurwitz(A) -> bool:
    return bool(np.max(np.linalg.eigvals(A).real) < 0)


def stabilizing_gain(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``F`` with ``A - B F`` Hurwitz.

    Tries ``F = 0``, then ``F = alpha B^T`` for alpha in (1, 10, 100), then pole
    placement.
    """
    n, m = B.shape
    if is_hurwitz(A):
        return np.zeros((m, n))
    for alpha in (1.0, 10.0, 100.0):
        F = alpha * B.T
        if is_hurwitz(A - B @ F):
            return F
    if n <= 50 and m >= 1:
        ev = np.linalg.eigvals(A)
        shift = max(1.0, float(np.max(np.abs(ev.real))) + 1.0)
        poles = -shift * (1.0 + 0.1 * np.arange(n))
        try:
            # the robustness refinement may stop early; the Hurwitz check below is what counts
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                F = scipy.signal.place_poles(A, B, poles).gain_matrix
            if is_hurwitz(A - B @ F):
                return F
        except (ValueError, np.linalg.LinAlgError):
            pass
    raise NotStabilizable("no stabilizing initial gain found")


def newton_kleinman(A, B, W, F0, tol=1e-13, max_iter=100, quadratic=False):
    """Newton-Kleinman for ``A^T P + P A - P B B^T P + W = 0``.

    ``F0`` must make ``A - B F0`` Hurwitz.  Returns ``(P, iterations)``.
    With ``quadratic=True`` the loop stops once the last correction is below
    ``sqrt(tol)``: near the solution the next error is of the order of its
    square, which is enough when the Lyapunov operator is well conditioned.
    A correction that no longer shrinks while already below ``1e-8`` marks the
    roundoff floor and is accepted as convergence.
    """
    F = F0
    P_old = None
    last = math.inf
    thr = math.sqrt(tol) if quadratic else tol
    for it in range(1, max_iter + 1):
        Acl = A - B @ F
        if not np.all(np.isfinite(F)):
            raise NonConvergence("Newton-Kleinman gain overflowed")
        P = solve_lyapunov(Acl, W + F.T @ F)
        if not np.all(np.isfinite(P)):
            raise NonConvergence("Lyapunov step produced non-finite values")
        F = B.T @ P
        if P_old is not None:
            rel = np.linalg.norm(P - P_old) / (1.0 + np.linalg.norm(P))
            if rel <= thr:
                return P, it
            if rel >= last and rel <= 1e-8:
                return P, it
            last = rel
        P_old = P
    raise NonConvergence(f"Newton-Kleinman did not converge in {max_iter} iterations")


def solve_are(A, B, Q, tol: float = 1e-10, max_iter: int = 100) -> RiccatiSolution:
    """Stabilizing solution of ``A^T P + P A - P B B^T P + Q^T Q = 0``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if B.shape[0] != A.shape[0]:
        B = B.T if B.shape[1] == A.shape[0] else B
    W = Q.T @ Q
    F0 = stabilizing_gain(A, B)
    P, it = newton_kleinman(A, B, W, F0, tol=min(tol, 1e-13), max_iter=max_iter)
    res = np.linalg.norm(are_residual(A, B, W, P))
    return RiccatiSolution(np.zeros(1), P[None], 1.0, float(res), it)


# --------------------------------------------------------------------------
# periodic differential Riccati equation
# --------------------------------------------------------------------------


def _cn_riccati_step(A, B, W, P_next, G_next, dt, tol):
    """One backward Crank-Nicolson step.

    Solves ``P - dt/2 G(t_j, P) = P_next + dt/2 G(t_{j+1}, P_next)``, which is
    an algebraic Riccati equation for the shifted matrix ``A - I/dt``.
    """
    n = A.shape[0]
    At = A - np.eye(n) / dt
    Wt = W + (2.0 / dt) * (P_next + 0.5 * dt * G_next)
    Wt = _sym(Wt)
    # the -I/dt shift makes the warm-started closed loop Hurwitz in practice;
    # the eigenvalue check is only paid on failure
    try:
        P, it = newton_kleinman(At, B, Wt, B.T @ P_next, tol=tol, max_iter=30, quadratic=True)
        if np.min(np.diag(P)) >= -1e-8 * (1.0 + np.abs(P).max()):
            return P, it
    except (NonConvergence, np.linalg.LinAlgError, ValueError):
        pass
    return newton_kleinman(At, B, Wt, stabilizing_gain(At, B), tol=tol)


def riccati_mesh(period: float, dt: float) -> np.ndarray:
    M = max(1, int(math.ceil(period / dt - 1e-9)))
    return period * np.arange(M) / M


def solve_periodic_riccati(
    sys: ControlSystem,
    dt_ric: float = 1e-2,
    tol: float = 1e-9,
    max_sweeps: int = 200,
    seed: Union[str, np.ndarray] = "are",
    step_tol: float = 1e-12,
) -> RiccatiSolution:
    """Periodic solution by backward CN sweeps over one period.

    Each sweep starts from the previous sweep's value at ``t = 0`` used as the
    terminal condition at ``t = period``, and the loop stops once the two
    agree to ``tol * max(1, |Pi(0)|)`` (Frobenius norm).
    """
    period = sys.period if sys.period is not None else 1.0
    mesh = riccati_mesh(period, dt_ric)
    M = len(mesh)
    h = period / M
    B = sys.B
    W = sys.Q.T @ sys.Q
    n = sys.n
    nodes = np.append(mesh, period)
    coef = sys.A.coefficient_table(nodes)
    A_nodes = [sys.A.combine(coef[j]) for j in range(M + 1)]

    if isinstance(seed, str):
        P_T = None
        if seed == "are":
            try:
                P_T = solve_are(A_nodes[0], B, sys.Q).pi
            except (NotStabilizable, NonConvergence, np.linalg.LinAlgError, ValueError):
                P_T = None
        if P_T is None:
            P_T = W.copy()
    else:
        P_T = np.array(seed, dtype=float)

    pis = np.empty((M, n, n))
    history = []
    nk_total = 0
    for sweep in range(1, max_sweeps + 1):
        P = P_T
        G = are_residual(A_nodes[M], B, W, P)
        for j in range(M - 1, -1, -1):
            P, it = _cn_riccati_step(A_nodes[j], B, W, P, G, h, step_tol)
            nk_total += it
            G = are_residual(A_nodes[j], B, W, P)
            pis[j] = P
        gap = float(np.linalg.norm(pis[0] - P_T))
        history.append(gap)
        log.debug("periodic Riccati sweep %d: gap %.3e", sweep, gap)
        # scale-aware: an absolute threshold sits below roundoff once |Pi| is large
        if gap <= tol * max(1.0, float(np.linalg.norm(pis[0]))):
            return RiccatiSolution(mesh, pis.copy(), period, gap, sweep, terminal=P_T, history=history)
        if not np.all(np.isfinite(pis[0])):
            break
        P_T = pis[0].copy()
    raise NonConvergence(f"periodic Riccati did not converge in {max_sweeps} sweeps (last gap {history[-1]:.3e})")


def feedback_gains(B: np.ndarray, sol: RiccatiSolution) -> np.ndarray:
    """``K(t) = -B^T Pi(t)`` at every stored node."""
    return -np.einsum("ji,kjl->kil", B, sol.pis)


# --------------------------------------------------------------------------
# rank tests
# --------------------------------------------------------------------------


@dataclass
class RankCertificate:
    matrix: np.ndarray
    time: float
    rank: int
    sigma_min: float
    full_rank: bool


def numerical_rank(M: np.ndarray) -> tuple[int, float]:
    """Rank with threshold ``max(shape) * eps * sigma_max``; also the smallest singular value."""
    if M.size == 0:
        return 0, 0.0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0, 0.0
    thr = max(M.shape) * np.finfo(float).eps * s[0]
    return int(np.sum(s > thr)), float(s[-1])


def kalman_rank(A, B) -> bool:
    """True iff ``[B, AB, ..., A^{n-1} B]`` has rank n."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    rank, _ = numerical_rank(np.hstack(blocks))
    return rank == n


def _derivative_stack(A_op: TimePeriodicOperator, t: float, orders: int, h: Optional[float], analytic: bool):
    out = []
    for d in range(orders + 1):
        if d == 0:
            out.append(A_op.evaluate(t))
        elif analytic:
            out.append(A_op.derivative(t, d))
        else:
            step = h if (h is not None and d == 1) else fd_step(d, A_op.period or 1.0)
            out.append(A_op.derivative(t, d, h=step))
    return out


def _silverman_meadows(A_op, X0, t, sign, transpose, h, analytic):
    """Columns ``X_0, X_1, ...`` with ``X_{k+1} = sign * A~ X_k + d/dt X_k``.

    Derivatives of every ``X_k`` are carried through Leibniz's rule so that
    only derivatives of ``A`` itself are needed.
    """
    N = A_op.n
    dA = _derivative_stack(A_op, t, max(N - 1, 0), h, analytic)
    if transpose:
        dA = [D.T for D in dA]
    # derivs[r] = r-th time derivative of the current X_k
    derivs = [X0] + [np.zeros_like(X0) for _ in range(N - 1)]
    cols = [X0]
    for k in range(1, N):
        new = []
        for r in range(N - k):
            acc = derivs[r + 1].copy()
            for j in range(r + 1):
                acc += sign * math.comb(r, j) * dA[j] @ derivs[r - j]
            new.append(acc)
        derivs = new
        cols.append(derivs[0])
    Qm = np.hstack(cols)
    rank, smin = numerical_rank(Qm)
    return RankCertificate(Qm, float(t), rank, smin, rank == N)


def silverman_meadows_QB(A_op, B_ext, t, h=None, analytic=True) -> RankCertificate:
    """``[P_0 ... P_{n-1}]`` with ``P_0 = B``, ``P_{k+1} = -A P_k + P_k'``."""
    B_ext = np.asarray(B_ext, dtype=float).reshape(A_op.n, -1)
    return _silverman_meadows(A_op, B_ext, t, -1.0, False, h, analytic)


def silverman_meadows_QC(A_op, C_ext, t, h=None, analytic=True) -> RankCertificate:
    """``[S_0 ... S_{n-1}]`` with ``S_0 = C^T``, ``S_{k+1} = A^T S_k + S_k'``."""
    C_ext = np.asarray(C_ext, dtype=float).reshape(-1, A_op.n)
    return _silverman_meadows(A_op, C_ext.T.copy(), t, 1.0, True, h, analytic)
