"""Stepping kernels: compiled extension with a pure-NumPy fallback.

The compiled module ``_kernels`` is used when it imports; setting
``ADAPTIVE_STAB_PURE_PYTHON=1`` forces the fallback.  Both backends share the
preparation step below and agree to rounding error.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels_py

_FORCE_PURE = os.environ.get("ADAPTIVE_STAB_PURE_PYTHON", "") not in ("", "0")

try:
    if _FORCE_PURE:
        raise ImportError("pure-python backend forced")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"

_SCHEME_ID = {"euler": 0, "cn": 1, "cnab": 2}


@dataclass
class Prepared:
    """Scheme-specific data that depends only on the operator and step size."""

    n: int
    n_terms: int
    term_ptr: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    terms: tuple
    implicit: int
    implicit_coef: float
    band: int
    lower: np.ndarray
    upper: np.ndarray
    splu: Optional[object]


def _triplets(terms):
    ptr = [0]
    rows, cols, vals = [], [], []
    for M in terms:
        coo = sp.coo_matrix(M)
        keep = coo.data != 0.0
        rows.append(coo.row[keep])
        cols.append(coo.col[keep])
        vals.append(coo.data[keep])
        ptr.append(ptr[-1] + int(keep.sum()))
    cat = lambda xs, dt: np.ascontiguousarray(np.concatenate(xs) if xs else np.zeros(0), dtype=dt)
    return (
        np.asarray(ptr, dtype=np.intp),
        cat(rows, np.intp),
        cat(cols, np.intp),
        cat(vals, float),
    )


def band_lu(M: np.ndarray, band: int) -> tuple[np.ndarray, np.ndarray]:
    """Doolittle LU without pivoting restricted to a band.

    Returns ``L[i, d] = L_{i, i-d}`` (unit diagonal implied) and
    ``U[i, d] = U_{i, i+d}``.  Only used for ``I - h/2 A`` with small ``h``,
    which is diagonally dominant, so skipping pivoting is safe; tiny pivots
    raise instead of failing silently.
    """
    A = np.array(M, dtype=float)
    n = A.shape[0]
    for k in range(n):
        piv = A[k, k]
        if abs(piv) < 1e-12 * max(1.0, np.abs(A[k]).max()):
            raise np.linalg.LinAlgError("near-zero pivot in banded LU; reduce dt")
        hi = min(n, k + band + 1)
        if hi > k + 1:
            l = A[k + 1 : hi, k] / piv
            A[k + 1 : hi, k + 1 : hi] -= np.outer(l, A[k, k + 1 : hi])
            A[k + 1 : hi, k] = l
    L = np.zeros((n, band + 1))
    U = np.zeros((n, band + 1))
    for d in range(band + 1):
        idx = np.arange(d, n)
        L[idx, d] = A[idx, idx - d] if d > 0 else 1.0
        idx = np.arange(0, n - d)
        U[idx, d] = A[idx, idx + d]
    return L, U


def prepare(A, scheme: str, dt: float) -> Prepared:
    """Flatten the operator terms and factor the implicit CNAB matrix once."""
    ptr, rows, cols, vals = _triplets(A.terms)
    n = A.n
    implicit = A.constant_index() if scheme == "cnab" else -1
    band = 0
    lower = np.ones((n, 1))
    upper = np.ones((n, 1))
    lu = None
    c_imp = 0.0
    if implicit >= 0:
        c_imp = float(A.coefficients[implicit](np.zeros(1))[0])
        Mi = A.terms[implicit]
        coo = sp.coo_matrix(Mi)
        band = int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0
        lhs = sp.identity(n, format="csc") - 0.5 * dt * c_imp * sp.csc_matrix(Mi)
        lower, upper = band_lu(lhs.toarray(), band)
        lu = spla.splu(sp.csc_matrix(lhs))
    return Prepared(
        n=n,
        n_terms=len(A.terms),
        term_ptr=ptr,
        rows=rows,
        cols=cols,
        vals=vals,
        terms=A.terms,
        implicit=implicit,
        implicit_coef=c_imp,
        band=band,
        lower=np.ascontiguousarray(lower),
        upper=np.ascontiguousarray(upper),
        splu=lu,
    )


def integrate(prep: Prepared, scheme, h, Y0, Y1, coef, B, gains, gidx, blowup):
    """Step ``S = len(coef)`` times; returns ``(Y, fail_index)``.

    ``coef``/``gains`` hold the coefficient values and gain matrices at the
    evaluation time of each step (node for Euler/CNAB, midpoint for CN).
    ``fail_index`` is the first node whose norm exceeded ``blowup``, or -1.
    """
    sid = _SCHEME_ID[scheme]
    args = (
        sid,
        float(h),
        np.ascontiguousarray(Y0, dtype=float),
        None if Y1 is None else np.ascontiguousarray(Y1, dtype=float),
        np.ascontiguousarray(coef, dtype=float),
        np.ascontiguousarray(B, dtype=float),
        np.ascontiguousarray(gains, dtype=float),
        np.ascontiguousarray(gidx, dtype=np.intp),
        float(blowup),
    )
    if _compiled is not None:
        return _compiled.integrate(prep, *args)
    return _kernels_py.integrate(prep, *args)


def integrate_python(prep, scheme, h, Y0, Y1, coef, B, gains, gidx, blowup):
    """Always use the NumPy backend (benchmarks and cross-checks)."""
    sid = _SCHEME_ID[scheme]
    return _kernels_py.integrate(
        prep, sid, float(h), np.asarray(Y0, float), None if Y1 is None else np.asarray(Y1, float),
        np.asarray(coef, float), np.asarray(B, float), np.asarray(gains, float),
        np.asarray(gidx, np.intp), float(blowup),
    )


def integrate_compiled(prep, scheme, h, Y0, Y1, coef, B, gains, gidx, blowup):
    if _compiled is None:
        raise RuntimeError("compiled kernels are not available")
    sid = _SCHEME_ID[scheme]
    return _compiled.integrate(
        prep, sid, float(h), np.ascontiguousarray(Y0, float),
        None if Y1 is None else np.ascontiguousarray(Y1, float),
        np.ascontiguousarray(coef, float), np.ascontiguousarray(B, float),
        np.ascontiguousarray(gains, float), np.ascontiguousarray(gidx, np.intp), float(blowup),
    )
