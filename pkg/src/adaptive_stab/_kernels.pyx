# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled stepping kernels (explicit Euler, Crank-Nicolson, CNAB)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, isfinite
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef cnp.npy_intp idx_t


cdef inline void _terms_apply(
    const idx_t[::1] ptr, const idx_t[::1] rows, const idx_t[::1] cols, const double[::1] vals,
    const double[:, ::1] coef, idx_t k, idx_t skip,
    const double* y, double* out, idx_t n,
) noexcept nogil:
    cdef idx_t j, e, T = ptr.shape[0] - 1
    cdef double w
    for j in range(n):
        out[j] = 0.0
    for j in range(T):
        if j == skip:
            continue
        w = coef[k, j]
        if w == 0.0:
            continue
        for e in range(ptr[j], ptr[j + 1]):
            out[rows[e]] += w * vals[e] * y[cols[e]]


cdef inline void _feedback_add(
    const double[:, ::1] B, const double[:, :, ::1] gains, idx_t k, const idx_t[::1] gidx,
    const double* y, double* ky, double* out, idx_t n,
) noexcept nogil:
    cdef idx_t m = B.shape[1], q = gidx.shape[0], i, j
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(q):
            s += gains[k, i, j] * y[gidx[j]]
        ky[i] = s
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += B[i, j] * ky[j]
        out[i] += s


cdef inline bint _bad(const double* y, idx_t n, double limit) noexcept nogil:
    cdef idx_t i
    cdef double s = 0.0
    for i in range(n):
        s += y[i] * y[i]
    return (not isfinite(s)) or s > limit


cdef int _dense_solve(double* M, double* b, idx_t n) noexcept nogil:
    # Gaussian elimination with partial pivoting; M is n x n row-major, overwritten
    cdef idx_t i, j, k, p
    cdef double a, t
    for k in range(n):
        p = k
        a = fabs(M[k * n + k])
        for i in range(k + 1, n):
            if fabs(M[i * n + k]) > a:
                a = fabs(M[i * n + k])
                p = i
        if a == 0.0:
            return -1
        if p != k:
            for j in range(n):
                t = M[k * n + j]
                M[k * n + j] = M[p * n + j]
                M[p * n + j] = t
            t = b[k]
            b[k] = b[p]
            b[p] = t
        for i in range(k + 1, n):
            a = M[i * n + k] / M[k * n + k]
            if a != 0.0:
                for j in range(k + 1, n):
                    M[i * n + j] -= a * M[k * n + j]
                b[i] -= a * b[k]
    for i in range(n - 1, -1, -1):
        t = b[i]
        for j in range(i + 1, n):
            t -= M[i * n + j] * b[j]
        b[i] = t / M[i * n + i]
    return 0


cdef inline void _band_solve(
    const double[:, ::1] L, const double[:, ::1] U, idx_t bw, double* x, idx_t n,
) noexcept nogil:
    cdef idx_t i, d
    cdef double t
    for i in range(n):
        t = x[i]
        for d in range(1, bw + 1):
            if i - d < 0:
                break
            t -= L[i, d] * x[i - d]
        x[i] = t
    for i in range(n - 1, -1, -1):
        t = x[i]
        for d in range(1, bw + 1):
            if i + d >= n:
                break
            t -= U[i, d] * x[i + d]
        x[i] = t / U[i, 0]


def integrate(prep, int scheme, double h, Y0, Y1, coef_arr, B_arr, gains_arr, gidx_arr, double blowup):
    cdef const double[:, ::1] coef = coef_arr
    cdef const double[:, ::1] B = B_arr
    cdef const double[:, :, ::1] gains = gains_arr
    cdef const idx_t[::1] gidx = gidx_arr
    cdef const idx_t[::1] ptr = prep.term_ptr
    cdef const idx_t[::1] rows = prep.rows
    cdef const idx_t[::1] cols = prep.cols
    cdef const double[::1] vals = prep.vals
    cdef const double[:, ::1] L = prep.lower
    cdef const double[:, ::1] U = prep.upper
    cdef idx_t bw = prep.band
    cdef idx_t imp = prep.implicit
    cdef double cimp = prep.implicit_coef
    cdef const double[:, ::1] y0 = Y0
    cdef idx_t n = y0.shape[0], r = y0.shape[1], S = coef.shape[0], m = B.shape[1]
    cdef idx_t T = ptr.shape[0] - 1
    cdef double limit = blowup * blowup

    out = np.empty((S + 1, n, r))
    cdef double[:, :, ::1] Y = out
    cdef const double[:, ::1] y1
    if Y1 is not None:
        y1 = Y1

    cdef double* y = <double*> malloc(n * sizeof(double))
    cdef double* ynew = <double*> malloc(n * sizeof(double))
    cdef double* f = <double*> malloc(n * sizeof(double))
    cdef double* fprev = <double*> malloc(n * sizeof(double))
    cdef double* g = <double*> malloc(n * sizeof(double))
    cdef double* ky = <double*> malloc((m if m > 0 else 1) * sizeof(double))
    cdef double* Md = NULL
    if scheme == 1:
        Md = <double*> malloc(n * n * sizeof(double))
    cdef idx_t c, k, i, j, e, q = gidx.shape[0]
    cdef idx_t fail = -1, fail_c
    cdef double w, s
    cdef int status = 0

    with nogil:
        for c in range(r):
            fail_c = -1
            for i in range(n):
                y[i] = y0[i, c]
                Y[0, i, c] = y[i]
            if _bad(y, n, limit):
                fail_c = 0
            elif scheme == 0:
                for k in range(S):
                    _terms_apply(ptr, rows, cols, vals, coef, k, -1, y, f, n)
                    _feedback_add(B, gains, k, gidx, y, ky, f, n)
                    for i in range(n):
                        y[i] = y[i] + h * f[i]
                        Y[k + 1, i, c] = y[i]
                    if _bad(y, n, limit):
                        fail_c = k + 1
                        break
            elif scheme == 1:
                for k in range(S):
                    for i in range(n * n):
                        Md[i] = 0.0
                    for j in range(T):
                        w = coef[k, j]
                        if w == 0.0:
                            continue
                        for e in range(ptr[j], ptr[j + 1]):
                            Md[rows[e] * n + cols[e]] += w * vals[e]
                    for i in range(n):
                        for j in range(q):
                            s = 0.0
                            for e in range(m):
                                s += B[i, e] * gains[k, e, j]
                            Md[i * n + gidx[j]] += s
                    # rhs = y + h/2 M y ; lhs = I - h/2 M
                    for i in range(n):
                        s = 0.0
                        for j in range(n):
                            s += Md[i * n + j] * y[j]
                        g[i] = y[i] + 0.5 * h * s
                    for i in range(n * n):
                        Md[i] = -0.5 * h * Md[i]
                    for i in range(n):
                        Md[i * n + i] += 1.0
                    if _dense_solve(Md, g, n) != 0:
                        status = -1
                        fail_c = k + 1
                        break
                    for i in range(n):
                        y[i] = g[i]
                        Y[k + 1, i, c] = y[i]
                    if _bad(y, n, limit):
                        fail_c = k + 1
                        break
            else:
                for i in range(n):
                    ynew[i] = y1[i, c]
                    Y[1, i, c] = ynew[i]
                if S >= 1 and _bad(ynew, n, limit):
                    fail_c = 1
                else:
                    _terms_apply(ptr, rows, cols, vals, coef, 0, imp, y, fprev, n)
                    _feedback_add(B, gains, 0, gidx, y, ky, fprev, n)
                    for i in range(n):
                        y[i] = ynew[i]
                    for k in range(1, S):
                        _terms_apply(ptr, rows, cols, vals, coef, k, imp, y, f, n)
                        _feedback_add(B, gains, k, gidx, y, ky, f, n)
                        for i in range(n):
                            g[i] = y[i] + h * (1.5 * f[i] - 0.5 * fprev[i])
                        if imp >= 0:
                            for e in range(ptr[imp], ptr[imp + 1]):
                                g[rows[e]] += 0.5 * h * cimp * vals[e] * y[cols[e]]
                            _band_solve(L, U, bw, g, n)
                        for i in range(n):
                            y[i] = g[i]
                            fprev[i] = f[i]
                            Y[k + 1, i, c] = y[i]
                        if _bad(y, n, limit):
                            fail_c = k + 1
                            break
            if fail_c >= 0 and (fail < 0 or fail_c < fail):
                fail = fail_c

    free(y)
    free(ynew)
    free(f)
    free(fprev)
    free(g)
    free(ky)
    if Md != NULL:
        free(Md)
    if status != 0:
        raise np.linalg.LinAlgError("singular Crank-Nicolson step matrix")
    return out, fail
