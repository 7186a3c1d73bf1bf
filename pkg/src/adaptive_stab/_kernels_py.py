"""NumPy reference implementation of the stepping kernels."""

import numpy as np
import scipy.sparse as sp


def _apply(terms, weights, skip, Y):
    out = np.zeros_like(Y)
    for j, (w, M) in enumerate(zip(weights, terms)):
        if j == skip or w == 0.0:
            continue
        out += w * (M @ Y)
    return out


def _feedback(B, K, gidx, Y):
    return B @ (K @ Y[gidx])


def _dense(terms, weights, n):
    M = np.zeros((n, n))
    for w, T in zip(weights, terms):
        if w == 0.0:
            continue
        M += w * (T.toarray() if sp.issparse(T) else T)
    return M


def integrate(prep, scheme, h, Y0, Y1, coef, B, gains, gidx, blowup):
    S = coef.shape[0]
    n, r = Y0.shape
    Y = np.empty((S + 1, n, r))
    Y[0] = Y0
    terms = prep.terms
    limit = blowup * blowup

    def check(k):
        return np.any(np.sum(Y[k] * Y[k], axis=0) > limit) or not np.all(np.isfinite(Y[k]))

    if check(0):
        return Y, 0

    if scheme == 0:
        for k in range(S):
            Yk = Y[k]
            Y[k + 1] = Yk + h * (_apply(terms, coef[k], -1, Yk) + _feedback(B, gains[k], gidx, Yk))
            if check(k + 1):
                return Y, k + 1
        return Y, -1

    if scheme == 1:
        I = np.eye(n)
        for k in range(S):
            M = _dense(terms, coef[k], n)
            M[:, gidx] += B @ gains[k]
            Y[k + 1] = np.linalg.solve(I - 0.5 * h * M, Y[k] + 0.5 * h * (M @ Y[k]))
            if check(k + 1):
                return Y, k + 1
        return Y, -1

    # CNAB: constant term Crank-Nicolson, everything else Adams-Bashforth 2
    imp = prep.implicit
    Mi = terms[imp] if imp >= 0 else None
    ci = prep.implicit_coef
    Y[1] = Y1
    if check(1):
        return Y, 1
    f_prev = _apply(terms, coef[0], imp, Y[0]) + _feedback(B, gains[0], gidx, Y[0])
    for k in range(1, S):
        Yk = Y[k]
        f = _apply(terms, coef[k], imp, Yk) + _feedback(B, gains[k], gidx, Yk)
        rhs = Yk + h * (1.5 * f - 0.5 * f_prev)
        if Mi is not None:
            rhs = rhs + (0.5 * h * ci) * (Mi @ Yk)
            Y[k + 1] = prep.splu.solve(np.asfortranarray(rhs)).reshape(n, r)
        else:
            Y[k + 1] = rhs
        f_prev = f
        if check(k + 1):
            return Y, k + 1
    return Y, -1
