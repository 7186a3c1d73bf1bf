"""Symbolic IO differences of two-substep explicit Euler windows against brute force."""

import numpy as np
import pytest
import sympy as sp

from adaptive_stab.core import euler_product, explicit_euler_transition

s, v, xi, k1, k2, y1, y2 = sp.symbols("sigma varsigma xi kappa1 kappa2 y01 y02", real=True)
B = sp.Matrix([0, 1])
C = sp.Matrix([[1, 0]])
K = sp.Matrix([[k1, k2]])
Y0 = sp.Matrix([y1, y2])


def nilpotent(p):
    return sp.Matrix([[0, p], [0, 0]])


def oscillator(p):
    return sp.Matrix([[0, 1], [-1, p]])


def symbolic_differences(family, S=2):
    """``(delta_u^j, delta_z^j)`` for j = 1..S as sympy scalars."""
    out = []
    X_true = X_cand = sp.eye(2)
    step_true = sp.eye(2) + xi * (family(s) + B * K)
    step_cand = sp.eye(2) + xi * (family(v) + B * K)
    for _ in range(S):
        X_true = step_true * X_true
        X_cand = step_cand * X_cand
        dA = (X_cand - X_true).applyfunc(sp.expand)
        out.append((sp.expand((K * dA * Y0)[0]), sp.expand((C * dA * Y0)[0])))
    return out


def brute_force(family_np, sigma, varsigma, xi_, K_, y0, S=2):
    """Plain explicit Euler with the same gain on both plants."""
    out = []
    yt = np.array(y0, dtype=float)
    yc = yt.copy()
    At = family_np(sigma) + np.array([[0.0], [1.0]]) @ K_
    Ac = family_np(varsigma) + np.array([[0.0], [1.0]]) @ K_
    for _ in range(S):
        yt = yt + xi_ * At @ yt
        yc = yc + xi_ * Ac @ yc
        out.append(((K_ @ (yc - yt))[0], yc[0] - yt[0]))
    return out


FAMILIES = {
    "nilpotent": (nilpotent, lambda p: np.array([[0.0, p], [0.0, 0.0]]), (1.0, 2.0)),
    "oscillator": (oscillator, lambda p: np.array([[0.0, 1.0], [-1.0, p]]), (0.0, 1.0)),
}


def random_draws(rng, box, count=20):
    for _ in range(count):
        sigma, varsigma = rng.uniform(*box, size=2)
        tau = rng.uniform(0.05, 0.5)
        K_ = np.array([[rng.uniform(-3.0, -0.1), rng.uniform(-3.0, -1.1)]])
        y0 = rng.normal(size=2)
        yield sigma, varsigma, tau / 2, K_, y0


@pytest.mark.parametrize("name", sorted(FAMILIES))
def test_symbolic_matches_brute_force(name):
    family, family_np, box = FAMILIES[name]
    diffs = symbolic_differences(family)
    fns = [sp.lambdify((s, v, xi, k1, k2, y1, y2), pair, "math") for pair in diffs]
    rng = np.random.default_rng(2024)
    for sigma, varsigma, xi_, K_, y0 in random_draws(rng, box):
        ref = brute_force(family_np, sigma, varsigma, xi_, K_, y0)
        for j, fn in enumerate(fns):
            du, dz = fn(sigma, varsigma, xi_, K_[0, 0], K_[0, 1], y0[0], y0[1])
            assert abs(du - ref[j][0]) <= 1e-12 * (1 + abs(ref[j][0]))
            assert abs(dz - ref[j][1]) <= 1e-12 * (1 + abs(ref[j][1]))


def test_library_euler_product_matches_loop():
    rng = np.random.default_rng(5)
    for sigma, varsigma, xi_, K_, y0 in random_draws(rng, (1.0, 2.0)):
        A_K = np.array([[0.0, sigma], [0.0, 0.0]]) + np.array([[0.0], [1.0]]) @ K_
        X = explicit_euler_transition(A_K, xi_)
        y = y0.copy()
        for _ in range(2):
            y = y + xi_ * A_K @ y
        assert np.allclose(euler_product([X, X]) @ y0, y, rtol=0, atol=1e-14)


def test_nilpotent_closed_forms():
    (du1, dz1), (du2, dz2) = symbolic_differences(nilpotent)
    d = v - s
    assert sp.simplify(dz1 - d * xi * y2) == 0
    assert sp.simplify(du1 - d * xi * k1 * y2) == 0
    assert sp.simplify(dz2 - d * (xi**2 * k1 * y1 + xi * (2 + xi * k2) * y2)) == 0
    # the second component carries an extra xi^2 k1 k2 term besides xi (2 + xi k2) k1
    expected = d * (xi**2 * k1**2 * y1 + (xi * (2 + xi * k2) * k1 + xi**2 * k1 * k2) * y2)
    assert sp.simplify(du2 - expected) == 0
    assert sp.simplify(du2 - d * (xi**2 * k1**2 * y1 + xi * (2 + xi * k2) * k1 * y2)) != 0


def test_nilpotent_product_entries():
    X = sp.eye(2) + xi * (nilpotent(s) + B * K)
    P = (X * X).applyfunc(sp.expand)
    assert sp.simplify(P[0, 0] - (1 + xi**2 * s * k1)) == 0
    assert sp.simplify(P[0, 1] - xi * s * (2 + xi * k2)) == 0
    assert sp.simplify(P[1, 0] - xi * k1 * (2 + xi * k2)) == 0
    assert sp.simplify(P[1, 1] - (xi**2 * s * k1 + (1 + xi * k2) ** 2)) == 0


def test_oscillator_closed_forms():
    (du1, dz1), (du2, dz2) = symbolic_differences(oscillator)
    d = v - s
    assert dz1 == 0
    assert sp.simplify(du1 - d * xi * k2 * y2) == 0
    assert sp.simplify(dz2 - d * xi**2 * y2) == 0
    expected = d * (xi**2 * (k1 - 1) * k2 * y1 + (xi**2 * k1 + 2 * xi * k2 * (1 + k2 * xi) + xi**2 * k2 * (v + s)) * y2)
    assert sp.simplify(du2 - expected) == 0
