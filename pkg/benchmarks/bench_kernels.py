"""Wall-clock comparison of the compiled and NumPy integration kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from adaptive_stab import kernels, models
from adaptive_stab.core import IntegratorConfig, integrate_states, zero_gain
from adaptive_stab.library import build_library


def cases():
    s = models.build_periodic(1.2, 0.3)
    gain = build_library([s]).schedules[0]
    block = np.random.default_rng(0).normal(size=(2, 11))
    yield "periodic ODE, 11 initial states, cnab, 20000 steps", s, gain, block, 20.0, "cnab"
    yield "periodic ODE, 1 state, euler, 20000 steps", s, gain, np.ones(2), 20.0, "euler"
    for level in (0, 1):
        p = models.build_parabolic(0.7, level)
        y0 = models.initial_state_pde(models.Grid(models.ParabolicSettings().cells(level)))
        yield f"parabolic level {level} (n={p.n}), cnab, 1000 steps", p, zero_gain(p), y0, 1.0, "cnab"


def timed(backend, system, gain, y0, t1, scheme, repeat):
    kernels.integrate = backend
    cfg = IntegratorConfig(scheme, 1e-3)
    system._cache.clear()
    integrate_states(system, gain, y0, 0.0, t1, cfg)  # warm-up builds the factorization
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        _, Y = integrate_states(system, gain, y0, 0.0, t1, cfg)
        best = min(best, time.perf_counter() - t)
    return best, Y


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "compiled":
        raise SystemExit("compiled kernels are not built; reinstall with Cython available")
    original = kernels.integrate
    print(f"{'case':<52s} {'python [s]':>11s} {'compiled [s]':>13s} {'speed-up':>9s} {'max diff':>10s}")
    try:
        for name, system, gain, y0, t1, scheme in cases():
            tp, Yp = timed(kernels.integrate_python, system, gain, y0, t1, scheme, args.repeat)
            tc, Yc = timed(kernels.integrate_compiled, system, gain, y0, t1, scheme, args.repeat)
            print(f"{name:<52s} {tp:11.4f} {tc:13.4f} {tp / tc:8.1f}x {np.max(np.abs(Yp - Yc)):10.2e}")
    finally:
        kernels.integrate = original


if __name__ == "__main__":
    main()
