import math

import numpy as np
import pytest

from adaptive_stab import models
from adaptive_stab.adaptive import (
    IORecord,
    OnlineConfig,
    SubsetPolicy,
    build_switched,
    comparison_functional,
    dwell_time_bound,
    fit_decay,
    inject_measurement_noise,
    plateau_radius,
    run_adaptive,
    run_window,
    select_subset,
    switching_schedule,
    update_estimate,
    write_run_artifacts,
)
from adaptive_stab.core import ControlSystem, IntegratorConfig, TimePeriodicOperator, integrate_closed_loop, zero_gain
from adaptive_stab.library import TrainingSet, build_library

BOX = ((-1.0,), (1.0,))


@pytest.fixture(scope="module")
def osc11():
    systems = [models.build_oscillator(s) for s in models.oscillator_grid(5)[:, 0]]
    return systems, build_library(systems, box=BOX)


def test_comparison_functional_cases():
    assert comparison_functional(np.zeros((1, 5)), np.zeros((1, 5)), 1.0) == 0.0
    c, tau = 0.7, 0.5
    assert abs(comparison_functional(np.full((1, 11), c), np.zeros((0, 11)), tau) - c * c * tau) < 1e-12
    t = np.linspace(0, 1, 1001)
    assert abs(comparison_functional(t[None], np.zeros((1, 1001)), 1.0) - 1 / 3) < 1e-5
    with pytest.raises(ValueError):
        comparison_functional(np.zeros((1, 5)), np.zeros((1, 6)), 1.0)


def test_update_estimate_ties():
    assert update_estimate([3.0, 1.0, 1.0], ["a", "b", "c"]) == (1, "b")
    assert update_estimate([0.0], ["only"]) == (0, "only")
    with pytest.raises(ValueError):
        update_estimate([], [])


def test_degenerate_initial_state_gives_all_equal_E():
    # y02 = 0 hides the parameter entirely: every candidate ties, first one wins
    def build(s):
        A = np.array([[1.0, 1.0], [0.0, s]])
        return ControlSystem(TimePeriodicOperator.constant(A), [[1.0], [0.0]], [[1.0, 0.0]], np.eye(2), parameter=(s,))

    systems = [build(s) for s in (-2.0, -1.5, -1.0)]
    lib = build_library(systems)
    cfg = OnlineConfig(0.5, 0.5, (-1.5,), truth=IntegratorConfig("euler", 1e-3), aux=IntegratorConfig("euler", 1e-3))
    res = run_window(build(-1.3), systems, lib, (-1.5,), np.array([1.0, 0.0]), 0.0, cfg)
    assert np.all(res.E == res.E[0])
    assert res.index == 0


def test_subset_policy_cases():
    ts = TrainingSet(models.oscillator_grid(5))
    rng = np.random.default_rng(0)
    assert list(select_subset(ts, [0.4], SubsetPolicy(0, 0.0), rng)) == [7]
    assert len(select_subset(ts, [0.0], SubsetPolicy(0, 2.0), rng)) == 11
    fine = TrainingSet(models.oscillator_grid(10))
    sub = select_subset(fine, [0.0], SubsetPolicy(0, 0.1), rng)
    assert np.allclose(fine.points[sub, 0], [-0.1, 0.0, 0.1])
    assert SubsetPolicy(0, 0.04, radius_mode="sqrt").radius == pytest.approx(0.2)
    with pytest.raises(ValueError):
        SubsetPolicy(-1, 0.1)


def test_global_draws_are_seeded():
    ts = TrainingSet(models.oscillator_grid(10))
    a = select_subset(ts, [0.0], SubsetPolicy(5, 0.0), np.random.default_rng(42))
    b = select_subset(ts, [0.0], SubsetPolicy(5, 0.0), np.random.default_rng(42))
    assert np.array_equal(a, b)
    assert 10 in a


def test_noise_injection():
    y = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(inject_measurement_noise(y, 0.0, np.random.default_rng(1)), y)
    z = inject_measurement_noise(np.zeros(1000), 0.2, np.random.default_rng(1))
    assert np.all(np.abs(z) <= 0.1)
    z2 = inject_measurement_noise(np.zeros(1000), 0.2, np.random.default_rng(1))
    assert np.array_equal(z, z2)


def test_io_record_rejects_nonfinite():
    with pytest.raises(ValueError):
        IORecord(0, np.arange(2.0), np.array([[np.nan, 0.0]]), np.zeros((1, 2)))


def test_exact_zero_for_true_parameter(osc11):
    systems, lib = osc11
    cfg = OnlineConfig(0.5, 0.5, (0.0,))
    res = run_window(systems[8], systems, lib, (0.0,), np.array([1.0, 1.0]), 0.0, cfg)
    assert res.E[8] == 0.0
    assert res.estimate[0] == pytest.approx(0.6)


def test_identical_auxiliaries_tie():
    s = models.build_oscillator(0.3)
    lib = build_library([s])
    cfg = OnlineConfig(0.5, 0.5, (0.3,))
    res = run_window(s, [s, s, s], lib, (0.3,), np.array([1.0, 0.0]), 0.0, cfg, subset=np.array([0, 0, 0]))
    assert np.all(res.E == 0.0) and res.index == 0


def test_no_update_policy_keeps_estimate(osc11):
    systems, lib = osc11
    cfg = OnlineConfig(0.5, 20.0, (0.0,))
    res = run_adaptive(models.build_oscillator(0.95), systems, lib, cfg, SubsetPolicy(0, 0.0), [1.0, 1.0])
    assert np.all(res.estimates == 0.0) and np.all(res.updates == 0.0)
    assert res.norm[-1] > res.norm[0]


def test_local_updates_reach_neighbours(osc11):
    systems, lib = osc11
    cfg = OnlineConfig(0.5, 20.0, (0.0,))
    res = run_adaptive(models.build_oscillator(0.95), systems, lib, cfg, SubsetPolicy(0, 0.1, radius_mode="sqrt"), [1.0, 1.0])
    assert round(res.final_estimate[0], 12) in (0.8, 1.0)
    late = res.estimates[res.window_starts >= 10.0, 0]
    assert np.all(np.isin(np.round(late, 12), [0.8, 1.0]))
    assert res.norm[-1] < res.norm[0]


def test_truth_in_training_locks_from_window_two(osc11):
    systems, lib = osc11
    cfg = OnlineConfig(0.5, 5.0, (0.0,))
    res = run_adaptive(systems[7], systems, lib, cfg, SubsetPolicy(0, 2.0), [1.0, 1.0])
    assert np.all(res.estimates[1:, 0] == systems[7].parameter[0])


def test_determinism_with_seed(osc11):
    systems, lib = osc11
    cfg = OnlineConfig(0.5, 5.0, (0.0,), noise=1e-2)
    runs = [
        run_adaptive(models.build_oscillator(0.95), systems, lib, cfg, SubsetPolicy(3, 0.1, seed=11), [1.0, 1.0])
        for _ in range(2)
    ]
    assert np.array_equal(runs[0].norm, runs[1].norm)
    assert np.array_equal(runs[0].estimates, runs[1].estimates)


def test_parallel_windows_match_serial(osc11):
    systems, lib = osc11
    base = dict(tau=0.5, horizon=3.0, initial_guess=(0.0,))
    a = run_adaptive(models.build_oscillator(0.95), systems, lib, OnlineConfig(**base), SubsetPolicy(4, 0.1, seed=3), [1.0, 1.0])
    b = run_adaptive(models.build_oscillator(0.95), systems, lib, OnlineConfig(**base, jobs=4), SubsetPolicy(4, 0.1, seed=3), [1.0, 1.0])
    assert np.array_equal(a.norm, b.norm)
    for (ia, Ea), (ib, Eb) in zip(a.comparisons, b.comparisons):
        assert np.array_equal(ia, ib) and np.array_equal(Ea, Eb)


def test_switching_schedule():
    sched = switching_schedule([(0.7, 7.0), (2.0, 7.0), (3.6, 7.0), (5.2, 7.0)])
    assert sched(6.999) == (0.7,) and sched(7.0) == (2.0,) and sched(14.0) == (3.6,) and sched(21.0) == (5.2,)
    assert switching_schedule([(0.3, 1.0)])(100.0) == (0.3,)
    sw = build_switched(lambda s: models.build_oscillator(s[0]), switching_schedule([(-0.5, 1.0), (0.5, 1.0)]))
    assert sw.A.evaluate(0.5)[1, 1] == -0.5 and sw.A.evaluate(1.5)[1, 1] == 0.5
    with pytest.raises(ValueError):
        switching_schedule([(0.1, 0.0)])


def test_fit_decay_exact():
    t = np.linspace(0, 3, 301)
    zeta, mu = fit_decay(t, np.exp(-2 * t))
    assert abs(mu - 2) < 1e-6 and abs(zeta - 1) < 1e-9
    zeta, mu = fit_decay(t, 3 * np.exp(-t))
    assert abs(mu - 1) < 1e-6 and abs(zeta - 3) < 1e-9


def test_fit_decay_of_integrated_flow():
    s = ControlSystem(TimePeriodicOperator.constant([[-1.0]]), [[0.0]], [[1.0]], [[1.0]])
    tr = integrate_closed_loop(s, zero_gain(s), [1.0], 0.0, 5.0, IntegratorConfig("cn", 1e-3))
    _, mu = fit_decay(tr.t, tr.norm)
    assert abs(mu - 1) < 1e-3


def test_dwell_time_bound_and_plateau():
    assert dwell_time_bound(math.e, 2.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        dwell_time_bound(0.5, 1.0)
    t = np.linspace(0, 10, 101)
    assert plateau_radius(t, np.where(t < 5, 10.0, 0.1)) == pytest.approx(0.1)


def test_run_artifacts(tmp_path, osc11):
    systems, lib = osc11
    cfg = OnlineConfig(0.5, 1.0, (0.0,))
    res = run_adaptive(models.build_oscillator(0.95), systems, lib, cfg, SubsetPolicy(0, 0.1), [1.0, 1.0], fit=True)
    out = write_run_artifacts(res, tmp_path, {"experiment": "osc"}, 5, every=10)
    assert (out / "estimates.csv").read_text().splitlines()[0] == "window,t,sigma_1"
    assert len((out / "estimates.csv").read_text().splitlines()) == 4
    assert "\"seed\": 5" in (out / "summary.json").read_text()
    assert (out / "comparison.csv").exists() and (out / "norms.csv").exists()
