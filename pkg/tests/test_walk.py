from __future__ import annotations

import math

import numpy as np
import pytest

from membrane_lab.walk import (
    ReplicaBudgetExceeded,
    StepBudgetExceeded,
    ball_region,
    box_region,
    exit_time_stats,
    lclt_compare,
    lclt_error,
    mc_gbar,
    pbar,
    simulate,
    transition_dp,
    transition_series,
)


def test_simulate_steps_and_exit():
    rng = np.random.default_rng(0)
    p = simulate((0, 0, 0, 0), box_region(3), rng)
    assert np.array_equal(p.positions[0], [0, 0, 0, 0])
    steps = p.steps
    assert np.all(np.sum(np.abs(steps), axis=1) == 1)
    assert np.all(np.abs(p.positions[:-1]).max(axis=1) <= 3)
    assert np.abs(p.exit_site).max() == 4
    assert p.exit_time == len(p.positions) - 1


def test_simulate_is_reproducible():
    a = simulate((0, 0), box_region(4), np.random.default_rng(7))
    b = simulate((0, 0), box_region(4), np.random.default_rng(7))
    assert np.array_equal(a.positions, b.positions)


def test_singleton_region_exits_immediately():
    rng = np.random.default_rng(1)
    for _ in range(20):
        assert simulate((0, 0, 0, 0), ball_region((0, 0, 0, 0), 0.5), rng).exit_time == 1


def test_step_budget():
    with pytest.raises(StepBudgetExceeded):
        simulate((0, 0), box_region(50), np.random.default_rng(0), max_steps=3)
    with pytest.raises(ValueError):
        simulate((5, 0), box_region(2), np.random.default_rng(0))


def test_exit_side_symmetric_in_one_dimension():
    rng = np.random.default_rng(2)
    n = 20000
    right = sum(simulate((0,), box_region(1), rng).exit_site[0] > 0 for _ in range(n))
    p = right / n
    assert abs(p - 0.5) <= 3 * math.sqrt(0.25 / n)


@pytest.mark.parametrize("n,start", [(10, (0, 0, 0, 0)), (10, (9, 0, 0, 0)), (1, (0, 0, 0, 0))])
def test_exit_time_bounds(n, start):
    st = exit_time_stats(n, start, 10_000 if n > 1 else 2000, seed=3)
    assert st.within_bounds(4.0)
    if start == (0, 0, 0, 0):
        assert st.lower == n * n and st.upper == (n + 1) ** 2


def test_exit_time_rejects_small_samples():
    with pytest.raises(ValueError):
        exit_time_stats(3, (0, 0, 0, 0), 50)


def test_transition_table_basics():
    t = transition_dp(6, d=4)
    assert t.prob(0, (0, 0, 0, 0)) == 1.0
    assert t.prob(1, (0, 1, 0, 0)) == 0.125
    assert t.prob(2, (0, 0, 0, 0)) == pytest.approx(0.125, abs=1e-16)
    assert np.allclose(t.slice_sums(), 1.0, atol=1e-12)
    # parity zeros are exact
    assert t.prob(3, (0, 0, 0, 0)) == 0.0
    assert t.prob(2, (1, 0, 0, 0)) == 0.0
    # hyperoctahedral symmetry is exact
    p = t.probs[4]
    assert np.array_equal(p, p[::-1])
    assert np.array_equal(p, np.transpose(p, (2, 0, 3, 1)))


def test_transition_table_budget():
    with pytest.raises(MemoryError):
        transition_dp(40, d=4, budget=1000)


@pytest.mark.parametrize("y", [(0, 0, 0, 0), (1, 0, 0, 0), (2, -1, 1, 0), (3, 3, 0, 0)])
def test_series_matches_dp(y):
    t = transition_dp(14, d=4)
    s = transition_series(y, 14)
    dp = np.array([t.prob(k, y) for k in range(15)])
    assert np.max(np.abs(s - dp)) <= 1e-15


def test_surrogate_and_error_definition():
    assert pbar(10, (0, 0, 0, 0)) == pytest.approx(8 / (100 * math.pi**2), rel=1e-14)
    assert float(pbar(10, (0, 0, 0, 0))) == pytest.approx(0.008106, abs=1e-6)
    k = np.arange(8)
    e = lclt_error(k, (1, 0, 0, 0), transition_series((1, 0, 0, 0), 7))
    assert np.all(e[k % 2 == 0] == 0)


def test_lclt_decay():
    rep = lclt_compare(np.arange(20, 82, 2))
    assert rep.origin_decay_ok(2.0)
    with pytest.raises(ValueError):
        lclt_compare([3, 4])


def test_mc_gbar_singleton_and_budget():
    for est in ("single-walk", "two-walk"):
        r = mc_gbar(0, (0, 0, 0, 0), (0, 0, 0, 0), 200, estimator=est)
        assert np.all(r.samples == 1.0)
    with pytest.raises(ReplicaBudgetExceeded):
        mc_gbar(2, (0, 0), (0, 0), 100, max_replicas=10)
    with pytest.raises(ValueError):
        mc_gbar(2, (0, 0), (0, 0), 100, estimator="three-walk")


def test_mc_gbar_estimators_agree_small_box():
    from membrane_lab.greens import gbar
    from membrane_lab.lattice import build_box

    exact = gbar(build_box(2, 2), [(1, 0)]).value((0, 0), (1, 0))
    a = mc_gbar(2, (0, 0), (1, 0), 40_000, "single-walk", seed=5)
    b = mc_gbar(2, (0, 0), (1, 0), 40_000, "two-walk", seed=6)
    assert abs(a.mean - exact) <= 4 * a.stderr
    assert abs(b.mean - exact) <= 4 * b.stderr
    assert abs(a.mean - b.mean) <= 4 * math.hypot(a.stderr, b.stderr)
