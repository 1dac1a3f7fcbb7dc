from __future__ import annotations

import math

import numpy as np
import pytest

from membrane_lab.capacity import (
    CapacityConvergenceError,
    TiltProfile,
    block_obstacle,
    continuum_energy,
    continuum_extrapolate,
    continuum_rate,
    continuum_scale,
    dirichlet_energy,
    entropy_rate,
    solve_dual,
    solve_primal,
)
from membrane_lab.greens import bilaplacian_green
from membrane_lab.lattice import build_box
from membrane_lab.operator import assemble_bilaplacian


def block3(box):
    return box.sites[box.block_mask((0,) * box.d, 1)]


def test_empty_obstacle():
    box = build_box(3, 2)
    sol = solve_primal(box, np.zeros((0, 2), int))
    assert sol.primal_value == 0 and np.all(sol.h == 0)
    assert solve_dual(box, np.zeros((0, 2), int))[0] == 0


@pytest.mark.parametrize("method", ["active-set", "projected-gradient"])
def test_singleton_closed_form(method):
    box = build_box(4, 2)
    x0 = (1, -1)
    g = bilaplacian_green(box, [x0]).values[:, 0]
    G = g[box.index_of(x0)]
    sol = solve_primal(box, [x0], method=method)
    assert sol.primal_value == pytest.approx(1 / (2 * G), rel=1e-8)
    assert np.max(np.abs(sol.h - g / G)) <= 1e-8
    val, f, ray = solve_dual(box, [x0])
    assert val == pytest.approx(1 / (2 * G), rel=1e-12)
    assert f[box.index_of(x0)] == pytest.approx(1 / G, rel=1e-12)
    assert ray == pytest.approx(val, rel=1e-12)


def test_block_duality_and_kkt():
    box = build_box(8, 2)
    D = block3(box)
    a = solve_primal(box, D, method="active-set")
    b = solve_primal(box, D, method="projected-gradient")
    for s in (a, b):
        assert s.gap <= 1e-6
        assert all(v <= 1e-8 for v in s.kkt.values())
        ids = box.index_of(D)
        assert np.all(s.h[ids] >= 1 - 1e-8)
        mask = np.ones(box.n_sites, bool)
        mask[ids] = False
        assert np.all(s.f[mask] == 0)
    assert a.primal_value == pytest.approx(b.primal_value, rel=1e-8)
    assert np.max(np.abs(a.h - b.h)) <= 1e-6
    Q = assemble_bilaplacian(box).matrix
    assert a.primal_value == pytest.approx(0.5 * a.h @ (Q @ a.h), rel=1e-14)


def test_monotone_in_obstacle():
    box = build_box(6, 2)
    vals = [solve_primal(box, box.sites[box.block_mask((0, 0), r)]).primal_value for r in range(3)]
    assert vals[0] < vals[1] < vals[2]


def test_level_scaling():
    box = build_box(6, 2)
    D = block3(box)
    v1 = solve_primal(box, D).primal_value
    v3 = solve_primal(box, D, level=3.0).primal_value
    assert v3 == pytest.approx(9 * v1, rel=1e-10)


def test_unconstrained_dual():
    box = build_box(8, 2)
    D = block3(box)
    signed, fs, rs = solve_dual(box, D, sign_constrained=True)
    free, ff, rf = solve_dual(box, D, sign_constrained=False)
    # the free maximiser has negative entries, so its value is larger
    assert ff.min() < 0 and free > signed
    # the Rayleigh value equals the dual value at either maximiser
    assert rs == pytest.approx(signed, rel=1e-8)
    assert rf == pytest.approx(free, rel=1e-10)
    single = box.sites[:1] * 0
    assert solve_dual(box, single, False)[0] == pytest.approx(solve_dual(box, single, True)[0], rel=1e-12)


def test_rejects_bad_input():
    box = build_box(3, 2)
    with pytest.raises(ValueError):
        solve_primal(box, [(9, 0)])
    with pytest.raises(ValueError):
        solve_primal(box, [(0, 0)], method="newton")


def test_nonconvergence_reports_best_iterate():
    box = build_box(8, 2)
    with pytest.raises(CapacityConvergenceError) as err:
        solve_primal(box, block3(box), method="projected-gradient", maxiter=3)
    assert err.value.best.h.shape == (box.n_sites,)


def test_continuum_trend_is_cauchy():
    vals = []
    for N in (8, 16, 32):
        box = build_box(N, 2)
        vals.append(continuum_scale(N, 2) * solve_primal(box, block_obstacle(box, 0.25)).primal_value)
    rep = continuum_extrapolate([8, 16, 32], vals)
    assert rep.cauchy
    assert vals[0] < vals[1] < vals[2] < rep.limit
    with pytest.raises(ValueError):
        continuum_extrapolate([8, 16], vals[:2])


def test_bump_profile():
    p = TiltProfile.bump(2)
    x = np.array([[0.3, -0.4]])
    # compare the analytic Laplacian to a central difference
    h = 1e-4
    fd = sum((p.shape(x + h * e) - 2 * p.shape(x) + p.shape(x - h * e)) / h**2 for e in np.eye(2))
    assert p.laplacian(x)[0] == pytest.approx(fd[0], rel=1e-6)
    box = build_box(4, 2)
    v = p.discretize(box)
    assert v[box.index_of((0, 0))] == 1.0
    assert np.all(v >= 0) and v.max() == 1.0


def test_entropy_rate_scaling_and_limit():
    box = build_box(8, 2)
    p0, p1, p2 = TiltProfile.bump(2, 0.0), TiltProfile.bump(2, 1.0), TiltProfile.bump(2, 2.0)
    assert entropy_rate(p0, box) == 0
    assert entropy_rate(p2, box) == pytest.approx(4 * entropy_rate(p1, box), rel=1e-14)
    # the polynomial ∫|Δf|² is exact at this quadrature order
    assert continuum_energy(p1, 12) == pytest.approx(continuum_energy(p1, 24), rel=1e-13)
    prof = TiltProfile.bump(4, 3.0)
    box = build_box(12, 4)
    scaled = continuum_scale(12, 4) * entropy_rate(prof, box)
    assert abs(scaled / continuum_rate(prof) - 1) <= 0.1


def test_discrete_energy_matches_operator():
    box = build_box(5, 2)
    v = TiltProfile.bump(2).discretize(box)
    Q = assemble_bilaplacian(box).matrix
    # bump values vanish on the inner boundary layer to second order, so the r term is tiny
    assert dirichlet_energy(box, v) == pytest.approx(float(v @ (Q @ v)), rel=0.05)
    assert math.isfinite(dirichlet_energy(box, v))


def test_profile_from_capacity():
    box = build_box(4, 2)
    sol = solve_primal(box, block3(box))
    p = TiltProfile.from_capacity(sol, 2.0)
    assert np.array_equal(p.mean(box), 2.0 * math.log(4) * sol.h)
    with pytest.raises(ValueError):
        p.discretize(build_box(3, 2))
