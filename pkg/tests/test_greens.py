from __future__ import annotations

import math

import numpy as np
import pytest

from membrane_lab.greens import (
    GreenTable,
    biharmonic_residual,
    bilaplacian_green,
    diagonal,
    gbar,
    green_gap,
    harmonic_green,
    singleton_values,
)
from membrane_lab.lattice import build_box
from membrane_lab.operator import GAMMA, assemble_bilaplacian, assemble_laplacian
from membrane_lab.solve import BilaplacianSolver, SolverError, laplacian_eigenvalues
from membrane_lab.walk import fundamental_a


def test_singleton_closed_forms():
    v = singleton_values(4)
    assert v["harmonic"] == 1.0 and v["convolution"] == 1.0
    assert v["biharmonic"] == pytest.approx(8 / 9, rel=1e-15)
    assert v["gap"] == pytest.approx(1 / 9, rel=1e-14)


def test_laplacian_eigenvalues_match_dense():
    box = build_box(2, 2)
    dense = np.sort(np.linalg.eigvalsh(-assemble_laplacian(box).matrix.toarray()))
    assert np.allclose(np.sort(laplacian_eigenvalues(box.side, 2).ravel()), dense, atol=1e-14)


def test_harmonic_green_spectral_vs_sparse():
    box = build_box(3, 3)
    cols = [(0, 0, 0), (1, -2, 3)]
    a = harmonic_green(box, cols)
    b = harmonic_green(box, cols, method="sparse")
    assert np.max(np.abs(a.values - b.values)) <= 1e-12
    assert a.symmetry_error() <= 1e-10
    assert np.all(a.values >= -1e-14)
    assert a.value((0, 0, 0), (0, 0, 0)) >= 1
    assert a.value((1, -2, 3), (1, -2, 3)) >= 1


def test_harmonic_green_monotone_in_domain():
    small, big = build_box(2, 2), build_box(3, 2)
    sites = small.sites
    gs = harmonic_green(small, sites).values
    gb = harmonic_green(big, sites).values[big.index_of(sites), :]
    assert np.all(gs <= gb + 1e-13)


def test_gbar_is_square_of_gamma():
    box = build_box(2, 2)
    Linv = np.linalg.inv(-assemble_laplacian(box).matrix.toarray())
    cols = [(0, 0), (2, -1)]
    t = gbar(box, cols)
    ref = (Linv @ Linv)[:, box.index_of(np.array(cols))]
    assert np.max(np.abs(t.values - ref)) <= 1e-12


@pytest.mark.parametrize("N", [1, 2, 3])
def test_gbar_extension_solves_biharmonic_equation(N):
    box = build_box(N, 4)
    t = gbar(box, [(0, 0, 0, 0), (N, 0, -N, 0)])
    assert t.extension_residual <= 1e-12
    assert biharmonic_residual(t) <= 1e-9
    # zero on the first exterior layer
    assert np.all(t.extension[:, box.layer_mask(1)] == 0)


@pytest.mark.parametrize("N", [1, 2])
def test_biharmonic_green_against_dense_inverse(N):
    box = build_box(N, 4)
    cols = box.sites[:: max(1, box.n_sites // 7)]
    sparse = bilaplacian_green(box, cols, method="sparse")
    dense = bilaplacian_green(box, cols, method="dense")
    assert np.max(np.abs(sparse.values - dense.values)) <= 1e-8
    assert sparse.symmetry_error() <= 1e-10


def test_cg_agrees_with_direct():
    box = build_box(3, 4)
    cols = [(0, 0, 0, 0), (3, 3, 0, -1)]
    a = bilaplacian_green(box, cols, method="sparse")
    b = bilaplacian_green(box, cols, method="cg", tol=1e-12)
    assert np.max(np.abs(a.values - b.values)) <= 1e-9
    assert biharmonic_residual(b) <= 1e-9


def test_cg_nonconvergence_is_reported():
    box = build_box(3, 2)
    s = BilaplacianSolver(box, method="cg", tol=1e-14, maxiter=1)
    with pytest.raises(SolverError):
        s.solve(np.random.default_rng(0).standard_normal(box.n_sites))


def test_unknown_kind_and_method():
    box = build_box(1, 2)
    with pytest.raises(ValueError):
        GreenTable(box, "other", np.zeros((0, 2)), np.zeros((9, 0)), "x")
    with pytest.raises(ValueError):
        harmonic_green(box, [(0, 0)], method="magic")
    with pytest.raises(ValueError):
        bilaplacian_green(box, [(2, 0)])


def test_diagonal_positive_and_monotone_in_N():
    vals = [diagonal(build_box(N, 4), [(0, 0, 0, 0)])[0] for N in (1, 2, 3, 4)]
    assert all(v > 0 for v in vals)
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_diagonal_maximal_at_centre():
    box = build_box(3, 4)
    G = np.linalg.inv(assemble_bilaplacian(box).matrix.toarray())
    diag = np.diag(G)
    assert np.argmax(diag) == box.index_of((0, 0, 0, 0))


def test_gap_report():
    box = build_box(4, 4)
    rep = green_gap(box, (0, 0, 0, 0), 0.25)
    g = bilaplacian_green(box, [(0, 0, 0, 0)]).values[:, 0]
    gb = gbar(box, [(0, 0, 0, 0)]).values[:, 0]
    assert np.max(np.abs(rep.column - (gb - g))) <= 1e-12
    assert rep.sup_gap > 0 and rep.scaled_sup_grad > 0
    with pytest.raises(ValueError):
        green_gap(box, (4, 0, 0, 0), 0.3)


def test_window_values_at_small_N():
    vals = [diagonal(build_box(N, 4), [(0, 0, 0, 0)])[0] - GAMMA * math.log(N) for N in (4, 8)]
    assert max(vals) - min(vals) <= 1


def test_fundamental_solution_basics():
    assert fundamental_a((0, 0, 0, 0)).value == 0.0
    # a(x, y) depends on y - x only; the definition is in terms of the difference
    r = fundamental_a((2, 1, 0, 0))
    assert r.value == fundamental_a((1, 2, 0, 0)).value
    assert r.value == fundamental_a((-2, 0, 1, 0)).value
    with pytest.raises(ValueError):
        fundamental_a((1, 1, 1))
    with pytest.raises(ValueError):
        fundamental_a((3, 0, 0, 0), k_max=5)
