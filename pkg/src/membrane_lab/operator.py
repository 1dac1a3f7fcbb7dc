"""Stencil operators on V_N, the Dirichlet form and discrete Sobolev norms.

Matrix entries are dyadic rationals; they are built as ``Fraction`` values and
converted once to float so every assembly is bit-stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .lattice import FieldOnBox, LatticeBox, build_box, grad, laplacian_grid, multi_indices


@dataclass(frozen=True)
class ModelConstants:
    """Closed-form constants of the model in dimension d."""

    d: int = 4

    @property
    def gamma(self) -> float:
        return 8.0 / math.pi**2

    @property
    def unit_ball_volume(self) -> float:
        return math.pi ** (self.d / 2) / math.gamma(self.d / 2 + 1)

    @property
    def a_d(self) -> float:
        if self.d <= 2:
            raise ValueError("a_d is defined for d >= 3")
        return 2.0 / ((self.d - 2) * self.unit_ball_volume)

    @property
    def max_rate(self) -> float:
        """2 sqrt(2 gamma); equals 8/pi."""
        return 2.0 * math.sqrt(2.0 * self.gamma)


GAMMA = ModelConstants().gamma
MAX_RATE = ModelConstants().max_rate


@dataclass
class StencilOperator:
    box: LatticeBox
    kind: str
    matrix: sp.csr_matrix
    row_sites: np.ndarray | None = field(default=None, repr=False)

    def __matmul__(self, v):
        return self.matrix @ v

    @property
    def shape(self):
        return self.matrix.shape


def _assemble(row_sites: np.ndarray, col_box: LatticeBox, stencil: dict[tuple, Fraction]) -> sp.csr_matrix:
    """Sparse matrix M[x, y] = stencil[y - x] for rows x, columns y ∈ V_N."""
    rows, cols, vals = [], [], []
    n_rows = len(row_sites)
    row_ids = np.arange(n_rows)
    for off, w in stencil.items():
        y = row_sites + np.asarray(off)
        ok = np.all(np.abs(y) <= col_box.N, axis=1)
        rows.append(row_ids[ok])
        cols.append(col_box.index_of(y[ok]) if ok.any() else np.zeros(0, dtype=int))
        vals.append(np.full(ok.sum(), float(w)))
    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, col_box.n_sites),
    )
    return m.tocsr()


def laplacian_stencil(d: int) -> dict[tuple, Fraction]:
    st = {(0,) * d: Fraction(-1)}
    for i in range(d):
        for s in (1, -1):
            e = [0] * d
            e[i] = s
            st[tuple(e)] = Fraction(1, 2 * d)
    return st


def bilaplacian_stencil(d: int) -> dict[tuple, Fraction]:
    """Entries of Δ² classified by Euclidean distance |x - y| ∈ {0, 1, √2, 2}."""
    st = {(0,) * d: 1 + Fraction(1, 2 * d)}
    for i in range(d):
        for s in (1, -1):
            e = [0] * d
            e[i] = s
            st[tuple(e)] = Fraction(-1, d)
            e[i] = 2 * s
            st[tuple(e)] = Fraction(1, 4 * d * d)
    for i, j in combinations(range(d), 2):
        for si in (1, -1):
            for sj in (1, -1):
                e = [0] * d
                e[i], e[j] = si, sj
                st[tuple(e)] = Fraction(1, 2 * d * d)
    return st


def assemble_laplacian(box: LatticeBox) -> StencilOperator:
    """Dirichlet restriction Δ_N: diagonal -1, 1/(2d) between neighbours in V_N."""
    return StencilOperator(box, "laplacian", _assemble(box.sites, box, laplacian_stencil(box.d)))


def assemble_bilaplacian(box: LatticeBox) -> StencilOperator:
    return StencilOperator(box, "bilaplacian", _assemble(box.sites, box, bilaplacian_stencil(box.d)))


def assemble_squared_laplacian(box: LatticeBox) -> StencilOperator:
    L = assemble_laplacian(box).matrix
    return StencilOperator(box, "squared-laplacian", (L @ L).tocsr())


def assemble_incidence(box: LatticeBox) -> StencilOperator:
    """B with rows over V_{N+1} and columns over V_N, so that Bᵀ B = Δ²_N.

    Row x of B v is the full-lattice Δv(x) of the zero extension of v.
    """
    rows = build_box(box.N + 1, box.d, budget=max(box.budget, (2 * box.N + 3) ** box.d)).sites
    M = _assemble(rows, box, laplacian_stencil(box.d))
    return StencilOperator(box, "incidence", M, row_sites=rows)


def r_count(box: LatticeBox, x) -> int:
    """Number of unit neighbours of x outside V_N; x must lie in ∂₋V_N."""
    x = np.asarray(x)
    if not (box.contains(x) and np.min(box.N + 1 - np.abs(x)) <= 1):
        raise ValueError(f"{tuple(x)} is not in the inner boundary of V_{box.N}")
    return int(np.sum(np.abs(x) == box.N))


def bilaplacian_apply(box: LatticeBox, vec: np.ndarray) -> np.ndarray:
    """Matrix-free Δ²_N v via two full-lattice Laplacians (leading batch axes allowed)."""
    U = box.embed(vec)
    return box.restrict(laplacian_grid(laplacian_grid(U, box.d), box.d))


def _check_field(v: FieldOnBox, w: FieldOnBox):
    if v.box != w.box:
        raise ValueError("fields live on different boxes")


def dirichlet_form(v: FieldOnBox, w: FieldOnBox) -> float:
    """D(v, w) = Σ_{V_N} Δv Δw + (2d)^{-2} Σ_{∂₋V_N} r v w for v, w ∈ E_1.

    The boundary weight (2d)^{-2} is what Δv contributes at the exterior
    neighbours, so D(v, v) = Σ_{Z^d} (Δv)² = ⟨Δ²_N v, v⟩.
    """
    _check_field(v, w)
    box = v.box
    sl = box.interior_slice
    lv = laplacian_grid(v.values, box.d)[sl]
    lw = laplacian_grid(w.values, box.d)[sl]
    bulk = float(np.sum(lv * lw))
    vi, wi = v.values[sl], w.values[sl]
    edge = float(np.sum(box.r_counts * vi * wi)) / (2 * box.d) ** 2
    return bulk + edge


@dataclass
class SobolevNorm:
    k: int
    value: float
    terms: list[float]


def sobolev_norm(v: FieldOnBox, k: int) -> SobolevNorm:
    """‖v‖²_{H^k(V_N)} = Σ_{j≤k} Σ_{|α|=j} Σ_{x∈V_N} (N^j ∇^α v(x))²."""
    if k < 0:
        raise ValueError("order must be nonnegative")
    box = v.box
    terms = []
    for j in range(k + 1):
        s = 0.0
        for a in multi_indices(j, box.d):
            g = grad(v, a).values[box.interior_slice]
            s += float(np.sum(g * g))
        terms.append(box.N ** (2 * j) * s)
    return SobolevNorm(k, float(sum(terms)), terms)


# -- explicit-constant inequality checks --------------------------------------


def second_difference_energy(v: FieldOnBox) -> float:
    """Σ_{x∈V_{N+1}} Σ_{i,j} (∇_i ∇_j v(x))²."""
    box = v.box
    sl = (slice(1, -1),) * box.d  # V_{N+1} inside the padded grid
    total = 0.0
    for i in range(box.d):
        for j in range(box.d):
            a = [0] * box.d
            a[i] += 1
            a[j] += 1
            g = grad(v, a).values[sl]
            total += float(np.sum(g * g))
    return total


def hessian_bound_sides(v: FieldOnBox) -> tuple[float, float]:
    """(lhs, rhs) of Σ_{V_{N+1}} Σ_{ij} (∇_i∇_j v)² ≤ (2d)² D(v, v)."""
    return second_difference_energy(v), (2 * v.box.d) ** 2 * dirichlet_form(v, v)


def _line_poincare_sides(h: np.ndarray, box: LatticeBox, i: int) -> tuple[float, float]:
    """(lhs, rhs) of Σ_{V_N} h² ≤ (2N+1)² (Σ_{V_N} (∇_i h)² + Σ_{∂₋V_N} r h²), h on the padded grid."""
    sl = box.interior_slice
    hi = h[sl]
    dh = (np.roll(h, -1, axis=i) - h)[sl]
    lhs = float(np.sum(hi * hi))
    rhs = (2 * box.N + 1) ** 2 * (float(np.sum(dh * dh)) + float(np.sum(box.r_counts * hi * hi)))
    return lhs, rhs


def poincare_sides(v: FieldOnBox, i: int) -> tuple[float, float]:
    return _line_poincare_sides(v.values, v.box, i)


def gradient_poincare_sides(v: FieldOnBox, i: int) -> tuple[float, float]:
    """The line inequality applied to h = ∇_i v."""
    e = [0] * v.box.d
    e[i] = 1
    return _line_poincare_sides(grad(v, e).values, v.box, i)


def h2_bound_constant(N: int, d: int) -> float:
    """Chained explicit constant C with ‖v‖²_{H²} ≤ C N⁴ D(v, v) on E_1.

    Uses Σ g² ≤ L² Σ (∇g)² along lines of length L ≤ 2N+2 twice and the
    identity Σ_{Z^d} Σ_{ij} (∇_i∇_j v)² = (2d)² Σ_{Z^d} (Δv)².
    """
    c0 = (2 * N + 2) ** 2
    return (2 * d) ** 2 * (1 + c0 / N**2 + c0**2 / N**4)


def embedding_ratio(f: FieldOnBox, k: int, order: int = 0) -> float:
    """max_{|α|=order} sup|∇^α f| · N^{order} · N^{d/2} / ‖f‖_{H^k(V_N)}."""
    box = f.box
    top = 0.0
    for a in multi_indices(order, box.d):
        top = max(top, float(np.max(np.abs(grad(f, a).interior()))))
    norm = math.sqrt(sobolev_norm(f, k).value)
    return top * box.N**order * box.N ** (box.d / 2) / norm


def is_positive_definite(M: sp.spmatrix) -> bool:
    """Dense Cholesky attempt (small matrices only)."""
    try:
        np.linalg.cholesky(M.toarray())
    except np.linalg.LinAlgError:
        return False
    return True
