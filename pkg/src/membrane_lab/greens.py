"""Green's functions of the box: harmonic Γ_N, convolution Ḡ_N = Γ_N ∗ Γ_N,
biharmonic G_N = (Δ²_N)^{-1}, their gap H_N = Ḡ_N - G_N, and the fitted
logarithmic growth of the fundamental solution a(0, y).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import LatticeBox, interior_mask, laplacian_grid
from .operator import GAMMA, assemble_bilaplacian, assemble_laplacian
from .solve import BilaplacianSolver, unit_columns
from .walk import fundamental_a

KINDS = ("harmonic", "convolution", "biharmonic", "gap")


@dataclass
class GreenTable:
    """Selected columns of a Green's function on V_N.

    ``values[:, j]`` is the column for ``columns[j]`` over V_N in lexicographic
    order.  For the convolution kind ``extension`` holds each column on the
    padded grid including the values forced on ∂₂V_N.
    """

    box: LatticeBox
    kind: str
    columns: np.ndarray
    values: np.ndarray
    method: str
    extension: np.ndarray | None = field(default=None, repr=False)
    extension_residual: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown Green kind {self.kind!r}")

    def _col(self, y) -> int:
        y = tuple(int(c) for c in y)
        for j, c in enumerate(self.columns):
            if tuple(c) == y:
                return j
        raise KeyError(f"column {y} not tabulated")

    def column(self, y) -> np.ndarray:
        return self.values[:, self._col(y)]

    def value(self, x, y) -> float:
        return float(self.column(y)[self.box.index_of(x)])

    def symmetry_error(self) -> float:
        """max relative |T(x, y) - T(y, x)| over tabulated column pairs."""
        idx = self.box.index_of(self.columns)
        block = self.values[idx, :]
        scale = max(np.max(np.abs(block)), 1e-300)
        return float(np.max(np.abs(block - block.T)) / scale)


# -- per-box solver cache -----------------------------------------------------

_solvers: dict[tuple, BilaplacianSolver] = {}
_lock = threading.Lock()


def get_solver(box: LatticeBox, method: str = "auto", tol: float = 1e-10) -> BilaplacianSolver:
    key = (box.N, box.d, method, tol)
    with _lock:
        s = _solvers.get(key)
        if s is None:
            s = _solvers[key] = BilaplacianSolver(box, method=method, tol=tol)
    return s


def _as_columns(box: LatticeBox, columns) -> np.ndarray:
    cols = np.asarray(columns, dtype=int).reshape(-1, box.d)
    if not np.all(box.contains(cols)):
        raise ValueError("all columns must lie in V_N")
    return cols


def harmonic_green(box: LatticeBox, columns, method: str = "spectral") -> GreenTable:
    """Γ_N(·, y): ΔΓ = -δ_y on V_N, zero on ∂V_N.

    ``method='spectral'`` uses the exact sine-transform inverse; ``'sparse'``
    factorises -Δ_N directly.
    """
    cols = _as_columns(box, columns)
    E = unit_columns(box, cols)
    if method == "spectral":
        vals = get_solver(box).gamma_apply(E).T
    elif method == "sparse":
        L = -assemble_laplacian(box).matrix
        vals = spla.splu(L.tocsc()).solve(E.T)
    else:
        raise ValueError(f"unknown method {method!r}")
    return GreenTable(box, "harmonic", cols, np.ascontiguousarray(vals), method)


def _second_layer_extension(box: LatticeBox, ext: np.ndarray) -> tuple[np.ndarray, float]:
    """Fill ∂₂V_N \\ V_{N+1} so that ΔḠ = 0 on ∂V_N; values on V_{N+1} \\ V_N stay 0.

    The conditions are assembled as one sparse system per column and solved
    by least squares; the returned residual is the worst ‖Ax - b‖∞.
    """
    d = box.d
    layer1 = box.layer_mask(1)
    v_np1 = np.zeros(box.ext_shape, dtype=bool)
    v_np1[(slice(1, -1),) * d] = True
    unknown = box.layer_mask(2) & ~v_np1
    eq_idx = np.argwhere(layer1)
    unk_idx = np.argwhere(unknown)
    unk_id = -np.ones(box.ext_shape, dtype=int)
    unk_id[tuple(unk_idx.T)] = np.arange(len(unk_idx))
    rows, cols = [], []
    for i in range(d):
        for s in (1, -1):
            nb = eq_idx.copy()
            nb[:, i] += s
            ok = np.all((nb >= 0) & (nb < box.ext_shape[0]), axis=1)
            ids = np.full(len(nb), -1)
            ids[ok] = unk_id[tuple(nb[ok].T)]
            hit = ids >= 0
            rows.append(np.nonzero(hit)[0])
            cols.append(ids[hit])
    A = sp.csr_matrix(
        (np.full(sum(len(r) for r in rows), 1.0 / (2 * d)), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(eq_idx), len(unk_idx)),
    )
    # known part of ΔḠ at the equation sites (unknowns still zero in ext)
    known = laplacian_grid(ext, d)[(...,) + tuple(eq_idx.T)]
    rhs = -known
    square = A.shape[0] == A.shape[1]
    if square:
        sol = spla.splu(A.tocsc()).solve(np.atleast_2d(rhs).T).T
    else:
        sol = np.stack([spla.lsqr(A, r, atol=1e-15, btol=1e-15)[0] for r in np.atleast_2d(rhs)])
    sol = sol.reshape(rhs.shape)
    out = ext.copy()
    out[(...,) + tuple(unk_idx.T)] = sol
    resid = np.atleast_2d(rhs) - (A @ np.atleast_2d(sol).T).T
    return out, float(np.max(np.abs(resid))) if resid.size else 0.0


def gbar(box: LatticeBox, columns) -> GreenTable:
    """Ḡ_N(·, y) = Σ_z Γ_N(·, z) Γ_N(z, y), extended to ∂₂V_N."""
    cols = _as_columns(box, columns)
    E = unit_columns(box, cols)
    vals = get_solver(box).gbar_apply(E)
    ext, resid = _second_layer_extension(box, box.embed(vals))
    return GreenTable(box, "convolution", cols, np.ascontiguousarray(vals.T), "convolution", ext, resid)


def bilaplacian_green(box: LatticeBox, columns, method: str = "auto", tol: float = 1e-10) -> GreenTable:
    """G_N(·, y) = (Δ²_N)^{-1} 1_y.

    ``method`` is 'sparse' (direct factorisation), 'cg' (preconditioned CG),
    'dense' (explicit inverse, small boxes only) or 'auto'.
    """
    cols = _as_columns(box, columns)
    E = unit_columns(box, cols)
    if method == "dense":
        Ainv = np.linalg.inv(assemble_bilaplacian(box).matrix.toarray())
        vals = Ainv[:, box.index_of(cols)]
        return GreenTable(box, "biharmonic", cols, np.ascontiguousarray(vals), "dense-inverse")
    solver = get_solver(box, method, tol)
    vals = solver.solve(E).T
    name = "sparse-solve" if solver.method == "sparse" else "cg"
    return GreenTable(box, "biharmonic", cols, np.ascontiguousarray(vals), name)


def biharmonic_residual(table: GreenTable) -> float:
    """max |Δ²T(·, y) - δ_y| over V_N for every tabulated column (full-lattice stencil)."""
    box = table.box
    ext = table.extension if table.extension is not None else box.embed(table.values.T)
    ext = np.atleast_2d(ext) if ext.ndim == box.d else ext
    bi = box.restrict(laplacian_grid(laplacian_grid(ext, box.d), box.d))
    return float(np.max(np.abs(bi - unit_columns(box, table.columns))))


def diagonal(box: LatticeBox, sites, method: str = "auto") -> np.ndarray:
    """G_N(x, x) for each x in ``sites``."""
    sites = _as_columns(box, sites)
    t = bilaplacian_green(box, sites, method=method)
    return t.values[box.index_of(sites), np.arange(len(sites))]


@dataclass
class GapReport:
    x: tuple
    N: int
    delta: float
    sup_gap: float
    sup_grad: np.ndarray
    column: np.ndarray = field(repr=False)

    @property
    def scaled_sup_grad(self) -> float:
        """N · max_i sup |∇_i H_N(x, ·)|."""
        return float(self.N * np.max(self.sup_grad))


def green_gap(box: LatticeBox, x, delta: float, method: str = "auto") -> GapReport:
    """sup over V_N^δ of |H_N(x, ·)| and of |∇_i H_N(x, ·)|, with H_N = Ḡ_N - G_N."""
    x = np.asarray(x, dtype=int)
    dmask = interior_mask(box, delta)
    if not dmask[box.index_of(x)]:
        raise ValueError(f"{tuple(x)} is not in the delta-interior for delta={delta}")
    gb = gbar(box, [x])
    g = bilaplacian_green(box, [x], method=method)
    h_ext = gb.extension[0] - box.embed(g.values[:, 0])
    col = box.restrict(h_ext)
    sup_gap = float(np.max(np.abs(col[dmask])))
    grads = []
    for i in range(box.d):
        dh = box.restrict(np.roll(h_ext, -1, axis=i) - h_ext)
        grads.append(float(np.max(np.abs(dh[dmask]))))
    return GapReport(tuple(int(c) for c in x), box.N, delta, sup_gap, np.array(grads), col)


def singleton_values(d: int) -> dict[str, float]:
    """Green values for the one-site domain: Γ = 1, Ḡ = 1, G = 1/(1 + 1/2d), H = Ḡ - G."""
    g = 1.0 / (1.0 + 1.0 / (2 * d))
    return {"harmonic": 1.0, "convolution": 1.0, "biharmonic": g, "gap": 1.0 - g}


@dataclass
class FundamentalSolutionFit:
    samples: list[tuple[tuple, float]]
    gamma_hat: float
    K_hat: float
    k_max: dict
    tail_bound: float

    @property
    def relative_slope_error(self) -> float:
        return abs(self.gamma_hat - GAMMA) / GAMMA


def fit_fundamental(ys=None, c: float = 20.0, k_min: int = 400) -> FundamentalSolutionFit:
    """Least-squares fit of a(0, y) ≈ γ̂ log|y| + K̂ over the given lattice points."""
    if ys is None:
        ys = [(m, 0, 0, 0) for m in range(2, 13)]
    samples, kmaxes, bounds = [], {}, []
    for y in ys:
        r = fundamental_a(y, c=c, k_min=k_min)
        samples.append((tuple(y), r.value))
        kmaxes[tuple(y)] = r.k_max
        bounds.append(r.tail_bound)
    logs = np.array([math.log(np.linalg.norm(y)) for y, _ in samples])
    vals = np.array([v for _, v in samples])
    slope, intercept = np.polyfit(logs, vals, 1)
    return FundamentalSolutionFit(samples, float(slope), float(intercept), kmaxes, float(max(bounds)))
