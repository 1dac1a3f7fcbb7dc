"""The discrete obstacle problem for the Bilaplacian capacity, its dual, the
continuum extrapolation and the relative entropy of a tilted field.

Primal: minimise ½⟨Δ²_N h, h⟩ = ½ Σ_{Z^d} (Δh)² over h vanishing outside V_N
with h ≥ 1 on D.  Dual: maximise ⟨1, f⟩ - ½⟨f, G_N f⟩ over f supported on D.
At the optimum Δ²_N h = f, f ≥ 0 and f (h - 1) = 0 on D.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.optimize as sopt
import scipy.sparse.linalg as spla
from numpy.polynomial.legendre import leggauss

from .lattice import LatticeBox, laplacian_grid
from .operator import assemble_bilaplacian
from .greens import bilaplacian_green

STATIONARITY_TOL = 1e-10
FEASIBILITY_TOL = 1e-8


class CapacityConvergenceError(RuntimeError):
    def __init__(self, msg: str, best: "CapacitySolution"):
        super().__init__(msg)
        self.best = best


@dataclass
class CapacitySolution:
    box: LatticeBox
    obstacle: np.ndarray  # (m, d) sites of D_N
    h: np.ndarray  # over V_N
    f: np.ndarray  # over V_N, zero off D_N
    primal_value: float
    dual_value: float
    kkt: dict = field(default_factory=dict)
    method: str = ""
    iterations: int = 0

    @property
    def gap(self) -> float:
        return abs(self.primal_value - self.dual_value) / max(abs(self.dual_value), 1e-300)


def _obstacle(box: LatticeBox, D) -> tuple[np.ndarray, np.ndarray]:
    D = np.asarray(D, dtype=int).reshape(-1, box.d)
    if len(D) and not np.all(box.contains(D)):
        raise ValueError("obstacle set must lie inside V_N")
    ids = np.unique(box.index_of(D)) if len(D) else np.zeros(0, dtype=int)
    return box.sites[ids], ids


def _kkt(Q, h, ids, level) -> tuple[np.ndarray, dict]:
    f = Q @ h
    off = np.ones(len(h), dtype=bool)
    off[ids] = False
    fd = f[ids]
    gap = h[ids] - level
    kkt = {
        "stationarity": float(np.max(np.abs(f[off]))) if off.any() else 0.0,
        "feasibility": float(max(0.0, -gap.min())) if len(ids) else 0.0,
        "sign": float(max(0.0, -fd.min())) if len(ids) else 0.0,
        "complementarity": float(np.max(np.abs(fd * gap))) if len(ids) else 0.0,
    }
    fout = np.zeros_like(h)
    fout[ids] = fd
    return fout, kkt


def _active_set(Q, ids, level, maxiter):
    """Primal-dual active set on the complementarity system, one sparse solve per working set."""
    n = Q.shape[0]
    active = np.ones(len(ids), dtype=bool)  # start with every obstacle site touching
    seen = set()
    h = np.zeros(n)
    for it in range(1, maxiter + 1):
        W = ids[active]
        free = np.ones(n, dtype=bool)
        free[W] = False
        h = np.zeros(n)
        h[W] = level
        if free.any():
            rhs = -(Q[free][:, W] @ h[W])
            h[free] = spla.spsolve(Q[free][:, free].tocsc(), rhs) if len(W) else 0.0
        f = Q @ h
        fd = f[ids]
        new = (fd + (level - h[ids])) > 0
        key = new.tobytes()
        if np.array_equal(new, active):
            return h, it
        if key in seen:
            # cycling: change one index only (smallest multiplier or worst violation)
            new = active.copy()
            viol = np.where(active, fd, np.inf)
            j = int(np.argmin(viol))
            if viol[j] < 0:
                new[j] = False
            else:
                gap = np.where(~active, h[ids] - level, np.inf)
                new[int(np.argmin(gap))] = True
        seen.add(key)
        active = new
    raise RuntimeError("active set did not settle")


def _projected_gradient(Q, ids, level, maxiter, tol):
    """Accelerated projected gradient with adaptive restart."""
    n = Q.shape[0]
    L = float(spla.eigsh(Q, k=1, which="LA", return_eigenvectors=False)[0]) * 1.01
    x = np.zeros(n)
    x[ids] = level
    y, t = x.copy(), 1.0

    def proj(v):
        v[ids] = np.maximum(v[ids], level)
        return v

    for it in range(1, maxiter + 1):
        g = Q @ y
        x_new = proj(y - g / L)
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        step = x_new - x
        if np.dot(g, step) > 0:
            t_new, y = 1.0, x_new.copy()
        else:
            y = x_new + ((t - 1) / t_new) * step
        x, t = x_new, t_new
        # projected-gradient residual
        gx = Q @ x
        r = gx.copy()
        at = ids[np.abs(x[ids] - level) <= 1e-14]
        r[at] = np.minimum(r[at], 0.0)
        if np.max(np.abs(r)) <= tol:
            return x, it
    return x, maxiter


def solve_dual(box: LatticeBox, D, sign_constrained: bool = True, level: float = 1.0) -> tuple[float, np.ndarray, float]:
    """Maximise ⟨level·1, f⟩ - ½⟨f, G_N f⟩ over f on D (optionally f ≥ 0).

    Returns (value, f over V_N, Rayleigh value ⟨level·1, f⟩²/(2⟨f, G f⟩)).
    """
    sites, ids = _obstacle(box, D)
    f = np.zeros(box.n_sites)
    if not len(ids):
        return 0.0, f, 0.0
    G = bilaplacian_green(box, sites).values[ids, :]
    G = 0.5 * (G + G.T)
    one = np.full(len(ids), float(level))
    try:
        Lc = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("G restricted to the obstacle is not positive definite") from exc
    if sign_constrained:
        # ‖Lᵀ f - L⁻¹ 1‖² = fᵀ G f - 2 fᵀ 1 + const
        c = np.linalg.solve(Lc, one)
        fd, _ = sopt.nnls(Lc.T, c, maxiter=50 * len(ids))
    else:
        fd = np.linalg.solve(Lc.T, np.linalg.solve(Lc, one))
    quad = float(fd @ G @ fd)
    value = float(one @ fd - 0.5 * quad)
    rayleigh = float((one @ fd) ** 2 / (2 * quad)) if quad > 0 else 0.0
    f[ids] = fd
    return value, f, rayleigh


def solve_primal(box: LatticeBox, D, method: str = "active-set", level: float = 1.0,
                 maxiter: int | None = None, tol: float = STATIONARITY_TOL) -> CapacitySolution:
    """Minimise ½⟨Δ²_N h, h⟩ subject to h ≥ level on D.

    ``method`` is 'active-set' (exact sub-solves) or 'projected-gradient'.
    The dual value is computed independently with the sign constraint.
    """
    sites, ids = _obstacle(box, D)
    Q = assemble_bilaplacian(box).matrix.tocsr()
    n = box.n_sites
    if not len(ids):
        h = np.zeros(n)
        return CapacitySolution(box, sites, h, np.zeros(n), 0.0, 0.0,
                                {"stationarity": 0.0, "feasibility": 0.0, "sign": 0.0, "complementarity": 0.0},
                                method, 0)
    if method == "active-set":
        try:
            h, it = _active_set(Q, ids, level, maxiter or 10 * len(ids) + 50)
        except RuntimeError:
            h, it, method = *_projected_gradient(Q, ids, level, 200_000, tol), "projected-gradient"
    elif method == "projected-gradient":
        h, it = _projected_gradient(Q, ids, level, maxiter or 200_000, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    f, kkt = _kkt(Q, h, ids, level)
    primal = 0.5 * float(h @ (Q @ h))
    dual, _, _ = solve_dual(box, sites, True, level)
    sol = CapacitySolution(box, sites, h, f, primal, dual, kkt, method, it)
    scale = 1.0 + abs(primal)
    if kkt["feasibility"] > FEASIBILITY_TOL * scale or kkt["complementarity"] > FEASIBILITY_TOL * scale:
        raise CapacityConvergenceError(f"{method} stopped with residuals {kkt}", sol)
    return sol


def continuum_scale(N: int, d: int) -> float:
    """Factor taking ⟨Δ²_N h_N, h_N⟩ to its continuum limit ∫|Δh|² for h_N(x) = h(x/N)."""
    return (2 * d) ** 2 * float(N) ** (4 - d)


def block_obstacle(box: LatticeBox, half_width: float) -> np.ndarray:
    """Sites of the centred continuum cube [-w, w]^d scaled by N."""
    r = int(math.floor(half_width * box.N + 1e-12))
    return box.sites[box.block_mask(np.zeros(box.d, dtype=int), r)]


@dataclass
class TrendReport:
    Ns: list
    values: list
    differences: list
    limit: float

    @property
    def cauchy(self) -> bool:
        """Successive differences do not grow."""
        a = np.abs(self.differences)
        return bool(np.all(a[1:] <= a[:-1] + 1e-15))


def continuum_extrapolate(Ns, values) -> TrendReport:
    """Successive differences and an Aitken-accelerated limit of the last three values."""
    if len(values) < 3 or len(Ns) != len(values):
        raise ValueError("need at least 3 values, one per N")
    v = [float(x) for x in values]
    diffs = [b - a for a, b in zip(v[:-1], v[1:])]
    d1, d2 = diffs[-2], diffs[-1]
    denom = d2 - d1
    limit = v[-1] if abs(denom) <= 1e-15 * max(1.0, abs(v[-1])) else v[-1] - d2 * d2 / denom
    return TrendReport(list(Ns), v, diffs, float(limit))


# -- tilted fields ---------------------------------------------------------------


def _bump1(t):
    return (1 - t * t) ** 2


def _bump1_dd(t):
    return 12 * t * t - 4


@dataclass
class TiltProfile:
    """f on V = (-1, 1)^d (or grid values on one box) with amplitude a.

    The tilted field is φ + a log N · f_N with f_N(x) = f(x/N).
    """

    a: float
    shape: Callable | None = None
    laplacian: Callable | None = None
    values: np.ndarray | None = field(default=None, repr=False)
    box: LatticeBox | None = None
    dim: int | None = None

    @classmethod
    def bump(cls, d: int, a: float = 1.0) -> "TiltProfile":
        """Π_i (1 - x_i²)²: equal to 1 at the origin and vanishing to second order on ∂V."""

        def shape(x):
            return np.prod(_bump1(x), axis=-1)

        def lap(x):
            g = _bump1(x)
            out = 0.0
            for i in range(x.shape[-1]):
                rest = np.prod(np.delete(g, i, axis=-1), axis=-1)
                out = out + _bump1_dd(x[..., i]) * rest
            return out

        return cls(a, shape, lap, dim=d)

    @classmethod
    def from_capacity(cls, sol: CapacitySolution, a: float = 1.0) -> "TiltProfile":
        return cls(a, values=sol.h.copy(), box=sol.box)

    def discretize(self, box: LatticeBox) -> np.ndarray:
        if self.values is not None:
            if self.box != box:
                raise ValueError("grid profile belongs to a different box")
            return self.values
        return np.clip(self.shape(box.sites / box.N), 0.0, None)

    def mean(self, box: LatticeBox) -> np.ndarray:
        """a log N · f_N."""
        return self.a * math.log(box.N) * self.discretize(box)


def dirichlet_energy(box: LatticeBox, values: np.ndarray) -> float:
    """⟨Δ_N f_N, Δ_N f_N⟩ summed over V_N."""
    lap = box.restrict(laplacian_grid(box.embed(values), box.d))
    return float(np.sum(lap * lap))


def entropy_rate(profile: TiltProfile, box: LatticeBox) -> float:
    """(a²/2)⟨Δ_N f_N, Δ_N f_N⟩, the relative entropy per (log N)²."""
    return 0.5 * profile.a**2 * dirichlet_energy(box, profile.discretize(box))


def continuum_energy(profile: TiltProfile, order: int = 24) -> float:
    """∫_V |Δf|² by tensor Gauss-Legendre quadrature (exact for polynomial f of modest degree)."""
    if profile.laplacian is None or profile.dim is None:
        raise ValueError("profile has no continuum Laplacian")
    d = profile.dim
    t, w = leggauss(order)
    grids = np.meshgrid(*([t] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wts = np.ones(len(pts))
    for gw in np.meshgrid(*([w] * d), indexing="ij"):
        wts = wts * gw.ravel()
    vals = profile.laplacian(pts)
    return float(np.sum(wts * vals * vals))


def continuum_rate(profile: TiltProfile, order: int = 24) -> float:
    """(a²/2)∫|Δf|², the N → ∞ limit of the rescaled entropy rate."""
    return 0.5 * profile.a**2 * continuum_energy(profile, order)
