"""The membrane field: samplers, Gibbs conditioning on sub-regions, the
multiscale box hierarchy with its conditional-mean observables, and exact
variance identities.

Regions are boolean masks over V_N (lexicographic).  Conditioning on the
field outside a region A gives a Gaussian law on A with precision Δ²_A, the
submatrix of Δ²_N on A, and mean -(Δ²_A)^{-1} Δ²[A, A^c] ψ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .lattice import LatticeBox, build_box, laplacian_grid
from .operator import assemble_bilaplacian
from .solve import BilaplacianSolver

METHODS = ("exact-factorization", "normal-equations")
DENSE_LIMIT = 8000


class FactorizationError(RuntimeError):
    pass


@dataclass
class FieldSample:
    box: LatticeBox
    values: np.ndarray  # over V_N, lexicographic
    seed: int | None
    method: str

    def at(self, x) -> float:
        return float(self.values[self.box.index_of(x)])


class RegionOperator:
    """Δ²_A for a region A ⊆ V_N with solves, covariance columns and samplers."""

    def __init__(self, box: LatticeBox, mask: np.ndarray | None = None):
        self.box = box
        self.mask = np.ones(box.n_sites, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if self.mask.shape != (box.n_sites,):
            raise ValueError("region mask must be a boolean vector over V_N")
        self.ids = np.nonzero(self.mask)[0]
        self.sites = box.sites[self.ids]
        self._cube = self._as_cube()

    def _as_cube(self):
        """(center, half) when A is a full cube, which lets us reuse the box solver."""
        if not len(self.ids):
            return None
        lo, hi = self.sites.min(axis=0), self.sites.max(axis=0)
        span = hi - lo
        if np.any(span != span[0]) or span[0] % 2:
            return None
        if len(self.ids) != (span[0] + 1) ** self.box.d:
            return None
        half = int(span[0] // 2)
        if half == 0:
            return None
        return lo + half, half

    @property
    def size(self) -> int:
        return len(self.ids)

    @cached_property
    def full(self):
        return assemble_bilaplacian(self.box).matrix

    @cached_property
    def matrix(self):
        return self.full[self.ids][:, self.ids].tocsc()

    @cached_property
    def _cube_solver(self) -> BilaplacianSolver:
        _, half = self._cube
        return BilaplacianSolver(build_box(half, self.box.d))

    @cached_property
    def _lu(self):
        return spla.splu(self.matrix)

    @cached_property
    def cholesky(self) -> np.ndarray:
        """Lower factor L with Δ²_A = L Lᵀ (dense)."""
        if self.size > DENSE_LIMIT:
            raise FactorizationError(
                f"dense factorisation of {self.size} sites exceeds limit {DENSE_LIMIT}; use normal-equations"
            )
        try:
            return np.linalg.cholesky(self.matrix.toarray())
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(str(exc)) from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        """(Δ²_A)^{-1} b for b indexed by the region (leading batch axes allowed)."""
        b = np.asarray(b, dtype=float)
        if self._cube is not None:
            # lexicographic order inside a cube coincides with the sub-box order
            return self._cube_solver.solve(b)
        if b.ndim == 1:
            return self._lu.solve(b)
        flat = b.reshape(-1, b.shape[-1])
        return self._lu.solve(flat.T).T.reshape(b.shape)

    def local_index(self, x) -> int:
        i = self.box.index_of(x)
        pos = int(np.searchsorted(self.ids, i))
        if pos >= self.size or self.ids[pos] != i:
            raise KeyError(f"{tuple(np.asarray(x))} is outside the region")
        return pos

    def covariance_column(self, x) -> np.ndarray:
        e = np.zeros(self.size)
        e[self.local_index(x)] = 1.0
        return self.solve(e)

    def variance(self, x) -> float:
        return float(self.covariance_column(x)[self.local_index(x)])

    def coupling(self, psi: np.ndarray) -> np.ndarray:
        """Δ²[A, A^c] ψ, with ψ over V_N (its values on A are ignored)."""
        psi = np.asarray(psi, dtype=float)
        outside = np.where(self.mask, 0.0, psi)
        full = self.full @ outside.T
        return full.T[..., self.ids] if full.ndim > 1 else full[self.ids]

    def mean(self, psi: np.ndarray) -> np.ndarray:
        return -self.solve(self.coupling(psi))

    def mean_coefficients(self, x) -> np.ndarray:
        """h over V_N with E(φ_x | outside A) = Σ_z h(z) ψ_z; supported on ∂₂A ∩ V_N."""
        g = np.zeros(self.box.n_sites)
        g[self.ids] = self.covariance_column(x)
        h = -(self.full @ g)
        h[self.mask] = 0.0
        return h

    def noise_rows(self) -> np.ndarray:
        """Padded-grid mask of sites within lattice distance 1 of A (rows of B_A)."""
        box = self.box
        m = np.zeros(box.ext_shape, dtype=bool)
        core = box.embed(self.mask.astype(float)) > 0
        m |= core
        for i in range(box.d):
            m |= np.roll(core, 1, axis=i) | np.roll(core, -1, axis=i)
        return m

    def sample(self, rng: np.random.Generator, method: str, n: int | None = None) -> np.ndarray:
        """Centered draws with covariance (Δ²_A)^{-1}, one row per sample."""
        if method not in METHODS:
            raise ValueError(f"unknown sampling method {method!r}")
        shape = () if n is None else (n,)
        if method == "exact-factorization":
            z = rng.standard_normal(shape + (self.size,))
            L = self.cholesky
            return sla.solve_triangular(L, z.T, lower=True, trans="T").T
        rows = self.noise_rows()
        z = rng.standard_normal(shape + (int(rows.sum()),))
        Z = np.zeros(shape + self.box.ext_shape)
        Z[(...,) + tuple(np.nonzero(rows))] = z
        rhs = self.box.restrict(laplacian_grid(Z, self.box.d))[..., self.ids]
        return self.solve(rhs)


_regions: dict[tuple, RegionOperator] = {}


def region_operator(box: LatticeBox, mask: np.ndarray | None = None) -> RegionOperator:
    key = (box.N, box.d, None if mask is None else np.packbits(mask).tobytes())
    op = _regions.get(key)
    if op is None:
        if len(_regions) >= 64:
            _regions.clear()
        op = _regions[key] = RegionOperator(box, mask)
    return op


def sample_field(box: LatticeBox, seed: int, method: str = "normal-equations") -> FieldSample:
    """One draw of the centered field with covariance G_N.

    exact-factorization: Δ²_N = L Lᵀ, φ solves Lᵀ φ = z.
    normal-equations: φ solves Δ²_N φ = Bᵀ z with z white noise on V_{N+1}.
    """
    rng = np.random.default_rng(seed)
    vals = region_operator(box).sample(rng, method)
    return FieldSample(box, vals, seed, method)


def sample_fields(box: LatticeBox, n: int, seed: int, method: str = "normal-equations",
                  batch: int = 16) -> np.ndarray:
    """n independent draws (rows), produced in batches from one seeded stream."""
    rng = np.random.default_rng(seed)
    op = region_operator(box)
    out = np.empty((n, box.n_sites))
    for s in range(0, n, batch):
        m = min(batch, n - s)
        out[s : s + m] = op.sample(rng, method, m)
    return out


def conditional_mean(box: LatticeBox, region: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Mean of the field on A given ψ outside A, as a vector over the sites of A."""
    return region_operator(box, region).mean(psi)


def conditional_sample(box: LatticeBox, region: np.ndarray, psi: np.ndarray, seed: int,
                       method: str = "normal-equations") -> FieldSample:
    """Draw from the law on A given ψ outside; returns the full configuration on V_N."""
    op = region_operator(box, None if np.all(region) else region)
    rng = np.random.default_rng(seed)
    vals = np.array(psi, dtype=float, copy=True)
    vals[op.ids] = op.sample(rng, method) + op.mean(psi)
    return FieldSample(box, vals, seed, method)


def sample_marginal(box: LatticeBox, sites, n: int, seed: int, mean: np.ndarray | None = None) -> np.ndarray:
    """Draws of (φ_x)_{x ∈ sites}, optionally shifted by ``mean``; covariance G_N restricted to the sites."""
    cov = marginal_covariance(box, sites)
    L = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, len(cov)))
    out = z @ L.T
    return out if mean is None else out + mean


def marginal_covariance(box: LatticeBox, sites) -> np.ndarray:
    from .greens import bilaplacian_green

    sites = np.asarray(sites, dtype=int).reshape(-1, box.d)
    t = bilaplacian_green(box, sites)
    C = t.values[box.index_of(sites), :]
    return 0.5 * (C + C.T)


# -- exact variance identities --------------------------------------------------


@dataclass
class VarianceDecomposition:
    outer: float  # var(φ_x | F_{F^c})
    inner: float  # var(φ_x | F_{E^c})
    mean_part: float  # var(E(φ_x | F_{E^c}) | F_{F^c})

    @property
    def residual(self) -> float:
        return self.outer - self.inner - self.mean_part


def variance_decomposition(box: LatticeBox, inner: np.ndarray, outer: np.ndarray, x) -> VarianceDecomposition:
    """The law of total variance for nested regions E ⊆ F, each term computed separately."""
    inner = np.asarray(inner, dtype=bool)
    outer = np.asarray(outer, dtype=bool)
    if np.any(inner & ~outer):
        raise ValueError("inner region must be contained in the outer region")
    E = region_operator(box, inner)
    F = region_operator(box, outer)
    h = E.mean_coefficients(x)
    h_f = h[F.ids]  # sites outside F are fixed under the outer conditioning
    mean_part = float(h_f @ F.solve(h_f))
    return VarianceDecomposition(F.variance(x), E.variance(x), mean_part)


# -- box hierarchy ----------------------------------------------------------------


def odd_side(t: float) -> int:
    """Nearest odd integer to t (ties upward), at least 1."""
    if t <= 1:
        return 1
    below = int(math.floor(t))
    if below % 2 == 0:
        below -= 1
    above = below + 2
    return above if (t - below) >= (above - t) else below


class DegenerateLevel(ValueError):
    def __init__(self, level: int, side: int):
        super().__init__(f"level {level} has box side {side} < 3")
        self.level = level
        self.side = side


@dataclass
class Level:
    index: int
    alpha: float
    side: int
    boxes: np.ndarray  # centers of Π_{α_i}
    selected: np.ndarray  # centers of Γ_{α_i}

    @property
    def half(self) -> int:
        return (self.side - 1) // 2

    @property
    def spacing(self) -> int:
        return self.side + 2


@dataclass
class BoxHierarchy:
    box: LatticeBox
    alpha: float
    K: int
    delta: float | None
    x0: tuple
    levels: list[Level] = field(default_factory=list)

    def region_mask(self, center, side: int) -> np.ndarray:
        return self.box.block_mask(center, (side - 1) // 2)


def _region_radius(box: LatticeBox, delta: float | None) -> int:
    if delta is None:
        return box.N
    return int(math.floor(box.N + 1 - delta * box.N + 1e-12))


def build_hierarchy(box: LatticeBox, alpha: float, K: int, x0=None, delta: float | None = 0.25) -> BoxHierarchy:
    """Boxes of side ⌊N^{α_i}⌋ (odd) centred on x₀ + i(side + 2), i ∈ N^d, inside V_N^δ.

    Levels α_i = α(1 - (i-1)/K), i = 1..K+1.  The last level has α = 0, i.e.
    single sites; levels 1..K must have side ≥ 3.  ``delta=None`` uses all of V_N.
    """
    if not 0.5 < alpha < 1:
        raise ValueError("alpha must lie in (1/2, 1)")
    if K < 1:
        raise ValueError("K must be at least 1")
    R = _region_radius(box, delta)
    alphas = [alpha * (1 - (i - 1) / K) for i in range(1, K + 2)]
    sides = [odd_side(box.N**a) for a in alphas]
    for i, s in enumerate(sides[:-1], start=1):
        if s < 3:
            raise DegenerateLevel(i, s)
    h1 = (sides[0] - 1) // 2
    if x0 is None:
        x0 = (-R + h1,) * box.d
    x0 = np.asarray(x0, dtype=int)
    if np.any(np.abs(x0) + h1 > R):
        raise ValueError("grid offset does not admit a first-level box")
    hier = BoxHierarchy(box, alpha, K, delta, tuple(int(c) for c in x0))
    for i, (a, s) in enumerate(zip(alphas, sides), start=1):
        half = (s - 1) // 2
        steps = np.arange(0, 2 * R + 1)
        axis = [x0[j] + steps * (s + 2) for j in range(box.d)]
        axis = [c[np.abs(c) + half <= R] for c in axis]
        grid = np.meshgrid(*axis, indexing="ij")
        centers = np.stack([g.ravel() for g in grid], axis=1) if all(len(c) for c in axis) else np.zeros((0, box.d), int)
        if i == 1:
            selected = centers
        else:
            parent = hier.levels[-1]
            # B' ⊂ B/2: the concentric box of half the side length of B
            lim = (parent.side - 1) / 4.0
            keep = np.zeros(len(centers), dtype=bool)
            for c in parent.selected:
                keep |= np.max(np.abs(centers - c), axis=1) + half <= lim + 1e-12
            selected = centers[keep]
        hier.levels.append(Level(i, a, s, centers, selected))
    return hier


def box_observable(box: LatticeBox, center, side: int, psi: np.ndarray) -> float:
    """φ_B = E(φ_{x_B} | field on ∂₂B) for the box of given odd side around ``center``."""
    op = region_operator(box, box.block_mask(center, (side - 1) // 2))
    m = op.mean(psi)
    return float(m[op.local_index(center)])


def observable_coefficients(box: LatticeBox, center, side: int) -> np.ndarray:
    """h over V_N with φ_B = Σ_z h(z) φ_z (signed, supported on ∂₂B)."""
    op = region_operator(box, box.block_mask(center, (side - 1) // 2))
    return op.mean_coefficients(center)


def expected_linear(box: LatticeBox, coeffs: np.ndarray, region: np.ndarray, psi: np.ndarray) -> float:
    """E(Σ_z h(z) φ_z | field = ψ outside the region)."""
    op = region_operator(box, region)
    filled = np.array(psi, dtype=float, copy=True)
    filled[op.ids] = op.mean(psi)
    return float(np.asarray(coeffs) @ filled)


@dataclass
class ScaleVariance:
    observable: float  # var(φ_B | F_{α_j}), from the coefficients of φ_B
    outer: float  # var(φ_{x_B} | F_{α_j})
    inner: float  # var(φ_{x_B} | F_{α_i})

    @property
    def residual(self) -> float:
        return self.observable - (self.outer - self.inner)


def scale_variance(box: LatticeBox, center, small_side: int, large_side: int) -> ScaleVariance:
    """Conditional variance of φ_B across two concentric scales, both sides of the identity."""
    small = box.block_mask(center, (small_side - 1) // 2)
    large = box.block_mask(center, (large_side - 1) // 2)
    dec = variance_decomposition(box, small, large, center)
    return ScaleVariance(dec.mean_part, dec.outer, dec.inner)


# -- concentration ----------------------------------------------------------------


@dataclass
class ConcentrationResult:
    value: float
    via_coefficients: float
    outer_half: int
    inner_half: int


def concentration_check(big_side: int, small_side: int, x, eps: float = 0.5, d: int = 4) -> ConcentrationResult:
    """var(E(φ_x | ∂₂A_n) - E(φ_{x_B} | ∂₂A_n) | ∂₂A_N) for concentric cubes A_n ⊂ A_N.

    A box of side-length n is the ℓ∞ ball of radius ⌊n/2⌋ about x_B.  The field
    given the outside of A_N is the membrane model on A_N; the value is
    computed as var_{A_N}(φ_x - φ_{x_B}) - var_{A_n}(φ_x - φ_{x_B}) and, as a
    cross-check, from the conditional-mean coefficients on ∂₂A_n.  Both cubes
    are centred at x_B = 0 and ``x`` is given in those coordinates.
    """
    R, r = big_side // 2, small_side // 2
    if not 0 < r < R:
        raise ValueError("need 0 < n < N")
    box = build_box(R, d)
    c = np.zeros(d, dtype=int)
    x = np.asarray(x, dtype=int)
    if np.linalg.norm(x - c) > eps * small_side + 1e-12 or np.max(np.abs(x - c)) > r:
        raise ValueError("x must satisfy |x - x_B| <= eps n inside A_n")
    outer = region_operator(box)
    inner = region_operator(box, box.block_mask(c, r))

    def quad(op):
        gx = op.covariance_column(x)
        gc = op.covariance_column(c)
        ix, ic = op.local_index(x), op.local_index(c)
        return gx[ix] - 2 * gx[ic] + gc[ic]

    value = float(quad(outer) - quad(inner))
    h = inner.mean_coefficients(x) - inner.mean_coefficients(c)
    via = float(h @ outer.solve(h))
    return ConcentrationResult(value, via, R, r)
