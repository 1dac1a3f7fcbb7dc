"""Lattice geometry: the box V_N = [-N, N]^d ∩ Z^d, its boundary layers and
difference operators on zero-extended lattice functions.

Fields are stored on the *padded grid* V_{N+2}, which contains V_N together
with the thick boundary ∂₂V_N.  Array index ``i`` along an axis corresponds to
the coordinate ``i - (N + 2)``; row-major order of the central (2N+1)^d block
is the lexicographic site order used by every matrix in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from typing import Iterable, Sequence

import numpy as np

PAD = 2
DEFAULT_SITE_BUDGET = 4_000_000


class SiteBudgetExceeded(ValueError):
    """Raised when (2N+1)^d exceeds the configured site budget."""


@dataclass(frozen=True)
class LatticeBox:
    """The box V_N in Z^d with its boundary layers and a lexicographic index."""

    N: int
    d: int = 4
    budget: int = field(default=DEFAULT_SITE_BUDGET, compare=False, repr=False)

    def __post_init__(self):
        if self.N < 1 or self.d < 1:
            raise ValueError(f"need N >= 1 and d >= 1, got N={self.N}, d={self.d}")
        if self.n_sites > self.budget:
            raise SiteBudgetExceeded(
                f"(2N+1)^d = {self.n_sites} sites exceeds budget {self.budget}; reduce N or d"
            )

    @property
    def side(self) -> int:
        return 2 * self.N + 1

    @property
    def n_sites(self) -> int:
        return self.side**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    @property
    def ext_shape(self) -> tuple[int, ...]:
        return (self.side + 2 * PAD,) * self.d

    @property
    def offset(self) -> int:
        """Array index of coordinate 0 on the padded grid."""
        return self.N + PAD

    @property
    def interior_slice(self) -> tuple[slice, ...]:
        return (slice(PAD, PAD + self.side),) * self.d

    @cached_property
    def sites(self) -> np.ndarray:
        """All sites of V_N as an (n_sites, d) integer array, lexicographic."""
        axes = [np.arange(-self.N, self.N + 1)] * self.d
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    @cached_property
    def ext_coords(self) -> tuple[np.ndarray, ...]:
        """Sparse open-grid coordinates of the padded grid, one array per axis."""
        r = np.arange(-self.N - PAD, self.N + PAD + 1)
        return tuple(np.meshgrid(*([r] * self.d), indexing="ij", sparse=True))

    @cached_property
    def exterior_distance(self) -> np.ndarray:
        """Euclidean distance from each padded-grid site to V_N (0 inside)."""
        sq = sum(np.maximum(np.abs(c) - self.N, 0) ** 2 for c in self.ext_coords)
        return np.sqrt(np.broadcast_to(sq, self.ext_shape).astype(float))

    @cached_property
    def inside_mask(self) -> np.ndarray:
        """Boolean mask of V_N on the padded grid."""
        m = np.zeros(self.ext_shape, dtype=bool)
        m[self.interior_slice] = True
        return m

    def layer_mask(self, k: int) -> np.ndarray:
        """Mask of ∂_k V_N = {x ∉ V_N : dist(x, V_N) <= k} on the padded grid."""
        if not 1 <= k <= PAD:
            raise ValueError(f"boundary thickness must be 1 or 2 on the padded grid, got {k}")
        return (~self.inside_mask) & (self.exterior_distance <= k + 1e-12)

    def _coords_of(self, mask: np.ndarray) -> np.ndarray:
        return np.argwhere(mask) - self.offset

    @cached_property
    def boundary1(self) -> np.ndarray:
        return self._coords_of(self.layer_mask(1))

    @cached_property
    def boundary2(self) -> np.ndarray:
        return self._coords_of(self.layer_mask(2))

    @cached_property
    def distance_to_complement(self) -> np.ndarray:
        """dist(x, V_N^c) for x in V_N, on the (2N+1)^d grid."""
        r = np.arange(-self.N, self.N + 1)
        axes = np.meshgrid(*([r] * self.d), indexing="ij", sparse=True)
        out = np.full(self.shape, np.inf)
        for a in axes:
            out = np.minimum(out, self.N + 1 - np.abs(a))
        return out

    @cached_property
    def inner_boundary_mask(self) -> np.ndarray:
        """∂₋V_N on the (2N+1)^d grid."""
        return self.distance_to_complement <= 1

    @cached_property
    def inner_boundary(self) -> np.ndarray:
        return np.argwhere(self.inner_boundary_mask) - self.N

    @cached_property
    def r_counts(self) -> np.ndarray:
        """r(x) = number of exterior unit neighbours, on the (2N+1)^d grid."""
        r = np.arange(-self.N, self.N + 1)
        axes = np.meshgrid(*([r] * self.d), indexing="ij", sparse=True)
        return sum((np.abs(a) == self.N).astype(int) for a in axes)

    def contains(self, x) -> np.ndarray | bool:
        x = np.asarray(x)
        return np.all(np.abs(x) <= self.N, axis=-1)

    def index_of(self, x) -> np.ndarray | int:
        """Dense lexicographic id of site(s) x in V_N."""
        x = np.asarray(x)
        if not np.all(self.contains(x)):
            raise KeyError(f"site(s) outside V_{self.N}")
        idx = np.ravel_multi_index(tuple(np.moveaxis(x + self.N, -1, 0)), self.shape)
        return int(idx) if np.ndim(idx) == 0 else idx

    def site_of(self, i) -> np.ndarray:
        return np.stack(np.unravel_index(i, self.shape), axis=-1) - self.N

    def ext_index(self, x) -> tuple:
        """Padded-grid array index of site x."""
        return tuple(np.asarray(x) + self.offset)

    def embed(self, values: np.ndarray) -> np.ndarray:
        """Zero-extend a flat V_N vector (or leading-batch stack) to the padded grid."""
        values = np.asarray(values)
        lead = values.shape[:-1]
        out = np.zeros(lead + self.ext_shape, dtype=values.dtype)
        out[(...,) + self.interior_slice] = values.reshape(lead + self.shape)
        return out

    def restrict(self, ext: np.ndarray) -> np.ndarray:
        """Flatten the V_N block of a padded-grid array, lexicographic order."""
        lead = ext.shape[: ext.ndim - self.d]
        return ext[(...,) + self.interior_slice].reshape(lead + (self.n_sites,))

    def site_mask(self, sites: Iterable[Sequence[int]] | np.ndarray) -> np.ndarray:
        """Boolean vector over V_N marking the given sites."""
        m = np.zeros(self.n_sites, dtype=bool)
        sites = np.asarray(list(sites) if not isinstance(sites, np.ndarray) else sites)
        if sites.size:
            m[self.index_of(sites.reshape(-1, self.d))] = True
        return m

    def block_mask(self, center, half_width: int) -> np.ndarray:
        """Boolean vector over V_N of the ℓ∞ block of given half-width."""
        center = np.asarray(center)
        return np.all(np.abs(self.sites - center) <= half_width, axis=1)


def build_box(N: int, d: int = 4, budget: int = DEFAULT_SITE_BUDGET) -> LatticeBox:
    return LatticeBox(N, d, budget)


def interior_region(box: LatticeBox, delta: float) -> np.ndarray:
    """Sites of V_N^δ = {x : dist(x, V_N^c) >= δN}, as an (m, d) array."""
    if not 0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    mask = box.distance_to_complement.ravel() >= delta * box.N - 1e-12
    return box.sites[mask]


def interior_mask(box: LatticeBox, delta: float) -> np.ndarray:
    if not 0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    return box.distance_to_complement.ravel() >= delta * box.N - 1e-12


def shift(u: np.ndarray, axis: int, s: int, d: int | None = None) -> np.ndarray:
    """Return w with w[x] = u[x + s e_axis], zero where x + s e_axis leaves the array.

    ``axis`` counts from the end when ``d`` is given, so leading batch axes pass through.
    """
    if d is not None:
        axis = u.ndim - d + axis
    out = np.zeros_like(u)
    n = u.shape[axis]
    if abs(s) >= n:
        return out
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim
    if s >= 0:
        src[axis] = slice(s, n)
        dst[axis] = slice(0, n - s)
    else:
        src[axis] = slice(0, n + s)
        dst[axis] = slice(-s, n)
    out[tuple(dst)] = u[tuple(src)]
    return out


def laplacian_grid(u: np.ndarray, d: int) -> np.ndarray:
    """Full-lattice Δu = (1/2d) Σ_i (u(x+e_i) + u(x-e_i) - 2u(x)) on the last d axes.

    Sites outside the array are treated as 0.
    """
    out = -u.astype(float, copy=True)
    c = 1.0 / (2 * d)
    for i in range(d):
        out += c * (shift(u, i, 1, d) + shift(u, i, -1, d))
    return out


@dataclass
class FieldOnBox:
    """A lattice function stored on the padded grid of ``box`` (zero beyond it)."""

    box: LatticeBox
    values: np.ndarray

    @classmethod
    def from_interior(cls, box: LatticeBox, vec: np.ndarray) -> "FieldOnBox":
        return cls(box, box.embed(np.asarray(vec, dtype=float)))

    @classmethod
    def random_e1(cls, box: LatticeBox, rng: np.random.Generator) -> "FieldOnBox":
        return cls.from_interior(box, rng.standard_normal(box.n_sites))

    def interior(self) -> np.ndarray:
        return self.box.restrict(self.values)

    def in_e1(self, tol: float = 0.0) -> bool:
        """True when the field vanishes on ∂₂V_N."""
        return bool(np.all(np.abs(self.values[self.box.layer_mask(2)]) <= tol))

    def __add__(self, other: "FieldOnBox") -> "FieldOnBox":
        _check_same(self, other)
        return FieldOnBox(self.box, self.values + other.values)

    def __mul__(self, a: float) -> "FieldOnBox":
        return FieldOnBox(self.box, a * self.values)

    __rmul__ = __mul__


def _check_same(v: FieldOnBox, w: FieldOnBox):
    if v.box != w.box:
        raise ValueError("fields live on different boxes")


def multi_indices(order: int, d: int) -> list[tuple[int, ...]]:
    """All α in N_0^d with |α| = order, lexicographic."""
    return [a for a in product(range(order + 1), repeat=d) if sum(a) == order]


def grad(v: FieldOnBox, alpha: Sequence[int]) -> FieldOnBox:
    """∇^α v with ∇_i v(x) = v(x + e_i) - v(x), zero extension outside the padded grid.

    The result is returned on the same padded grid; values at the outermost
    layers are only meaningful when v is supported well inside it (true for E_1).
    """
    alpha = tuple(int(a) for a in alpha)
    d = v.box.d
    if len(alpha) != d or min(alpha) < 0:
        raise ValueError(f"multi-index must have {d} nonnegative entries, got {alpha}")
    # work on a grid enlarged by |α| so that forward shifts never fall off the array
    m = sum(alpha)
    u = np.pad(v.values, m) if m else v.values.copy()
    for i, a in enumerate(alpha):
        for _ in range(a):
            u = shift(u, i, 1) - u
    if m:
        u = u[(slice(m, -m),) * d]
    return FieldOnBox(v.box, u)
