"""Linear solvers for Δ²_N and (-Δ_N)^{-1} on a box.

-Δ_N is diagonalised by the type-I sine transform along every axis, which
gives Γ_N exactly and makes (-Δ_N)^{-2} an excellent preconditioner for
Δ²_N: the two differ by the diagonal boundary term r(x)/(2d)².
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse.linalg as spla
from scipy.fft import dstn, idstn

from .lattice import LatticeBox
from .operator import assemble_bilaplacian, bilaplacian_apply

log = logging.getLogger(__name__)

DEFAULT_DIRECT_THRESHOLD = 20_000
DEFAULT_CG_TOL = 1e-10


class SolverError(RuntimeError):
    pass


def laplacian_eigenvalues(side: int, d: int) -> np.ndarray:
    """Eigenvalues of -Δ on a box with ``side`` sites per axis and zero exterior."""
    k = np.arange(1, side + 1)
    lam1 = (1.0 - np.cos(np.pi * k / (side + 1))) / d
    grids = np.meshgrid(*([lam1] * d), indexing="ij", sparse=True)
    return sum(grids)


@dataclass
class BilaplacianSolver:
    """Solves Δ²_N x = b (and -Δ_N x = b) on the box, batched over leading axes."""

    box: LatticeBox
    method: str = "auto"
    tol: float = DEFAULT_CG_TOL
    direct_threshold: int = DEFAULT_DIRECT_THRESHOLD
    maxiter: int = 2000
    last_iterations: int = field(default=0, init=False)
    last_residual: float = field(default=0.0, init=False)

    def __post_init__(self):
        if self.method not in ("auto", "sparse", "cg"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "auto":
            self.method = "sparse" if self.box.n_sites <= self.direct_threshold else "cg"

    @cached_property
    def _lam(self) -> np.ndarray:
        return laplacian_eigenvalues(self.box.side, self.box.d)

    @cached_property
    def _lu(self):
        return spla.splu(assemble_bilaplacian(self.box).matrix.tocsc())

    def _axes(self, arr):
        return tuple(range(arr.ndim - self.box.d, arr.ndim))

    def gamma_apply(self, b: np.ndarray) -> np.ndarray:
        """(-Δ_N)^{-1} b, i.e. Σ_z Γ_N(·, z) b(z)."""
        b = np.asarray(b, dtype=float)
        lead = b.shape[:-1]
        g = b.reshape(lead + self.box.shape)
        ax = self._axes(g)
        out = idstn(dstn(g, type=1, axes=ax, norm="ortho") / self._lam, type=1, axes=ax, norm="ortho")
        return out.reshape(b.shape)

    def gbar_apply(self, b: np.ndarray) -> np.ndarray:
        """(-Δ_N)^{-2} b, i.e. Σ_z Ḡ_N(·, z) b(z)."""
        b = np.asarray(b, dtype=float)
        lead = b.shape[:-1]
        g = b.reshape(lead + self.box.shape)
        ax = self._axes(g)
        out = idstn(dstn(g, type=1, axes=ax, norm="ortho") / self._lam**2, type=1, axes=ax, norm="ortho")
        return out.reshape(b.shape)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return bilaplacian_apply(self.box, x)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.method == "sparse":
            if b.ndim == 1:
                return self._lu.solve(b)
            flat = b.reshape(-1, b.shape[-1])
            return self._lu.solve(flat.T).T.reshape(b.shape)
        return self._pcg(b)

    def _pcg(self, b: np.ndarray) -> np.ndarray:
        """Preconditioned CG, run independently on each row of a batch."""
        single = b.ndim == 1
        B = b.reshape(-1, b.shape[-1])
        bnorm = np.linalg.norm(B, axis=1)
        bnorm[bnorm == 0] = 1.0
        X = np.zeros_like(B)
        R = B.copy()
        Z = self.gbar_apply(R)
        P = Z.copy()
        rz = np.einsum("ij,ij->i", R, Z)
        res = np.linalg.norm(R, axis=1) / bnorm
        it = 0
        while np.any(res > self.tol):
            if it >= self.maxiter:
                raise SolverError(
                    f"CG did not reach relative residual {self.tol:g} in {self.maxiter} iterations "
                    f"(worst {res.max():.3g}); try method='sparse'"
                )
            AP = self.apply(P)
            pAp = np.einsum("ij,ij->i", P, AP)
            active = res > self.tol
            alpha = np.where(active, rz / np.where(pAp == 0, 1, pAp), 0.0)
            X += alpha[:, None] * P
            R -= alpha[:, None] * AP
            Z = self.gbar_apply(R)
            rz_new = np.einsum("ij,ij->i", R, Z)
            beta = np.where(active, rz_new / np.where(rz == 0, 1, rz), 0.0)
            P = Z + beta[:, None] * P
            rz = rz_new
            res = np.linalg.norm(R, axis=1) / bnorm
            it += 1
        self.last_iterations = it
        self.last_residual = float(res.max()) if res.size else 0.0
        log.debug("pcg converged in %d iterations, residual %.3g", it, self.last_residual)
        return X[0] if single else X.reshape(b.shape)


def unit_columns(box: LatticeBox, columns) -> np.ndarray:
    """Stack of Kronecker deltas 1_y over V_N for the given column sites."""
    cols = np.asarray(columns).reshape(-1, box.d)
    E = np.zeros((len(cols), box.n_sites))
    E[np.arange(len(cols)), box.index_of(cols)] = 1.0
    return E
