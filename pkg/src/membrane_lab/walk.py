"""Simple random walk on Z^d: killed paths, exit times, exact transition
probabilities and Monte Carlo estimators for Ḡ_N.

Exact P⁰(X_k = y) is evaluated two ways.  ``transition_dp`` runs the
convolution recursion on a grid (small k).  ``transition_series`` splits the
walk into coordinate blocks: a step moves the first block with probability
d₁/d, so P_d(k, y) = Σ_j Bin(j; k, d₁/d) P_{d₁}(j, y₁) P_{d₂}(k-j, y₂), and in
two dimensions the rotated coordinates x₁ ± x₂ are independent ±1 walks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.stats import binom

from .lattice import shift

DEFAULT_STEP_BUDGET = 10_000_000
CHUNK = 8192


class StepBudgetExceeded(RuntimeError):
    pass


class ReplicaBudgetExceeded(ValueError):
    pass


# -- single paths -------------------------------------------------------------


@dataclass
class WalkPath:
    start: tuple
    positions: np.ndarray  # X_0 .. X_τ
    exit_time: int
    exit_site: tuple

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.positions, axis=0)


def _unit_moves(d: int) -> np.ndarray:
    return np.concatenate([np.eye(d, dtype=int), -np.eye(d, dtype=int)])


def simulate(start, region: Callable[[np.ndarray], np.ndarray], rng: np.random.Generator,
             max_steps: int = DEFAULT_STEP_BUDGET) -> WalkPath:
    """Run a walk from ``start`` until it first leaves ``region``.

    ``region`` maps an (m, d) array of sites to a boolean mask.
    """
    x = np.asarray(start, dtype=int)
    if not region(x[None, :])[0]:
        raise ValueError("start must lie in the region")
    moves = _unit_moves(len(x))
    path = [x.copy()]
    k = 0
    while True:
        # draw moves in blocks to keep the loop cheap
        block = moves[rng.integers(0, len(moves), size=256)]
        for m in block:
            x = x + m
            k += 1
            path.append(x)
            if not region(x[None, :])[0]:
                return WalkPath(tuple(path[0]), np.array(path), k, tuple(int(c) for c in x))
            if k >= max_steps:
                raise StepBudgetExceeded(f"walk exceeded {max_steps} steps")


def box_region(N: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: np.all(np.abs(x) <= N, axis=-1)


def ball_region(center, n: float) -> Callable[[np.ndarray], np.ndarray]:
    c = np.asarray(center)
    return lambda x: np.sum((x - c) ** 2, axis=-1) < n * n


def _chunk_rngs(seed: int, replicas: int) -> list[np.random.Generator]:
    """One generator per fixed-size chunk of replicas, derived from the seed."""
    n_chunks = -(-replicas // CHUNK)
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chunks)]


def _run_chunk(starts: np.ndarray, region, rng, max_steps: int, on_step=None):
    """Advance a batch of walkers until all have left ``region``.

    ``on_step(k, pos, alive)`` is called for k = 0, 1, ... with the positions
    X_k of walkers still inside.  Returns exit times.
    """
    pos = starts.copy()
    R, d = pos.shape
    moves = _unit_moves(d)
    alive = region(pos)
    tau = np.zeros(R, dtype=np.int64)
    k = 0
    while alive.any():
        if on_step is not None:
            on_step(k, pos, alive)
        idx = np.nonzero(alive)[0]
        pos[idx] += moves[rng.integers(0, 2 * d, size=len(idx))]
        k += 1
        still = region(pos[idx])
        tau[idx[~still]] = k
        alive[idx[~still]] = False
        if k >= max_steps and alive.any():
            raise StepBudgetExceeded(f"{alive.sum()} walks exceeded {max_steps} steps")
    return tau


# -- exit times ---------------------------------------------------------------


@dataclass
class ExitTimeStats:
    n: float
    start: tuple
    center: tuple
    replicas: int
    mean: float
    stderr: float
    lower: float
    upper: float

    def within_bounds(self, z: float = 4.0) -> bool:
        return self.mean + z * self.stderr >= self.lower and self.mean - z * self.stderr <= self.upper


def exit_time_stats(n: float, start, replicas: int, center=None, seed: int = 0,
                    max_steps: int = DEFAULT_STEP_BUDGET) -> ExitTimeStats:
    """Monte Carlo E^y τ for the ball {|z - x_B| < n}, with n² - |y-x_B|² ≤ E τ ≤ (n+1)² - |y-x_B|²."""
    if replicas < 100:
        raise ValueError("need at least 100 replicas for a meaningful interval")
    y = np.asarray(start, dtype=int)
    c = np.zeros_like(y) if center is None else np.asarray(center, dtype=int)
    region = ball_region(c, n)
    if not region(y[None, :])[0]:
        raise ValueError("start must lie in the ball")
    taus = []
    for j, rng in enumerate(_chunk_rngs(seed, replicas)):
        m = min(CHUNK, replicas - j * CHUNK)
        taus.append(_run_chunk(np.tile(y, (m, 1)), region, rng, max_steps))
    t = np.concatenate(taus).astype(float)
    r2 = float(np.sum((y - c) ** 2))
    return ExitTimeStats(n, tuple(y), tuple(c), replicas, float(t.mean()),
                         float(t.std(ddof=1) / math.sqrt(len(t))), n * n - r2, (n + 1) ** 2 - r2)


# -- exact transition probabilities ------------------------------------------


@dataclass
class TransitionTable:
    """P⁰(X_k = y) on the grid |y_i| ≤ radius for k = 0..k_max."""

    d: int
    k_max: int
    radius: int
    probs: np.ndarray = field(repr=False)  # shape (k_max + 1,) + (2 radius + 1,)^d

    def prob(self, k: int, y) -> float:
        y = np.asarray(y)
        if np.any(np.abs(y) > self.radius):
            raise KeyError("site outside tabulated radius")
        return float(self.probs[(k,) + tuple(y + self.radius)])

    def slice_sums(self) -> np.ndarray:
        return self.probs.reshape(self.k_max + 1, -1).sum(axis=1)


def transition_dp(k_max: int, radius: int | None = None, d: int = 4, budget: int = 50_000_000) -> TransitionTable:
    """Exact convolution recursion P_{k+1} = (1/2d) Σ_{±e_i} P_k(· ∓ e_i).

    Slices are exact (sum to 1) whenever radius ≥ k_max.
    """
    radius = k_max if radius is None else radius
    side = 2 * radius + 1
    if (k_max + 1) * side**d > budget:
        raise MemoryError(f"transition table of {(k_max + 1) * side ** d} entries exceeds budget {budget}")
    probs = np.zeros((k_max + 1,) + (side,) * d)
    probs[(0,) + (radius,) * d] = 1.0
    for k in range(k_max):
        p = probs[k]
        nxt = np.zeros_like(p)
        for i in range(d):
            nxt += shift(p, i, 1) + shift(p, i, -1)
        probs[k + 1] = nxt / (2 * d)
    return TransitionTable(d, k_max, radius, probs)


def _p1(k: np.ndarray, z: int) -> np.ndarray:
    """1D walk: P(S_k = z)."""
    k = np.asarray(k)
    out = np.zeros(k.shape)
    ok = ((k + z) % 2 == 0) & (np.abs(z) <= k)
    out[ok] = binom.pmf((k[ok] + z) // 2, k[ok], 0.5)
    return out


def _p2(k: np.ndarray, y1: int, y2: int) -> np.ndarray:
    return _p1(k, y1 + y2) * _p1(k, y1 - y2)


@lru_cache(maxsize=8)
def _binom_rows(k_max: int, p: float) -> np.ndarray:
    """W[k, j] = Bin(j; k, p) for 0 ≤ j ≤ k ≤ k_max."""
    k = np.arange(k_max + 1)[:, None]
    j = np.arange(k_max + 1)[None, :]
    W = binom.pmf(j, k, p)
    W[j > k] = 0.0
    return W


def transition_series(y, k_max: int) -> np.ndarray:
    """Exact P⁰(X_k = y) for k = 0..k_max (any d)."""
    y = tuple(int(c) for c in y)
    d = len(y)
    ks = np.arange(k_max + 1)
    if d == 1:
        return _p1(ks, y[0])
    if d == 2:
        return _p2(ks, y[0], y[1])
    d1 = d // 2
    a = transition_series(y[:d1], k_max)
    b = transition_series(y[d1:], k_max)
    W = _binom_rows(k_max, d1 / d)
    out = np.empty(k_max + 1)
    for k in range(k_max + 1):
        out[k] = np.dot(W[k, : k + 1] * a[: k + 1], b[k::-1])
    return out


# -- local CLT ------------------------------------------------------------------


def pbar(k, x) -> np.ndarray:
    """Gaussian surrogate 8/(π² k²) exp(-2|x|²/k) for the 4-d walk (k ≥ 1)."""
    k = np.asarray(k, dtype=float)
    r2 = float(np.sum(np.asarray(x) ** 2))
    return 8.0 / (math.pi**2 * k**2) * np.exp(-2.0 * r2 / k)


def lclt_error(k: np.ndarray, y, exact: np.ndarray) -> np.ndarray:
    """E(k, y) = P⁰(X_k = y) - p̄(k, y) where the walk can reach y at time k, else 0."""
    k = np.asarray(k)
    parity_ok = (k - int(np.sum(np.abs(y)))) % 2 == 0
    reach = parity_ok & (k >= int(np.sum(np.abs(y)))) & (k > 0)
    out = np.zeros(k.shape)
    out[reach] = exact[reach] - pbar(k[reach], y)
    return out


@dataclass
class LcltReport:
    ks: np.ndarray
    ys: list
    errors: np.ndarray  # shape (len(ys), len(ks))
    scaled_origin: np.ndarray  # |E(k, 0)| k³ at the tabulated k

    def origin_decay_ok(self, factor: float = 2.0) -> bool:
        return bool(np.all(self.scaled_origin <= factor * self.scaled_origin[0]))


def lclt_compare(ks, ys=((0, 0, 0, 0),)) -> LcltReport:
    """Tabulate E(k, y) at even k (4-d) and |E(k, 0)| k³."""
    ks = np.asarray(ks, dtype=int)
    if np.any(ks % 2) or np.any(ks <= 0):
        raise ValueError("the comparison is defined at positive even times only")
    k_max = int(ks.max())
    errs = []
    for y in ys:
        exact = transition_series(y, k_max)
        errs.append(lclt_error(np.arange(k_max + 1), y, exact)[ks])
    origin = lclt_error(np.arange(k_max + 1), (0,) * 4, transition_series((0,) * 4, k_max))[ks]
    return LcltReport(ks, list(ys), np.array(errs), np.abs(origin) * ks.astype(float) ** 3)


# -- fundamental solution a(0, y) ---------------------------------------------


@dataclass
class FundamentalValue:
    y: tuple
    value: float
    k_max: int
    tail: float
    tail_bound: float


def _surrogate_tail(y, k_max: int, k_stop: int = 4_000_000, chunk: int = 500_000) -> float:
    """Σ_{k > k_max} (k+1) (p̄(k,0)[k even] - p̄(k,y)[k ≡ |y|₁]) plus an O(1/K) remainder."""
    par = int(np.sum(np.abs(y))) % 2
    r2 = float(np.sum(np.asarray(y) ** 2))
    total = 0.0
    last = 0.0
    start = k_max + 1
    # align chunks on even boundaries so each chunk holds whole (even, odd) pairs
    if start % 2:
        k = start
        total += -(k + 1) * pbar(k, y) if par == 1 else 0.0
        start += 1
    while start <= k_stop:
        k = np.arange(start, min(start + chunk, k_stop + 1), dtype=float)
        even = (k % 2 == 0)
        term = np.where(even, pbar(k, (0,)), 0.0) - np.where((k % 2 == par), 8.0 / (math.pi**2 * k**2) * np.exp(-2 * r2 / k), 0.0)
        s = (k + 1) * term
        total += float(s.sum())
        last = float(s.sum())
        K_hi = k[-1]
        K_lo = k[0]
        start += chunk
    # summands behave like C/k²; the chunk sum C(1/K_lo - 1/K_hi) fixes C
    C = last / (1.0 / K_lo - 1.0 / (K_hi + 1))
    return total + C / (K_hi + 1)


def fundamental_a(y, k_max: int | None = None, c: float = 20.0, k_min: int = 400,
                  accuracy: float | None = None) -> FundamentalValue:
    """a(0, y) = Σ_k (k+1)(P⁰(X_k = 0) - P⁰(X_k = y)) in d = 4.

    Exact terms up to ``k_max`` (default max(k_min, c|y|²)), surrogate tail
    beyond.  ``tail_bound`` estimates the neglected local-CLT error
    Σ_{k>k_max} (k+1)|E(k, ·)| ≈ C_E / k_max from |E(k, ·)| k³ near k_max.
    """
    y = tuple(int(v) for v in y)
    if len(y) != 4:
        raise ValueError("the fundamental solution is implemented for d = 4")
    if all(v == 0 for v in y):
        return FundamentalValue(y, 0.0, 0, 0.0, 0.0)
    r2 = sum(v * v for v in y)
    if k_max is None:
        k_max = int(max(k_min, math.ceil(c * r2)))
    if k_max < r2:
        raise ValueError(f"k_max={k_max} is too small for |y|²={r2}")
    ks = np.arange(k_max + 1)
    p0 = transition_series((0, 0, 0, 0), k_max)
    py = transition_series(y, k_max)
    head = float(np.sum((ks + 1) * (p0 - py)))
    tail = _surrogate_tail(y, k_max)
    window = ks[-max(10, k_max // 10):]
    e0 = np.abs(lclt_error(window, (0, 0, 0, 0), p0[window])) * window.astype(float) ** 3
    ey = np.abs(lclt_error(window, y, py[window])) * window.astype(float) ** 3
    tail_bound = float((e0.max() + ey.max()) / k_max)
    if accuracy is not None and tail_bound > accuracy:
        raise ValueError(f"tail bound {tail_bound:.3g} exceeds requested accuracy; raise k_max")
    return FundamentalValue(y, head + tail, k_max, tail, tail_bound)


# -- Monte Carlo for Ḡ_N -------------------------------------------------------


@dataclass
class McEstimate:
    estimator: str
    mean: float
    stderr: float
    replicas: int
    samples: np.ndarray = field(repr=False)


def mc_gbar(N: int, x, y, replicas: int, estimator: str = "single-walk", seed: int = 0,
            max_replicas: int = 10_000_000, max_steps: int = DEFAULT_STEP_BUDGET) -> McEstimate:
    """Unbiased Monte Carlo estimate of Ḡ_N(x, y) from killed walks.

    single-walk: Σ_{k<τ} (k+1) 1{X_k = y} for X started at x.
    two-walk: Σ_{k<τ_X} Σ_{m<τ_Y} 1{X_k = Y_m} for independent X from x, Y from y.
    Only times before exit are counted, since the convolution sums over z ∈ V_N.
    """
    if replicas > max_replicas:
        raise ReplicaBudgetExceeded(f"{replicas} replicas exceeds budget {max_replicas}")
    x = np.asarray(x, dtype=int)
    y = np.asarray(y, dtype=int)
    d = len(x)
    region = box_region(N)
    if not (region(x[None])[0] and region(y[None])[0]):
        raise ValueError("x and y must lie in V_N")
    side = 2 * N + 1
    out = []
    for j, rng in enumerate(_chunk_rngs(seed, replicas)):
        m = min(CHUNK, replicas - j * CHUNK)
        if estimator == "single-walk":
            acc = np.zeros(m)

            def on_step(k, pos, alive, acc=acc):
                hit = alive & np.all(pos == y, axis=1)
                acc[hit] += k + 1

            _run_chunk(np.tile(x, (m, 1)), region, rng, max_steps, on_step)
            out.append(acc)
        elif estimator == "two-walk":
            counts = []
            for start in (x, y):
                rec_r, rec_s = [], []

                def on_step(k, pos, alive, rec_r=rec_r, rec_s=rec_s):
                    idx = np.nonzero(alive)[0]
                    rec_r.append(idx)
                    rec_s.append(np.ravel_multi_index(tuple((pos[idx] + N).T), (side,) * d))

                _run_chunk(np.tile(start, (m, 1)), region, rng, max_steps, on_step)
                key = np.concatenate(rec_r).astype(np.int64) * side**d + np.concatenate(rec_s)
                counts.append(np.unique(key, return_counts=True))
            (kx, cx), (ky, cy) = counts
            common, ix, iy = np.intersect1d(kx, ky, assume_unique=True, return_indices=True)
            out.append(np.bincount(common // side**d, weights=cx[ix] * cy[iy], minlength=m).astype(float))
        else:
            raise ValueError(f"unknown estimator {estimator!r}")
    s = np.concatenate(out)
    return McEstimate(estimator, float(s.mean()), float(s.std(ddof=1) / math.sqrt(len(s))), len(s), s)
