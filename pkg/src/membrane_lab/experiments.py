"""Seeded experiments producing versioned tables, run metadata and plot data.

Each ``cmd_*`` function takes an ``ExperimentConfig`` and returns a
``RunResult``; ``write_result`` persists it.  Tables depend only on the
config and seed, so re-runs give byte-identical CSV.
"""

from __future__ import annotations

import itertools
import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy
from scipy.stats import binomtest

from . import __version__
from .cache import cached
from .capacity import continuum_scale, solve_primal
from .config import ExperimentConfig
from .gaussfield import marginal_covariance, sample_fields
from .greens import bilaplacian_green, fit_fundamental, gbar, green_gap
from .lattice import build_box, interior_mask
from .operator import GAMMA, MAX_RATE

SCHEMA = "membrane-lab/v1"
REJECTION_CHUNK = 100_000
SCAN_BATCH = 16


@dataclass
class Table:
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def add(self, *row) -> None:
        if len(row) != len(self.columns):
            raise ValueError(f"row has {len(row)} entries, table has {len(self.columns)} columns")
        self.rows.append(list(row))

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]


@dataclass
class RunResult:
    command: str
    tables: dict[str, Table]
    meta: dict
    plots: dict[str, np.ndarray] = field(default_factory=dict)


def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed for (seed, keys)."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(2, np.uint64)[0])


def fmt(x) -> str:
    """Locale-free, round-trip float formatting."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return str(x)


def table_csv(t: Table) -> str:
    lines = [f"# schema={SCHEMA}", ",".join(t.columns)]
    lines += [",".join(fmt(v) for v in row) for row in t.rows]
    return "\n".join(lines) + "\n"


def table_json(t: Table) -> str:
    rows = [dict(zip(t.columns, [_plain(v) for v in r])) for r in t.rows]
    return json.dumps({"schema": SCHEMA, "rows": rows}, indent=1, sort_keys=True) + "\n"


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_result(result: RunResult, out: str | Path, fmt_: str = "csv") -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, t in result.tables.items():
        p = out / f"{name}.{fmt_}"
        p.write_text(table_csv(t) if fmt_ == "csv" else table_json(t), encoding="utf-8")
        written.append(p)
    for name, arr in result.plots.items():
        p = out / f"{name}.dat"
        np.savetxt(p, np.atleast_2d(arr), fmt="%.10g", header=name)
        written.append(p)
    p = out / f"{result.command}.meta.json"
    p.write_text(json.dumps(result.meta, indent=1, sort_keys=True, default=_plain) + "\n", encoding="utf-8")
    written.append(p)
    return written


def _meta(cfg: ExperimentConfig, started: float, **extra) -> dict:
    return {
        "schema": SCHEMA,
        "config": asdict(cfg),
        "seed": cfg.seed,
        "versions": {"membrane_lab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_time_s": round(time.perf_counter() - started, 3),
        **extra,
    }


# -- variance profile -------------------------------------------------------------


def _fundamental_domain(N: int, d: int) -> np.ndarray:
    """Sites with 0 ≤ x_1 ≤ ... ≤ x_d ≤ N: one representative per symmetry orbit."""
    return np.array(list(itertools.combinations_with_replacement(range(N + 1), d)), dtype=int)


def _rays(N: int, d: int) -> np.ndarray:
    pts = set()
    for k in range(N + 1):
        for m in range(1, d + 1):
            pts.add(tuple([0] * (d - m) + [k] * m))
    return np.array(sorted(pts), dtype=int)


def green_diagonal(box, sites, cfg: ExperimentConfig, cache_dir) -> np.ndarray:
    sites = np.asarray(sites, dtype=int)
    params = {"table": "biharmonic-diagonal", "N": box.N, "d": box.d, "method": cfg.solver,
            "tol": cfg.tol, "threshold": cfg.direct_threshold, "sites": sites}

    def compute():
        out = np.empty(len(sites))
        for s in range(0, len(sites), 64):
            chunk = sites[s : s + 64]
            t = bilaplacian_green(box, chunk, method=cfg.solver, tol=cfg.tol)
            out[s : s + 64] = t.values[box.index_of(chunk), np.arange(len(chunk))]
        return {"diag": out}

    return cached(cache_dir, params, compute)["diag"]


def gbar_origin(box, cache_dir) -> float:
    params = {"table": "convolution-origin", "N": box.N, "d": box.d}
    origin = np.zeros((1, box.d), dtype=int)
    return float(cached(cache_dir, params, lambda: {"v": gbar(box, origin).values[box.index_of(origin[0]), :]})["v"][0])


def cmd_variance_profile(cfg: ExperimentConfig, cache_dir=None) -> RunResult:
    """G_N(0,0), the diagonal along an axis, its maximum, Ḡ_N(0,0) and γ log N per N."""
    started = time.perf_counter()
    summary = Table(["N", "G00", "Gbar00", "gamma_logN", "G00_minus_gamma_logN", "max_diag", "max_site",
                     "max_scope", "gap_sup"])
    profile = Table(["N", "k", "G_kk"])
    plot = []
    for N in cfg.Ns:
        box = build_box(N, cfg.d)
        axis = np.zeros((N + 1, cfg.d), dtype=int)
        axis[:, 0] = np.arange(N + 1)
        scope = cfg.profile_scope
        if scope == "auto":
            scope = "full" if math.comb(N + cfg.d, cfg.d) <= 150 else "rays"
        pool = _fundamental_domain(N, cfg.d) if scope == "full" else _rays(N, cfg.d)
        diag_axis = green_diagonal(box, axis, cfg, cache_dir)
        diag_pool = green_diagonal(box, pool, cfg, cache_dir)
        j = int(np.argmax(diag_pool))
        g00 = float(diag_axis[0])
        gb = gbar_origin(box, cache_dir)
        gap = green_gap(box, np.zeros(cfg.d, dtype=int), cfg.delta).sup_gap if N >= 2 else float("nan")
        ref = GAMMA * math.log(N)
        summary.add(N, g00, gb, ref, g00 - ref, float(diag_pool[j]), "(" + " ".join(map(str, pool[j])) + ")",
                    scope, gap)
        for k, v in enumerate(diag_axis):
            profile.add(N, k, float(v))
        plot.append([N, g00, gb, ref])
    return RunResult("variance-profile", {"variance_profile": summary, "variance_axis": profile},
                     _meta(cfg, started, gamma=GAMMA), {"variance_profile": np.array(plot)})


# -- maximum scan ------------------------------------------------------------------


def _clopper_pearson(k: int, n: int) -> tuple[float, float]:
    ci = binomtest(k, n).proportion_ci(confidence_level=0.95, method="exact")
    return float(ci.low), float(ci.high)


def cmd_max_scan(cfg: ExperimentConfig, cache_dir=None) -> RunResult:
    """Per N: the law of sup φ over V_N and V_N^δ against the level (8/π) log N."""
    if cfg.replicas < 100:
        raise ValueError("max-scan needs at least 100 replicas")
    started = time.perf_counter()
    summary = Table(["N", "replicas", "mean_sup", "sd_sup", "mean_sup_interior", "mean_ratio", "level",
                     "exceed_count", "exceed_freq", "ci_low", "ci_high", "q05", "q50", "q95"])
    per = Table(["N", "replica", "sup", "sup_interior"])
    plots = {}
    for N in cfg.Ns:
        box = build_box(N, cfg.d)
        inner = interior_mask(box, cfg.delta)
        n_chunks = -(-cfg.replicas // SCAN_BATCH)

        def run(c, box=box, N=N):
            m = min(SCAN_BATCH, cfg.replicas - c * SCAN_BATCH)
            X = sample_fields(box, m, derive_seed(cfg.seed, N, c), "normal-equations", batch=m)
            return X.max(axis=1), X[:, inner].max(axis=1)

        if cfg.threads > 1:
            with ThreadPoolExecutor(cfg.threads) as ex:
                parts = list(ex.map(run, range(n_chunks)))
        else:
            parts = [run(c) for c in range(n_chunks)]
        sup = np.concatenate([p[0] for p in parts])
        sup_in = np.concatenate([p[1] for p in parts])
        level = MAX_RATE * math.log(N)
        k = int(np.sum(sup >= level))
        lo, hi = _clopper_pearson(k, len(sup))
        q = np.quantile(sup, [0.05, 0.5, 0.95])
        summary.add(N, len(sup), float(sup.mean()), float(sup.std(ddof=1)), float(sup_in.mean()),
                    float(sup.mean() / math.log(N)), level, k, k / len(sup), lo, hi, *map(float, q))
        for i, (a, b) in enumerate(zip(sup, sup_in)):
            per.add(N, i, float(a), float(b))
        plots[f"max_scan_N{N}"] = np.sort(sup)
    return RunResult("max-scan", {"max_scan": summary, "max_scan_replicas": per},
                     _meta(cfg, started, max_rate=MAX_RATE), plots)


# -- positivity ----------------------------------------------------------------------


def obstacle_sites(box, cfg: ExperimentConfig) -> np.ndarray:
    if cfg.region == "empty":
        return np.zeros((0, box.d), dtype=int)
    if cfg.region == "origin":
        return np.zeros((1, box.d), dtype=int)
    return box.sites[box.block_mask(np.zeros(box.d, dtype=int), cfg.block_radius)]


@dataclass
class RejectionEstimate:
    draws: int
    accepted: int
    p: float
    stderr: float
    ci_low: float
    ci_high: float
    samples: np.ndarray | None = field(default=None, repr=False)  # accepted draws
    window_sum: np.ndarray | None = field(default=None, repr=False)


def rejection_sample(cov: np.ndarray, draws: int, seed: int, keep: bool = False) -> RejectionEstimate:
    """Draw N(0, cov) in chunks and keep the draws that are nonnegative in every coordinate."""
    m = len(cov)
    if m == 0:
        return RejectionEstimate(draws, draws, 1.0, 0.0, 1.0, 1.0, np.zeros((draws, 0)) if keep else None)
    L = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    accepted, kept = 0, []
    for s in range(0, draws, REJECTION_CHUNK):
        n = min(REJECTION_CHUNK, draws - s)
        X = rng.standard_normal((n, m)) @ L.T
        ok = np.all(X >= 0, axis=1)
        accepted += int(ok.sum())
        if keep:
            kept.append(X[ok])
    p = accepted / draws
    lo, hi = _clopper_pearson(accepted, draws)
    if accepted == 0:
        lo = 0.0
    return RejectionEstimate(draws, accepted, p, math.sqrt(p * (1 - p) / draws), lo, hi,
                             np.concatenate(kept) if keep else None)


@dataclass
class ImportanceEstimate:
    draws: int
    p: float
    stderr: float
    ess: float
    log_weights: np.ndarray = field(repr=False)


def importance_sample(cov: np.ndarray, shift: np.ndarray, draws: int, seed: int) -> ImportanceEstimate:
    """Estimate P(φ ≥ 0) for φ ~ N(0, cov) from draws of N(shift, cov).

    log dP/dP^shift (φ) = -⟨φ, cov⁻¹ shift⟩ + ½⟨shift, cov⁻¹ shift⟩; weights are self-normalised.
    """
    m = len(cov)
    if m == 0:
        return ImportanceEstimate(draws, 1.0, 0.0, float(draws), np.zeros(draws))
    L = np.linalg.cholesky(cov)
    u = np.linalg.solve(L.T, np.linalg.solve(L, shift))  # cov⁻¹ shift
    half = 0.5 * float(shift @ u)
    rng = np.random.default_rng(seed)
    logw, hit = [], []
    for s in range(0, draws, REJECTION_CHUNK):
        n = min(REJECTION_CHUNK, draws - s)
        X = shift + rng.standard_normal((n, m)) @ L.T
        logw.append(-(X @ u) + half)
        hit.append(np.all(X >= 0, axis=1))
    logw = np.concatenate(logw)
    hit = np.concatenate(hit)
    w = np.exp(logw - logw.max())
    wn = w / w.sum()
    p = float(np.sum(wn * hit))
    stderr = float(math.sqrt(np.sum(wn**2 * (hit - p) ** 2)))
    ess = float(1.0 / np.sum(wn**2))
    return ImportanceEstimate(draws, p, stderr, ess, logw)


def cmd_positivity(cfg: ExperimentConfig, cache_dir=None) -> RunResult:
    """P(φ ≥ 0 on D_N) by rejection and by importance sampling under the capacity tilt."""
    started = time.perf_counter()
    t = Table(["N", "region_sites", "estimator", "draws", "estimate", "stderr", "ci_low", "ci_high", "ess",
               "log_p_over_log2N", "capacity_scaled", "reference_rate"])
    for N in cfg.Ns:
        box = build_box(N, cfg.d)
        D = obstacle_sites(box, cfg)
        cov = marginal_covariance(box, D) if len(D) else np.zeros((0, 0))
        if len(D):
            sol = solve_primal(box, D)
            cap = continuum_scale(N, cfg.d) * sol.primal_value
            shift = cfg.a * math.log(N) * sol.h[box.index_of(D)]
        else:
            cap, shift = 0.0, np.zeros(0)
        ref = -8 * GAMMA * cap
        l2 = math.log(N) ** 2
        if "rejection" in cfg.estimators:
            r = rejection_sample(cov, cfg.replicas, derive_seed(cfg.seed, N, 1))
            t.add(N, len(D), "rejection", r.draws, r.p, r.stderr, r.ci_low, r.ci_high, float(r.draws),
                  math.log(r.p) / l2 if r.p > 0 else float("-inf"), cap, ref)
        if "importance" in cfg.estimators:
            s = importance_sample(cov, shift, cfg.replicas, derive_seed(cfg.seed, N, 2))
            t.add(N, len(D), "importance", s.draws, s.p, s.stderr, max(0.0, s.p - 4 * s.stderr),
                  min(1.0, s.p + 4 * s.stderr), s.ess, math.log(s.p) / l2 if s.p > 0 else float("-inf"), cap, ref)
    return RunResult("positivity", {"positivity": t}, _meta(cfg, started, gamma=GAMMA))


# -- entropic repulsion ---------------------------------------------------------------


def window_sites(box, radius: int, center=None) -> np.ndarray:
    """V_r(x) = x + [-r, r]^d, the window of the local average φ̄."""
    c = np.zeros(box.d, dtype=int) if center is None else np.asarray(center, dtype=int)
    return box.sites[box.block_mask(c, radius)]


def cmd_repulsion(cfg: ExperimentConfig, cache_dir=None) -> RunResult:
    """Local averages of φ on windows inside D_N, with and without the hard wall on D_N."""
    started = time.perf_counter()
    t = Table(["N", "window_radius", "accepted", "draws", "cond_mean", "cond_stderr", "cond_q05", "cond_q50",
               "cond_q95", "uncond_mean", "uncond_stderr", "margin_stderr", "reference_level", "status"])
    sites_t = Table(["N", "site", "cond_mean", "cond_stderr"])
    flagged = []
    for N in cfg.Ns:
        box = build_box(N, cfg.d)
        D = obstacle_sites(box, cfg)
        if not len(D):
            raise ValueError("repulsion needs a nonempty region")
        cov = marginal_covariance(box, D)
        seed = derive_seed(cfg.seed, N, 3)
        r = rejection_sample(cov, cfg.replicas, seed, keep=True)
        # the unconditional draws reuse the stream of the rejection run
        L = np.linalg.cholesky(cov)
        U = np.random.default_rng(seed).standard_normal((min(cfg.replicas, REJECTION_CHUNK), len(D))) @ L.T
        idx = {tuple(x): i for i, x in enumerate(D)}
        rmax = int(math.floor(cfg.eps * N + 1e-12))
        for rad in range(rmax + 1):
            w = window_sites(box, rad)
            if not all(tuple(x) in idx for x in w):
                raise ValueError(f"window of radius {rad} is not inside the region")
            cols = [idx[tuple(x)] for x in w]
            ubar = U[:, cols].mean(axis=1)
            um, us = float(ubar.mean()), float(ubar.std(ddof=1) / math.sqrt(len(ubar)))
            level = (MAX_RATE - cfg.eta) * math.log(N)
            if r.accepted >= 2:
                cbar = r.samples[:, cols].mean(axis=1)
                cm, cs = float(cbar.mean()), float(cbar.std(ddof=1) / math.sqrt(len(cbar)))
                q = [float(v) for v in np.quantile(cbar, [0.05, 0.5, 0.95])]
                margin = cm / cs if cs > 0 else float("inf")
            else:
                cm = cs = margin = float("nan")
                q = [float("nan")] * 3
            if r.accepted < 100:
                status = "insufficient"
                flagged.append(N)
            else:
                status = "pass" if margin >= 3 and cm >= um else "fail"
            t.add(N, rad, r.accepted, r.draws, cm, cs, *q, um, us, margin, level, status)
        if r.accepted >= 2:
            for i, x in enumerate(D):
                v = r.samples[:, i]
                sites_t.add(N, "(" + " ".join(map(str, x)) + ")", float(v.mean()),
                            float(v.std(ddof=1) / math.sqrt(len(v))))
    return RunResult("repulsion", {"repulsion": t, "repulsion_sites": sites_t},
                     _meta(cfg, started, flagged=flagged, max_rate=MAX_RATE))


# -- Green's function report -----------------------------------------------------------


def cmd_green_report(cfg: ExperimentConfig, cache_dir=None) -> RunResult:
    """Gap diagnostics per N, the Green window values and the fundamental-solution fit."""
    started = time.perf_counter()
    gap_t = Table(["N", "delta", "sup_gap", "scaled_sup_grad", "G00", "Gbar00", "G00_minus_gamma_logN",
                   "Gbar00_minus_gamma_logN"])
    for N in cfg.Ns:
        box = build_box(N, cfg.d)
        origin = np.zeros(cfg.d, dtype=int)
        params = {"table": "gap-report", "N": N, "d": cfg.d, "delta": cfg.delta, "method": cfg.solver, "tol": cfg.tol}

        def compute(box=box, origin=origin):
            rep = green_gap(box, origin, cfg.delta, method=cfg.solver)
            g00 = bilaplacian_green(box, [origin], method=cfg.solver, tol=cfg.tol).value(origin, origin)
            return {"v": np.array([rep.sup_gap, rep.scaled_sup_grad, g00])}

        sup_gap, grad, g00 = cached(cache_dir, params, compute)["v"]
        gb = gbar_origin(box, cache_dir)
        ref = GAMMA * math.log(N)
        gap_t.add(N, cfg.delta, float(sup_gap), float(grad), float(g00), gb, float(g00) - ref, gb - ref)
    fit_t = Table(["y_norm", "a0y", "gamma_log_y", "k_max"])
    fit = fit_fundamental([(m,) + (0,) * 3 for m in range(2, cfg.fit_max + 1)])
    for y, v in fit.samples:
        fit_t.add(float(np.linalg.norm(y)), v, GAMMA * math.log(np.linalg.norm(y)), fit.k_max[y])
    coef = Table(["gamma_hat", "K_hat", "gamma", "relative_slope_error", "tail_bound"])
    coef.add(fit.gamma_hat, fit.K_hat, GAMMA, fit.relative_slope_error, fit.tail_bound)
    plots = {"green_gap": np.array([[r[0], r[2], r[3]] for r in gap_t.rows]),
             "fundamental_fit": np.array([[r[0], r[1], r[2]] for r in fit_t.rows])}
    return RunResult("green-report", {"green_gap": gap_t, "fundamental_samples": fit_t, "fundamental_fit": coef},
                     _meta(cfg, started, gamma=GAMMA), plots)


COMMANDS = {
    "variance-profile": cmd_variance_profile,
    "max-scan": cmd_max_scan,
    "positivity": cmd_positivity,
    "repulsion": cmd_repulsion,
    "green-report": cmd_green_report,
}


def run(cfg: ExperimentConfig, cache_dir=None) -> RunResult:
    return COMMANDS[cfg.experiment](cfg, cache_dir)
