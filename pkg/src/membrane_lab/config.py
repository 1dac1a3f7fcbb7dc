"""Experiment configuration: a flat ``key = value`` file with JSON values."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

EXPERIMENTS = ("variance-profile", "max-scan", "positivity", "repulsion", "green-report")
REGIONS = ("empty", "origin", "block")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "variance-profile"
    d: int = 4
    Ns: list = field(default_factory=lambda: [4, 8])
    delta: float = 0.25
    alpha: float = 0.75
    K: int = 2
    eps: float = 0.4
    eta: float = 0.5
    a: float = 1.0
    replicas: int = 1000
    seed: int = 0
    region: str = "block"
    block_radius: int = 1
    estimators: list = field(default_factory=lambda: ["rejection", "importance"])
    fit_max: int = 12
    profile_scope: str = "auto"
    solver: str = "auto"
    direct_threshold: int = 20_000
    tol: float = 1e-10
    out: str = "results"
    cache_dir: str | None = None
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.experiment in EXPERIMENTS, f"experiment must be one of {EXPERIMENTS}")
        need(isinstance(self.d, int) and self.d >= 1, "d must be a positive integer")
        need(isinstance(self.Ns, list) and self.Ns and all(isinstance(n, int) and n >= 1 for n in self.Ns),
             "Ns must be a non-empty list of positive integers")
        need(0 < self.delta < 0.5, "delta must lie in (0, 1/2)")
        need(0.5 < self.alpha < 1, "alpha must lie in (1/2, 1)")
        need(isinstance(self.K, int) and self.K >= 1, "K must be a positive integer")
        need(0 < self.eps < 0.5, "eps must lie in (0, 1/2)")
        need(self.eta > 0, "eta must be positive")
        need(self.a >= 0, "a must be nonnegative")
        need(isinstance(self.replicas, int) and self.replicas >= 1, "replicas must be a positive integer")
        need(isinstance(self.seed, int) and 0 <= self.seed < 2**64, "seed must be an unsigned 64-bit integer")
        need(self.region in REGIONS, f"region must be one of {REGIONS}")
        need(isinstance(self.block_radius, int) and self.block_radius >= 0, "block_radius must be >= 0")
        need(set(self.estimators) <= {"rejection", "importance"} and self.estimators, "unknown estimator")
        need(isinstance(self.fit_max, int) and self.fit_max >= 3, "fit_max must be at least 3")
        need(self.profile_scope in ("auto", "full", "rays"), "profile_scope must be auto, full or rays")
        need(self.solver in ("auto", "sparse", "cg"), "solver must be auto, sparse or cg")
        need(isinstance(self.direct_threshold, int) and self.direct_threshold > 0, "direct_threshold must be positive")
        need(self.tol > 0, "tol must be positive")
        need(isinstance(self.threads, int) and self.threads >= 1, "threads must be a positive integer")

    # -- serialisation ------------------------------------------------------------

    def dumps(self) -> str:
        lines = ["# membrane-lab experiment config"]
        for k, v in asdict(self).items():
            lines.append(f"{k} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                values[key] = json.loads(val)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc.msg}") from exc
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def replace(self, **changes) -> "ExperimentConfig":
        d = asdict(self)
        d.update(changes)
        return type(self)(**d)
