from __future__ import annotations

import json
import math

import numpy as np
import pytest

from membrane_lab.cache import ENV_VAR, cache_key, cache_load, cache_store, cached, resolve_cache_dir
from membrane_lab.cli import main
from membrane_lab.config import ConfigError, ExperimentConfig
from membrane_lab.experiments import (
    Table,
    derive_seed,
    fmt,
    importance_sample,
    rejection_sample,
    run,
    table_csv,
    window_sites,
)
from membrane_lab.lattice import build_box
from membrane_lab.operator import GAMMA


def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig("positivity", Ns=[2, 3], seed=2**63 + 5, estimators=["importance"])
    assert ExperimentConfig.loads(cfg.dumps()) == cfg
    cfg.save(tmp_path / "c.cfg")
    assert ExperimentConfig.load(tmp_path / "c.cfg") == cfg


@pytest.mark.parametrize("text", [
    "colour = 3",
    "d = 4\nd = 2",
    "d 4",
    "Ns = [4,",
    "delta = 0.5",
    "alpha = 0.5",
    "eps = 0.5",
    "seed = -1",
    "region = \"disk\"",
    "experiment = \"other\"",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.loads(text)


def test_derive_seed_and_fmt():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert len({derive_seed(1, k) for k in range(50)}) == 50
    assert fmt(0.1) == "0.1" and float(fmt(1 / 3)) == 1 / 3
    assert fmt(float("nan")) == "nan" and fmt(np.int64(3)) == "3" and fmt(True) == "true"


def test_csv_header_and_row_check():
    t = Table(["a", "b"])
    t.add(1, 2.5)
    assert table_csv(t).splitlines() == ["# schema=membrane-lab/v1", "a,b", "1,2.5"]
    with pytest.raises(ValueError):
        t.add(1)


def test_cache_roundtrip_and_corruption(tmp_path, caplog):
    key = cache_key(op="bilaplacian", N=2, d=4, method="sparse", tol=1e-10)
    assert key != cache_key(op="bilaplacian", N=2, d=4, method="sparse", tol=1e-9)
    assert cache_load(tmp_path, key) is None
    path = cache_store(tmp_path, key, {"x": np.arange(5.0)})
    assert np.array_equal(cache_load(tmp_path, key)["x"], np.arange(5.0))
    raw = bytearray(path.read_bytes())
    i = raw.find(np.arange(5.0).tobytes())
    raw[i] ^= 0xFF
    path.write_bytes(bytes(raw))
    assert cache_load(tmp_path, key) is None
    assert "corrupt" in caplog.text or "unreadable" in caplog.text
    calls = []

    def compute():
        calls.append(1)
        return {"x": np.ones(2)}

    cached(tmp_path, {"k": 1}, compute)
    cached(tmp_path, {"k": 1}, compute)
    assert len(calls) == 1


def test_cache_dir_precedence(monkeypatch, tmp_path):
    monkeypatch.delenv(ENV_VAR, raising=False)
    assert resolve_cache_dir(None, None) is None
    assert resolve_cache_dir(None, "cfg") == type(tmp_path)("cfg")
    assert resolve_cache_dir("cli", "cfg") == type(tmp_path)("cli")
    monkeypatch.setenv(ENV_VAR, str(tmp_path))
    assert resolve_cache_dir("cli", "cfg") == tmp_path


def test_variance_profile_command():
    cfg = ExperimentConfig("variance-profile", Ns=[2, 3])
    res = run(cfg)
    t = res.tables["variance_profile"]
    for N, g, ref, mx in zip(t.column("N"), t.column("G00"), t.column("gamma_logN"), t.column("max_diag")):
        assert ref == pytest.approx(GAMMA * math.log(N), rel=1e-15)
        assert mx == g
    assert res.meta["seed"] == 0


def test_green_report_command(tmp_path):
    cfg = ExperimentConfig("green-report", Ns=[2], fit_max=4)
    res = run(cfg, tmp_path)
    assert res.tables["green_gap"].rows[0][0] == 2
    assert len(res.tables["fundamental_samples"].rows) == 3


def test_positivity_exact_regions():
    for region, p in (("empty", 1.0), ("origin", 0.5)):
        cfg = ExperimentConfig("positivity", Ns=[2], region=region, replicas=20_000)
        t = run(cfg).tables["positivity"]
        for est, val, se in zip(t.column("estimator"), t.column("estimate"), t.column("stderr")):
            if region == "empty":
                assert val == 1.0
            else:
                assert abs(val - p) <= 4 * se, est


def test_rejection_and_importance_agree_small():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    cov = A @ A.T + np.eye(3)
    r = rejection_sample(cov, 200_000, 1)
    s = importance_sample(cov, np.full(3, 1.0), 200_000, 2)
    assert abs(r.p - s.p) <= 4 * math.hypot(r.stderr, s.stderr)
    assert r.ci_low <= r.p <= r.ci_high
    assert 0 < s.ess <= s.draws


def test_max_scan_requires_replicas():
    with pytest.raises(ValueError):
        run(ExperimentConfig("max-scan", Ns=[2], replicas=10))


def test_max_scan_small():
    res = run(ExperimentConfig("max-scan", Ns=[3], replicas=100))
    per = res.tables["max_scan_replicas"]
    assert all(b <= a for a, b in zip(per.column("sup"), per.column("sup_interior")))
    assert res.meta["max_rate"] == pytest.approx(8 / math.pi, rel=1e-15)


def test_repulsion_windows():
    box = build_box(3, 4)
    assert len(window_sites(box, 1)) == 81
    res = run(ExperimentConfig("repulsion", Ns=[2], region="origin", replicas=2000))
    t = res.tables["repulsion"]
    assert t.column("window_radius") == [0]
    assert t.column("status") == ["pass"]
    with pytest.raises(ValueError):
        run(ExperimentConfig("repulsion", Ns=[2], region="empty", replicas=100))


def test_cli_writes_identical_csv(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(ENV_VAR, raising=False)
    cfgfile = tmp_path / "c.cfg"
    cfgfile.write_text("d = 2\nNs = [2, 3]\nregion = \"origin\"\nreplicas = 5000\n")
    outs = []
    for i in range(2):
        out = tmp_path / f"o{i}"
        assert main(["positivity", "--config", str(cfgfile), "--out", str(out), "--seed", "7",
                     "--cache", str(tmp_path / "cache")]) == 0
        outs.append((out / "positivity.csv").read_bytes())
    assert outs[0] == outs[1]
    meta = json.loads((tmp_path / "o0" / "positivity.meta.json").read_text())
    assert meta["seed"] == 7
    assert main(["positivity", "--config", str(cfgfile), "--out", str(tmp_path / "j"), "--format", "json"]) == 0
    assert json.loads((tmp_path / "j" / "positivity.json").read_text())["schema"] == "membrane-lab/v1"


def test_cli_rejects_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_key = 1\n")
    assert main(["variance-profile", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err
