import csv
import json

import pytest

from projres.cli import main, parse_p_range
from projres.exceptions import ValidationError

SMALL = {
    "backbone": {"vocab_size": 64, "hidden_dim": 32},
    "federation": {"num_clients": 4, "rounds": 3},
    "dataset": {"num_samples": 80, "holdout": 20},
    "defenses": [{"kind": "none"}, {"kind": "dp", "sigma": 0.01}],
    "attacks": ["projres", "fedloss", "score_diff", "fedmia"],
    "evaluation": {"rounds": [0, 2], "repetitions": 10},
}


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL, indent=2), encoding="utf-8")
    return p


def read_results(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_results(small_config, tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(small_config), "--output-dir", str(out)]) == 0
    rows = read_results(out / "results.csv")
    assert len(rows) == 2 * 4 * 2
    by = {(r["defense"], r["attack"], r["round"]): r for r in rows}
    assert by[("none", "score_diff", "0")]["status"] != "ok"
    assert by[("none", "fedmia", "2")]["status"] == "ok"
    assert float(by[("none", "projres", "2")]["auc"]) == 1.0
    assert by[("none", "fedloss", "2")]["acc"] == ""
    assert (out / "manifest.json").exists()


def test_rerun_is_byte_identical(small_config, tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(small_config), "--output-dir", str(a)]) == 0
    monkeypatch.setenv("PROJRES_THREADS", "3")
    assert main(["run", str(small_config), "--output-dir", str(b)]) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "manifest.json")
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_set_override(small_config, tmp_path):
    out = tmp_path / "o"
    assert main(["run", str(small_config), "--set", "attacks=[\"projres\"]",
                 "--set", "defenses=[{\"kind\": \"none\"}]", "--output-dir", str(out)]) == 0
    assert {r["attack"] for r in read_results(out / "results.csv")} == {"projres"}


def test_export_then_attack_matches_run(small_config, tmp_path):
    cfg = tmp_path / "one.json"
    cfg.write_text(json.dumps(dict(SMALL, defenses=[{"kind": "none"}])), encoding="utf-8")
    run_dir, trace_dir, att_dir = tmp_path / "r", tmp_path / "t", tmp_path / "a"
    assert main(["run", str(cfg), "--output-dir", str(run_dir)]) == 0
    assert main(["export-trace", str(cfg), "--out", str(trace_dir)]) == 0
    assert main(["attack", str(trace_dir), str(cfg), "--output-dir", str(att_dir)]) == 0
    assert (run_dir / "results.csv").read_bytes() == (att_dir / "results.csv").read_bytes()


def test_scan_boundary(tmp_path, capsys):
    out = tmp_path / "scan.csv"
    assert main(["scan-boundary", "--n", "64", "--m", "32", "--p", "1-64", "--trials", "10",
                 "--out", str(out)]) == 0
    assert "p_max = 32" in capsys.readouterr().out
    rows = list(csv.DictReader(out.open(encoding="utf-8")))
    assert len(rows) == 64 and list(rows[0]) == ["n", "m", "p", "mean_residual", "auc"]


def test_invalid_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "federation": {\n    "rounds": -1\n  }\n}', encoding="utf-8")
    assert main(["run", str(bad)]) == 2
    assert f"{bad}:3: federation" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["scan-boundary", "--p", "5-1"]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2


def test_bad_trace_dir_exit_2(small_config, tmp_path):
    assert main(["attack", str(tmp_path), str(small_config)]) == 2


def test_parse_p_range():
    assert parse_p_range("1-4,8") == [1, 2, 3, 4, 8]
    assert parse_p_range("3") == [3]
    for bad in ["", "4-2", "0-3", "a"]:
        with pytest.raises(ValidationError):
            parse_p_range(bad)
