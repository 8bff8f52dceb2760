import csv
import json
from pathlib import Path

import pytest

from condflow.cli import RunManifest, emit_plot_data, main, run
from condflow.errors import InvalidState

ROOT = Path(__file__).resolve().parent.parent
ZERO = ROOT / "scenarios" / "zero_coefficients.yaml"

SMALL = {
    "simulate": """
name: small-simulate
model: {sigma_v: {value: 1.0}, sigma_w: {value: 1.0}, jumps: {intensity: 1.0, variance: 0.25}}
grid: {K: [10, 20]}
particles: {M: [5, 10]}
seeds: {master: 3, n_common: 3}
""",
    "verify-copies": """
name: small-copies
model: {sigma_v: {value: 1.0}, sigma_w: {value: 1.0}}
grid: {K: [10]}
particles: {M: [20], n_copies: 20}
experiment: {min_common: 10, negative_controls: true}
seeds: {master: 3, n_common: 12}
""",
    "verify-condprocess": """
name: small-condprocess
model:
  n: 2
  d_i: 1
  sigma_v: {kind: constant, value: [[1.0], [1.0]]}
  sigma_w: {kind: state_component, row: 1, col: 0, source: 0, scale: 1.0}
grid: {K: [10]}
particles: {M: [30], n_copies: 30}
experiment: {eta: {kind: component, component: 0}, analytic: counterexample, x_component: 1, y_component: 0}
seeds: {master: 3, n_common: 6}
""",
    "verify-ito": """
name: small-ito
model: {sigma_v: {value: 1.0}, sigma_w: {value: 1.0}, jumps: {intensity: 1.0, variance: 0.25}}
grid: {K: [20]}
particles: {M: [20]}
functional: {outer: {name: power, k: 2}, tests: [{name: tanh}]}
experiment: {pool: disjoint, pilot: {K: [5, 10], M: [5, 10], n_common: 4}}
seeds: {master: 3, n_common: 6}
""",
    "verify-control": """
name: small-control
model: {drift: {kind: action}, sigma_v: {value: 1.0}, sigma_w: {value: 1.0}, actions: [0.0, 1.0]}
grid: {K: [8]}
particles: {M: [10]}
functional: {outer: {name: power, k: 2}, tests: [{name: tanh}], g: {kind: identity}}
experiment:
  value: {kind: linear_drift, slope: 1.0}
  tolerance: {a: 1.0, b: 1.0}
seeds: {master: 3, n_common: 4}
""",
    "convergence": """
name: small-convergence
model: {sigma_v: {value: 1.0}, sigma_w: {value: 1.0}}
grid: {K: [5, 10, 20]}
particles: {M: [4, 8]}
functional: {outer: {name: power, k: 2}, tests: [{name: tanh}]}
experiment: {slope_dt: [-10, 10], slope_M: [-10, 10]}
seeds: {master: 3, n_common: 4}
""",
}


def _write(tmp_path, text, name="scenario.yaml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _csvs(out: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


def test_verify_ito_zero_residual_column(tmp_path):
    m = run("verify-ito", ZERO, tmp_path)
    assert m.passed
    rows = _rows(tmp_path / "ito_ledgers.csv")
    assert rows and all(float(r["residual"]) == 0.0 for r in rows)


@pytest.mark.parametrize("sub", sorted(SMALL))
def test_byte_identical_reruns_across_threads(tmp_path, sub):
    scen = _write(tmp_path, SMALL[sub])
    run(sub, scen, tmp_path / "a", threads=1)
    run(sub, scen, tmp_path / "b", threads=2)
    a, b = _csvs(tmp_path / "a"), _csvs(tmp_path / "b")
    assert a and a == b
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert ma["complete"] and all((tmp_path / "a" / p).exists() for p in ma["outputs"])


def test_convergence_row_count(tmp_path):
    m = run("convergence", _write(tmp_path, SMALL["convergence"]), tmp_path / "out")
    assert len(_rows(tmp_path / "out" / "convergence.csv")) == 3 * 2
    dt_rows = _rows(tmp_path / "out" / "residual_vs_dt.csv")
    assert len(dt_rows) == 6 and all(float(r["mean_abs_residual"]) > 0 for r in dt_rows)
    assert m.passed


def test_manifest_hash_and_seed_override(tmp_path):
    scen = _write(tmp_path, SMALL["simulate"])
    a = run("simulate", scen, tmp_path / "a")
    b = run("simulate", scen, tmp_path / "b", seed=99)
    assert a.scenario_hash != b.scenario_hash
    assert (tmp_path / "a" / "simulate_K20_M10.csv").read_bytes() != (tmp_path / "b" / "simulate_K20_M10.csv").read_bytes()


def test_emit_plot_data_requires_complete_manifest(tmp_path):
    with pytest.raises(InvalidState):
        emit_plot_data(RunManifest("simulate", "h", {}), tmp_path)


def test_emit_plot_data_empty_is_header_only(tmp_path):
    emit_plot_data(RunManifest("simulate", "h", {}, complete=True), tmp_path)
    for name in ("residual_vs_dt.csv", "residual_vs_M.csv", "ledger_terms.csv"):
        lines = (tmp_path / name).read_text().strip().split("\n")
        assert len(lines) == 1 and "," in lines[0]


def test_ledger_terms_one_row_per_term(tmp_path):
    run("verify-ito", _write(tmp_path, SMALL["verify-ito"]), tmp_path / "out")
    ledger_cols = _rows(tmp_path / "out" / "ito_ledgers.csv")[0].keys()
    terms = [c for c in ledger_cols if c not in ("common_seed", "lhs", "residual")]
    rows = _rows(tmp_path / "out" / "ledger_terms.csv")
    assert [r["term"] for r in rows] == terms


def test_exit_codes(tmp_path, capsys):
    assert main(["verify-ito", "--scenario", str(ZERO), "--out", str(tmp_path / "ok")]) == 0
    failing = SMALL["verify-ito"].replace("pilot: {K: [5, 10], M: [5, 10], n_common: 4}", "tolerance: {a: 0.0, b: 0.0}")
    assert main(["verify-ito", "--scenario", str(_write(tmp_path, failing)), "--out", str(tmp_path / "bad")]) == 1
    broken = _write(tmp_path, "name: x\ngrid: {K: [5]}\nparticles: {M: [5]}\n", "broken.yaml")
    assert main(["simulate", "--scenario", str(broken), "--out", str(tmp_path / "err")]) == 2
    out = capsys.readouterr()
    assert "PASS" in out.out and "FAIL" in out.out and "master" in out.err


def test_environment_overrides(tmp_path, monkeypatch):
    scen = _write(tmp_path, SMALL["simulate"])
    monkeypatch.setenv("CONDFLOW_SEED", "99")
    monkeypatch.setenv("CONDFLOW_THREADS", "2")
    assert main(["simulate", "--scenario", str(scen), "--out", str(tmp_path / "env")]) == 0
    manifest = json.loads((tmp_path / "env" / "manifest.json").read_text())
    assert manifest["parameters"]["seeds"]["master"] == 99 and manifest["threads"] == 2
    assert main(["simulate", "--scenario", str(scen), "--out", str(tmp_path / "flag"), "--seed", "5"]) == 0
    manifest = json.loads((tmp_path / "flag" / "manifest.json").read_text())
    assert manifest["parameters"]["seeds"]["master"] == 5
    monkeypatch.setenv("CONDFLOW_SEED", "abc")
    assert main(["simulate", "--scenario", str(scen), "--out", str(tmp_path / "x")]) == 2
