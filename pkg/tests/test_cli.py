import json

import numpy as np
import pytest

from mfglq.cli import run
from mfglq.model import EMFGModel


@pytest.fixture
def k_model(tmp_path):
    one = np.eye(1)
    m = EMFGModel.build(1, 1, 1.0, B=one, Q=one, Qbar=one, P=one, Pbar=one, x0_mean=[1.0])
    path = tmp_path / "m.json"
    m.save(path)
    return path


def test_check_passes_on_k_model(k_model, tmp_path, capsys):
    out = tmp_path / "o"
    assert run(["check", "--model", str(k_model), "--T", "1.0", "--out", str(out)]) == 0
    reports = json.loads((out / "check.json").read_text())["reports"]
    t34 = next(r for r in reports if r["theorem_id"] == "T3.4")
    assert t34["holds"]
    assert "T3.4     holds" in capsys.readouterr().out


def test_check_fails_on_counterexample(tmp_path, capsys):
    assert run(["check", "--model", "counterexample", "--out", str(tmp_path)]) == 2
    assert "T3.4     FAILS" in capsys.readouterr().out
    reports = json.loads((tmp_path / "check.json").read_text())["reports"]
    assert not next(r for r in reports if r["theorem_id"] == "T3.4")["holds"]


def test_counterexample_scan(tmp_path):
    assert run(["counterexample", "--tmin", "0.29", "--tmax", "0.32", "--points", "31",
                "--out", str(tmp_path)]) == 0
    rows = np.loadtxt(tmp_path / "scan.csv", delimiter=",", skiprows=1)
    s = np.sign(rows[:, 1])
    i = int(np.nonzero(s[:-1] != s[1:])[0][0])
    assert 0.3 <= rows[i, 0] and rows[i + 1, 0] <= 0.31
    assert 0.3 < json.loads((tmp_path / "counterexample.json").read_text())["T0"] < 0.31


def test_solve_emfg_outputs(tmp_path):
    assert run(["solve-emfg", "--model", "scalar", "--steps", "200", "--out", str(tmp_path)]) == 0
    head = (tmp_path / "fbode.csv").read_text().splitlines()[0]
    assert head.startswith("t,xi")
    assert (tmp_path / "feedback.csv").exists()


def test_solve_emfg_past_root_is_negative(tmp_path):
    code = run(["solve-emfg", "--model", "counterexample", "--T", "0.31", "--out", str(tmp_path)])
    assert code == 2
    assert not json.loads((tmp_path / "solve.json").read_text())["solved"]


@pytest.mark.parametrize("argv, msg", [
    (["check", "--model", "missing.json"], "not found"),
    (["check", "--model", "scalar", "--tol", "nope=1"], "--tol"),
    (["grid", "--paths", "15", "--cohort", "10", "--steps", "20"], "multiple"),
])
def test_errors_exit_one(argv, msg, tmp_path, capsys):
    assert run(argv + ["--out", str(tmp_path)]) == 1
    assert msg in capsys.readouterr().err


def test_unknown_flag_exits_one(tmp_path):
    assert run(["check", "--model", "scalar", "--frobnicate"]) == 1


def test_schema_violation(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n": 1, "m": 1, "T": 1, "coefficients": {"Q": {"type": "constant",
                                                                              "value": [[-1]]}}}))
    assert run(["check", "--model", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "PSD" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["simulate", "--model", "scalar", "--steps", "50", "--paths", "300"],
    ["grid", "--steps", "40", "--paths", "60", "--cohort", "20"],
    ["nash", "--model", "nash_scalar", "--steps", "40", "--N", "3,5", "--reps", "40"],
])
def test_outputs_reproducible_across_threads(argv, tmp_path, monkeypatch):
    outs = []
    for th in ("1", "3"):
        monkeypatch.setenv("MFGLQ_THREADS", th)
        out = tmp_path / th
        assert run(argv + ["--out", str(out)]) in (0, 2)
        outs.append(out)
    csvs = sorted(p.name for p in outs[0].glob("*.csv"))
    assert csvs
    for name in csvs:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_manifest_replays(tmp_path):
    out = tmp_path / "a"
    assert run(["solve-emftc", "--model", "scalar_emftc", "--steps", "100", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 0 and "numpy" in man["versions"] and man["model"]["kind"] == "emftc"
    argv = [a if a != str(out) else str(tmp_path / "b") for a in man["argv"]]
    assert run(argv) == man["exit_code"]
    assert (out / "mftc.csv").read_bytes() == (tmp_path / "b" / "mftc.csv").read_bytes()
