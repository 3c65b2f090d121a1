import json
import os
import subprocess
import sys

import numpy as np
import pytest

from qvalued import __version__
from qvalued.cli import main
from qvalued.qfield import detect_branch_points, load_field

HALF = {"type": "cylindrical", "q": 2, "m": 2, "k0": 1, "q0": 2, "components": [{"re": [1, 0], "im": [0, 1], "mult": 1}]}
LINEAR = {"type": "cylindrical", "q": 1, "m": 1, "k0": 1, "q0": 1, "components": [{"re": [1], "im": [0]}]}
SADDLE = {"type": "cylindrical", "q": 1, "m": 1, "k0": 2, "q0": 1, "components": [{"re": [1], "im": [0]}]}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def csv_rows(text):
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    keys = lines[0].split(",")
    return [dict(zip(keys, map(float, l.split(",")))) for l in lines[1:]]


def test_generate_format(tmp_path, capsys):
    out = tmp_path / "c.qf"
    code, text, _ = run(["generate", "--record", json.dumps(HALF), "--h", 2 / 255, "--out", out], capsys)
    assert code == 0
    assert text.startswith(f"# qvalued {__version__} command=generate h=")
    blob = out.read_bytes()
    assert blob.startswith(b"QFLD1\nn=2\nq=2\nm=2\n")
    u = load_field(out)
    assert u.data.shape == (256, 256, 2, 2)
    assert blob.endswith(np.ascontiguousarray(u.data, dtype="<f8").tobytes())


def test_generate_uk_branch_points(tmp_path, capsys):
    out = tmp_path / "uk.qf"
    code, *_ = run(["generate", "--record", '{"type": "uk", "q": 3, "k": 8}', "--h", 1 / 128, "--out", out], capsys)
    assert code == 0
    assert len(detect_branch_points(load_field(out), alpha=1 / 3)) == 3


@pytest.mark.parametrize(
    "argv",
    [
        ["generate", "--record", '{"type": "nope"}', "--out", "x.qf"],
        ["generate", "--record", "{broken: [", "--out", "x.qf"],
        ["generate", "--record", json.dumps(HALF)],
        ["generate", "--record", json.dumps(HALF), "--box", "1,-1", "--out", "x.qf"],
        ["frequency", "--field", "missing.qf"],
        ["frequency", "--radii", "0.1"],
        ["--unknown"],
        [],
    ],
)
def test_usage_errors(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(argv, capsys)
    assert code == 1 and err.startswith("qval: error:")


def test_unwritable_output(tmp_path, capsys):
    code, _, err = run(["generate", "--record", json.dumps(HALF), "--h", 0.25, "--out", tmp_path / "no" / "x.qf"], capsys)
    assert code == 1 and "cannot write" in err


@pytest.fixture(scope="module")
def fields(tmp_path_factory):
    d = tmp_path_factory.mktemp("fields")
    for name, rec, h in (("half", HALF, 1 / 256), ("linear", LINEAR, 1 / 64)):
        assert main(["generate", "--record", json.dumps(rec), "--h", str(h), "--out", str(d / f"{name}.qf")]) == 0
    return d


def test_frequency_half(fields, capsys):
    code, text, _ = run(["frequency", "--field", fields / "half.qf", "--radii", "0.1:0.5:5"], capsys)
    assert code == 0
    assert text.splitlines()[0].startswith(f"# qvalued {__version__} command=frequency h=0.00390625")
    rows = csv_rows(text)
    assert len(rows) == 5 and all(0.48 <= r["N"] <= 0.52 for r in rows)


def test_frequency_linear(fields, capsys):
    code, text, _ = run(["frequency", "--field", fields / "linear.qf", "--radii", "0.3,0.6", "--center", "0,0"], capsys)
    assert code == 0 and all(abs(r["N"] - 1) <= 0.02 for r in csv_rows(text))


def test_frequency_zero_trace_is_numeric_failure(tmp_path, capsys):
    rec = {"type": "cylindrical", "q": 1, "m": 1, "k0": 1, "q0": 1, "components": [{"re": [0], "im": [0]}]}
    run(["generate", "--record", json.dumps(rec), "--h", 1 / 32, "--out", tmp_path / "z.qf"], capsys)
    code, _, err = run(["frequency", "--field", tmp_path / "z.qf", "--radii", "0.5"], capsys)
    assert code == 2 and "numerical failure" in err


def test_config_layering(fields, tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(f"frequency:\n  field: {fields / 'linear.qf'}\n  radii: '0.2,0.4,0.6'\n")
    code, text, _ = run(["--config", cfg, "frequency"], capsys)
    assert code == 0 and len(csv_rows(text)) == 3
    code, text, _ = run(["--config", cfg, "frequency", "--radii", "0.5"], capsys)
    assert code == 0 and len(csv_rows(text)) == 1
    cfg.write_text("frequency:\n  bogus: 1\n")
    assert run(["--config", cfg, "frequency"], capsys)[0] == 1


def test_minimize_log(tmp_path, capsys):
    out, log = tmp_path / "m.qf", tmp_path / "m.csv"
    argv = ["minimize", "--boundary", json.dumps(SADDLE), "--h", 1 / 16, "--restarts", 1, "--out", out, "--log", log]
    code, text, _ = run(argv, capsys)
    assert code == 0 and "status:" in text
    lines = log.read_text().splitlines()
    assert lines[0].startswith("# qvalued") and lines[1] == "sweep,energy,max_delta,restart"
    energies = [float(l.split(",")[1]) for l in lines[2:]]
    assert all(b <= a for a, b in zip(energies, energies[1:]))
    # a QFLD1 boundary file is accepted as well
    code, *_ = run(["minimize", "--boundary", out, "--restarts", 1, "--out", tmp_path / "m2.qf"], capsys)
    assert code == 0


def test_decay_series(tmp_path, capsys):
    d = 0.3 * np.exp(0.4j) * np.array([1, 1j])
    rec = {
        "type": "series",
        "q0": 2,
        "terms": [{"k": 1, "re": [1, 0], "im": [0, 1]}, {"k": 3, "re": list(d.real), "im": list(d.imag)}],
    }
    run(["generate", "--record", json.dumps(rec), "--h", 1 / 128, "--out", tmp_path / "s.qf"], capsys)
    code, text, _ = run(["decay", "--field", tmp_path / "s.qf", "--theta", 0.5, "--scales", 4, "--k0", 1, "--q0", 2], capsys)
    assert code == 0
    mu = float(next(l for l in text.splitlines() if l.startswith("mu_fit:")).split()[1])
    assert 0.9 <= mu <= 1.1


def test_selftest_exit_and_threads(capsys, monkeypatch):
    code1, text1, _ = run(["--threads", 1, "selftest"], capsys)
    monkeypatch.setenv("QVAL_THREADS", "4")
    code4, text4, _ = run(["selftest"], capsys)
    assert code1 == code4 == 0 and text1 == text4
    assert "threads" not in text1
    monkeypatch.setenv("QVAL_THREADS", "many")
    assert run(["selftest"], capsys)[0] == 1


def test_console_script_exit_code():
    proc = subprocess.run([sys.executable, "-m", "qvalued.cli", "frequency", "--field", "/nonexistent.qf"], capture_output=True)
    assert proc.returncode == 1
