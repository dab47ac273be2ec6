import json
import subprocess
import sys

import numpy as np
import pytest

from vpcontrol import cli
from vpcontrol.fields import save_field, single_mode

FAST = """
[numerics]
h = 0.34
dt = 0.02
n = 24
snapshot_stride = 10
"""


def write_config(tmp_path, body, name="run.ini"):
    path = tmp_path / name
    path.write_text(FAST + body)
    return path


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_vacuum_simulate(tmp_path, capsys):
    cfg = write_config(tmp_path, "[datum]\namplitude = 0\n[output]\ndir = out\n")
    assert cli.main(["simulate", str(cfg)]) == 0
    out = tmp_path / "out"
    m = manifest(out)
    assert m["status"] == "ok" and m["exit_code"] == 0 and m["energy_drift"] == 0
    data = np.loadtxt(out / "diagnostics.csv", delimiter=",", skiprows=1)
    assert np.all(data[:, 1:3] == 0)
    assert not (out / cli.LOCK_NAME).exists()


def test_simulate_rerun_is_byte_identical(tmp_path):
    save_field(tmp_path / "B.json", single_mode(0.4))
    cfg = write_config(tmp_path, "[field]\nfile = B.json\n")
    assert cli.main(["simulate", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["simulate", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("diagnostics.csv", "field.json", "ensemble_0000.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert manifest(tmp_path / "a")["checksums"] == manifest(tmp_path / "b")["checksums"]


@pytest.mark.parametrize("body, code", [
    ("[field]\nfile = missing.json\n", "config-reference"),
    ("[cost]\nlambda = -1\n", "config-value"),
    ("[numerics\n", "config-syntax"),
    ("[verify]\nsuites = bogus\n", "config-value"),
])
def test_config_errors(tmp_path, capsys, body, code):
    path = tmp_path / "bad.ini"
    path.write_text(body)
    assert cli.main(["simulate", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error code={code} exit=2 ")


def test_missing_config(tmp_path, capsys):
    assert cli.main(["simulate", str(tmp_path / "nope.ini")]) == cli.EXIT_CONFIG
    assert "code=config-missing" in capsys.readouterr().err


def test_verify_fast_suites_pass(tmp_path, capsys):
    cfg = write_config(tmp_path, "")
    out = tmp_path / "v"
    rc = cli.main(["verify", str(cfg), "--out", str(out), "--suite", "poisson",
                   "--suite", "speed"])
    text = capsys.readouterr().out
    assert rc == 0
    assert "FAIL" not in text and text.count("PASS") == 4
    assert all(c["pass"] for c in manifest(out)["checks"])


def test_verify_failure_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, "[verify]\nsuites = poisson\ntol_poisson = 0\n")
    out = tmp_path / "v"
    assert cli.main(["verify", str(cfg), "--out", str(out)]) == cli.EXIT_VERIFY
    cap = capsys.readouterr()
    assert "FAIL" in cap.out and "code=verify-failed exit=4" in cap.err
    m = manifest(out)
    assert m["status"] == "error" and not all(c["pass"] for c in m["checks"])


def test_locked_directory(tmp_path, capsys):
    out = tmp_path / "o"
    out.mkdir()
    (out / cli.LOCK_NAME).write_text("999")
    (out / "manifest.json").write_text('{"owner": "other"}')
    cfg = write_config(tmp_path, "[datum]\namplitude = 0\n")
    assert cli.main(["simulate", str(cfg), "--out", str(out)]) == cli.EXIT_RUNTIME
    assert "code=locked exit=3" in capsys.readouterr().err
    assert manifest(out) == {"owner": "other"}


def test_optimize_budget_zero(tmp_path):
    save_field(tmp_path / "star.json", single_mode(0.3))
    cfg = write_config(tmp_path, "[optimize]\ntarget = star.json\nbudget = 0\n")
    out = tmp_path / "o"
    assert cli.main(["optimize", str(cfg), "--out", str(out)]) == 0
    rows = (out / "trace.csv").read_text().splitlines()
    assert len(rows) == 2
    m = manifest(out)
    assert m["optimizer_status"] == "stalled" and m["n_evals"] == 1
    assert m["initial"]["tracking"] > 0
    assert (out / "best_field.json").exists() and (out / "fields" / "field_0000.json").exists()


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path, "[datum]\namplitude = 0\n")
    proc = subprocess.run([sys.executable, "-m", "vpcontrol.cli", "simulate", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


def test_verify_recovery_suite(tmp_path, capsys):
    cfg = write_config(tmp_path, "[optimize]\ngtol = 1e-6\nbudget = 60\n")
    rc = cli.main(["verify", str(cfg), "--out", str(tmp_path / "r"), "--suite", "recovery"])
    assert rc == 0, capsys.readouterr().out
    checks = manifest(tmp_path / "r")["checks"]
    assert [c["check"] for c in checks] == ["tracking ratio", "J increase", "V-norm excess"]


def test_default_suites_exclude_recovery(tmp_path):
    cfg = cli.load_config(write_config(tmp_path, ""))
    assert "recovery" not in cfg.suites
    cfg = cli.load_config(write_config(tmp_path, "[verify]\nsuites = all\n"))
    assert cfg.suites == cli.SUITES


def test_inline_comments(tmp_path):
    cfg = cli.load_config(write_config(tmp_path, "[optimize]\nscheme = spsa   ; or central\n"))
    assert cfg.scheme == "spsa"
