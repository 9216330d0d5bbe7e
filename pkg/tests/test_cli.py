import hashlib
import json
import subprocess
import sys

import pytest

from nlrs.cli import main

BASE = """seed = 0
[potential]
box_radius = 64
[modes]
L = 4
betas = [50]
amplitudes = [1.5]
[dynamics]
t_end = 2.0
h = 1e-2
record_every = 50
residual_times = [0.0, 1.0, 2.0]
[mc]
trials = 40
density_box_size = 512
density_trials = 2
[ldt]
N = 2
theta_points = 200
"""


def config(tmp_path, extra="", name="c.toml"):
    p = tmp_path / name
    p.write_text(BASE + extra)
    return str(p)


def run(tmp_path, cmd, extra="", out="out", *flags):
    return main([cmd, config(tmp_path, extra), "--out", str(tmp_path / out), *flags])


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def assert_complete(d):
    m = manifest(d)
    listed = {a["path"]: a["sha256"] for a in m["artifacts"]}
    on_disk = {p.name for p in d.iterdir() if p.name != "manifest.json"}
    assert set(listed) == on_disk
    for name, digest in listed.items():
        assert hashlib.sha256((d / name).read_bytes()).hexdigest() == digest


def test_usage_errors(tmp_path):
    assert main(["bogus", "x.toml"]) == 1
    assert main(["audit", str(tmp_path / "missing.toml")]) == 1
    assert run(tmp_path, "audit", "[model]\nzeta = 1\n") == 1
    bad = tmp_path / "g.toml"
    bad.write_text(BASE.replace("betas = [50]", "betas = [30]"))
    assert main(["audit", str(bad)]) == 1


def test_sample_spectrum(tmp_path):
    assert run(tmp_path, "sample-spectrum") == 0
    d = tmp_path / "out"
    assert {"potential.json", "spectrum.eig.json", "selection.json"} <= {p.name for p in d.iterdir()}
    assert manifest(d)["stages"]["spectrum"]["status"] == "pass"
    assert_complete(d)


def test_audit_gate(tmp_path):
    assert run(tmp_path, "audit") == 2
    assert run(tmp_path, "solve", "", "gated") == 2
    d = tmp_path / "gated"
    stages = manifest(d)["stages"]
    assert stages["audit"]["verdict"] == "fail" and stages["solve"]["status"] == "skipped"
    assert not (d / "certificate.json").exists()
    assert_complete(d)


def test_pipeline_deterministic(tmp_path):
    assert run(tmp_path, "run", "", "a", "--override-audits") == 0
    assert run(tmp_path, "run", "", "b", "--override-audits") == 0
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("certificate.json", "u_hat.jsonl", "audits.json", "verify.json", "trajectory.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    stages = manifest(a)["stages"]
    assert all(stages[s]["status"] == "pass" for s in ("spectrum", "audit", "solve", "verify"))
    assert json.loads((a / "verify.json").read_text())["pass"]
    assert_complete(a)


def test_followup_commands_extend_manifest(tmp_path):
    extra = "[solver]\noverride_audits = true\n"
    assert run(tmp_path, "solve", extra) == 0
    assert run(tmp_path, "verify", extra) == 0
    assert run(tmp_path, "ldt-scan", extra) == 0
    d = tmp_path / "out"
    assert {"certificate.json", "verify.json", "ldt.json"} <= {a["path"] for a in manifest(d)["artifacts"]}
    assert_complete(d)


def test_seed_override(tmp_path):
    assert run(tmp_path, "sample-spectrum", "", "s1") == 0
    assert run(tmp_path, "sample-spectrum", "", "s2", "--seed", "7") == 0
    assert (tmp_path / "s1/potential.json").read_bytes() != (tmp_path / "s2/potential.json").read_bytes()
    assert manifest(tmp_path / "s1")["config_hash"] != manifest(tmp_path / "s2")["config_hash"]


def test_nonconvergence_exit(tmp_path):
    extra = "[solver]\noverride_audits = true\nmax_iter = 1\ntol = 1e-30\n"
    assert run(tmp_path, "solve", extra) == 3


def test_verify_failure_exit(tmp_path):
    extra = "[solver]\noverride_audits = true\n"
    assert run(tmp_path, "verify", extra) == 0
    strict = BASE.replace("record_every = 50", "record_every = 50\nmismatch_tol = 1e-30")
    p = tmp_path / "strict.toml"
    p.write_text(strict + extra)
    assert main(["verify", str(p), "--out", str(tmp_path / "strict")]) == 4


def test_empty_sweep(tmp_path):
    assert run(tmp_path, "sweep") == 0
    d = tmp_path / "out"
    assert (d / "sweep.csv").read_text().count("\n") == 1
    assert json.loads((d / "sweep.json").read_text())["points"] == 0


def test_sweep(tmp_path):
    assert run(tmp_path, "sweep", "[sweep]\ndeltas = [1e-3, 1e-2]\namplitude_points = 2\n") == 0
    s = json.loads((tmp_path / "out/sweep.json").read_text())
    assert s["points"] == 4 and [r["index"] for r in s["rows"]] == [0, 1, 2, 3]
    assert set(s["success_by_delta"]) == {"0.001", "0.01"}


@pytest.mark.filterwarnings("ignore:dropping")
def test_mc_stats(tmp_path):
    assert run(tmp_path, "mc-stats") == 0
    d = tmp_path / "out"
    cd = json.loads((d / "center_density.json").read_text())
    assert cd["band"] == [0.7 * 64, 1.3 * 64] and 0 <= cd["fraction_in_band"] <= 1
    assert (d / "wegner.csv").exists() and (d / "minami.json").exists()
    assert_complete(d)


def test_schedule_check(tmp_path):
    assert run(tmp_path, "schedule-check", "[model]\ndelta = 0.5\n") == 2
    rep = json.loads((tmp_path / "out/schedule.json").read_text())
    assert rep["holds"] is False and rep["delta"] == 0.5


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "nlrs", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
