import json
import subprocess
import sys

import pytest

from mgaa.cli import main

SMALL_TOY = {"vocab": 40, "hidden": 16, "heads": 2, "ffn": 40, "layers": 2, "seed": 3}


@pytest.fixture()
def workspace(tmp_path):
    cfg = {"method": "pca", "target_ratio": 0.5, "toy": SMALL_TOY, "model": str(tmp_path / "m.mgt"),
           "calib_sequences": 4, "calib_length": 24}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["gen-toy", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "m.mgt"),
                 "--calib-out", str(tmp_path / "c.tok")]) == 0
    return tmp_path


def test_compress_then_eval(workspace, capsys):
    w = workspace
    rc = main(["compress", "--model", str(w / "m.mgt"), "--calib", str(w / "c.tok"), "--config",
               str(w / "cfg.json"), "--out", str(w / "mc.mgt"), "--report", str(w / "r.json")])
    assert rc == 0
    report = json.loads((w / "r.json").read_text())
    assert 0.4 < report["global"]["achieved_ratio"] < 0.6
    capsys.readouterr()
    assert main(["eval", "--model", str(w / "mc.mgt"), "--ref", str(w / "m.mgt"), "--calib", str(w / "c.tok")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["achieved_ratio"] == pytest.approx(report["global"]["achieved_ratio"])
    assert metrics["hidden_error"] > 0


def test_capture_allocate_alpha_zero(workspace):
    w = workspace
    assert main(["capture", "--model", str(w / "m.mgt"), "--calib", str(w / "c.tok"),
                 "--out-stats", str(w / "s.mgt")]) == 0
    cfg = json.loads((w / "cfg.json").read_text())
    cfg["alpha"] = 0.0
    (w / "a0.json").write_text(json.dumps(cfg))
    assert main(["allocate", "--stats", str(w / "s.mgt"), "--config", str(w / "a0.json"),
                 "--out-plan", str(w / "plan.json")]) == 0
    plan = json.loads((w / "plan.json").read_text())
    assert all(v == pytest.approx(0.5, abs=1e-12) for v in plan["ratios"].values())


def test_analyze_outputs(workspace):
    w = workspace
    main(["capture", "--model", str(w / "m.mgt"), "--calib", str(w / "c.tok"), "--out-stats", str(w / "s.mgt")])
    assert main(["analyze", "--stats", str(w / "s.mgt"), "--plot-dir", str(w / "plots")]) == 0
    names = sorted(p.name for p in (w / "plots").iterdir())
    assert names == ["energy.csv", "energy.png", "importance.csv", "importance.png", "ranks.csv", "ranks.png",
                     "ratios.png"]
    rows = (w / "plots" / "importance.csv").read_text().splitlines()
    assert rows[0] == "sublayer,importance,z_score,ratio" and len(rows) == 5


def test_corrupt_magic_reports_file_and_offset(workspace, capsys):
    w = workspace
    blob = bytearray((w / "m.mgt").read_bytes())
    blob[0:4] = b"XXXX"
    (w / "bad.mgt").write_bytes(bytes(blob))
    rc = main(["eval", "--model", str(w / "bad.mgt"), "--ref", str(w / "m.mgt"), "--calib", str(w / "c.tok")])
    err = capsys.readouterr().err
    assert rc == 1
    assert "bad.mgt" in err and "offset 0" in err and "[io]" in err


def test_usage_error_exit_2(capsys):
    assert main(["compress", "--model", "x"]) == 2
    assert main(["nonsense"]) == 2


def test_bad_config_exit_1(workspace, capsys):
    (workspace / "bad.json").write_text('{"target_ratio": 0.5, "colour": "red"}')
    rc = main(["compress", "--model", str(workspace / "m.mgt"), "--calib", str(workspace / "c.tok"),
               "--config", str(workspace / "bad.json"), "--out", "o", "--report", "r"])
    assert rc == 1
    assert "[config]" in capsys.readouterr().err


def test_console_script_exit_codes(workspace):
    proc = subprocess.run([sys.executable, "-m", "mgaa.cli", "eval", "--model", str(workspace / "nope.mgt"),
                           "--ref", str(workspace / "m.mgt"), "--calib", str(workspace / "c.tok")],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "nope.mgt" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "mgaa.cli"], capture_output=True, text=True)
    assert proc.returncode == 2
