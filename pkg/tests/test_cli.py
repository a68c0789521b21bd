import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from travmem.cli import main
from travmem.experiment import config_from_dict
from travmem.scene_sim import generate_stream, load_recorded_session, save_session

MINIMAL = Path(__file__).resolve().parents[1] / "configs" / "minimal.yaml"


def test_run_exit_zero_and_artifacts(tmp_path, capsys):
    assert main(["run", "--config", str(MINIMAL), "--out", str(tmp_path)]) == 0
    assert {p.name for p in tmp_path.iterdir()} == {"report.csv", "summary.json", "memory.json",
                                                    "model.bin", "manifest.json"}
    assert "idm: clusters=" in capsys.readouterr().out


def test_run_twice_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert main(["run", "--config", str(MINIMAL), "--out", str(tmp_path / sub), "--quiet"]) == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()


def test_overrides_reach_manifest(tmp_path):
    main(["run", "--config", str(MINIMAL), "--out", str(tmp_path), "--seed", "3", "--strategy", "fifo",
          "--lambda", "2.5", "--quiet"])
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["seed"] == 3
    assert m["config"]["strategy"] == "fifo" and m["config"]["idm"]["lambda"] == 2.5


def test_out_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("TRAVMEM_OUT", str(tmp_path))
    assert main(["run", "--config", str(MINIMAL), "--quiet"]) == 0
    assert (tmp_path / "minimal-run" / "report.csv").exists()


def test_config_error_exit_one(tmp_path, capsys):
    bad = yaml.safe_load(MINIMAL.read_text())
    bad["idm"] = {"lamda": 1.0}
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(bad))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "idm.lamda" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_compare_single_strategy_is_config_error(tmp_path):
    raw = yaml.safe_load(MINIMAL.read_text())
    raw["strategies"] = ["idm"]
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert main(["compare", "--config", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == 1


def test_compare_runs(tmp_path):
    raw = yaml.safe_load(MINIMAL.read_text())
    raw["strategies"] = ["idm", "fifo"]
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert main(["compare", "--config", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    assert (tmp_path / "o" / "comparison.csv").exists()


def test_sweep_subcommand(tmp_path, capsys):
    assert main(["sweep-lambda", "--config", str(MINIMAL), "--out", str(tmp_path),
                 "--lambdas", "0.5,1,2"]) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "lambda,clusters,stored_nodes" and len(lines) == 4
    assert "lambda=0.5" in capsys.readouterr().out


def test_runtime_error_exit_two(tmp_path):
    raw = yaml.safe_load(MINIMAL.read_text())
    raw["learner"].update(lr=1e8, clip_norm=0.0)
    path = tmp_path / "div.yaml"
    path.write_text(yaml.safe_dump(raw))
    with np.errstate(all="ignore"):
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_annotate_and_inspect(tmp_path, capsys):
    cfg = config_from_dict(yaml.safe_load(MINIMAL.read_text()))
    frames = list(generate_stream(cfg.scenario))
    frames[2].prompts = []
    sess = tmp_path / "s.trav"
    save_session(sess, frames)
    out = tmp_path / "masks.trav"
    assert main(["annotate", "--session", str(sess), "--out", str(out), "--quiet"]) == 0
    back = list(load_recorded_session(out))
    assert np.array_equal(back[0].truth_mask, frames[0].truth_mask)
    assert not back[2].truth_mask.any()
    report = json.loads(out.with_suffix(".json").read_text())
    assert [f["ok"] for f in report["frames"]].count(False) == 1

    main(["run", "--config", str(MINIMAL), "--out", str(tmp_path / "r"), "--quiet"])
    capsys.readouterr()
    assert main(["inspect-memory", str(tmp_path / "r" / "memory.json")]) == 0
    text = capsys.readouterr().out
    assert "strategy=idm" in text and "cluster 0:" in text


def test_corrupt_session_exit_two(tmp_path):
    sess = tmp_path / "s.trav"
    sess.write_bytes(b"TRAVSESS" + b"\x00" * 5)
    assert main(["annotate", "--session", str(sess), "--quiet"]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "travmem", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sweep-lambda" in res.stdout
