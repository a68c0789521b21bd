import copy
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from travmem import experiment as ex
from travmem.learner import load_model
from travmem.scene_sim import ConfigError, generate_stream, held_out_frames, save_session

MINIMAL = Path(__file__).resolve().parents[1] / "configs" / "minimal.yaml"


def minimal_raw():
    return yaml.safe_load(MINIMAL.read_text())


def two_scene_raw():
    raw = minimal_raw()
    sc = raw["scenario"]
    sc["classes"] += [
        {"id": 2, "traversable": True, "mean": {"random": {"seed": 3, "scale": 1.0}}, "std": 0.5},
        {"id": 3, "traversable": False, "mean": {"random": {"seed": 4, "scale": 1.0}}, "std": 0.5},
    ]
    sc["blocks"] = [{"scene_id": 0, "classes": [0, 1], "frames": 6},
                    {"scene_id": 1, "classes": [2, 3], "frames": 4}]
    return raw


def test_defaults_fill_in():
    cfg = ex.config_from_dict({})
    assert cfg.strategy == "idm" and cfg.lam == 1.0
    assert cfg.raw["fifo"]["queue_size"] == 150
    assert cfg.scenario.total_frames == 500


@pytest.mark.parametrize("patch, key", [
    ({"idm": {"lambdaa": 1.0}}, "idm.lambdaa"),
    ({"idm": {"n_max": 0}}, "idm.n_max"),
    ({"strategy": "lifo"}, "strategy"),
    ({"fifo": {"queue_size": 0}}, "fifo.queue_size"),
    ({"learner": {"batch_size": 0}}, "learner.batch_size"),
    ({"eval": {"cadence": "weekly"}}, "eval.cadence"),
    ({"session": "x.trav"}, "test_session"),
    ({"ssa": {"segmentation": "sam"}}, "ssa.segmentation"),
])
def test_config_errors_name_key(patch, key):
    with pytest.raises(ConfigError) as exc:
        ex.config_from_dict(patch)
    assert exc.value.key == key


def test_config_hash_tracks_content():
    a, b = ex.config_from_dict({}), ex.config_from_dict({})
    assert a.hash() == b.hash()
    assert a.with_overrides(seed=1).hash() != a.hash()


def test_run_writes_artifacts(tmp_path):
    cfg = ex.config_from_dict(minimal_raw())
    r = ex.run_experiment(cfg, tmp_path)
    for name in ("report.csv", "summary.json", "memory.json", "model.bin", "manifest.json"):
        assert (tmp_path / name).exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema"] == "travmem.summary"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_sha256"] == cfg.hash()
    params = load_model(tmp_path / "model.bin")
    assert params.dims["d"] == 8
    assert r.stats["frames"] == 10 and r.stats["stored_nodes"] <= 20
    assert not list(tmp_path.glob("*.tmp*"))


def test_run_is_deterministic(tmp_path):
    cfg = ex.config_from_dict(minimal_raw())
    ex.run_experiment(cfg, tmp_path / "a")
    ex.run_experiment(cfg, tmp_path / "b")
    for name in ("report.csv", "memory.json", "model.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ex.run_experiment(cfg.with_overrides(seed=1), tmp_path / "c")
    assert (tmp_path / "a" / "model.bin").read_bytes() != (tmp_path / "c" / "model.bin").read_bytes()


def test_checkpoints_at_block_ends():
    cfg = ex.config_from_dict(two_scene_raw())
    r = ex.train_stream(cfg)
    assert r.report.checkpoint_labels == ["frame6", "frame10"]
    assert len(r.report.forgetting_matrix) == 2
    assert all(len(row) == 2 for row in r.report.forgetting_matrix)
    assert set(r.report.forgetting) == {0, 1}


def test_integer_cadence():
    raw = two_scene_raw()
    raw["eval"] = {"cadence": 3}
    r = ex.train_stream(ex.config_from_dict(raw))
    assert r.report.checkpoint_labels == ["frame3", "frame6", "frame9", "frame10"]


def test_report_csv_layout():
    cfg = ex.config_from_dict(two_scene_raw())
    r = ex.train_stream(cfg)
    lines = ex.report_csv([r]).splitlines()
    assert lines[0] == "strategy,checkpoint,scene,metric,value"
    rows = [ln.split(",") for ln in lines[1:]]
    # one row per checkpoint x scene (plus aggregate) x metric
    assert len(rows) == 2 * 3 * 7
    assert {row[3] for row in rows} >= {"auroc", "alpha", "beta", "f1", "precision", "recall", "iou"}


def test_compare_requires_two_strategies(tmp_path):
    raw = minimal_raw()
    raw["strategies"] = ["idm"]
    with pytest.raises(ConfigError) as exc:
        ex.compare_strategies(ex.config_from_dict(raw), tmp_path)
    assert exc.value.key == "strategies"


def test_compare_shares_stream(tmp_path):
    raw = two_scene_raw()
    raw["strategies"] = ["idm", "fifo"]
    raw["fifo"] = {"queue_size": 3}
    results = ex.compare_strategies(ex.config_from_dict(raw), tmp_path)
    assert [r.strategy for r in results] == ["idm", "fifo"]
    assert results[1].stats["stored_nodes"] == 3
    for p in ("comparison.csv", "comparison.json", "manifest.json", "idm/report.csv", "fifo/report.csv"):
        assert (tmp_path / p).exists()
    header = (tmp_path / "comparison.csv").read_text().splitlines()[0]
    assert header == "scene,metric,idm,fifo"


def test_sweep_counts_non_increasing(tmp_path):
    raw = two_scene_raw()
    raw["scenario"]["separation"] = 40.0
    cfg = ex.config_from_dict(raw)
    rows = ex.sweep_lambda(cfg, [0.25, 0.5, 1.0, 2.0, 4.0], out=tmp_path)
    counts = [r["clusters"] for r in rows]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[2] == 2
    assert (tmp_path / "sweep.csv").read_text().startswith("lambda,clusters,stored_nodes")


def test_sweep_rejects_negative_lambda():
    with pytest.raises(ConfigError):
        ex.sweep_lambda(ex.config_from_dict(minimal_raw()), [-1.0])


def _write_sessions(tmp_path, cfg):
    frames = list(generate_stream(cfg.scenario))
    save_session(tmp_path / "train.trav", frames)
    test = [f for sid in cfg.scenario.scene_ids for f in held_out_frames(cfg.scenario, sid)]
    save_session(tmp_path / "test.trav", test)


def test_session_source_matches_generated_stream(tmp_path):
    raw = two_scene_raw()
    cfg = ex.config_from_dict(raw)
    _write_sessions(tmp_path, cfg)
    sess_raw = copy.deepcopy(raw)
    sess_raw.update(session="train.trav", test_session="test.trav")
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(sess_raw))
    sess_cfg = ex.load_config(tmp_path / "cfg.yaml")
    assert sess_cfg.scenario is None
    a = ex.train_stream(cfg)
    b = ex.train_stream(sess_cfg)
    assert a.memory_snapshot == b.memory_snapshot
    for k in a.params.tensors:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert a.report.aggregate == b.report.aggregate


def test_unusable_frames_are_skipped(tmp_path):
    cfg = ex.config_from_dict(minimal_raw())
    frames = list(generate_stream(cfg.scenario))
    frames[3].prompts = []
    save_session(tmp_path / "train.trav", frames)
    save_session(tmp_path / "test.trav", held_out_frames(cfg.scenario, 0))
    raw = minimal_raw()
    raw.update(session=str(tmp_path / "train.trav"), test_session=str(tmp_path / "test.trav"))
    r = ex.train_stream(ex.config_from_dict(raw))
    assert r.stats["skipped_frames"] == 1 and r.stats["frames"] == 10


def test_fifo_and_unbounded_strategies():
    raw = minimal_raw()
    raw["fifo"] = {"queue_size": 4}
    cfg = ex.config_from_dict(raw)
    assert ex.train_stream(cfg, "fifo").stats["stored_nodes"] == 4
    assert ex.train_stream(cfg, "unbounded_random").stats["stored_nodes"] == 10
