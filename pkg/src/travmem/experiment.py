"""Config-driven runs: stream frames, annotate, remember, train, evaluate."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml

from . import __version__
from ._io import atomic_write_json, atomic_write_text
from .evaluation import METRICS, EvalReport, ScoredSet, build_report, continual_eval, evaluate_set
from .idm import FifoMemory, IncrementalMemory, UnboundedMemory
from .learner import Learner, LearnerConfig, LossWeights, ModelParams, predict_traversability, save_model
from .scene_sim import (
    ConfigError,
    Frame,
    Scenario,
    generate_frame,
    held_out_frames,
    load_recorded_session,
    oracle_segment,
    scenario_from_dict,
)
from .ssa import NoTraversableEvidence, build_node

log = logging.getLogger(__name__)

STRATEGIES = ("idm", "fifo", "unbounded_random")
REPORT_SCHEMA_VERSION = 1
DEFAULT_LAMBDAS = (0.25, 0.5, 1.0, 2.0, 4.0)

DEFAULTS = {
    "seed": 0,
    "out": None,
    "scenario": {"preset": "benchmark"},
    "session": None,
    "test_session": None,
    "strategy": "idm",
    "strategies": None,
    "idm": {"lambda": 1.0, "n_max": 20, "similar_ratio": 0.5},
    "fifo": {"queue_size": 150},
    "ssa": {"p_max": 512, "include_negatives": True, "segmentation": "oracle"},
    "learner": {
        "latent": 16, "enc_hidden": 64, "dec_hidden": 64, "mlp_hidden": 32,
        "activation": "tanh", "w1": 1.0, "w2": 1.0, "w3": 1.0,
        "lr": 1e-2, "optimizer": "sgd", "momentum": 0.9, "clip_norm": 10.0,
        "neg_weight": 1.0, "regularization": "cycle",
        "steps_per_frame": 10, "batch_size": 8, "pixels_per_node": 64,
    },
    "eval": {"cadence": "block", "threshold": 0.5},
    "sweep": {"lambdas": list(DEFAULT_LAMBDAS), "train": False},
}


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(key, "unknown configuration key")
        if isinstance(base[k], dict) and k != "scenario":
            if not isinstance(v, dict):
                raise ConfigError(key, "expected a mapping")
            out[k] = _merge(base[k], v, f"{key}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    scenario: Scenario | None
    strategy: str
    strategies: list[str] | None
    learner: LearnerConfig
    seed: int
    out: Path | None

    @property
    def lam(self) -> float:
        return float(self.raw["idm"]["lambda"])

    def hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in kw.items():
            if v is None:
                continue
            if k == "lam":
                raw["idm"]["lambda"] = v
            else:
                raw[k] = v
        return config_from_dict(raw, merged=True)


def config_from_dict(cfg: dict, merged: bool = False) -> ExperimentConfig:
    raw = cfg if merged else _merge(DEFAULTS, cfg or {})
    seed = raw["seed"]
    if not isinstance(seed, int):
        raise ConfigError("seed", "must be an integer")
    strategy = raw["strategy"]
    if strategy not in STRATEGIES:
        raise ConfigError("strategy", f"must be one of {STRATEGIES}")
    strategies = raw["strategies"]
    if strategies is not None:
        bad = [s for s in strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError("strategies", f"unknown strategies {bad}")
    idm = raw["idm"]
    if not float(idm["lambda"]) >= 0:
        raise ConfigError("idm.lambda", "must be non-negative")
    if int(idm["n_max"]) < 1:
        raise ConfigError("idm.n_max", "must be >= 1")
    if not 0 <= float(idm["similar_ratio"]) <= 1:
        raise ConfigError("idm.similar_ratio", "must lie in [0, 1]")
    if int(raw["fifo"]["queue_size"]) < 1:
        raise ConfigError("fifo.queue_size", "must be >= 1")
    ssa = raw["ssa"]
    if ssa["segmentation"] not in ("oracle", "recorded"):
        raise ConfigError("ssa.segmentation", "must be 'oracle' or 'recorded'")
    if int(ssa["p_max"]) < 2:
        raise ConfigError("ssa.p_max", "must be >= 2")
    lr = raw["learner"]
    for key in ("steps_per_frame", "batch_size", "pixels_per_node"):
        if int(lr[key]) < 1:
            raise ConfigError(f"learner.{key}", "must be >= 1")
    try:
        lcfg = LearnerConfig(
            latent=int(lr["latent"]), enc_hidden=int(lr["enc_hidden"]), dec_hidden=int(lr["dec_hidden"]),
            mlp_hidden=int(lr["mlp_hidden"]), activation=lr["activation"],
            weights=LossWeights(float(lr["w1"]), float(lr["w2"]), float(lr["w3"])),
            lr=float(lr["lr"]), optimizer=lr["optimizer"], momentum=float(lr["momentum"]),
            clip_norm=float(lr["clip_norm"]), neg_weight=float(lr["neg_weight"]),
            regularization=lr["regularization"],
        )
    except ValueError as exc:
        raise ConfigError("learner", str(exc)) from None
    cadence = raw["eval"]["cadence"]
    if cadence != "block" and not (isinstance(cadence, int) and cadence >= 1):
        raise ConfigError("eval.cadence", "must be 'block' or a positive frame count")
    if not 0 <= float(raw["eval"]["threshold"]) <= 1:
        raise ConfigError("eval.threshold", "must lie in [0, 1]")
    scenario = None
    if raw["session"] is None:
        scenario = scenario_from_dict(raw["scenario"])
    elif raw["test_session"] is None:
        raise ConfigError("test_session", "required when training from a recorded session")
    out = Path(raw["out"]) if raw["out"] else None
    return ExperimentConfig(raw, scenario, strategy, strategies, lcfg, seed, out)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML/JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    base = path.parent
    for key in ("session", "test_session"):
        if data.get(key):
            data[key] = str((base / data[key]).resolve()) if not Path(data[key]).is_absolute() else data[key]
    return config_from_dict(data)


def make_memory(cfg: ExperimentConfig, strategy: str | None = None):
    strategy = strategy or cfg.strategy
    if strategy == "idm":
        idm = cfg.raw["idm"]
        return IncrementalMemory(float(idm["lambda"]), int(idm["n_max"]), float(idm["similar_ratio"]))
    if strategy == "fifo":
        return FifoMemory(int(cfg.raw["fifo"]["queue_size"]))
    return UnboundedMemory()


class RunError(RuntimeError):
    def __init__(self, msg: str, frame_index: int | None = None):
        super().__init__(msg if frame_index is None else f"frame {frame_index}: {msg}")
        self.frame_index = frame_index


# -- streams ---------------------------------------------------------------

def training_frames(cfg: ExperimentConfig) -> Iterable[Frame]:
    if cfg.scenario is not None:
        for i in range(cfg.scenario.total_frames):
            yield generate_frame(cfg.scenario, i)
    else:
        yield from load_recorded_session(cfg.raw["session"])


def evaluation_frames(cfg: ExperimentConfig) -> dict[int, list[Frame]]:
    if cfg.scenario is not None:
        return {sid: held_out_frames(cfg.scenario, sid) for sid in cfg.scenario.scene_ids}
    out: dict[int, list[Frame]] = {}
    for f in load_recorded_session(cfg.raw["test_session"]):
        out.setdefault(f.scene_id, []).append(f)
    return out


def annotate(frame: Frame, mode: str):
    """Mask for ``frame``; ``None`` if segmentation produced no usable mask."""
    if mode == "recorded":
        return frame.truth_mask
    if not frame.prompts:
        return None
    seg = oracle_segment(frame, frame.prompts)
    return None if seg.failed else seg.mask


def frame_nodes(cfg: ExperimentConfig):
    """Yield ``(frame, node)`` pairs; unusable frames give ``node=None``."""
    ssa = cfg.raw["ssa"]
    for frame in training_frames(cfg):
        mask = annotate(frame, ssa["segmentation"])
        node = None
        if mask is not None:
            try:
                node = build_node(frame, mask, int(ssa["p_max"]), cfg.seed, bool(ssa["include_negatives"]))
            except NoTraversableEvidence:
                node = None
        yield frame, node


# -- scoring ---------------------------------------------------------------

@dataclass
class EvalData:
    x: dict[int, np.ndarray]
    y: dict[int, np.ndarray]

    @classmethod
    def from_frames(cls, frames: dict[int, list[Frame]]) -> "EvalData":
        x, y = {}, {}
        for sid, fs in frames.items():
            d = fs[0].features.shape[-1]
            x[sid] = np.concatenate([f.features.reshape(-1, d) for f in fs]).astype(np.float64)
            y[sid] = np.concatenate([f.truth_mask.ravel() for f in fs])
        return cls(x, y)

    def scored(self, params: ModelParams) -> dict[int, ScoredSet]:
        return {sid: ScoredSet(predict_traversability(self.x[sid], params), self.y[sid], sid)
                for sid in self.x}


# -- single run ------------------------------------------------------------

@dataclass
class RunResult:
    strategy: str
    report: EvalReport
    checkpoints: list[tuple[str, dict[int, dict]]]
    memory_snapshot: dict
    params: ModelParams
    stats: dict = field(default_factory=dict)


def _checkpoint_due(cfg: ExperimentConfig, frame_no: int, boundaries: set[int]) -> bool:
    cadence = cfg.raw["eval"]["cadence"]
    if cadence == "block":
        return frame_no in boundaries
    return frame_no % int(cadence) == 0


def train_stream(cfg: ExperimentConfig, strategy: str | None = None, test: EvalData | None = None,
                 nodes=None) -> RunResult:
    """Run the online loop for one strategy and evaluate it."""
    strategy = strategy or cfg.strategy
    memory = make_memory(cfg, strategy)
    lr = cfg.raw["learner"]
    d = cfg.scenario.feature_dim if cfg.scenario is not None else None
    learner = None
    rng = np.random.default_rng([cfg.seed, 5])
    steps, batch_size, ppn = int(lr["steps_per_frame"]), int(lr["batch_size"]), int(lr["pixels_per_node"])
    threshold = float(cfg.raw["eval"]["threshold"])
    test = test or EvalData.from_frames(evaluation_frames(cfg))
    boundaries = set()
    if cfg.scenario is not None:
        acc = 0
        for b in cfg.scenario.blocks:
            acc += b.frames
            boundaries.add(acc)

    snapshots: list[tuple[str, ModelParams]] = []
    stats = {"frames": 0, "skipped_frames": 0, "new_clusters": 0, "evictions": 0, "max_stored": 0}
    last_scene = None
    frame_no = 0
    source = nodes if nodes is not None else frame_nodes(cfg)
    for frame, node in source:
        frame_no += 1
        stats["frames"] += 1
        if cfg.scenario is None and last_scene is not None and frame.scene_id != last_scene:
            boundaries.add(frame_no - 1)
            if learner is not None:
                snapshots.append((f"frame{frame_no - 1}", learner.params.copy()))
        last_scene = frame.scene_id
        if node is None:
            stats["skipped_frames"] += 1
        else:
            if learner is None:
                learner = Learner(node.features.shape[1], cfg.learner, cfg.seed)
            outcome = memory.insert(node)
            stats["new_clusters"] += outcome.kind.value == "new_cluster"
            stats["evictions"] += outcome.evicted_frame_index is not None
            if strategy != "unbounded_random" and len(memory) > memory.capacity:
                raise RunError(f"memory holds {len(memory)} nodes, bound is {memory.capacity}", frame.index)
            stats["max_stored"] = max(stats["max_stored"], len(memory))
            for _ in range(steps):
                draws = memory.sample_batch(batch_size, rng, ppn)
                try:
                    losses, _ = learner.train_step(draws, rng)
                except Exception as exc:
                    raise RunError(str(exc), frame.index) from exc
                memory.update_uncertainties(losses)
        if learner is not None and cfg.scenario is not None and _checkpoint_due(cfg, frame_no, boundaries):
            snapshots.append((f"frame{frame_no}", learner.params.copy()))
    if learner is None:
        raise RunError("no frame produced a usable annotation")
    if not snapshots or snapshots[-1][0] != f"frame{frame_no}":
        snapshots.append((f"frame{frame_no}", learner.params.copy()))

    checkpoints = [(label, _eval_all(test, params, threshold)) for label, params in snapshots]
    report = build_report(test.scored(learner.params), threshold)
    forgetting = continual_eval(
        [params for _, params in snapshots],
        {sid: (lambda params, sid=sid: ScoredSet(predict_traversability(test.x[sid], params),
                                                 test.y[sid], sid))
         for sid in test.x},
    )
    report.forgetting_matrix = forgetting.matrix
    report.checkpoint_labels = [label for label, _ in snapshots]
    report.forgetting = forgetting.forgetting
    stats["clusters"] = len(memory.clusters)
    stats["stored_nodes"] = len(memory)
    return RunResult(strategy, report, checkpoints, memory.snapshot(), learner.params, stats)


def _eval_all(test: EvalData, params: ModelParams, threshold: float) -> dict:
    sets = test.scored(params)
    out: dict = {sid: evaluate_set(s, threshold) for sid, s in sets.items()}
    out["all"] = evaluate_set(ScoredSet.concat(list(sets.values())), threshold)
    return out


# -- artifacts -------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def report_csv(results: list[RunResult]) -> str:
    """One row per strategy x checkpoint x scene x metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "checkpoint", "scene", "metric", "value"])
    for r in results:
        for label, per_scene in r.checkpoints:
            for sid, metrics in per_scene.items():
                for m in METRICS:
                    w.writerow([r.strategy, label, sid, m, _fmt(metrics[m])])
    return buf.getvalue()


def _clean(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def summary_dict(r: RunResult) -> dict:
    rep = r.report
    return {
        "schema": "travmem.summary",
        "version": REPORT_SCHEMA_VERSION,
        "strategy": r.strategy,
        "threshold": rep.threshold,
        "columns": ["auroc", "beta", "f1", "precision", "recall", "iou"],
        "scenes": {str(k): {m: _clean(v) for m, v in ms.items()} for k, ms in rep.per_scene.items()},
        "aggregate": {m: _clean(v) for m, v in rep.aggregate.items()},
        "clusters": r.stats.get("clusters"),
        "stored_nodes": r.stats.get("stored_nodes"),
        "forgetting_matrix": {
            "checkpoints": rep.checkpoint_labels,
            "scenes": [str(s) for s in rep.per_scene],
            "auroc": rep.forgetting_matrix,
        },
        "forgetting_diagnostic": {str(k): v for k, v in rep.forgetting.items()},
        "stats": r.stats,
    }


def manifest_dict(cfg: ExperimentConfig, artifacts: list[str]) -> dict:
    return {
        "schema": "travmem.manifest",
        "version": REPORT_SCHEMA_VERSION,
        "config_sha256": cfg.hash(),
        "config": cfg.raw,
        "seed": cfg.seed,
        "versions": {"travmem": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "artifacts": sorted(artifacts),
    }


def write_run(cfg: ExperimentConfig, r: RunResult, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "report.csv", report_csv([r]))
    atomic_write_json(out / "summary.json", summary_dict(r))
    atomic_write_json(out / "memory.json", r.memory_snapshot)
    save_model(out / "model.bin", r.params)
    names = ["report.csv", "summary.json", "memory.json", "model.bin"]
    atomic_write_json(out / "manifest.json", manifest_dict(cfg, names))
    return [out / n for n in [*names, "manifest.json"]]


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> RunResult:
    out = Path(out or cfg.out or "runs/run")
    result = train_stream(cfg)
    write_run(cfg, result, out)
    log.info("run finished: %d clusters, %d stored nodes, aggregate AUROC %s",
             result.stats["clusters"], result.stats["stored_nodes"], result.report.aggregate["auroc"])
    return result


# -- comparisons -----------------------------------------------------------

def compare_strategies(cfg: ExperimentConfig, out: Path | None = None) -> list[RunResult]:
    """Run every listed strategy on the same frozen stream and tabulate them side by side."""
    strategies = cfg.strategies
    if not strategies or len(strategies) < 2:
        raise ConfigError("strategies", "compare needs at least two strategies")
    if len(set(strategies)) != len(strategies):
        raise ConfigError("strategies", "duplicate strategy")
    out = Path(out or cfg.out or "runs/compare")
    test = EvalData.from_frames(evaluation_frames(cfg))
    nodes = list(frame_nodes(cfg))
    results = []
    for s in strategies:
        r = train_stream(cfg, s, test, nodes)
        write_run(cfg, r, out / s)
        results.append(r)
    atomic_write_text(out / "comparison.csv", comparison_csv(results))
    atomic_write_json(out / "comparison.json", comparison_dict(results))
    atomic_write_json(out / "manifest.json", manifest_dict(cfg, ["comparison.csv", "comparison.json",
                                                                 *[f"{s}/" for s in strategies]]))
    return results


def comparison_csv(results: list[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scene", "metric", *[r.strategy for r in results]])
    scenes = [*results[0].report.per_scene, "all"]
    for sid in scenes:
        for m in METRICS:
            row = []
            for r in results:
                src = r.report.aggregate if sid == "all" else r.report.per_scene[sid]
                row.append(_fmt(src[m]))
            w.writerow([sid, m, *row])
    for sid in results[0].report.per_scene:
        w.writerow([sid, "forgetting", *[_fmt(r.report.forgetting.get(sid)) for r in results]])
    return buf.getvalue()


def comparison_dict(results: list[RunResult]) -> dict:
    base = results[0]
    deltas = {}
    for r in results[1:]:
        d = {}
        for sid, f in base.report.forgetting.items():
            g = r.report.forgetting.get(sid)
            d[str(sid)] = None if f is None or g is None else g - f
        deltas[r.strategy] = d
    return {
        "schema": "travmem.comparison",
        "version": REPORT_SCHEMA_VERSION,
        "strategies": [summary_dict(r) for r in results],
        "forgetting_delta_vs_" + base.strategy: deltas,
    }


def sweep_lambda(cfg: ExperimentConfig, lambdas=None, train: bool | None = None,
                 out: Path | None = None) -> list[dict]:
    """Cluster count (and optionally accuracy) for each threshold on one frozen stream.

    Clustering does not depend on the model, so by default only the memory is
    replayed; ``train=True`` runs the full loop for each value.
    """
    lambdas = list(lambdas or cfg.raw["sweep"]["lambdas"])
    if not lambdas or any(float(x) < 0 for x in lambdas):
        raise ConfigError("sweep.lambdas", "need a non-empty list of non-negative values")
    train = cfg.raw["sweep"]["train"] if train is None else train
    nodes = list(frame_nodes(cfg))
    test = EvalData.from_frames(evaluation_frames(cfg)) if train else None
    rows = []
    for lam in lambdas:
        sub = cfg.with_overrides(lam=float(lam), strategy="idm")
        if train:
            r = train_stream(sub, "idm", test, nodes)
            rows.append({"lambda": float(lam), "clusters": r.stats["clusters"],
                         "stored_nodes": r.stats["stored_nodes"], "auroc": r.report.aggregate["auroc"],
                         "iou": r.report.aggregate["iou"]})
        else:
            mem = make_memory(sub, "idm")
            for _, node in nodes:
                if node is not None:
                    mem.insert(node)
            rows.append({"lambda": float(lam), "clusters": len(mem.clusters), "stored_nodes": len(mem)})
    if out is not None or cfg.out is not None:
        out = Path(out or cfg.out)
        buf = io.StringIO()
        keys = list(rows[0])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in keys])
        atomic_write_text(out / "sweep.csv", buf.getvalue())
        atomic_write_json(out / "manifest.json", manifest_dict(cfg, ["sweep.csv"]))
    return rows
