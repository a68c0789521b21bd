"""Binary-classification metrics and continual-learning evaluation.

Metrics that are undefined for a given input (a single-class set for ROC,
a zero denominator for precision and friends) come back as ``None``; they
are never replaced with zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

METRICS = ("auroc", "alpha", "beta", "f1", "precision", "recall", "iou")


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    scene_id: int = -1

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).ravel()
        self.labels = np.asarray(self.labels, dtype=bool).ravel()
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if self.scores.size == 0:
            raise ValueError("scored set is empty")

    @property
    def has_both_classes(self) -> bool:
        n_pos = int(self.labels.sum())
        return 0 < n_pos < self.labels.size

    @classmethod
    def concat(cls, sets: Sequence["ScoredSet"], scene_id: int = -1) -> "ScoredSet":
        return cls(np.concatenate([s.scores for s in sets]),
                   np.concatenate([s.labels for s in sets]), scene_id)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # first entry is +inf (nothing predicted positive)
    auroc: float


def roc_and_auroc(s: ScoredSet) -> RocCurve | None:
    """ROC over the unique score thresholds and its trapezoidal area.

    A sample counts as positive when ``score >= threshold``. Tied scores
    enter as one diagonal step, which makes the area equal to the
    Mann-Whitney statistic with ties counted as one half.
    """
    if not s.has_both_classes:
        return None
    order = np.argsort(-s.scores, kind="mergesort")
    scores = s.scores[order]
    labels = s.labels[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp = np.cumsum(labels)[last_of_run]
    fp = (last_of_run + 1) - tp
    n_pos, n_neg = labels.sum(), labels.size - labels.sum()
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thr = np.r_[np.inf, scores[last_of_run]]
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thr, area)


def optimal_threshold(roc: RocCurve) -> float:
    """Threshold of the ROC point closest to (0, 1); ties go to the one nearest 0.5."""
    finite = np.isfinite(roc.thresholds)
    if not finite.any():
        raise ValueError("ROC curve has no finite thresholds")
    thr = roc.thresholds[finite]
    dist = np.hypot(roc.fpr[finite], 1.0 - roc.tpr[finite])
    tied = np.flatnonzero(dist == dist.min())
    best = tied[np.argmin(np.abs(thr[tied] - 0.5))]
    return float(thr[best])


def threshold_bias(alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return abs(0.5 - alpha)


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int


def confusion(s: ScoredSet, threshold: float = 0.5) -> Confusion:
    pred = s.scores >= threshold
    tp = int(np.sum(pred & s.labels))
    fp = int(np.sum(pred & ~s.labels))
    fn = int(np.sum(~pred & s.labels))
    return Confusion(tp, fp, s.labels.size - tp - fp - fn, fn)


def _ratio(num, den):
    return num / den if den else None


def classification_metrics(s: ScoredSet, threshold: float = 0.5) -> dict[str, float | None]:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    c = confusion(s, threshold)
    out = {
        "precision": _ratio(c.tp, c.tp + c.fp),
        "recall": _ratio(c.tp, c.tp + c.fn),
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn),
    }
    check_iou_f1(out["f1"], out["iou"])
    return out


def check_iou_f1(f1, iou) -> None:
    """IoU and F1 computed from one confusion matrix satisfy IoU = F1 / (2 - F1)."""
    if f1 is None or iou is None:
        if (f1 is None) != (iou is None):
            raise AssertionError("f1 and iou disagree on definedness")
        return
    if abs(iou - f1 / (2.0 - f1)) > 1e-12:
        raise AssertionError(f"IoU {iou} != F1/(2-F1) for F1 {f1}")
    if iou > f1 + 1e-15:
        raise AssertionError("IoU exceeds F1")


def evaluate_set(s: ScoredSet, threshold: float = 0.5) -> dict[str, float | None]:
    """All report metrics for one scored set."""
    out: dict[str, float | None] = dict.fromkeys(METRICS)
    roc = roc_and_auroc(s)
    if roc is not None:
        out["auroc"] = roc.auroc
        out["alpha"] = optimal_threshold(roc)
        out["beta"] = threshold_bias(out["alpha"])
    out.update(classification_metrics(s, threshold))
    return out


@dataclass
class EvalReport:
    per_scene: dict[int, dict[str, float | None]]
    aggregate: dict[str, float | None]
    threshold: float = 0.5
    forgetting_matrix: list[list[float | None]] = field(default_factory=list)
    checkpoint_labels: list[str] = field(default_factory=list)
    forgetting: dict[int, float | None] = field(default_factory=dict)

    def __post_init__(self):
        for m in [*self.per_scene.values(), self.aggregate]:
            if m.get("alpha") is not None and m["beta"] != abs(0.5 - m["alpha"]):
                raise AssertionError("beta must equal |0.5 - alpha|")
            check_iou_f1(m.get("f1"), m.get("iou"))


def build_report(sets: Mapping[int, ScoredSet], threshold: float = 0.5) -> EvalReport:
    per_scene = {sid: evaluate_set(s, threshold) for sid, s in sets.items()}
    aggregate = evaluate_set(ScoredSet.concat(list(sets.values())), threshold)
    return EvalReport(per_scene, aggregate, threshold)


@dataclass
class ForgettingResult:
    matrix: list[list[float | None]]
    forgetting: dict[int, float | None]
    scene_ids: list[int]


def continual_eval(checkpoints: Sequence, test_sets: Mapping[int, Callable[[object], ScoredSet]]
                   ) -> ForgettingResult:
    """AUROC of every checkpoint on every scene's held-out data.

    ``test_sets`` maps scene id to a callable scoring that scene with a given
    checkpoint. Forgetting per scene is the best earlier AUROC minus the final
    one (an added diagnostic; ``None`` when undefined).
    """
    if not checkpoints or not test_sets:
        raise ValueError("need at least one checkpoint and one scene")
    scene_ids = list(test_sets)
    matrix = []
    for ck in checkpoints:
        row = []
        for sid in scene_ids:
            roc = roc_and_auroc(test_sets[sid](ck))
            row.append(None if roc is None else roc.auroc)
        matrix.append(row)
    forgetting = {}
    for j, sid in enumerate(scene_ids):
        final = matrix[-1][j]
        earlier = [r[j] for r in matrix[:-1] if r[j] is not None]
        if final is None:
            forgetting[sid] = None
        else:
            forgetting[sid] = (max(earlier) - final) if earlier else 0.0
    return ForgettingResult(matrix, forgetting, scene_ids)
