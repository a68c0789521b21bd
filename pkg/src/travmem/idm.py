"""Scene-aware incremental replay memory.

Nodes are grouped into clusters by the symmetrized KL divergence between
their distribution vectors and each cluster's pooled representation. A node
whose nearest cluster is at least ``lam`` away opens a new cluster; otherwise
it joins the nearest one. Full clusters keep their most similar and most
diverse members and drop the one in between.

Two baselines share the same interface: :class:`FifoMemory` (bounded queue)
and :class:`UnboundedMemory` (keeps everything).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .ssa import SIGMA_MIN, DistributionVector, ImageNode

UNCERTAINTY_EPS = 1e-6
SNAPSHOT_VERSION = 1


def kl_diag_gaussian(a: DistributionVector, b: DistributionVector) -> float:
    """KL(N(a) || N(b)) for diagonal Gaussians, summed over dimensions."""
    ratio = a.std / b.std
    diff = (a.mean - b.mean) / b.std
    return float(np.sum(-np.log(ratio) + 0.5 * (ratio**2 + diff**2) - 0.5))


def js_divergence(a: DistributionVector, b: DistributionVector) -> float:
    """Symmetrized KL: ``0.5 * KL(a||b) + 0.5 * KL(b||a)``.

    Written so that swapping the arguments yields bit-identical results.
    """
    va, vb = a.std**2, b.std**2
    d2 = (a.mean - b.mean) ** 2
    # log terms cancel between the two directions
    per_dim = (va + d2) / vb + (vb + d2) / va
    return float(0.25 * np.sum(per_dim - 2.0))


def cluster_representation(nodes: Sequence[ImageNode]) -> DistributionVector:
    """Pooled mean/std of the equal-weight mixture of the nodes' Gaussians."""
    if not nodes:
        raise ValueError("empty cluster has no representation")
    means = np.stack([n.v.mean for n in nodes])
    stds = np.stack([n.v.std for n in nodes])
    mu = means.mean(axis=0)
    second = np.mean(stds**2 + means**2, axis=0)
    var = np.maximum(second - mu**2, 0.0)
    return DistributionVector(mu, np.maximum(np.sqrt(var), SIGMA_MIN))


@dataclass
class Cluster:
    id: int
    nodes: list[ImageNode]
    rep: DistributionVector = None

    def __post_init__(self):
        if self.rep is None:
            self.rep = cluster_representation(self.nodes)

    def refresh(self) -> None:
        self.rep = cluster_representation(self.nodes)

    def __len__(self):
        return len(self.nodes)


class InsertKind(Enum):
    NEW_CLUSTER = "new_cluster"
    ASSIGNED = "assigned"
    ASSIGNED_WITH_EVICTION = "assigned_with_eviction"


@dataclass(frozen=True)
class InsertOutcome:
    kind: InsertKind
    cluster_id: int
    min_divergence: float
    evicted_frame_index: int | None = None


def update_cluster(
    cluster: Cluster,
    node: ImageNode,
    n_max: int,
    similar_ratio: float = 0.5,
    divergence: Callable[[DistributionVector, DistributionVector], float] = js_divergence,
) -> ImageNode | None:
    """Add ``node`` to ``cluster`` in place; return the evicted node, if any.

    When full, all ``n_max + 1`` candidates are ranked by divergence to the
    current (pre-update) representation. The ``ceil(n_max * similar_ratio)``
    closest and the remaining number of farthest are kept.
    """
    if len(cluster.nodes) < n_max:
        cluster.nodes.append(node)
        cluster.refresh()
        return None
    candidates = cluster.nodes + [node]
    scores = np.array([divergence(c.v, cluster.rep) for c in candidates])
    order = np.argsort(scores, kind="stable")
    n_similar = min(n_max, math.ceil(n_max * similar_ratio))
    # keep order[:n_similar] and the n_max - n_similar farthest; exactly one rank falls between
    drop = int(order[n_similar])
    evicted = candidates[drop]
    cluster.nodes = [c for i, c in enumerate(candidates) if i != drop]
    cluster.refresh()
    return evicted


def _normalize_uncertainty(nodes: Sequence[ImageNode], losses: Mapping[int, float]) -> None:
    reported = [n for n in nodes if n.frame_index in losses]
    if not reported:
        return
    vals = np.array([losses[n.frame_index] for n in reported], dtype=float) + UNCERTAINTY_EPS
    for n, w in zip(reported, vals / vals.sum()):
        n.uncertainty = float(w)
    total = sum(n.uncertainty for n in nodes)
    for n in nodes:
        n.uncertainty = n.uncertainty / total


def _check_losses(losses: Mapping[int, float]) -> None:
    for k, v in losses.items():
        if not v >= 0:
            raise ValueError(f"loss for node {k} must be non-negative, got {v}")


def _pixel_subset(node: ImageNode, n: int, rng) -> np.ndarray:
    p = node.features.shape[0]
    if n <= 0:
        return np.empty(0, dtype=np.intp)
    if n >= p:
        return np.arange(p)
    return np.sort(rng.choice(p, size=n, replace=False))


class IncrementalMemory:
    """Clustered replay memory driven by the information expansion rule."""

    strategy = "idm"

    def __init__(self, lam: float = 1.0, n_max: int = 20, similar_ratio: float = 0.5):
        if lam < 0:
            raise ValueError("lam must be non-negative")
        if n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not 0 <= similar_ratio <= 1:
            raise ValueError("similar_ratio must lie in [0, 1]")
        self.lam = float(lam)
        self.n_max = int(n_max)
        self.similar_ratio = float(similar_ratio)
        self.clusters: list[Cluster] = []
        self.total_inserted = 0
        self._next_id = 0

    def __len__(self):
        return sum(len(c) for c in self.clusters)

    @property
    def nodes(self) -> list[ImageNode]:
        return [n for c in self.clusters for n in c.nodes]

    @property
    def capacity(self) -> int:
        return len(self.clusters) * self.n_max

    def divergences(self, v: DistributionVector) -> np.ndarray:
        return np.array([js_divergence(v, c.rep) for c in self.clusters])

    def insert(self, node: ImageNode) -> InsertOutcome:
        self.total_inserted += 1
        if not self.clusters:
            return self._open(node, math.inf)
        div = self.divergences(node.v)
        best = int(np.argmin(div))  # first minimum = lowest id, ids grow with position
        dmin = float(div[best])
        if dmin >= self.lam:
            return self._open(node, dmin)
        cluster = self.clusters[best]
        evicted = update_cluster(cluster, node, self.n_max, self.similar_ratio)
        if evicted is None:
            return InsertOutcome(InsertKind.ASSIGNED, cluster.id, dmin)
        return InsertOutcome(InsertKind.ASSIGNED_WITH_EVICTION, cluster.id, dmin, evicted.frame_index)

    def _open(self, node: ImageNode, dmin: float) -> InsertOutcome:
        cluster = Cluster(self._next_id, [node])
        self._next_id += 1
        self.clusters.append(cluster)
        return InsertOutcome(InsertKind.NEW_CLUSTER, cluster.id, dmin)

    def sample_batch(self, batch_size: int, rng, pixels_per_node: int = 64):
        """Draw ``batch_size`` nodes with replacement: a uniform cluster, then a
        node weighted by its uncertainty. Each draw carries a random pixel subset."""
        if not self.clusters:
            raise ValueError("cannot sample from an empty memory")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        rng = np.random.default_rng(rng)
        picks = rng.integers(len(self.clusters), size=batch_size)
        chosen: list[ImageNode | None] = [None] * batch_size
        for ci, cluster in enumerate(self.clusters):
            slots = np.flatnonzero(picks == ci)
            if slots.size == 0:
                continue
            w = np.array([n.uncertainty for n in cluster.nodes], dtype=float)
            idx = rng.choice(len(cluster.nodes), size=slots.size, p=w / w.sum())
            for s, i in zip(slots, idx):
                chosen[s] = cluster.nodes[i]
        return [(n, _pixel_subset(n, pixels_per_node, rng)) for n in chosen]

    def update_uncertainties(self, losses: Mapping[int, float]) -> None:
        _check_losses(losses)
        for c in self.clusters:
            _normalize_uncertainty(c.nodes, losses)

    def snapshot(self) -> dict:
        return {
            "schema": "travmem.memory",
            "version": SNAPSHOT_VERSION,
            "strategy": self.strategy,
            "lambda": self.lam,
            "n_max": self.n_max,
            "similar_ratio": self.similar_ratio,
            "total_inserted": self.total_inserted,
            "clusters": [_cluster_dict(c) for c in self.clusters],
        }


def _cluster_dict(c: Cluster) -> dict:
    return {
        "id": c.id,
        "size": len(c.nodes),
        "rep": {"mean": c.rep.mean.tolist(), "std": c.rep.std.tolist()},
        "nodes": [
            {"frame_index": n.frame_index, "scene_id": n.scene_id, "uncertainty": n.uncertainty}
            for n in c.nodes
        ],
    }


class _FlatMemory:
    """Uniform-sampling baseline memory."""

    strategy = "flat"

    def __init__(self):
        self._nodes: Sequence[ImageNode] = []
        self.total_inserted = 0

    def __len__(self):
        return len(self._nodes)

    @property
    def nodes(self) -> list[ImageNode]:
        return list(self._nodes)

    @property
    def clusters(self) -> list[Cluster]:
        return [Cluster(0, list(self._nodes))] if self._nodes else []

    def sample_batch(self, batch_size: int, rng, pixels_per_node: int = 64):
        if not self._nodes:
            raise ValueError("cannot sample from an empty memory")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        rng = np.random.default_rng(rng)
        nodes = list(self._nodes)
        idx = rng.integers(len(nodes), size=batch_size)
        return [(nodes[i], _pixel_subset(nodes[i], pixels_per_node, rng)) for i in idx]

    def update_uncertainties(self, losses: Mapping[int, float]) -> None:
        _check_losses(losses)
        for n in self._nodes:
            if n.frame_index in losses:
                n.uncertainty = float(losses[n.frame_index])

    def snapshot(self) -> dict:
        return {
            "schema": "travmem.memory",
            "version": SNAPSHOT_VERSION,
            "strategy": self.strategy,
            "total_inserted": self.total_inserted,
            "clusters": [_cluster_dict(c) for c in self.clusters],
        }


class FifoMemory(_FlatMemory):
    strategy = "fifo"

    def __init__(self, capacity: int = 150):
        super().__init__()
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._nodes = deque(maxlen=capacity)

    def insert(self, node: ImageNode) -> InsertOutcome:
        self.total_inserted += 1
        evicted = self._nodes[0].frame_index if len(self._nodes) == self.capacity else None
        self._nodes.append(node)
        kind = InsertKind.ASSIGNED if evicted is None else InsertKind.ASSIGNED_WITH_EVICTION
        return InsertOutcome(kind, 0, math.nan, evicted)

    def snapshot(self) -> dict:
        return {**super().snapshot(), "capacity": self.capacity}


class UnboundedMemory(_FlatMemory):
    strategy = "unbounded_random"

    def __init__(self):
        super().__init__()
        self._nodes = []

    def insert(self, node: ImageNode) -> InsertOutcome:
        self.total_inserted += 1
        self._nodes.append(node)
        return InsertOutcome(InsertKind.ASSIGNED, 0, math.nan)


__all__ = [
    "Cluster",
    "DistributionVector",
    "FifoMemory",
    "IncrementalMemory",
    "InsertKind",
    "InsertOutcome",
    "UnboundedMemory",
    "cluster_representation",
    "js_divergence",
    "kl_diag_gaussian",
    "update_cluster",
]
