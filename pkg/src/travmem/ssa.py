"""Turn a feature map plus a traversability mask into training material."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_sim import Frame

SIGMA_MIN = 1e-4


class NoTraversableEvidence(ValueError):
    pass


@dataclass(frozen=True)
class DistributionVector:
    """Per-dimension mean and std of features, read as a diagonal Gaussian."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.maximum(np.asarray(self.std, dtype=float), SIGMA_MIN)
        if mean.shape != std.shape:
            raise ValueError("mean and std shapes differ")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class ImageNode:
    features: np.ndarray  # (P, D) float32
    labels: np.ndarray  # (P,) bool
    v: DistributionVector
    frame_index: int
    scene_id: int = -1
    uncertainty: float = 1.0

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())


def supervision_pairs(
    frame: Frame,
    mask: np.ndarray,
    p_max: int = 512,
    seed: int = 0,
    include_negatives: bool = True,
    return_coords: bool = False,
):
    """Stratified subsample of at most ``p_max`` labelled pixels.

    Positives keep the mask's positive fraction up to rounding. With
    ``include_negatives=False`` only mask pixels are returned.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != frame.truth_mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match frame {frame.truth_mask.shape}")
    pos = np.flatnonzero(mask)
    if pos.size == 0:
        raise NoTraversableEvidence("no traversable evidence in mask")
    neg = np.flatnonzero(~mask) if include_negatives else np.empty(0, dtype=np.intp)
    total = pos.size + neg.size
    rng = np.random.default_rng([seed, frame.index & 0xFFFFFFFF])
    if total <= p_max:
        take_pos, take_neg = pos, neg
    else:
        n_pos = int(round(p_max * pos.size / total))
        n_pos = min(max(n_pos, 1), pos.size)
        n_neg = min(p_max - n_pos, neg.size)
        take_pos = np.sort(rng.choice(pos, size=n_pos, replace=False))
        take_neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
    flat = np.concatenate([take_pos, take_neg])
    d = frame.features.shape[-1]
    feats = frame.features.reshape(-1, d)[flat]
    labels = np.concatenate([np.ones(take_pos.size, bool), np.zeros(take_neg.size, bool)])
    if return_coords:
        rows, cols = np.unravel_index(flat, mask.shape)
        return feats, labels, np.stack([rows, cols], axis=1)
    return feats, labels


def distribution_vector(frame: Frame, mask: np.ndarray) -> DistributionVector:
    sel = frame.features[np.asarray(mask, dtype=bool)].astype(np.float64)
    if sel.shape[0] < 2:
        raise NoTraversableEvidence(f"need >= 2 traversable pixels, got {sel.shape[0]}")
    return DistributionVector(sel.mean(axis=0), sel.std(axis=0))


def build_node(frame: Frame, mask: np.ndarray, p_max: int = 512, seed: int = 0,
               include_negatives: bool = True) -> ImageNode:
    """Memory node for one annotated frame.

    The distribution vector uses every masked pixel; only the stored training
    rows are subsampled.
    """
    v = distribution_vector(frame, mask)
    feats, labels = supervision_pairs(frame, mask, p_max, seed, include_negatives)
    return ImageNode(feats, labels, v, frame.index, frame.scene_id)
