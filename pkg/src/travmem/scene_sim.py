"""Synthetic domain-incremental terrain streams.

A :class:`Scenario` is a sequence of blocks, one scene each. Every frame is an
``H x W x D`` feature map whose pixels are drawn from the Gaussian of the
terrain class covering them, plus a ground-truth traversability mask and a
handful of prompt points sampled from traversable pixels. The segmentation
oracle answers prompts the way a promptable segmenter would, by returning the
connected truth regions the prompts touch.

Recorded sessions (features and masks exported from real networks) use the
binary layout documented in :func:`save_session`.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from ._io import atomic_write_bytes
from .geometry import PixelPrompt

log = logging.getLogger(__name__)

SESSION_MAGIC = b"TRAVSESS"
SESSION_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")
_FRAME_SHAPE = struct.Struct("<III")

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass(frozen=True)
class TerrainClass:
    id: int
    feature_mean: np.ndarray
    feature_std: np.ndarray
    traversable: bool

    def __post_init__(self):
        mean = np.asarray(self.feature_mean, dtype=float)
        std = np.broadcast_to(np.asarray(self.feature_std, dtype=float), mean.shape).copy()
        if np.any(std < 1e-6):
            raise ValueError(f"terrain class {self.id}: feature_std must be >= 1e-6")
        object.__setattr__(self, "feature_mean", mean)
        object.__setattr__(self, "feature_std", std)


@dataclass(frozen=True)
class Block:
    """One scene visit.

    ``layout`` is ``"bands"`` (traversable ground at the bottom, obstacles
    above) or ``"blobs"`` (traversable patches on an obstacle background).
    ``trav_fraction`` bounds the per-frame share of rows given to the ground
    band. ``mean_shift`` offsets every class mean in this block, standing in
    for appearance changes such as lighting.
    """

    scene_id: int
    classes: tuple[int, ...]
    frames: int
    layout: str = "bands"
    trav_fraction: tuple[float, float] = (0.35, 0.65)
    mean_shift: float = 0.0


@dataclass(frozen=True)
class Scenario:
    classes: dict[int, TerrainClass]
    blocks: tuple[Block, ...]
    feature_dim: int = 64
    width: int = 64
    height: int = 64
    seed: int = 0
    prompt_range: tuple[int, int] = (5, 20)
    test_frames_per_scene: int = 4

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("blocks", "scenario needs at least one block")
        for c in self.classes.values():
            if c.feature_mean.shape != (self.feature_dim,):
                raise ConfigError(f"classes[{c.id}].mean", f"expected {self.feature_dim} entries")
        for i, b in enumerate(self.blocks):
            if b.frames < 1:
                raise ConfigError(f"blocks[{i}].frames", "must be >= 1")
            missing = [c for c in b.classes if c not in self.classes]
            if missing:
                raise ConfigError(f"blocks[{i}].classes", f"unknown class ids {missing}")
            trav = [self.classes[c].traversable for c in b.classes]
            if len(b.classes) < 2 or all(trav) or not any(trav):
                raise ConfigError(
                    f"blocks[{i}].classes",
                    "need at least one traversable and one non-traversable class",
                )
            if b.layout not in ("bands", "blobs"):
                raise ConfigError(f"blocks[{i}].layout", f"unknown layout {b.layout!r}")
            lo, hi = b.trav_fraction
            if not 0 < lo <= hi <= 1:
                raise ConfigError(f"blocks[{i}].trav_fraction", "need 0 < lo <= hi <= 1")
        lo, hi = self.prompt_range
        if not 1 <= lo <= hi:
            raise ConfigError("prompt_range", "need 1 <= lo <= hi")

    @property
    def total_frames(self) -> int:
        return sum(b.frames for b in self.blocks)

    @property
    def scene_ids(self) -> list[int]:
        seen = []
        for b in self.blocks:
            if b.scene_id not in seen:
                seen.append(b.scene_id)
        return seen

    def locate(self, global_index: int) -> tuple[int, int]:
        """Map a stream index to ``(block index, index within block)``."""
        if not 0 <= global_index < self.total_frames:
            raise IndexError(f"frame index {global_index} outside stream of {self.total_frames}")
        for bi, b in enumerate(self.blocks):
            if global_index < b.frames:
                return bi, global_index
            global_index -= b.frames
        raise AssertionError("unreachable")

    def block_starts(self) -> list[int]:
        starts, acc = [], 0
        for b in self.blocks:
            starts.append(acc)
            acc += b.frames
        return starts


@dataclass
class Frame:
    features: np.ndarray  # (H, W, D) float32
    truth_mask: np.ndarray  # (H, W) bool
    prompts: list[PixelPrompt] = field(default_factory=list)
    scene_id: int = -1
    index: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.features.shape


@dataclass
class Segmentation:
    mask: np.ndarray
    failed: bool = False


def _class_layout(block: Block, classes: dict[int, TerrainClass], h: int, w: int, rng) -> np.ndarray:
    trav = [c for c in block.classes if classes[c].traversable]
    obst = [c for c in block.classes if not classes[c].traversable]
    label = np.empty((h, w), dtype=np.int64)
    if block.layout == "bands":
        frac = rng.uniform(*block.trav_fraction)
        ground_rows = int(round(frac * h))
        top = h - ground_rows
        _fill_columns(label, 0, top, obst, rng)
        _fill_columns(label, top, h, trav, rng)
    else:
        label[:] = obst[0]
        if len(obst) > 1:
            _fill_columns(label, 0, h // 3, obst[1:], rng)
        yy, xx = np.mgrid[0:h, 0:w]
        target = rng.uniform(*block.trav_fraction) * h * w
        n_blobs = int(rng.integers(1, 4))
        radius = np.sqrt(target / (np.pi * n_blobs))
        for k in range(n_blobs):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
            label[disc] = trav[k % len(trav)]
    return label


def _fill_columns(label, r0, r1, ids, rng) -> None:
    if r1 <= r0:
        return
    w = label.shape[1]
    if len(ids) == 1:
        label[r0:r1] = ids[0]
        return
    cuts = np.sort(rng.integers(1, w, size=len(ids) - 1))
    edges = [0, *cuts.tolist(), w]
    for cid, a, b in zip(ids, edges[:-1], edges[1:]):
        label[r0:r1, a:b] = cid


def _render(scenario: Scenario, block: Block, rng) -> tuple[np.ndarray, np.ndarray]:
    h, w, d = scenario.height, scenario.width, scenario.feature_dim
    label = _class_layout(block, scenario.classes, h, w, rng)
    ids = sorted(block.classes)
    means = np.stack([scenario.classes[c].feature_mean + block.mean_shift for c in ids])
    stds = np.stack([scenario.classes[c].feature_std for c in ids])
    trav = np.array([scenario.classes[c].traversable for c in ids])
    idx = np.searchsorted(ids, label)
    noise = rng.standard_normal((h, w, d))
    features = (means[idx] + stds[idx] * noise).astype(np.float32)
    return features, trav[idx]


def _sample_prompts(scenario: Scenario, truth: np.ndarray, rng) -> list[PixelPrompt]:
    rows, cols = np.nonzero(truth)
    if rows.size == 0:
        return []
    lo, hi = scenario.prompt_range
    n = min(int(rng.integers(lo, hi + 1)), rows.size)
    pick = rng.choice(rows.size, size=n, replace=False)
    return [PixelPrompt(float(cols[i]), float(rows[i])) for i in pick]


def generate_frame(scenario: Scenario, global_index: int, rng_seed: int | None = None) -> Frame:
    """Deterministically render stream frame ``global_index``."""
    seed = scenario.seed if rng_seed is None else rng_seed
    bi, _ = scenario.locate(global_index)
    block = scenario.blocks[bi]
    rng = np.random.default_rng([seed, 0, global_index])
    features, truth = _render(scenario, block, rng)
    prompts = _sample_prompts(scenario, truth, rng)
    return Frame(features, truth, prompts, block.scene_id, global_index)


def generate_stream(scenario: Scenario, rng_seed: int | None = None) -> Iterator[Frame]:
    for i in range(scenario.total_frames):
        yield generate_frame(scenario, i, rng_seed)


def held_out_frames(scenario: Scenario, scene_id: int, count: int | None = None,
                    rng_seed: int | None = None) -> list[Frame]:
    """Test frames for ``scene_id`` drawn from a seed stream disjoint from training."""
    seed = scenario.seed if rng_seed is None else rng_seed
    count = scenario.test_frames_per_scene if count is None else count
    block = next(b for b in scenario.blocks if b.scene_id == scene_id)
    frames = []
    for k in range(count):
        rng = np.random.default_rng([seed, 1, scene_id, k])
        features, truth = _render(scenario, block, rng)
        prompts = _sample_prompts(scenario, truth, rng)
        frames.append(Frame(features, truth, prompts, scene_id, -1 - k))
    return frames


def oracle_segment(frame: Frame, prompts: Sequence[PixelPrompt]) -> Segmentation:
    """Union of the 4-connected truth regions containing at least one prompt."""
    if not prompts:
        raise ValueError("oracle_segment needs at least one prompt")
    truth = frame.truth_mask
    labels, _ = ndimage.label(truth, structure=_FOUR_CONN)
    h, w = truth.shape
    hit = set()
    for p in prompts:
        r, c = int(np.floor(p.v)), int(np.floor(p.u))
        if 0 <= r < h and 0 <= c < w and labels[r, c] > 0:
            hit.add(int(labels[r, c]))
    if not hit:
        log.warning("frame %d: no prompt landed on traversable ground", frame.index)
        return Segmentation(np.zeros_like(truth, dtype=bool), failed=True)
    return Segmentation(np.isin(labels, sorted(hit)), failed=False)


# -- scenario construction -------------------------------------------------

def pairwise_class_divergence(scenario: Scenario) -> dict[tuple[int, int], float]:
    from .idm import DistributionVector, js_divergence

    out = {}
    ids = sorted(scenario.classes)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            ca, cb = scenario.classes[a], scenario.classes[b]
            out[(a, b)] = js_divergence(
                DistributionVector(ca.feature_mean, ca.feature_std),
                DistributionVector(cb.feature_mean, cb.feature_std),
            )
    return out


def spread_classes(classes: dict[int, TerrainClass], separation: float) -> dict[int, TerrainClass]:
    """Scale class means about their centroid until every pair has D_JS >= ``separation``.

    With stds fixed, the mean term of the symmetrized KL is quadratic in the
    mean offset while the variance term is constant, so a single scale factor
    suffices.
    """
    from .idm import DistributionVector, js_divergence

    ids = sorted(classes)
    if len(ids) < 2:
        return dict(classes)
    centroid = np.mean([classes[i].feature_mean for i in ids], axis=0)
    worst = np.inf
    factor = 1.0
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            ca, cb = classes[a], classes[b]
            va = DistributionVector(ca.feature_mean, ca.feature_std)
            vb = DistributionVector(cb.feature_mean, cb.feature_std)
            total = js_divergence(va, vb)
            var_only = js_divergence(va, DistributionVector(ca.feature_mean, cb.feature_std))
            mean_part = total - var_only
            if total < worst:
                worst = total
            if total < separation and mean_part > 0:
                factor = max(factor, np.sqrt((separation - var_only) / mean_part))
    return {
        i: TerrainClass(
            i,
            centroid + factor * (classes[i].feature_mean - centroid),
            classes[i].feature_std,
            classes[i].traversable,
        )
        for i in ids
    }


DEFAULT_COUNTS = (120, 40, 200, 60, 80)


def benchmark_scenario(
    seed: int = 0,
    separation: float = 64.0,
    counts: Sequence[int] = DEFAULT_COUNTS,
    feature_dim: int = 64,
    size: int = 64,
    std_range: tuple[float, float] = (0.4, 0.8),
    test_frames_per_scene: int = 4,
) -> Scenario:
    """Imbalanced multi-scene stream with one ground class and one obstacle class per scene.

    Every terrain class pair is at least ``separation`` apart in symmetrized
    KL. Scene ``s`` uses class ``2s`` as ground and ``2s + 1`` as obstacle.
    """
    rng = np.random.default_rng([seed, 7])
    raw = {}
    for s in range(len(counts)):
        for k, trav in ((2 * s, True), (2 * s + 1, False)):
            raw[k] = TerrainClass(
                k,
                rng.standard_normal(feature_dim),
                rng.uniform(*std_range, size=feature_dim),
                trav,
            )
    classes = spread_classes(raw, separation)
    blocks = tuple(Block(s, (2 * s, 2 * s + 1), int(n)) for s, n in enumerate(counts))
    return Scenario(classes, blocks, feature_dim, size, size, seed,
                    test_frames_per_scene=test_frames_per_scene)


def scenario_from_dict(cfg: dict) -> Scenario:
    """Build a scenario from a parsed config mapping (see README for the schema)."""
    if "preset" in cfg:
        preset = cfg["preset"]
        if preset != "benchmark":
            raise ConfigError("scenario.preset", f"unknown preset {preset!r}")
        kw = {k: v for k, v in cfg.items() if k != "preset"}
        allowed = {"seed", "separation", "counts", "feature_dim", "size", "std_range",
                   "test_frames_per_scene"}
        bad = sorted(set(kw) - allowed)
        if bad:
            raise ConfigError(f"scenario.{bad[0]}", "unknown key for preset 'benchmark'")
        if "std_range" in kw:
            kw["std_range"] = tuple(kw["std_range"])
        return benchmark_scenario(**kw)

    try:
        d = int(cfg.get("feature_dim", 64))
        seed = int(cfg.get("seed", 0))
        classes = {}
        for i, c in enumerate(cfg["classes"]):
            cid = int(c["id"])
            mean = c["mean"]
            if isinstance(mean, dict):
                rnd = mean.get("random", {})
                mrng = np.random.default_rng([seed, 11, int(rnd.get("seed", cid))])
                mean = float(rnd.get("scale", 1.0)) * mrng.standard_normal(d)
            mean = np.asarray(mean, dtype=float)
            if mean.shape != (d,):
                raise ConfigError(f"scenario.classes[{i}].mean", f"expected {d} values")
            std = np.asarray(c.get("std", 1.0), dtype=float)
            classes[cid] = TerrainClass(cid, mean, np.broadcast_to(std, (d,)), bool(c["traversable"]))
        if "separation" in cfg:
            classes = spread_classes(classes, float(cfg["separation"]))
        blocks = []
        for i, b in enumerate(cfg["blocks"]):
            blocks.append(Block(
                int(b["scene_id"]),
                tuple(int(x) for x in b["classes"]),
                int(b["frames"]),
                b.get("layout", "bands"),
                tuple(float(x) for x in b.get("trav_fraction", (0.35, 0.65))),
                float(b.get("mean_shift", 0.0)),
            ))
        return Scenario(
            classes,
            tuple(blocks),
            d,
            int(cfg.get("width", 64)),
            int(cfg.get("height", 64)),
            seed,
            tuple(int(x) for x in cfg.get("prompt_range", (5, 20))),
            int(cfg.get("test_frames_per_scene", 4)),
        )
    except KeyError as exc:
        raise ConfigError(f"scenario.{exc.args[0]}", "missing required key") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("scenario", str(exc)) from None


# -- recorded sessions -----------------------------------------------------

class SessionError(ValueError):
    def __init__(self, msg: str, frame_index: int | None = None):
        where = "header" if frame_index is None else f"frame {frame_index}"
        super().__init__(f"{where}: {msg}")
        self.frame_index = frame_index


class SessionHeaderError(SessionError):
    pass


class SessionShapeError(SessionError):
    pass


class SessionTruncatedError(SessionError):
    pass


class SessionNonFiniteError(SessionError):
    pass


def encode_session(frames: Sequence[Frame]) -> bytes:
    if not frames:
        raise ValueError("cannot encode an empty session")
    h, w, d = frames[0].shape
    parts = [_HEADER.pack(SESSION_MAGIC, SESSION_VERSION, h, w, d, len(frames))]
    for f in frames:
        fh, fw, fd = f.shape
        parts.append(_FRAME_SHAPE.pack(fh, fw, fd))
        parts.append(np.ascontiguousarray(f.features, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(f.truth_mask, dtype=np.uint8).tobytes())
        parts.append(struct.pack("<I", len(f.prompts)))
        if f.prompts:
            uv = np.array([(p.u, p.v) for p in f.prompts], dtype="<f4")
            parts.append(uv.tobytes())
        parts.append(struct.pack("<i", int(f.scene_id)))
    return b"".join(parts)


def save_session(path, frames: Sequence[Frame]) -> None:
    """Write frames in the recorded-session layout.

    Little-endian throughout::

        header  : b"TRAVSESS", u32 version, u32 H, u32 W, u32 D, u32 frame_count
        frame   : u32 H, u32 W, u32 D            (shape echo, checked on load)
                  f32[H*W*D] features, row-major (row, column, channel)
                  u8[H*W]    mask (0/1)
                  u32 n, f32[2n] prompt (u, v) pairs
                  i32 scene_id (-1 if unknown)
    """
    atomic_write_bytes(path, encode_session(frames))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, frame_index: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SessionTruncatedError(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.data) - self.pos}",
                frame_index,
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def load_recorded_session(path) -> Iterator[Frame]:
    """Yield frames from a recorded session, validating as it goes."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise SessionHeaderError("file shorter than header")
    magic, version, h, w, d, count = _HEADER.unpack_from(data, 0)
    if magic != SESSION_MAGIC:
        raise SessionHeaderError(f"bad magic {magic!r}")
    if version != SESSION_VERSION:
        raise SessionHeaderError(f"unsupported version {version}")
    if min(h, w, d) == 0:
        raise SessionHeaderError("zero-sized frame dimensions")
    rd = _Reader(data)
    rd.pos = _HEADER.size
    for i in range(count):
        fh, fw, fd = _FRAME_SHAPE.unpack(rd.take(_FRAME_SHAPE.size, i))
        if (fh, fw, fd) != (h, w, d):
            raise SessionShapeError(f"frame shape {(fh, fw, fd)} != header shape {(h, w, d)}", i)
        feats = np.frombuffer(rd.take(4 * h * w * d, i), dtype="<f4").reshape(h, w, d)
        if not np.all(np.isfinite(feats)):
            raise SessionNonFiniteError("features contain NaN or Inf", i)
        mask_raw = np.frombuffer(rd.take(h * w, i), dtype=np.uint8).reshape(h, w)
        if np.any(mask_raw > 1):
            raise SessionShapeError("mask bytes must be 0 or 1", i)
        (n,) = struct.unpack("<I", rd.take(4, i))
        uv = np.frombuffer(rd.take(8 * n, i), dtype="<f4").reshape(n, 2)
        (scene_id,) = struct.unpack("<i", rd.take(4, i))
        prompts = [PixelPrompt(float(u), float(v)) for u, v in uv]
        yield Frame(feats.astype(np.float32), mask_raw.astype(bool), prompts, scene_id, i)
    if rd.pos != len(data):
        raise SessionShapeError(f"{len(data) - rd.pos} trailing bytes after last frame", count)
