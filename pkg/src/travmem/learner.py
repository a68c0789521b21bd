"""VAE + MLP traversability learner with hand-written backprop.

The encoder maps a pixel feature to a diagonal Gaussian latent. The decoder
reconstructs the feature from a reparameterized sample, and the head predicts
traversability from the latent mean. Three objectives are combined:

* reconstruction MSE, on traversable rows only, so that anything unlike
  traversable ground reconstructs poorly;
* binary cross-entropy of the head against the self-supervised labels;
* a cycle-consistency KL between the latent of ``x`` and the latent of its
  reconstruction (``regularization="cycle"``), or the usual KL to a standard
  normal prior (``regularization="prior"``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_bytes

PROB_CLAMP = 1e-7
MODEL_MAGIC = b"TRAVMODL"
MODEL_VERSION = 1
PARAM_ORDER = ("W1", "b1", "Wm", "bm", "Wv", "bv", "W3", "b3", "W4", "b4", "W5", "b5", "W6", "b6")
_ACTIVATIONS = ("tanh", "linear")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.w1, self.w2, self.w3) <= 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class ModelParams:
    """Weight tensors keyed by name; see ``PARAM_ORDER`` for the layout.

    Encoder ``W1 (D, He)``, ``Wm``/``Wv (He, L)``; decoder ``W3 (L, Hd)``,
    ``W4 (Hd, D)``; head ``W5 (L, Hm)``, ``W6 (Hm, 1)``. Biases follow their
    weight.
    """

    tensors: dict[str, np.ndarray]
    activation: str = "tanh"

    @classmethod
    def init(cls, d: int = 64, latent: int = 16, enc_hidden: int = 64, dec_hidden: int | None = None,
             mlp_hidden: int = 32, activation: str = "tanh", seed: int = 0,
             scale: float = 1.0) -> "ModelParams":
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        dec_hidden = enc_hidden if dec_hidden is None else dec_hidden
        rng = np.random.default_rng([seed, 3])
        shapes = {
            "W1": (d, enc_hidden), "Wm": (enc_hidden, latent), "Wv": (enc_hidden, latent),
            "W3": (latent, dec_hidden), "W4": (dec_hidden, d),
            "W5": (latent, mlp_hidden), "W6": (mlp_hidden, 1),
        }
        t = {}
        for name in PARAM_ORDER:
            if name.startswith("W"):
                fan_in = shapes[name][0]
                t[name] = rng.standard_normal(shapes[name]) * (scale / np.sqrt(fan_in))
            else:
                t[name] = np.zeros(shapes["W" + name[1:]][1])
        return cls(t, activation)

    @property
    def dims(self) -> dict[str, int]:
        t = self.tensors
        return {
            "d": t["W1"].shape[0], "latent": t["Wm"].shape[1], "enc_hidden": t["W1"].shape[1],
            "dec_hidden": t["W3"].shape[1], "mlp_hidden": t["W5"].shape[1],
        }

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.activation)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def __getitem__(self, k):
        return self.tensors[k]


@dataclass
class LatentSample:
    mean: np.ndarray
    log_var: np.ndarray
    z: np.ndarray
    noise: np.ndarray


def _act(a, kind):
    return np.tanh(a) if kind == "tanh" else a


def _dact(h, kind):
    # derivative expressed through the activation output
    return 1.0 - h * h if kind == "tanh" else np.ones_like(h)


def _encode_stats(x, p: ModelParams):
    a1 = x @ p["W1"] + p["b1"]
    h1 = _act(a1, p.activation)
    return h1, h1 @ p["Wm"] + p["bm"], h1 @ p["Wv"] + p["bv"]


def _head_logit(mu, p: ModelParams):
    h5 = _act(mu @ p["W5"] + p["b5"], p.activation)
    return h5, (h5 @ p["W6"] + p["b6"])[..., 0]


def _check_finite(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains NaN or Inf")
    return x


def encode(x, params: ModelParams, rng=None, noise=None) -> LatentSample:
    """Latent mean/log-variance and a reparameterized draw for one or more rows."""
    x = _check_finite(x)
    _, mu, lv = _encode_stats(x, params)
    if noise is None:
        noise = np.random.default_rng(rng).standard_normal(mu.shape)
    return LatentSample(mu, lv, mu + np.exp(0.5 * lv) * noise, np.asarray(noise))


def decode(z, params: ModelParams) -> np.ndarray:
    z = _check_finite(z)
    h3 = _act(z @ params["W3"] + params["b3"], params.activation)
    return h3 @ params["W4"] + params["b4"]


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def predict_traversability(x, params: ModelParams) -> np.ndarray:
    """Head probability from the latent mean; no sampling."""
    x = _check_finite(x)
    _, mu, _ = _encode_stats(x, params)
    _, logit = _head_logit(mu, params)
    return _sigmoid(logit)


def reconstruction_error(x, params: ModelParams) -> np.ndarray:
    """Per-row squared error of decoding the latent mean."""
    x = _check_finite(x)
    _, mu, _ = _encode_stats(x, params)
    return np.sum((decode(mu, params) - x) ** 2, axis=-1)


# -- losses ------------------------------------------------------------------

def loss_reconstruction(x, x_hat) -> float:
    """Mean over rows of the squared Euclidean reconstruction error."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("reconstruction loss of an empty batch")
    return float(np.mean(np.sum((x - x_hat) ** 2, axis=1)))


def loss_traversability(y, y_hat, weights=None) -> float:
    """Binary cross-entropy with predictions clamped to ``[1e-7, 1 - 1e-7]``."""
    y = np.asarray(y, dtype=float)
    p = np.clip(np.asarray(y_hat, dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
    per = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    if weights is not None:
        per = per * np.asarray(weights, dtype=float)
    return float(np.mean(per))


def _kl_rows(mu1, lv1, mu2, lv2):
    return 0.5 * np.sum(lv2 - lv1 + (np.exp(lv1) + (mu1 - mu2) ** 2) * np.exp(-lv2) - 1.0, axis=-1)


def loss_regularization(z: LatentSample, z_hat: LatentSample) -> float:
    """Batch mean of KL(N(z) || N(z_hat)) between diagonal Gaussian latents."""
    kl = _kl_rows(np.atleast_2d(z.mean), np.atleast_2d(z.log_var),
                  np.atleast_2d(z_hat.mean), np.atleast_2d(z_hat.log_var))
    return float(np.mean(kl))


# -- objective and gradients -------------------------------------------------

@dataclass
class Batch:
    """Stacked training rows; ``node_ids`` maps each row to its memory node."""

    x: np.ndarray
    y: np.ndarray
    node_ids: np.ndarray
    noise: np.ndarray | None = None

    @classmethod
    def from_draws(cls, draws: Sequence[tuple], latent: int, rng) -> "Batch":
        xs, ys, ids = [], [], []
        for node, idx in draws:
            xs.append(node.features[idx])
            ys.append(node.labels[idx])
            ids.append(np.full(len(idx), node.frame_index))
        x = np.concatenate(xs).astype(np.float64)
        y = np.concatenate(ys)
        noise = np.random.default_rng(rng).standard_normal((x.shape[0], latent))
        return cls(x, y, np.concatenate(ids), noise)


@dataclass
class ObjectiveTerms:
    total: float
    reco: float
    trav: float
    kl: float
    per_row_reco: np.ndarray = field(repr=False)
    pos: np.ndarray = field(repr=False)


def objective(params: ModelParams, batch: Batch, weights: LossWeights, neg_weight: float = 1.0,
              regularization: str = "cycle", need_grad: bool = True):
    """Combined loss and, optionally, its gradient with respect to every tensor."""
    p, act = params, params.activation
    x = batch.x
    y = batch.y.astype(float)
    n = x.shape[0]
    pos = np.flatnonzero(batch.y)
    n_pos = pos.size

    a1_h1, mu, lv = _encode_stats(x, p)
    h1 = a1_h1
    h5, logit = _head_logit(mu, p)
    prob = _sigmoid(logit)
    clamped = (prob < PROB_CLAMP) | (prob > 1 - PROB_CLAMP)
    row_w = np.where(batch.y, 1.0, neg_weight)
    l_trav = loss_traversability(y, prob, row_w)

    per_row_reco = np.zeros(n)
    l_reco = l_kl = 0.0
    if n_pos:
        xp, mup, lvp = x[pos], mu[pos], lv[pos]
        eps = batch.noise[pos]
        std = np.exp(0.5 * lvp)
        z = mup + std * eps
        h3 = _act(z @ p["W3"] + p["b3"], act)
        xh = h3 @ p["W4"] + p["b4"]
        resid = xh - xp
        per_row_reco[pos] = np.sum(resid**2, axis=1)
        l_reco = float(per_row_reco[pos].mean())
        if regularization == "cycle":
            h1c, mu2, lv2 = _encode_stats(xh, p)
        else:
            h1c, mu2, lv2 = None, np.zeros_like(mup), np.zeros_like(lvp)
        l_kl = float(np.mean(_kl_rows(mup, lvp, mu2, lv2)))

    total = weights.w1 * l_reco + weights.w2 * l_trav + weights.w3 * l_kl
    terms = ObjectiveTerms(total, l_reco, l_trav, l_kl, per_row_reco, pos)
    if not need_grad:
        return terms, None

    g = params.zeros_like()
    # head, all rows
    dlogit = weights.w2 * row_w * (prob - y) / n
    dlogit[clamped] = 0.0
    g["W6"] += h5.T @ dlogit[:, None]
    g["b6"] += dlogit.sum(keepdims=True)
    da5 = (dlogit[:, None] @ p["W6"].T) * _dact(h5, act)
    g["W5"] += mu.T @ da5
    g["b5"] += da5.sum(axis=0)
    dmu = da5 @ p["W5"].T
    dlv = np.zeros_like(lv)

    if n_pos:
        dxh = weights.w1 * (2.0 / n_pos) * resid
        e_lv = np.exp(lvp)
        e_nlv2 = np.exp(-lv2)
        delta = mup - mu2
        c = weights.w3 / n_pos
        dmu_p = c * delta * e_nlv2
        dlv_p = c * 0.5 * (e_lv * e_nlv2 - 1.0)
        if regularization == "cycle":
            dmu2 = -c * delta * e_nlv2
            dlv2 = c * 0.5 * (1.0 - (e_lv + delta**2) * e_nlv2)
            g["Wm"] += h1c.T @ dmu2
            g["bm"] += dmu2.sum(axis=0)
            g["Wv"] += h1c.T @ dlv2
            g["bv"] += dlv2.sum(axis=0)
            da1c = (dmu2 @ p["Wm"].T + dlv2 @ p["Wv"].T) * _dact(h1c, act)
            g["W1"] += xh.T @ da1c
            g["b1"] += da1c.sum(axis=0)
            dxh = dxh + da1c @ p["W1"].T
        g["W4"] += h3.T @ dxh
        g["b4"] += dxh.sum(axis=0)
        da3 = (dxh @ p["W4"].T) * _dact(h3, act)
        g["W3"] += z.T @ da3
        g["b3"] += da3.sum(axis=0)
        dz = da3 @ p["W3"].T
        dmu[pos] += dmu_p + dz
        dlv[pos] += dlv_p + dz * eps * 0.5 * std

    g["Wm"] += h1.T @ dmu
    g["bm"] += dmu.sum(axis=0)
    g["Wv"] += h1.T @ dlv
    g["bv"] += dlv.sum(axis=0)
    da1 = (dmu @ p["Wm"].T + dlv @ p["Wv"].T) * _dact(h1, act)
    g["W1"] += x.T @ da1
    g["b1"] += da1.sum(axis=0)
    return terms, g


def gradient_check(params: ModelParams, batch: Batch, weights: LossWeights, h: float = 1e-5,
                   neg_weight: float = 1.0, regularization: str = "cycle") -> float:
    """Max relative error between analytic and central-difference partials.

    Intended for micro models; it perturbs every scalar parameter.
    """
    _, g = objective(params, batch, weights, neg_weight, regularization)
    worst = 0.0
    probe = params.copy()
    for name in PARAM_ORDER:
        arr = probe.tensors[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = objective(probe, batch, weights, neg_weight, regularization, need_grad=False)[0].total
            arr[idx] = orig - h
            dn = objective(probe, batch, weights, neg_weight, regularization, need_grad=False)[0].total
            arr[idx] = orig
            num = (up - dn) / (2 * h)
            ana = g[name][idx]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# -- training ----------------------------------------------------------------

@dataclass
class LearnerConfig:
    latent: int = 16
    enc_hidden: int = 64
    dec_hidden: int = 64
    mlp_hidden: int = 32
    activation: str = "tanh"
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-2
    optimizer: str = "sgd"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float = 10.0
    neg_weight: float = 1.0
    regularization: str = "cycle"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.regularization not in ("cycle", "prior"):
            raise ValueError(f"unknown regularization {self.regularization!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


class Learner:
    """Parameters plus optimizer state; one ``train_step`` per sampled batch."""

    def __init__(self, d: int, config: LearnerConfig | None = None, seed: int = 0,
                 params: ModelParams | None = None):
        self.config = config or LearnerConfig()
        c = self.config
        self.params = params or ModelParams.init(d, c.latent, c.enc_hidden, c.dec_hidden,
                                                 c.mlp_hidden, c.activation, seed)
        self._m = self.params.zeros_like()
        self._v = self.params.zeros_like()
        self.steps = 0

    def train_step(self, draws, rng) -> tuple[dict[int, float], float]:
        """One update on a batch drawn from memory.

        Returns per-node mean reconstruction loss over that node's traversable
        rows (nodes without such rows are omitted) and the total loss.
        """
        if not draws:
            raise ValueError("empty batch")
        c = self.config
        batch = Batch.from_draws(draws, c.latent, rng)
        terms, g = objective(self.params, batch, c.weights, c.neg_weight, c.regularization)
        if not np.isfinite(terms.total):
            raise TrainingDiverged(
                f"non-finite loss at step {self.steps} (reco={terms.reco}, trav={terms.trav}, "
                f"kl={terms.kl}); lower the learning rate (lr={c.lr})"
            )
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
        if c.clip_norm and norm > c.clip_norm:
            scale = c.clip_norm / norm
            for v in g.values():
                v *= scale
        self._apply(g)
        if not self.params.all_finite():
            raise TrainingDiverged(f"parameters became non-finite at step {self.steps}")
        self.steps += 1
        return _per_node_losses(batch, terms), terms.total

    def _apply(self, g):
        c, t = self.config, self.params.tensors
        if c.optimizer == "sgd":
            for k in PARAM_ORDER:
                self._m[k] = c.momentum * self._m[k] - c.lr * g[k]
                t[k] += self._m[k]
            return
        b1, b2 = c.betas
        step = self.steps + 1
        for k in PARAM_ORDER:
            self._m[k] = b1 * self._m[k] + (1 - b1) * g[k]
            self._v[k] = b2 * self._v[k] + (1 - b2) * g[k] ** 2
            mhat = self._m[k] / (1 - b1**step)
            vhat = self._v[k] / (1 - b2**step)
            t[k] -= c.lr * mhat / (np.sqrt(vhat) + 1e-8)

    def predict(self, x) -> np.ndarray:
        return predict_traversability(x, self.params)


def _per_node_losses(batch: Batch, terms: ObjectiveTerms) -> dict[int, float]:
    if terms.pos.size == 0:
        return {}
    ids = batch.node_ids[terms.pos]
    vals = terms.per_row_reco[terms.pos]
    uniq, inv = np.unique(ids, return_inverse=True)
    sums = np.bincount(inv, weights=vals)
    counts = np.bincount(inv)
    return {int(k): float(s / n) for k, s, n in zip(uniq, sums, counts)}


# -- checkpoints -------------------------------------------------------------

_MODEL_HEADER = struct.Struct("<8sIIIIIII")


def encode_model(params: ModelParams) -> bytes:
    """Binary checkpoint.

    Header ``b"TRAVMODL", u32 version, u32 D, L, enc_hidden, dec_hidden,
    mlp_hidden, u32 activation`` (0 tanh, 1 linear), then every tensor of
    ``PARAM_ORDER`` as little-endian f32, row-major.
    """
    d = params.dims
    parts = [_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, d["d"], d["latent"], d["enc_hidden"],
                                d["dec_hidden"], d["mlp_hidden"], _ACTIVATIONS.index(params.activation))]
    for k in PARAM_ORDER:
        parts.append(np.ascontiguousarray(params[k], dtype="<f4").tobytes())
    return b"".join(parts)


def save_model(path, params: ModelParams) -> None:
    atomic_write_bytes(path, encode_model(params))


def load_model(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise ValueError("checkpoint shorter than header")
    magic, version, d, lat, he, hd, hm, act = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    template = ModelParams.init(d, lat, he, hd, hm, _ACTIVATIONS[act])
    pos = _MODEL_HEADER.size
    tensors = {}
    for k in PARAM_ORDER:
        shape = template[k].shape
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(data):
            raise ValueError(f"checkpoint truncated in tensor {k}")
        tensors[k] = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=pos) \
            .reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return ModelParams(tensors, template.activation)
