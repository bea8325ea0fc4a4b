"""Compact softmax detector on the two derotated features.

Parameters live in one flat float64 vector.  Layer ``l`` with fan-in
``d_in`` and fan-out ``d_out`` contributes its weight matrix
(``d_in x d_out``, row-major) followed by its bias (``d_out``), layers in
order.  The default ``(2, 16)`` is a single affine map to 16 logits, 48
parameters in total.  Hidden layers, if configured, use ReLU.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel import PilotDataset
from .rng import stream

__all__ = [
    "ModelParams",
    "TrainConfig",
    "AdamState",
    "param_count",
    "init_params",
    "forward",
    "predict",
    "loss",
    "grad",
    "sgd_step",
    "adam_step",
    "LocalTrainer",
    "local_train",
    "params_to_bytes",
    "params_from_bytes",
    "save_params",
    "load_params",
]

DEFAULT_DIMS = (2, 16)


def param_count(layer_dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


@dataclass
class ModelParams:
    layer_dims: tuple[int, ...]
    flat: np.ndarray

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"invalid layer_dims {self.layer_dims}")
        self.flat = np.asarray(self.flat, dtype=float)
        if self.flat.shape != (param_count(self.layer_dims),):
            raise ValueError(f"expected {param_count(self.layer_dims)} parameters, got {self.flat.shape}")

    @property
    def size(self) -> int:
        return self.flat.size

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def layers(self, flat: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``flat`` (default: this model's vector)."""
        flat = self.flat if flat is None else flat
        out, i = [], 0
        for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            W = flat[i:i + a * b].reshape(a, b)
            i += a * b
            out.append((W, flat[i:i + b]))
            i += b
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.layer_dims, self.flat.copy())


def init_params(rng: np.random.Generator, layer_dims: Sequence[int] = DEFAULT_DIMS) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    p = ModelParams(tuple(layer_dims), np.zeros(param_count(layer_dims)))
    for W, _ in p.layers():
        lim = math.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-lim, lim, size=W.shape)
    return p


def _as_batch(features) -> tuple[np.ndarray, bool]:
    f = np.asarray(features, dtype=float)
    return (f[None, :], True) if f.ndim == 1 else (f, False)


def _forward_cache(params: ModelParams, flat: np.ndarray, f: np.ndarray):
    acts = [f]
    layers = params.layers(flat)
    for li, (W, b) in enumerate(layers):
        z = acts[-1] @ W + b
        acts.append(z if li == len(layers) - 1 else np.maximum(z, 0.0))
    return acts


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward(params: ModelParams, features) -> np.ndarray:
    """Softmax class probabilities, shape ``(N, M)`` (or ``(M,)`` for one sample)."""
    f, single = _as_batch(features)
    logits = _forward_cache(params, params.flat, f)[-1]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=-1, keepdims=True)
    return p[0] if single else p


def predict(params: ModelParams, features) -> np.ndarray:
    f, single = _as_batch(features)
    # argmax of the logits equals argmax of the softmax
    out = np.argmax(_forward_cache(params, params.flat, f)[-1], axis=-1)
    return out[0] if single else out


def loss(params: ModelParams, msgs, features) -> float:
    """Mean cross-entropy of the true messages."""
    f, _ = _as_batch(features)
    y = np.atleast_1d(np.asarray(msgs))
    if len(y) == 0:
        raise ValueError("empty batch")
    lp = _log_softmax(_forward_cache(params, params.flat, f)[-1])
    return float(-lp[np.arange(len(y)), y].mean())


def _grad_flat(params: ModelParams, flat: np.ndarray, f: np.ndarray, y: np.ndarray) -> np.ndarray:
    acts = _forward_cache(params, flat, f)
    logits = acts[-1]
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    p[np.arange(len(y)), y] -= 1.0
    delta = p / len(y)
    out = np.empty_like(flat)
    gl = params.layers(out)
    layers = params.layers(flat)
    for li in range(len(layers) - 1, -1, -1):
        gW, gb = gl[li]
        gW[...] = acts[li].T @ delta
        gb[...] = delta.sum(axis=0)
        if li:
            delta = (delta @ layers[li][0].T) * (acts[li] > 0)
    return out


def grad(params: ModelParams, msgs, features) -> np.ndarray:
    """Gradient of :func:`loss` in the flat parameter layout."""
    f, _ = _as_batch(features)
    y = np.atleast_1d(np.asarray(msgs))
    if len(y) == 0:
        raise ValueError("empty batch")
    return _grad_flat(params, params.flat, f, y)


# -- optimisers ------------------------------------------------------------------

def _check_dims(theta: np.ndarray, g: np.ndarray):
    if np.shape(theta) != np.shape(g):
        raise ValueError(f"dimension mismatch: parameters {np.shape(theta)} vs gradient {np.shape(g)}")


def sgd_step(theta: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    _check_dims(theta, g)
    return theta - lr * g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state: AdamState, theta: np.ndarray, g: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns the new state and parameters."""
    _check_dims(theta, g)
    _check_dims(state.m, g)
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = m / (1 - state.beta1**t)
    vhat = v / (1 - state.beta2**t)
    new = replace(state, m=m, v=v, t=t)
    return new, theta - state.lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 20
    epochs: int = 25
    shuffle_seed: int = 0
    # SGD step size is lr / (1 + sgd_decay * n) at iteration n
    sgd_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


def _unpack_data(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, PilotDataset):
        return np.asarray(data.msgs), data.features()
    msgs, features = data
    return np.asarray(msgs), np.asarray(features, dtype=float)


@dataclass
class LocalTrainer:
    """One user's optimiser: parameters, optimiser state and epoch counter.

    Epoch ``k`` shuffles with the stream ``(shuffle_seed, "shuffle", k)``, so
    training for ``a`` then ``b`` epochs is identical to ``a + b`` at once.
    """

    params: ModelParams
    msgs: np.ndarray
    features: np.ndarray
    cfg: TrainConfig
    epoch: int = 0
    step: int = 0
    adam: AdamState | None = field(default=None, repr=False)

    def __post_init__(self):
        self.params = self.params.copy()
        if len(self.msgs) == 0:
            raise ValueError("empty training set")
        if len(self.msgs) != len(self.features):
            raise ValueError("messages and features differ in length")
        if self.cfg.optimizer == "adam" and self.adam is None:
            c = self.cfg
            self.adam = AdamState.zeros(self.params.size, lr=c.lr, beta1=c.beta1, beta2=c.beta2, eps=c.eps)

    @classmethod
    def from_data(cls, params: ModelParams, data, cfg: TrainConfig) -> "LocalTrainer":
        msgs, features = _unpack_data(data)
        return cls(params, msgs, features, cfg)

    def loss(self) -> float:
        return loss(self.params, self.msgs, self.features)

    def run(self, epochs: int) -> ModelParams:
        n, bs = len(self.msgs), self.cfg.batch_size
        p = self.params
        theta = p.flat
        for _ in range(epochs):
            order = stream(self.cfg.shuffle_seed, "shuffle", self.epoch).permutation(n)
            for s in range(0, n, bs):
                idx = order[s:s + bs]
                g = _grad_flat(p, theta, self.features[idx], self.msgs[idx])
                if self.adam is not None:
                    self.adam, theta = adam_step(self.adam, theta, g)
                else:
                    theta = sgd_step(theta, g, self.cfg.lr / (1.0 + self.cfg.sgd_decay * self.step))
                self.step += 1
            self.epoch += 1
        self.params = ModelParams(p.layer_dims, theta)
        return self.params


def local_train(params: ModelParams, data, cfg: TrainConfig) -> ModelParams:
    """``cfg.epochs`` passes of mini-batch training from ``params``."""
    return LocalTrainer.from_data(params, data, cfg).run(cfg.epochs)


# -- checkpoint format ------------------------------------------------------------
# little-endian: magic "FRNN", u16 version, u16 n_dims, n_dims x u32, float32 parameters

_MAGIC = b"FRNN"
_VERSION = 1


def params_to_bytes(params: ModelParams) -> bytes:
    dims = params.layer_dims
    head = _MAGIC + struct.pack(f"<HH{len(dims)}I", _VERSION, len(dims), *dims)
    return head + params.flat.astype("<f4").tobytes()


def params_from_bytes(buf: bytes) -> ModelParams:
    if buf[:4] != _MAGIC:
        raise ValueError("not a parameter file (bad magic)")
    version, nd = struct.unpack_from("<HH", buf, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    dims = struct.unpack_from(f"<{nd}I", buf, 8)
    off = 8 + 4 * nd
    flat = np.frombuffer(buf, dtype="<f4", offset=off).astype(float)
    return ModelParams(dims, flat)


def save_params(params: ModelParams, path) -> Path:
    path = Path(path)
    path.write_bytes(params_to_bytes(params))
    return path


def load_params(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
