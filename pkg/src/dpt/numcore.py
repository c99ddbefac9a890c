"""Dense numeric kernel: MLPs with hand-written backprop, embeddings, optimizers.

Everything is float64 numpy. Batched inputs are row-major ``(batch, features)``;
1-D inputs are treated as a batch of one and returned as 1-D.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "softplus")
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # each (fan_in, fan_out)
    biases: list[np.ndarray]
    activations: list[str]  # one per hidden layer

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases differ in length")
        if len(self.activations) != len(self.weights) - 1:
            raise ShapeError("need exactly one activation per hidden layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[0]} != previous output")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.activations))

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(sizes: Sequence[int], activation: str | Sequence[str], rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2:
        raise ConfigError("an MLP needs at least input and output sizes")
    n_hidden = len(sizes) - 2
    acts = [activation] * n_hidden if isinstance(activation, str) else list(activation)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, acts)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    # sigmoid(z) = 1 - exp(-softplus(z))
    return -np.expm1(-a)


@dataclass
class MlpCache:
    inputs: list[np.ndarray]  # input to each linear layer
    pre: list[np.ndarray]  # pre-activations of hidden layers
    squeeze: bool


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match MLP input width {params.in_dim}")
    inputs, pre = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        if i < last:
            pre.append(z)
            h = _act(params.activations[i], z)
        else:
            h = z
    return (h[0] if squeeze else h), MlpCache(inputs, pre, squeeze)


def mlp_backward(params: MlpParams, cache: MlpCache, output_grad: np.ndarray
                 ) -> tuple[list[np.ndarray], np.ndarray]:
    """Returns gradients in ``params.arrays()`` order and the input gradient.

    Parameter gradients are summed over the batch.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != (cache.inputs[0].shape[0], params.out_dim):
        raise ShapeError(f"output grad shape {np.shape(output_grad)} does not match forward pass")
    grads: list[np.ndarray] = [None] * (2 * len(params.weights))  # type: ignore[list-item]
    for i in range(len(params.weights) - 1, -1, -1):
        if i < len(params.weights) - 1:
            z = cache.pre[i]
            a = cache.inputs[i + 1]
            g = g * _act_grad(params.activations[i], z, a)
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, (g[0] if cache.squeeze else g)


def time_embedding(t, dim: int, T: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal features: entry 2k is sin(t * base**(-2k/dim)), entry 2k+1 the cosine.

    ``t`` may be a scalar or an integer array; t=0 is accepted for probing.
    """
    if dim % 2:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > T):
        raise ShapeError(f"timestep out of range [0, {T}]")
    freqs = base ** (-2.0 * np.arange(dim // 2) / dim)
    args = np.multiply.outer(t_arr.astype(np.float64), freqs)
    out = np.empty(args.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(args)
    out[..., 1::2] = np.cos(args)
    return out


@dataclass
class EmbeddingTable:
    """Class embeddings; the last row (index ``num_classes``) is the null condition."""

    rows: np.ndarray

    @classmethod
    def init(cls, num_classes: int, dim: int, rng: np.random.Generator, scale: float = 1.0):
        return cls(rng.normal(0.0, scale, size=(num_classes + 1, dim)))

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0] - 1

    @property
    def null_index(self) -> int:
        return self.rows.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def lookup(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        if np.any(idx < 0) or np.any(idx > self.null_index):
            raise ShapeError("embedding index out of range")
        return self.rows[idx]

    def backward(self, idx: np.ndarray, grad: np.ndarray) -> np.ndarray:
        out = np.zeros_like(self.rows)
        np.add.at(out, np.asarray(idx), grad)
        return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def _check_finite(grads: Sequence[np.ndarray]):
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise TrainingError(f"non-finite gradient in array {i} at index {tuple(int(j) for j in bad)}")


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    _check_finite(grads)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float):
    _check_finite(grads)
    for p, g in zip(params, grads):
        p -= lr * g


# -- checkpoints -------------------------------------------------------------

def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v).hex() for v in a.ravel()]}


def decode_array(d: dict) -> np.ndarray:
    data = np.array([float.fromhex(s) for s in d["data"]], dtype=np.float64)
    return data.reshape(d["shape"])


def mlp_to_dict(p: MlpParams) -> dict:
    return {
        "activations": list(p.activations),
        "weights": [encode_array(w) for w in p.weights],
        "biases": [encode_array(b) for b in p.biases],
    }


def mlp_from_dict(d: dict) -> MlpParams:
    return MlpParams([decode_array(w) for w in d["weights"]],
                     [decode_array(b) for b in d["biases"]], list(d["activations"]))


def save_checkpoint(path, kind: str, payload: dict, meta: dict | None = None):
    doc = {"version": CHECKPOINT_VERSION, "kind": kind, "meta": meta or {}, "payload": payload}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path, kind: str) -> tuple[dict, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    if doc.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    return doc["payload"], doc["meta"]
