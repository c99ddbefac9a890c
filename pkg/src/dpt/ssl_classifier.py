"""Masked-siamese prototype encoder plus a linear probe on frozen features."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    AdamState,
    ConfigError,
    MlpParams,
    ShapeError,
    TrainingError,
    adam_step,
    decode_array,
    encode_array,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_from_dict,
    mlp_to_dict,
)


class NumericError(ArithmeticError):
    pass


@dataclass
class MsnConfig:
    H: int = 2
    mask_ratio: float = 0.3
    noise_scale: float = 0.1
    tau: float = 0.1
    tau_target: float = 0.025
    lam: float = 1.0
    ema: float = 0.996
    num_prototypes: int | None = None  # None -> 4 * C
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    feature_dim: int = 16
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3

    def __post_init__(self):
        if self.tau <= 0 or self.tau_target <= 0:
            raise ConfigError("temperatures must be positive")
        if self.lam < 0:
            raise ConfigError("entropy weight must be nonnegative")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError("mask_ratio must be in [0, 1)")
        if not 0 <= self.ema <= 1:
            raise ConfigError("ema decay must be in [0, 1]")
        if self.H < 1:
            raise ConfigError("need at least one anchor view")

    def prototypes_for(self, num_classes: int) -> int:
        P = self.num_prototypes if self.num_prototypes is not None else 4 * num_classes
        if P < num_classes:
            raise ConfigError(f"need at least C={num_classes} prototypes, got {P}")
        return P


@dataclass
class MsnState:
    anchor: MlpParams
    target: MlpParams
    prototypes: np.ndarray  # (P, feature_dim)

    def to_dict(self) -> dict:
        return {"anchor": mlp_to_dict(self.anchor), "target": mlp_to_dict(self.target),
                "prototypes": encode_array(self.prototypes)}

    @classmethod
    def from_dict(cls, d: dict) -> "MsnState":
        return cls(mlp_from_dict(d["anchor"]), mlp_from_dict(d["target"]), decode_array(d["prototypes"]))


def init_msn(dim: int, num_classes: int, cfg: MsnConfig, rng: np.random.Generator) -> MsnState:
    anchor = init_mlp([dim, *cfg.hidden, cfg.feature_dim], "tanh", rng)
    q = rng.normal(size=(cfg.prototypes_for(num_classes), cfg.feature_dim))
    return MsnState(anchor, anchor.copy(), q)


def make_views(x: np.ndarray, cfg: MsnConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Anchor views (H, d): noise then ceil(rho*d) coordinates zeroed. Target view (d,): noise only."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    n_mask = math.ceil(cfg.mask_ratio * d)
    anchors = x + cfg.noise_scale * rng.standard_normal((cfg.H, d))
    for h in range(cfg.H):
        anchors[h, rng.permutation(d)[:n_mask]] = 0.0
    target = x + cfg.noise_scale * rng.standard_normal(d)
    return anchors, target


def make_batch_views(X: np.ndarray, cfg: MsnConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Views for a batch: anchors (B*H, d) item-major, targets (B, d)."""
    anchors, targets = zip(*(make_views(x, cfg, rng) for x in X))
    return np.concatenate(anchors), np.stack(targets)


def _normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("cosine similarity undefined for a zero-norm vector")
    return v / norms, norms


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def prototype_assignment(feature: np.ndarray, q: np.ndarray, tau: float) -> np.ndarray:
    """softmax(cos(feature, q_k) / tau) over prototypes; works row-wise on batches."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    f, _ = _normalize(np.asarray(feature, dtype=np.float64))
    qn, _ = _normalize(q)
    return _softmax(f @ qn.T / tau)


def target_assignments(state: MsnState, target_views: np.ndarray, cfg: MsnConfig) -> np.ndarray:
    feats, _ = mlp_forward(state.target, target_views)
    return prototype_assignment(feats, state.prototypes, cfg.tau_target)


def msn_objective(anchor: MlpParams, q: np.ndarray, anchor_views: np.ndarray, targets: np.ndarray,
                  cfg: MsnConfig) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Loss and gradients w.r.t. (anchor params, q) with target probabilities held fixed.

    ``anchor_views`` is (B*H, d) item-major and ``targets`` is (B, P).
    Returns (loss, anchor grads in ``arrays()`` order, q grad).
    """
    B, P = targets.shape
    n = anchor_views.shape[0]
    if n != B * cfg.H:
        raise ShapeError(f"{n} anchor views for {B} targets with H={cfg.H}")
    feats, cache = mlp_forward(anchor, anchor_views)
    f_hat, f_norm = _normalize(feats)
    q_hat, q_norm = _normalize(q)
    logits = f_hat @ q_hat.T / cfg.tau
    logp = logits - logits.max(axis=1, keepdims=True)
    logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    t = np.repeat(targets, cfg.H, axis=0)
    ce = -np.sum(t * logp) / n
    p_bar = p.mean(axis=0)
    ent = -np.sum(p_bar * np.log(p_bar))
    loss = float(ce - cfg.lam * ent)
    if not np.isfinite(loss):
        raise TrainingError("non-finite MSN loss")

    # d/dlogits of the cross-entropy part; targets sum to one per row
    g_logits = (p - t) / n
    # entropy part: d(-lam*H)/dp_bar_k = lam*(log p_bar_k + 1), spread over anchors, then softmax jacobian
    g_p = np.broadcast_to(cfg.lam * (np.log(p_bar) + 1.0) / n, p.shape)
    g_logits += p * (g_p - np.sum(p * g_p, axis=1, keepdims=True))
    g_sim = g_logits / cfg.tau
    g_fhat = g_sim @ q_hat
    g_qhat = g_sim.T @ f_hat
    g_feat = (g_fhat - f_hat * np.sum(f_hat * g_fhat, axis=1, keepdims=True)) / f_norm
    g_q = (g_qhat - q_hat * np.sum(q_hat * g_qhat, axis=1, keepdims=True)) / q_norm
    grads, _ = mlp_backward(anchor, cache, g_feat)
    return loss, grads, g_q


def msn_loss_and_grads(state: MsnState, batch: np.ndarray, cfg: MsnConfig, rng: np.random.Generator):
    if len(batch) == 0:
        raise ShapeError("empty batch")
    anchor_views, target_views = make_batch_views(batch, cfg, rng)
    targets = target_assignments(state, target_views, cfg)
    return msn_objective(state.anchor, state.prototypes, anchor_views, targets, cfg)


def ema_update(target: MlpParams, anchor: MlpParams, m: float) -> MlpParams:
    """In place: target <- m * target + (1 - m) * anchor."""
    if not 0 <= m <= 1:
        raise ConfigError("ema decay must be in [0, 1]")
    for tb, ab in zip(target.arrays(), anchor.arrays()):
        if tb.shape != ab.shape:
            raise ShapeError("target and anchor shapes differ")
        tb *= m
        tb += (1.0 - m) * ab
    return target


def train_msn(X: np.ndarray, num_classes: int, cfg: MsnConfig, rng: np.random.Generator
              ) -> tuple[MsnState, list[float]]:
    state = init_msn(X.shape[1], num_classes, cfg, rng)
    opt = AdamState(lr=cfg.lr)
    params = state.anchor.arrays() + [state.prototypes]
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            loss, grads, g_q = msn_loss_and_grads(state, X[order[start:start + cfg.batch_size]], cfg, rng)
            adam_step(opt, params, grads + [g_q])
            ema_update(state.target, state.anchor, cfg.ema)
            losses.append(loss)
    return state, losses


def extract_features(state: MsnState, X: np.ndarray) -> np.ndarray:
    feats, _ = mlp_forward(state.target, np.atleast_2d(np.asarray(X, dtype=np.float64)))
    return feats


# -- linear probe ------------------------------------------------------------

@dataclass
class ProbeConfig:
    l2: float = 1e-2
    tol: float = 1e-6
    max_iters: int = 20000


@dataclass
class LinearProbe:
    weight: np.ndarray  # (C, F)
    bias: np.ndarray  # (C,)
    l2: float

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def to_dict(self) -> dict:
        return {"weight": encode_array(self.weight), "bias": encode_array(self.bias), "l2": float(self.l2).hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearProbe":
        return cls(decode_array(d["weight"]), decode_array(d["bias"]), float.fromhex(d["l2"]))


def probe_objective(W: np.ndarray, b: np.ndarray, F: np.ndarray, Y: np.ndarray, l2: float):
    """Mean cross-entropy + (l2/2)*||W||^2 and its gradient. ``Y`` is one-hot."""
    logits = F @ W.T + b
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = len(F)
    loss = -np.sum(Y * logp) / n + 0.5 * l2 * np.sum(W * W)
    r = (np.exp(logp) - Y) / n
    return loss, r.T @ F + l2 * W, r.sum(axis=0)


def train_probe(features: np.ndarray, labels: np.ndarray, num_classes: int, cfg: ProbeConfig = ProbeConfig()
                ) -> LinearProbe:
    """L2-regularised multinomial logistic regression by full-batch gradient descent from zero.

    Step size is 1/L for the Lipschitz bound L = lambda_max(A^T A)/(2n) + l2, A = [F, 1].
    """
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ShapeError("labels must lie in [0, C)")
    if len(np.unique(labels)) < 2:
        raise ConfigError("probe training needs at least two classes")
    F = np.asarray(features, dtype=np.float64)
    Y = np.eye(num_classes)[labels]
    A = np.hstack([F, np.ones((len(F), 1))])
    L = np.linalg.eigvalsh(A.T @ A)[-1] / (2 * len(F)) + cfg.l2
    lr = 1.0 / L
    W = np.zeros((num_classes, F.shape[1]))
    b = np.zeros(num_classes)
    for _ in range(cfg.max_iters):
        _, gW, gb = probe_objective(W, b, F, Y, cfg.l2)
        if np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)) < cfg.tol:
            break
        W -= lr * gW
        b -= lr * gb
    return LinearProbe(W, b, cfg.l2)


def predict(probe: LinearProbe, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels (argmax, lowest index wins ties) and softmax probabilities."""
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if F.shape[1] != probe.weight.shape[1]:
        raise ShapeError("feature width does not match probe")
    logits = F @ probe.weight.T + probe.bias
    return np.argmax(logits, axis=1), _softmax(logits)
