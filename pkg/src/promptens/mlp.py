"""A one-hidden-layer network that predicts per-case prompt weights.

Forward: ``w = softmax(W2 tanh(W1 x + b1) + b2)`` with failed prompts masked
out of the softmax. Training minimizes ``BCE(sum_i w_i p_i, y) + lam * sum_i
w_i log w_i`` (the entropy of ``w`` is rewarded) with Adam and global-norm
gradient clipping.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .weights import softmax

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
PARAM_NAMES = ("W1", "b1", "W2", "b2")


class LayoutError(ValueError):
    pass


@dataclass
class MlpTrainConfig:
    hidden: int = 32
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    clip_norm: float = 1.0
    lam: float = 0.1
    seed: int = 0
    embedding_dim: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")


@dataclass
class MlpModel:
    params: dict
    layout: dict
    activation: str = "tanh"
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def n_prompts(self) -> int:
        return self.layout["n_prompts"]

    @property
    def n_features(self) -> int:
        return self.params["W1"].shape[0]

    def copy(self) -> "MlpModel":
        return MlpModel({k: v.copy() for k, v in self.params.items()}, dict(self.layout), self.activation,
                        dict(self.config), list(self.history))


def prompt_embeddings(bodies: Sequence[str], dim: int = 8) -> np.ndarray:
    """Deterministic pseudo-embeddings: a seeded Gaussian vector per template text."""
    rows = []
    for body in bodies:
        seed = int.from_bytes(hashlib.sha256(body.encode("utf-8")).digest()[:8], "little")
        rows.append(np.random.default_rng(seed).standard_normal(dim) / np.sqrt(dim))
    return np.array(rows).reshape(len(bodies), dim)


def make_layout(n_prompts: int, embeddings: np.ndarray | None = None) -> dict:
    layout = {"n_prompts": n_prompts, "block": ["p_yes", "parsed"], "embedding_dim": 0}
    if embeddings is not None:
        layout["embedding_dim"] = int(embeddings.shape[1])
        layout["embeddings"] = np.asarray(embeddings, dtype=float).tolist()
    return layout


def feature_length(layout: dict) -> int:
    return layout["n_prompts"] * (2 + layout["embedding_dim"])


def build_case_features(responses: Sequence, embeddings: np.ndarray | None = None) -> np.ndarray:
    """Per-prompt ``[p_yes, parsed]`` blocks, then the flattened embeddings if given.

    Failed responses contribute ``(0.5, 0)``.
    """
    blocks = []
    for r in responses:
        if r.parse_status == "failed":
            blocks += [0.5, 0.0]
        else:
            blocks += [float(r.p_yes), 1.0]
    x = np.array(blocks)
    if embeddings is not None:
        emb = np.asarray(embeddings, dtype=float)
        if emb.shape[0] != len(responses):
            raise LayoutError(f"{emb.shape[0]} embeddings for {len(responses)} prompts")
        x = np.concatenate([x, emb.ravel()])
    return x


def layout_embeddings(layout: dict) -> np.ndarray | None:
    if layout.get("embedding_dim", 0):
        return np.array(layout["embeddings"], dtype=float)
    return None


def init_model(n_features: int, n_prompts: int, config: MlpTrainConfig, layout: dict | None = None) -> MlpModel:
    rng = np.random.default_rng(config.seed)
    h = config.hidden
    params = {
        "W1": rng.standard_normal((n_features, h)) / np.sqrt(n_features),
        "b1": np.zeros(h),
        "W2": rng.standard_normal((h, n_prompts)) * (0.1 / np.sqrt(h)),
        "b2": np.zeros(n_prompts),
    }
    layout = layout or {"n_prompts": n_prompts, "block": ["p_yes", "parsed"], "embedding_dim": 0}
    return MlpModel(params, layout, "tanh", asdict(config))


def mlp_forward(model: MlpModel, features, mask=None):
    """Return ``(weights, cache)``; accepts one feature vector or a (batch, d) array."""
    x = np.asarray(features, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    p = model.params
    if X.shape[1] != p["W1"].shape[0]:
        raise LayoutError(f"feature length {X.shape[1]} does not match model input {p['W1'].shape[0]}")
    M = None
    if mask is not None:
        M = np.asarray(mask, dtype=bool)
        M = M[None, :] if M.ndim == 1 else M
    A = np.tanh(X @ p["W1"] + p["b1"])
    Z = A @ p["W2"] + p["b2"]
    W = softmax(Z, M)
    cache = {"X": X, "A": A, "W": W, "mask": M}
    return (W[0] if single else W), cache


def mlp_loss(p_hat, y_gt, weights, lam: float, eps: float = BCE_EPS):
    """BCE on the clamped ensemble probability plus ``lam * sum w log w`` (per case)."""
    c = np.clip(np.asarray(p_hat, dtype=float), eps, 1 - eps)
    y = np.asarray(y_gt, dtype=float)
    w = np.asarray(weights, dtype=float)
    bce = -(y * np.log(c) + (1 - y) * np.log(1 - c))
    wlogw = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0).sum(axis=-1)
    return bce + lam * wlogw


def batch_loss(model: MlpModel, X, P, mask, y, lam: float) -> float:
    W, _ = mlp_forward(model, X, mask)
    p_hat = np.sum(W * P, axis=-1)
    return float(np.mean(mlp_loss(p_hat, y, W, lam)))


def mlp_backward(model: MlpModel, cache: dict, P, y, lam: float, eps: float = BCE_EPS) -> dict:
    """Gradients of the batch-mean ``mlp_loss`` with respect to every parameter."""
    X, A, W, M = cache["X"], cache["A"], cache["W"], cache["mask"]
    P = np.asarray(P, dtype=float).reshape(W.shape)
    y = np.asarray(y, dtype=float).reshape(-1)
    B = X.shape[0]
    p_hat = np.sum(W * P, axis=1)
    c = np.clip(p_hat, eps, 1 - eps)
    inside = (p_hat > eps) & (p_hat < 1 - eps)
    dbce = np.where(inside, (c - y) / (c * (1 - c)), 0.0)
    logw = np.log(np.where(W > 0, W, 1.0))
    g = dbce[:, None] * P + lam * (logw + 1.0)
    if M is not None:
        g = np.where(M, g, 0.0)
    dZ = W * (g - np.sum(W * g, axis=1, keepdims=True)) / B
    dA = dZ @ model.params["W2"].T
    dH = dA * (1 - A**2)
    return {
        "W1": X.T @ dH,
        "b1": dH.sum(axis=0),
        "W2": A.T @ dZ,
        "b2": dZ.sum(axis=0),
    }


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class Adam:
    def __init__(self, params: dict, learning_rate=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = learning_rate
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            m_hat = self.m[k] / (1 - self.b1**self.t)
            v_hat = self.v[k] / (1 - self.b2**self.t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainingSet:
    """Stacked cases: features (n, d), yes-probabilities and parse mask (n, N), truths (n,)."""

    X: np.ndarray
    P: np.ndarray
    mask: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_cases(cls, cases: Sequence[tuple[Sequence, bool]], embeddings=None) -> "TrainingSet":
        """``cases`` are ``(responses, truth)`` pairs; all-failed cases are dropped."""
        X, P, M, y = [], [], [], []
        for responses, truth in cases:
            mask = [r.parse_status != "failed" for r in responses]
            if not any(mask):
                continue
            X.append(build_case_features(responses, embeddings))
            P.append([r.p_yes for r in responses])
            M.append(mask)
            y.append(float(bool(truth)))
        if not y:
            return cls(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0), bool), np.zeros(0))
        return cls(np.array(X), np.array(P, dtype=float), np.array(M, dtype=bool), np.array(y))


def train_mlp(train: TrainingSet, validation: TrainingSet, config: MlpTrainConfig, layout: dict | None = None) -> MlpModel:
    """Mini-batch Adam with clipping; returns the parameters with the lowest validation loss."""
    if len(train) == 0:
        raise ValueError("empty training set")
    val = validation if len(validation) else train
    n_prompts = train.P.shape[1]
    model = init_model(train.X.shape[1], n_prompts, config, layout)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(model.params, config.learning_rate)

    best_loss = batch_loss(model, val.X, val.P, val.mask, val.y, config.lam)
    best = model.copy()
    model.history.append({"epoch": 0, "train_loss": batch_loss(model, train.X, train.P, train.mask, train.y, config.lam),
                          "val_loss": best_loss})
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            _, cache = mlp_forward(model, train.X[idx], train.mask[idx])
            grads = mlp_backward(model, cache, train.P[idx], train.y[idx], config.lam)
            grads, _ = clip_by_global_norm(grads, config.clip_norm)
            opt.step(model.params, grads)
        tr = batch_loss(model, train.X, train.P, train.mask, train.y, config.lam)
        vl = batch_loss(model, val.X, val.P, val.mask, val.y, config.lam)
        model.history.append({"epoch": epoch, "train_loss": tr, "val_loss": vl})
        logger.info("epoch %d train_loss %.6f val_loss %.6f", epoch, tr, vl)
        if vl < best_loss:
            best_loss = vl
            best = model.copy()
    best.history = list(model.history)
    return best


def predict_weights(model: MlpModel, responses: Sequence) -> np.ndarray:
    if len(responses) != model.n_prompts:
        raise LayoutError(f"model expects {model.n_prompts} prompts, got {len(responses)}")
    x = build_case_features(responses, layout_embeddings(model.layout))
    mask = np.array([r.parse_status != "failed" for r in responses])
    if not mask.any():
        mask = None
    w, _ = mlp_forward(model, x, mask)
    return w


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).astype(float)


def save_model(model: MlpModel, path: str | Path) -> None:
    doc = {
        "format": "promptens-mlp/1",
        "activation": model.activation,
        "layers": [list(model.params["W1"].shape), list(model.params["W2"].shape)],
        "params": {k: _encode(model.params[k]) for k in PARAM_NAMES},
        "layout": model.layout,
        "config": model.config,
        "seed": model.config.get("seed"),
        "history": model.history,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> MlpModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    params = {k: _decode(doc["params"][k]) for k in PARAM_NAMES}
    model = MlpModel(params, doc["layout"], doc.get("activation", "tanh"), doc.get("config", {}), doc.get("history", []))
    if model.n_features != feature_length(model.layout):
        raise LayoutError("model file layout does not match its input layer")
    return model
