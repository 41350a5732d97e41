"""Small numpy network substrate: dense layers, dropout, losses, Adam.

Networks operate on row batches ``(n, features)`` in float64.  Every layer
caches what its backward pass needs during ``forward``; gradients are
stored on the layer and collected by :meth:`Network.gradients`.

Checkpoint format (JSON, ``format_version`` 1)::

    {"format": "rlstop-checkpoint", "format_version": 1,
     "meta": {...},
     "networks": {"<name>": {"layers": [
         {"type": "standardize", "mean": [...], "scale": [...]},
         {"type": "dense", "shape": [n_in, n_out], "weights": [...], "bias": [...]},
         {"type": "relu"},
         {"type": "dropout", "rate": 0.2}, ...]}}}

``weights`` is the row-major flattening of the ``(n_in, n_out)`` matrix.
Floats are written with ``repr`` precision, so a load reproduces the
parameters bit for bit.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

CHECKPOINT_FORMAT = "rlstop-checkpoint"
CHECKPOINT_VERSION = 1


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: Optional[np.random.Generator] = None):
        if rng is None:
            self.W = np.zeros((n_in, n_out))
        else:
            # He-style fan-in uniform init
            bound = np.sqrt(6.0 / n_in)
            self.W = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x = None

    @property
    def shape(self):
        return self.W.shape

    def params(self):
        return [self.W, self.b]

    def grads(self):
        return [self.dW, self.db]

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.W + self.b

    def backward(self, g):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self.dW[...] = self._x.T @ g
        self.db[...] = g.sum(axis=0)
        return g @ self.W.T


class ReLU:
    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x, train=False, rng=None):
        out = np.maximum(x, 0.0)
        self._mask = out > 0
        return out

    def backward(self, g):
        return g * self._mask


class Dropout:
    """Inverted dropout: active only in train mode, no rescale at eval."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self._mask = None

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = rng.random(x.shape, dtype=np.float32) >= self.rate
        self._mask = keep * (1.0 / (1.0 - self.rate))
        return x * self._mask

    def backward(self, g):
        return g if self._mask is None else g * self._mask


class Standardize:
    """Fixed affine input scaler ``(x - mean) / scale``; not trained."""

    def __init__(self, mean, scale):
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        if np.any(self.scale <= 0):
            raise ValueError("scale must be positive")

    @classmethod
    def fit(cls, x: np.ndarray, floor: float = 1e-3):
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), floor))

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x, train=False, rng=None):
        return (x - self.mean) / self.scale

    def backward(self, g):
        return g / self.scale


class Network:
    """A chain of layers with train/eval mode."""

    def __init__(self, layers: Sequence, train: bool = False):
        self.layers = list(layers)
        self.train = train
        widths = [l.shape for l in self.layers if isinstance(l, Dense)]
        for (_, a), (b, _) in zip(widths, widths[1:]):
            if a != b:
                raise ValueError(f"layer widths do not chain: {a} -> {b}")
        self._ran = False

    @property
    def n_in(self) -> int:
        return next(l for l in self.layers if isinstance(l, Dense)).shape[0]

    @property
    def n_out(self) -> int:
        return [l for l in self.layers if isinstance(l, Dense)][-1].shape[1]

    @property
    def dropout_rate(self) -> float:
        return max((l.rate for l in self.layers if isinstance(l, Dropout)), default=0.0)

    def forward(self, x, rng=None):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
        if x.shape[1] != self.n_in:
            raise ValueError(f"input width {x.shape[1]} != {self.n_in}")
        if self.train and self.dropout_rate > 0 and rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        for layer in self.layers:
            x = layer.forward(x, self.train, rng)
        self._ran = True
        self._squeeze = squeeze
        return x[0] if squeeze else x

    __call__ = forward

    def backward(self, g):
        """Back-propagate ``dloss/doutput``; returns ``dloss/dinput``."""
        if not self._ran:
            raise RuntimeError("backward called before forward")
        g = np.asarray(g, dtype=float)
        if self._squeeze:
            g = g[None]
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g[0] if self._squeeze else g

    def parameters(self) -> list[np.ndarray]:
        return [p for l in self.layers for p in l.params()]

    def gradients(self) -> list[np.ndarray]:
        return [g for l in self.layers for g in l.grads()]

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        out = []
        for l in self.layers:
            if isinstance(l, Dense):
                out.append({"type": "dense", "shape": list(l.shape),
                            "weights": l.W.ravel().tolist(), "bias": l.b.tolist()})
            elif isinstance(l, ReLU):
                out.append({"type": "relu"})
            elif isinstance(l, Dropout):
                out.append({"type": "dropout", "rate": l.rate})
            elif isinstance(l, Standardize):
                out.append({"type": "standardize", "mean": l.mean.tolist(), "scale": l.scale.tolist()})
            else:
                raise TypeError(f"cannot serialise {type(l).__name__}")
        return {"layers": out}

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        layers = []
        for spec in d["layers"]:
            kind = spec["type"]
            if kind == "dense":
                n_in, n_out = spec["shape"]
                layer = Dense(n_in, n_out)
                layer.W[...] = np.asarray(spec["weights"], dtype=float).reshape(n_in, n_out)
                layer.b[...] = spec["bias"]
            elif kind == "relu":
                layer = ReLU()
            elif kind == "dropout":
                layer = Dropout(spec["rate"])
            elif kind == "standardize":
                layer = Standardize(spec["mean"], spec["scale"])
            else:
                raise ValueError(f"unknown layer type {kind!r}")
            layers.append(layer)
        return cls(layers)


def mlp(sizes: Sequence[int], rng: np.random.Generator, dropout: float = 0.0,
        scaler: Optional[Standardize] = None, out_scale: float = 1.0) -> Network:
    """Dense-ReLU(-Dropout) stack with a linear output layer.

    ``out_scale`` shrinks the initial output weights.
    """
    layers = [scaler] if scaler is not None else []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(Dense(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(ReLU())
            if dropout > 0:
                layers.append(Dropout(dropout))
    layers[-1].W *= out_scale
    return Network(layers)


# ---------------------------------------------------------------- losses

def huber_loss(pred, target, kappa: float = 1.0):
    """Elementwise Huber loss and its derivative w.r.t. ``pred``."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    e = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    a = np.abs(e)
    loss = np.where(a <= kappa, 0.5 * e * e, kappa * (a - 0.5 * kappa))
    grad = np.clip(e, -kappa, kappa)
    return loss, grad


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis))


def softmax_cross_entropy(logits, target_probs):
    """Row-wise ``-sum m log softmax(z)`` and its gradient ``softmax(z) - m``."""
    logits = np.asarray(logits, dtype=float)
    m = np.asarray(target_probs, dtype=float)
    if np.any(np.abs(m.sum(axis=-1) - 1.0) > 1e-9) or np.any(m < 0):
        raise ValueError("target_probs must be probability vectors")
    logp = log_softmax(logits)
    return -(m * logp).sum(axis=-1), np.exp(logp) - m


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], st: AdamState):
    """Bias-corrected Adam update applied in place; returns ``(params, st)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not st.m:
        st.m = [np.zeros_like(p) for p in params]
        st.v = [np.zeros_like(p) for p in params]
    st.step += 1
    bc1 = 1.0 - st.beta1**st.step
    bc2 = 1.0 - st.beta2**st.step
    for p, g, m, v in zip(params, grads, st.m, st.v):
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        p -= st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)
    return params, st


# ---------------------------------------------------------------- checks

def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, networks: dict, meta: Optional[dict] = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "networks": {name: net.to_dict() for name, net in networks.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
    nets = {name: Network.from_dict(d) for name, d in doc["networks"].items()}
    return nets, doc["meta"]
