"""Small deterministic numpy engine: dense layers, losses, Adam, gradient checks.

Every tensor is a 2-D float64 ``np.ndarray`` (rows = batch).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu")


class ConfigurationError(ValueError):
    """Bad shapes, bad hyperparameters, bad configuration values."""


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class TrainingError(RuntimeError):
    """Numerical failure during optimisation (non-finite loss or gradient)."""


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def split_seed(seed: int, n: int) -> list[np.random.SeedSequence]:
    """Independent child streams of ``seed``; same seed gives the same children."""
    return np.random.SeedSequence(seed).spawn(n)


def _as_2d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ConfigurationError(f"expected a 2-D array, got shape {a.shape}")
    return a


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    grad_weights: np.ndarray | None = field(default=None, repr=False)
    grad_bias: np.ndarray | None = field(default=None, repr=False)
    _input: np.ndarray | None = field(default=None, repr=False)
    _pre: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2 or self.weights.shape[1] != self.bias.shape[0]:
            raise ConfigurationError(
                f"weights {self.weights.shape} inconsistent with bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        """Glorot-uniform weights, zero bias."""
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        return cls(w, np.zeros(out_dim), activation)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_2d(x)
        if x.shape[1] != self.in_dim:
            raise ConfigurationError(f"input has {x.shape[1]} columns, layer expects {self.in_dim}")
        pre = x @ self.weights + self.bias
        self._input, self._pre = x, pre
        if self.activation == "relu":
            return np.maximum(pre, 0.0)
        return pre

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._input is None:
            raise StateError("backward called before forward")
        if self.activation == "relu":
            # subgradient at exactly 0 is 0
            grad_out = grad_out * (self._pre > 0.0)
        self.grad_weights = self._input.T @ grad_out
        self.grad_bias = grad_out.sum(axis=0)
        return grad_out @ self.weights.T


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


class Sequential:
    """A stack of dense layers with a joint parameter namespace."""

    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigurationError(f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @classmethod
    def mlp(cls, sizes: Sequence[int], rng: np.random.Generator, out_activation: str = "identity") -> "Sequential":
        """ReLU on hidden layers, ``out_activation`` on the last one."""
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = out_activation if i == len(sizes) - 2 else "relu"
            layers.append(DenseLayer.init(a, b, act, rng))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.w"] = layer.weights
            out[f"{prefix}{i}.b"] = layer.bias
        return out

    def grads(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.grad_weights is None:
                raise StateError("gradients requested before backward")
            out[f"{prefix}{i}.w"] = layer.grad_weights
            out[f"{prefix}{i}.b"] = layer.grad_bias
        return out

    def zero_state(self) -> None:
        for layer in self.layers:
            layer.grad_weights = layer.grad_bias = None
            layer._input = layer._pre = None


def backward(network: Sequential, upstream_grad: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Parameter gradients and input gradient for the last forward pass."""
    grad_in = network.backward(upstream_grad)
    return network.grads(), grad_in


def huber_loss(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean elementwise Huber loss and its gradient w.r.t. ``pred``."""
    if delta <= 0:
        raise ConfigurationError(f"huber delta must be positive, got {delta}")
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigurationError(f"shape mismatch {pred.shape} vs {target.shape}")
    r = pred - target
    a = np.abs(r)
    quad = a <= delta
    loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.where(quad, r, delta * np.sign(r)) / r.size
    return float(loss.mean()), grad


def triplet_loss(
    anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float
) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Mean over rows of ``max(0, |a-p|^2 - |a-n|^2 + margin)`` plus gradients."""
    if margin <= 0:
        raise ConfigurationError(f"margin must be positive, got {margin}")
    if not (anchor.shape == positive.shape == negative.shape) or anchor.ndim != 2:
        raise ConfigurationError(
            f"triplet shapes differ: {anchor.shape}, {positive.shape}, {negative.shape}"
        )
    n = anchor.shape[0]
    if n == 0:
        z = np.zeros_like(anchor)
        return 0.0, (z, z.copy(), z.copy())
    dp = anchor - positive
    dn = anchor - negative
    raw = (dp * dp).sum(axis=1) - (dn * dn).sum(axis=1) + margin
    active = (raw > 0.0)[:, None]
    scale = 2.0 / n
    ga = np.where(active, scale * (dp - dn), 0.0)
    gp = np.where(active, -scale * dp, 0.0)
    gn = np.where(active, scale * dn, 0.0)
    return float(np.maximum(raw, 0.0).mean()), (ga, gp, gn)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """In-place Adam update of ``params`` with bias correction."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + h
        up = f()
        array[idx] = orig - h
        down = f()
        array[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
