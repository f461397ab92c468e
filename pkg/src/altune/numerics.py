"""Minimal dense-network toolkit: layers, softmax, losses, Adam, gradient checks.

Everything runs in float64 and is deterministic given explicit RNGs. Matrices
are plain numpy arrays (row-major); a network is an explicit list of layers so
that gradients stay simple enough to verify by finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")

LOG_CLAMP = 1e-12  # floor applied to probabilities before log


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # derivative wrt pre-activation z, expressed through z or the output a
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class Layer:
    """One dense layer: out = activation(x @ w + b)."""

    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str = "identity"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.ndim != 1 or self.b.shape[0] != self.w.shape[1]:
            raise ValueError(
                f"layer shapes inconsistent: w {self.w.shape}, b {self.b.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.w).all() and np.isfinite(self.b).all()):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]


class DenseNet:
    """Feed-forward stack of dense layers with explicit backpropagation."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        self.layers = layers

    @classmethod
    def create(
        cls,
        dims: list[int],
        activations: list[str] | str,
        rng: np.random.Generator,
    ) -> "DenseNet":
        """Glorot-uniform initialization: w ~ U(+-sqrt(6/(fan_in+fan_out))), b = 0."""
        if len(dims) < 2:
            raise ValueError("dims must list at least input and output width")
        if isinstance(activations, str):
            activations = [activations] * (len(dims) - 1)
        if len(activations) != len(dims) - 1:
            raise ValueError("one activation per layer required")
        layers = []
        for fan_in, fan_out, act in zip(dims, dims[1:], activations):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def param_count(self) -> int:
        return sum(layer.w.size + layer.b.size for layer in self.layers)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
        return out

    def set_params(self, arrays: list[np.ndarray]) -> None:
        if len(arrays) != 2 * len(self.layers):
            raise ValueError("parameter list length mismatch")
        for i, layer in enumerate(self.layers):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if w.shape != layer.w.shape or b.shape != layer.b.shape:
                raise ValueError(f"parameter shape mismatch in layer {i}")
            layer.w = np.array(w, dtype=np.float64)
            layer.b = np.array(b, dtype=np.float64)

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers]
        )

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(
                f"input width {x.shape[-1]}, expected {self.in_dim}"
            )
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Forward pass for a single input vector."""
        return self.forward_batch(self._check_input(x)[None, :])[0]

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        a = self._check_input(x)
        for layer in self.layers:
            a = _apply_activation(layer.activation, a @ layer.w + layer.b)
        return a

    def forward_cache(self, x: np.ndarray):
        """Forward pass keeping per-layer (input, pre-activation, output) for backprop."""
        a = self._check_input(x)
        cache = []
        for layer in self.layers:
            z = a @ layer.w + layer.b
            out = _apply_activation(layer.activation, z)
            cache.append((a, z, out))
            a = out
        return a, cache

    def backward(self, cache, d_out: np.ndarray):
        """Backpropagate d(loss)/d(output); returns (d(loss)/d(input), grads).

        grads is ordered like params(): [dw0, db0, dw1, db1, ...].
        """
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        delta = np.asarray(d_out, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            a_in, z, out = cache[i]
            delta = delta * _activation_grad(layer.activation, z, out)
            grads[2 * i] = a_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ layer.w.T
        return delta, grads

    def forward_dropout(
        self, x: np.ndarray, rate: float, rng: np.random.Generator
    ) -> np.ndarray:
        """Stochastic forward pass: inverted Bernoulli dropout on hidden activations."""
        if not 0.0 < rate < 1.0:
            raise ValueError("dropout rate must lie in (0, 1)")
        a = self._check_input(x)
        keep = 1.0 - rate
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            a = _apply_activation(layer.activation, a @ layer.w + layer.b)
            if i != last:
                mask = rng.random(a.shape) < keep
                a = a * mask / keep
        return a


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of empty input")
    if not np.isfinite(z).all():
        raise ValueError("softmax requires finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError("label outside [0, class_count)")
    out = np.zeros((labels.shape[0], class_count))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Mean cross-entropy of a batch of probability rows against one-hot rows.

    Probabilities are clamped below at 1e-12 before the log so a confidently
    wrong prediction yields a large finite loss instead of -inf.
    """
    p = np.asarray(predicted, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.ndim != 2 or y.ndim != 2:
        raise ValueError("cross_entropy expects 2-D batches")
    if p.shape != y.shape:
        raise ValueError(
            f"class count mismatch: predicted {p.shape}, truth {y.shape}"
        )
    logp = np.log(np.maximum(p, LOG_CLAMP))
    return float(-(y * logp).sum() / p.shape[0])


@dataclass
class AdamState:
    """Adam accumulators; shapes mirror the parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-4, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
            **kw,
        )


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One in-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state lengths differ")
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient in parameter block {i}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def finite_diff_check(
    loss_and_grad,
    params: list[np.ndarray],
    step: float = 1e-5,
    sample_limit: int = 150,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_and_grad(params) must return (loss, grads) with grads shaped like
    params. When the parameter count exceeds sample_limit, a random subset of
    at least 100 entries is checked. Relative error uses
    |g_analytic - g_numeric| / max(1, |g_numeric|).
    """
    _, grads = loss_and_grad(params)
    entries = [(bi, fi) for bi, p in enumerate(params) for fi in range(p.size)]
    limit = max(100, sample_limit)
    if len(entries) > limit:
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = rng.choice(len(entries), size=limit, replace=False)
        entries = [entries[i] for i in picks]
    worst = 0.0
    for bi, fi in entries:
        block = params[bi]
        original = block.flat[fi]
        block.flat[fi] = original + step
        loss_plus, _ = loss_and_grad(params)
        block.flat[fi] = original - step
        loss_minus, _ = loss_and_grad(params)
        block.flat[fi] = original
        numeric = (loss_plus - loss_minus) / (2.0 * step)
        analytic = grads[bi].flat[fi]
        err = abs(analytic - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("cosine_similarity expects two equal-length vectors")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return float(a @ b / (na * nb))
