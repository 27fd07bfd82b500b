"""Minimal dense-network substrate with exact reverse-mode gradients.

Fixed topology only (stacks of Linear -> ReLU -> Dropout blocks); no
general graphs. Arrays default to float32 with float64 reductions; every
routine is dtype-generic so gradient checks can run in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import DivergenceError, ShapeError, StateError

ACTIVATIONS = ("relu", "identity")


class DenseLayer:
    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: str):
        if activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {activation!r}")
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError("layer weight must be (out, in) with matching bias")
        self.weight = weight
        self.bias = bias
        self.activation = activation


class ForwardCache:
    """Intermediate values retained for the backward pass."""

    def __init__(self, x: np.ndarray):
        self.inputs: list[np.ndarray] = [x]
        self.preacts: list[np.ndarray] = []
        self.dropout_masks: list[np.ndarray | None] = []
        self.output: np.ndarray | None = None


class DenseNet:
    def __init__(self, layers: list[DenseLayer], dropout: float = 0.0):
        if not 0.0 <= dropout < 1.0:
            raise ShapeError("dropout rate must lie in [0, 1)")
        for prev, cur in zip(layers, layers[1:]):
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise ShapeError("consecutive layer dimensions must chain")
        self.layers = layers
        self.dropout = dropout

    @classmethod
    def build(
        cls,
        dims: list[int],
        rng: np.random.Generator,
        dropout: float = 0.0,
        output_activation: str = "identity",
        dtype=np.float32,
    ) -> "DenseNet":
        """He-initialized stack with ReLU hidden layers."""
        layers = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            scale = np.sqrt(2.0 / fan_in)
            weight = (rng.normal(size=(fan_out, fan_in)) * scale).astype(dtype)
            bias = np.zeros(fan_out, dtype=dtype)
            act = "relu" if i < len(dims) - 2 else output_activation
            layers.append(DenseLayer(weight, bias, act))
        return cls(layers, dropout=dropout)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, ForwardCache]:
        """Batch forward pass; dropout masks are drawn only in training mode."""
        x = np.atleast_2d(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"input width {x.shape[1]} != layer width {self.in_dim}")
        if train and self.dropout > 0.0 and rng is None:
            raise StateError("training-mode forward with dropout requires an rng")
        cache = ForwardCache(x)
        out = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            pre = out @ layer.weight.T + layer.bias
            cache.preacts.append(pre)
            out = np.maximum(pre, 0) if layer.activation == "relu" else pre
            mask = None
            if train and self.dropout > 0.0 and i < last:
                keep = 1.0 - self.dropout
                mask = (rng.random(out.shape) < keep).astype(out.dtype) / keep
                out = out * mask
            cache.dropout_masks.append(mask)
            cache.inputs.append(out)
        cache.output = out
        return out, cache

    def backward(
        self, cache: ForwardCache, grad_out: np.ndarray
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Gradients for every (weight, bias) plus the input gradient.

        Dropout masks are reused from the forward pass.
        """
        if cache is None or cache.output is None or len(cache.preacts) != len(self.layers):
            raise StateError("backward requires the cache of a completed forward pass")
        grad = np.atleast_2d(grad_out)
        if grad.shape != cache.output.shape:
            raise ShapeError("upstream gradient shape mismatch")
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)  # type: ignore
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            mask = cache.dropout_masks[i]
            if mask is not None:
                grad = grad * mask
            if layer.activation == "relu":
                grad = grad * (cache.preacts[i] > 0)
            x_in = cache.inputs[i]
            grads[i] = (grad.T @ x_in, grad.sum(axis=0, dtype=np.float64).astype(grad.dtype))
            grad = grad @ layer.weight
        return grads, grad


class AdamState:
    """Adaptive-moment optimizer state; accumulators kept in float64."""

    def __init__(
        self,
        params: list[np.ndarray],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place bias-corrected update; aborts on non-finite gradients."""
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ShapeError("optimizer state does not match parameter list")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter {i}")
        self.step_count += 1
        t = self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g64 = np.asarray(g, dtype=np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g64
            v *= self.beta2
            v += (1 - self.beta2) * g64 * g64
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p -= (self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(p.dtype)


def flatten_params(params: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def set_params(params: list[np.ndarray], flat: np.ndarray) -> None:
    offset = 0
    for p in params:
        n = p.size
        p[...] = flat[offset : offset + n].reshape(p.shape).astype(p.dtype)
        offset += n
