"""Rectifier feedforward networks with hand-written reverse-mode gradients.

Weights for layer ``l`` are stored as one ``(V_l, V_{l-1} + 1)`` matrix whose
last column is the bias. Every matrix may carry leading "stack" axes, so a
single call can evaluate many weight realizations at once; the stack axes
broadcast against the leading axes of the input in the usual matmul way.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

MlpParams = List[np.ndarray]


@dataclass(frozen=True)
class MlpArch:
    """Layer sizes ``(input, hidden..., output)``; ReLU hidden, identity out."""

    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 3:
            raise ValueError(f"need at least one hidden layer, got sizes {sizes}")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def weight_shapes(self) -> list:
        s = self.layer_sizes
        return [(s[l + 1], s[l] + 1) for l in range(self.n_layers)]


def check_params(arch: MlpArch, params: Sequence[np.ndarray]) -> None:
    shapes = arch.weight_shapes()
    if len(params) != len(shapes):
        raise ValueError(f"expected {len(shapes)} weight matrices, got {len(params)}")
    for l, (w, shape) in enumerate(zip(params, shapes)):
        if tuple(w.shape[-2:]) != shape:
            raise ValueError(f"layer {l}: weight shape {w.shape[-2:]} != {shape}")


def zeros_like_params(params: Sequence[np.ndarray]) -> MlpParams:
    return [np.zeros_like(w) for w in params]


def _as_batch(arch: MlpArch, x) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != arch.input_dim:
        raise ValueError(
            f"input has shape {x.shape}; last axis must be {arch.input_dim}"
        )
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _affine(w: np.ndarray, h: np.ndarray) -> np.ndarray:
    return h @ np.swapaxes(w[..., :, :-1], -1, -2) + w[..., None, :, -1]


def forward_cache(arch: MlpArch, params: Sequence[np.ndarray], x) -> tuple:
    """Forward pass keeping layer inputs and pre-activations for backward."""
    check_params(arch, params)
    h, squeeze = _as_batch(arch, x)
    inputs, pre = [], []
    last = arch.n_layers - 1
    for l, w in enumerate(params):
        inputs.append(h)
        a = _affine(w, h)
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite pre-activation in layer {l}")
        pre.append(a)
        h = a if l == last else np.maximum(a, 0.0)
    out = h[0] if squeeze and h.ndim == 2 else h
    return out, (inputs, pre, squeeze)


def forward(arch: MlpArch, params: Sequence[np.ndarray], x) -> np.ndarray:
    """Evaluate the network on a vector or on a batch of rows."""
    return forward_cache(arch, params, x)[0]


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out broadcast axes so the gradient matches the parameter's shape
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward_cache(arch, params, cache, cotangent, param_grads: bool = True):
    inputs, pre, squeeze = cache
    delta = np.asarray(cotangent, dtype=np.float64)
    if squeeze and delta.ndim == 1:
        delta = delta[None, :]
    grads = [None] * arch.n_layers
    for l in range(arch.n_layers - 1, -1, -1):
        w = params[l]
        if l < arch.n_layers - 1:
            delta = delta * (pre[l] > 0.0)
        if not np.all(np.isfinite(delta)):
            raise FloatingPointError(f"non-finite gradient in layer {l}")
        if param_grads:
            gw = np.swapaxes(delta, -1, -2) @ inputs[l]
            gb = delta.sum(axis=-2)[..., None]
            grads[l] = _reduce_to(np.concatenate([gw, gb], axis=-1), w.shape)
        delta = delta @ w[..., :, :-1]
    delta = _reduce_to(delta, inputs[0].shape)
    if squeeze:
        delta = delta[0]
    return grads, delta


def backward(arch: MlpArch, params: Sequence[np.ndarray], x, cotangent) -> tuple:
    """Gradients of ``cotangent . forward(x)`` w.r.t. every weight and input.

    Returns ``(param_grads, input_grad)``; the rectifier derivative at 0 is 0.
    """
    _, cache = forward_cache(arch, params, x)
    return backward_cache(arch, params, cache, cotangent)
