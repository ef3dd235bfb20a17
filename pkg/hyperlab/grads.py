"""Reverse-mode gradients for the adapter layers.

Every rule takes the layer input ``x`` (batch x m) and the upstream gradient ``g_y``
(batch x n) and returns the gradients of the layer's trainable slots, in the order of
``trainable_params()``, together with the gradient to pass further back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hyperlab.adapters import (
    AdapterLinear,
    DropoutKey,
    FrozenLinear,
    FullLinear,
    HyperAdaptLinear,
    LoRALinear,
)
from hyperlab.numeric import Matrix, matmul
from hyperlab.utils import DimensionError, FloatArray


@dataclass(frozen=True, eq=False)
class GradientBundle:
    params: list[FloatArray]
    x: Matrix


def _check(layer: AdapterLinear, x: Matrix, g_y: Matrix) -> None:
    n, m = layer.shape
    if x.ndim != 2 or g_y.ndim != 2 or x.shape[1] != m or g_y.shape[1] != n:
        raise DimensionError(
            f"gradient of a {n}x{m} layer needs x: batch x {m} and g_y: batch x {n}, "
            f"got {x.shape} and {g_y.shape}"
        )
    if x.shape[0] != g_y.shape[0]:
        raise DimensionError(f"batch mismatch: {x.shape[0]} inputs, {g_y.shape[0]} gradients")


def _bias_grad(layer: AdapterLinear, g_y: Matrix) -> list[FloatArray]:
    return [g_y.sum(axis=0)] if layer.train_bias else []


def grad_hyper(layer: HyperAdaptLinear, x: Matrix, g_y: Matrix) -> GradientBundle:
    _check(layer, x, g_y)
    g_w = matmul(g_y.T, x)
    scaled = g_w * layer.w0
    g_a = np.sum(scaled * layer.b[None, :], axis=1)
    g_b = np.sum(scaled * layer.a[:, None], axis=0)
    g_x = matmul(g_y, layer.effective_weight())
    return GradientBundle([g_a, g_b, *_bias_grad(layer, g_y)], g_x)


def grad_lora(
    layer: LoRALinear, x: Matrix, g_y: Matrix, dropout_key: DropoutKey | None = None
) -> GradientBundle:
    _check(layer, x, g_y)
    mask = layer.mask(dropout_key, x.shape)
    x_in = x if mask is None else x * mask
    hidden = matmul(x_in, layer.A.T)
    g_b = layer.scaling * matmul(g_y.T, hidden)
    g_hidden = layer.scaling * matmul(g_y, layer.B)
    g_a = matmul(g_hidden.T, x_in)
    g_x_in = matmul(g_hidden, layer.A)
    if mask is not None:
        g_x_in = g_x_in * mask
    g_x = matmul(g_y, layer.w0) + g_x_in
    return GradientBundle([g_b, g_a, *_bias_grad(layer, g_y)], g_x)


def grad_full(layer: FullLinear, x: Matrix, g_y: Matrix) -> GradientBundle:
    _check(layer, x, g_y)
    g_w = matmul(g_y.T, x)
    return GradientBundle([g_w, *_bias_grad(layer, g_y)], matmul(g_y, layer.w))


def grad_frozen(layer: FrozenLinear, x: Matrix, g_y: Matrix) -> GradientBundle:
    _check(layer, x, g_y)
    return GradientBundle([], matmul(g_y, layer.w0))


def layer_grad(
    layer: AdapterLinear, x: Matrix, g_y: Matrix, dropout_key: DropoutKey | None = None
) -> GradientBundle:
    if isinstance(layer, HyperAdaptLinear):
        return grad_hyper(layer, x, g_y)
    if isinstance(layer, LoRALinear):
        return grad_lora(layer, x, g_y, dropout_key)
    if isinstance(layer, FullLinear):
        return grad_full(layer, x, g_y)
    if isinstance(layer, FrozenLinear):
        return grad_frozen(layer, x, g_y)
    raise TypeError(f"no gradient rule for {type(layer).__name__}")
