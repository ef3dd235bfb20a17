from __future__ import annotations

from typing import Any

import numpy as np
import pytest
from conftest import assert_grads_close, numeric_grad, perturb, random_inputs, random_mlp

from hyperlab.adapters import (
    FULL,
    HYPER,
    AdapterKind,
    AdapterLinear,
    FrozenLinear,
    FullLinear,
    HyperAdaptLinear,
    LoraConfig,
    LoRALinear,
)
from hyperlab.grads import grad_hyper, layer_grad
from hyperlab.model import Model, TransformerSpec, adapter_map_for
from hyperlab.training import cross_entropy, mse_loss
from hyperlab.utils import DimensionError


# nonlinear in the layer output so second-order terms show up in the check
def _layer_loss(out: np.ndarray, target: np.ndarray) -> float:
    return float(np.sum(np.tanh(out) * target))


def _layer_upstream(out: np.ndarray, target: np.ndarray) -> np.ndarray:
    return (1.0 - np.tanh(out) ** 2) * target


def _check_layer(layer: AdapterLinear, rng: np.random.Generator, key: Any = None) -> None:
    n, m = layer.shape
    x = rng.normal(size=(int(rng.integers(1, 5)), m))
    target = rng.normal(size=(x.shape[0], n))

    def loss() -> float:
        return _layer_loss(layer.forward(x, key), target)

    bundle = layer_grad(layer, x, _layer_upstream(layer.forward(x, key), target), key)
    slots = layer.trainable_params()
    numeric = [numeric_grad(loss, slot.value) for slot in slots]
    numeric.append(numeric_grad(loss, x))
    assert_grads_close(numeric, [*bundle.params, bundle.x])


def _shape(rng: np.random.Generator) -> tuple[int, int]:
    n, m = rng.integers(1, 7, size=2)
    return int(n), int(m)


@pytest.mark.parametrize("seed", range(50))
def test_hyper_layer_gradients(seed: int) -> None:
    rng = np.random.default_rng(seed)
    n, m = _shape(rng)
    with_bias = bool(seed % 2)
    bias = rng.normal(size=n) if with_bias else None
    layer = HyperAdaptLinear(rng.normal(size=(n, m)), bias, train_bias=with_bias)
    layer.a[:] = rng.uniform(0.5, 2.0, size=n)
    layer.b[:] = rng.uniform(0.5, 2.0, size=m)
    _check_layer(layer, rng)


@pytest.mark.parametrize("seed", range(50))
def test_lora_layer_gradients(seed: int) -> None:
    rng = np.random.default_rng(1000 + seed)
    n, m = _shape(rng)
    dropout = 0.3 if seed % 3 == 0 else 0.0
    layer = LoRALinear(
        rng.normal(size=(n, m)),
        rank=int(rng.integers(1, 4)),
        alpha=float(rng.uniform(0.5, 4.0)),
        dropout=dropout,
        rng=rng,
    )
    layer.B[:] = rng.normal(size=layer.B.shape)
    _check_layer(layer, rng, key=(seed, 3, 1) if dropout else None)


@pytest.mark.parametrize("seed", range(50))
def test_full_layer_gradients(seed: int) -> None:
    rng = np.random.default_rng(2000 + seed)
    n, m = _shape(rng)
    layer = FullLinear(rng.normal(size=(n, m)), rng.normal(size=n), train_bias=True)
    _check_layer(layer, rng)


def test_frozen_layer_has_no_parameter_gradients(rng: np.random.Generator) -> None:
    layer = FrozenLinear(rng.normal(size=(3, 4)))
    x = rng.normal(size=(2, 4))
    bundle = layer_grad(layer, x, np.ones((2, 3)))
    assert bundle.params == []
    np.testing.assert_allclose(bundle.x, np.ones((2, 3)) @ layer.w0)


def test_gradient_shape_errors() -> None:
    layer = HyperAdaptLinear(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        grad_hyper(layer, np.ones((4, 3)), np.ones((4, 3)))
    with pytest.raises(DimensionError, match="batch mismatch"):
        grad_hyper(layer, np.ones((4, 3)), np.ones((5, 2)))


def _check_model(model: Model, inputs: Any, targets: Any, loss_kind: str, dropout: Any) -> None:
    compute = mse_loss if loss_kind == "mse" else cross_entropy

    def loss() -> float:
        return compute(model.forward(inputs, dropout)[0], targets)[0]

    out, cache = model.forward(inputs, dropout)
    analytic = model.backward(cache, compute(out, targets)[1])
    numeric = [numeric_grad(loss, slot.value) for _, slot in model.parameters()]
    assert_grads_close(numeric, analytic)


@pytest.mark.parametrize("seed", range(50))
def test_mlp_model_gradients(seed: int) -> None:
    rng = np.random.default_rng(3000 + seed)
    arch = random_mlp(rng)
    kind = (HYPER, AdapterKind.lora(2), FULL)[seed % 3]
    model = Model.init(arch, seed).adapt(
        adapter_map_for(arch, kind), train_bias=arch.bias, seed=seed
    )
    perturb(model, rng)
    inputs = random_inputs(rng, arch, 4)
    targets = rng.normal(size=(4, arch.widths[-1]))
    _check_model(model, inputs, targets, "mse", None)


@pytest.mark.parametrize("seed", range(50))
def test_transformer_gradients(seed: int) -> None:
    rng = np.random.default_rng(4000 + seed)
    arch = TransformerSpec(
        vocab=int(rng.integers(4, 7)),
        d_model=int(rng.integers(3, 7)),
        n_layers=int(rng.integers(1, 3)),
        d_ff=int(rng.integers(3, 8)),
        max_seq=int(rng.integers(2, 5)),
    )
    kind = (HYPER, AdapterKind.lora(2), FULL)[seed % 3]
    train_extras = seed % 5 == 0
    model = Model.init(arch, seed).adapt(
        adapter_map_for(arch, kind),
        train_extras=train_extras,
        seed=seed,
    )
    perturb(model, rng, scale=0.2)
    batch = 2
    tokens = rng.integers(0, arch.vocab, size=(batch, arch.max_seq))
    targets = rng.integers(0, arch.vocab, size=(batch, arch.max_seq))
    _check_model(model, tokens, targets, "xent", None)


@pytest.mark.parametrize("seed", range(10))
def test_transformer_gradients_with_lora_dropout(seed: int) -> None:
    rng = np.random.default_rng(5000 + seed)
    arch = TransformerSpec(vocab=5, d_model=4, n_layers=1, d_ff=6, max_seq=3)
    model = Model.init(arch, seed).adapt(
        adapter_map_for(arch, AdapterKind.lora(2)), lora=LoraConfig(dropout=0.25), seed=seed
    )
    perturb(model, rng, scale=0.2)
    tokens = rng.integers(0, 5, size=(3, 3))
    targets = rng.integers(0, 5, size=(3, 3))
    _check_model(model, tokens, targets, "xent", (seed, 7))
