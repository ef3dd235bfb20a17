from __future__ import annotations

import numpy as np
import pytest
from conftest import perturb, random_inputs, random_mlp, random_transformer

from hyperlab.adapters import (
    FROZEN,
    FULL,
    HYPER,
    AdapterKind,
    FrozenLinear,
    FullLinear,
    HyperAdaptLinear,
    LoraConfig,
    LoRALinear,
    Method,
    dropout_mask,
    expected_param_count,
    rank_bound,
    verify_rank_bound,
    wrap,
)
from hyperlab.model import Model, adapter_map_for
from hyperlab.numeric import relative_error
from hyperlab.utils import ConfigError, DimensionError


@pytest.mark.parametrize(
    "text, expected",
    [
        ("hyper", HYPER),
        ("Full", FULL),
        ("frozen", FROZEN),
        ("lora:8", AdapterKind.lora(8)),
        ("lora(8)", AdapterKind.lora(8)),
        (" lora : 1 ", AdapterKind.lora(1)),
    ],
)
def test_parse_adapter_kind(text: str, expected: AdapterKind) -> None:
    kind = AdapterKind.parse(text)
    assert kind == expected
    assert AdapterKind.parse(str(kind)) == kind


@pytest.mark.parametrize("text", ["lora", "lora:0", "hyper:3", "adapter", ""])
def test_parse_adapter_kind_rejects(text: str) -> None:
    with pytest.raises(ConfigError):
        AdapterKind.parse(text)


def test_kind_str() -> None:
    assert str(AdapterKind.lora(4)) == "lora(4)"
    assert str(HYPER) == "hyper"
    assert f"{Method.LORA}" == "lora"


@pytest.mark.parametrize("method", ["frozen", "full", "hyper", "lora:1", "lora:4", "lora:32"])
def test_param_counts_match_closed_form(method: str) -> None:
    kind = AdapterKind.parse(method)
    for n in range(1, 65):
        for m in range(1, 65):
            layer = wrap(np.ones((n, m)), None, kind)
            expected = {
                Method.FROZEN: 0,
                Method.FULL: n * m,
                Method.HYPER: n + m,
                Method.LORA: (kind.rank or 0) * (n + m),
            }[kind.method]
            assert layer.param_count() == expected_param_count(kind, n, m) == expected


@pytest.mark.parametrize("r", [1, 2, 8, 32])
def test_lora_to_hyper_ratio_is_rank_for_square(r: int) -> None:
    for n in range(1, 65):
        lora = expected_param_count(AdapterKind.lora(r), n, n)
        hyper = expected_param_count(HYPER, n, n)
        assert lora == r * hyper


def test_bias_counts() -> None:
    bias = np.zeros(3)
    assert HyperAdaptLinear(np.ones((3, 4)), bias, train_bias=True).param_count() == 3 + 4 + 3
    assert expected_param_count(HYPER, 3, 4, train_bias=True) == 10
    assert expected_param_count(FROZEN, 3, 4, train_bias=True) == 0
    with pytest.raises(ConfigError):
        HyperAdaptLinear(np.ones((3, 4)), None, train_bias=True)


def test_identity_initialization() -> None:
    w0 = np.arange(12.0).reshape(3, 4)
    hyper = HyperAdaptLinear(w0)
    assert np.array_equal(hyper.a, np.ones(3)) and np.array_equal(hyper.b, np.ones(4))
    assert np.array_equal(hyper.effective_weight(), w0)
    lora = LoRALinear(w0, rank=2, rng=np.random.default_rng(0))
    assert np.array_equal(lora.B, np.zeros((3, 2)))
    assert lora.alpha == 4.0 and lora.scaling == 2.0
    assert np.array_equal(lora.effective_weight(), w0)
    assert np.array_equal(FullLinear(w0).effective_weight(), w0)


def test_lora_init_scale() -> None:
    lora = LoRALinear(np.zeros((4, 4000)), rank=4, rng=np.random.default_rng(0))
    assert lora.A.std() == pytest.approx(0.5, rel=0.02)


def test_frozen_weight_is_read_only() -> None:
    layer = HyperAdaptLinear(np.ones((2, 2)))
    with pytest.raises(ValueError):
        layer.w0[0, 0] = 3.0
    assert [slot.anchor for slot in layer.trainable_params()] == [1.0, 1.0]
    assert FrozenLinear(np.ones((2, 2))).trainable_params() == []


def test_forward_shape_errors() -> None:
    layer = HyperAdaptLinear(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        layer.forward(np.ones((4, 2)))
    with pytest.raises(DimensionError):
        HyperAdaptLinear(np.ones(3))


def test_hyper_forward_is_scaled_matmul(rng: np.random.Generator) -> None:
    w0 = rng.normal(size=(4, 5))
    layer = HyperAdaptLinear(w0)
    layer.a[:] = rng.uniform(0.5, 2.0, size=4)
    layer.b[:] = rng.uniform(0.5, 2.0, size=5)
    x = rng.normal(size=(6, 5))
    expected = x @ (np.diag(layer.a) @ w0 @ np.diag(layer.b)).T
    np.testing.assert_allclose(layer.forward(x), expected, rtol=1e-13)


def test_dropout_mask() -> None:
    mask = dropout_mask((3, 7, 1), (200, 50), 0.25)
    assert np.array_equal(mask, dropout_mask((3, 7, 1), (200, 50), 0.25))
    assert not np.array_equal(mask, dropout_mask((3, 8, 1), (200, 50), 0.25))
    assert set(np.unique(mask)) <= {0.0, 1.0 / 0.75}
    assert mask.mean() == pytest.approx(1.0, abs=0.03)


def test_lora_dropout_only_touches_adapter_path(rng: np.random.Generator) -> None:
    w0 = rng.normal(size=(3, 4))
    layer = LoRALinear(w0, rank=2, dropout=0.5, rng=rng)
    x = rng.normal(size=(5, 4))
    # with B == 0 the adapter path contributes nothing, dropout or not
    assert np.array_equal(layer.forward(x, (0, 0, 0)), layer.forward(x))
    layer.B[:] = rng.normal(size=(3, 2))
    assert not np.allclose(layer.forward(x, (0, 0, 0)), layer.forward(x))
    with pytest.raises(ConfigError):
        LoraConfig(dropout=1.0)


@pytest.mark.parametrize("seed", range(50))
def test_adapted_forward_equals_frozen_at_init(seed: int) -> None:
    rng = np.random.default_rng(seed)
    arch = random_transformer(rng) if seed % 2 else random_mlp(rng)
    base = Model.init(arch, seed)
    inputs = random_inputs(rng, arch, 5)
    expected = base.predict(inputs)
    for kind in (HYPER, AdapterKind.lora(int(rng.integers(1, 4))), FULL):
        adapted = base.adapt(adapter_map_for(arch, kind), seed=seed)
        assert np.array_equal(adapted.predict(inputs), expected)


@pytest.mark.parametrize("seed", range(20))
def test_merge_matches_adapter_forward(seed: int) -> None:
    rng = np.random.default_rng(100 + seed)
    arch = random_transformer(rng) if seed % 2 else random_mlp(rng)
    base = Model.init(arch, seed)
    inputs = random_inputs(rng, arch, 100)
    for kind in (HYPER, AdapterKind.lora(2), FULL):
        adapted = base.adapt(adapter_map_for(arch, kind), seed=seed)
        perturb(adapted, rng)
        merged = adapted.merged()
        assert merged.parameter_count() == 0
        assert relative_error(merged.predict(inputs), adapted.predict(inputs)) < 1e-12


def test_rank_bound_diagonal_case() -> None:
    result = verify_rank_bound(np.eye(4), np.array([2.0, 1.0, 1.0, 1.0]), np.ones(4))
    assert (result.rank_dw, result.rank_w0, result.bound) == (1, 4, 4)
    assert result.holds
    assert rank_bound(1, 5, 7) == 2
    assert rank_bound(5, 3, 7) == 3


@pytest.mark.slow
def test_rank_bound_randomized() -> None:
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n, m = (int(v) for v in rng.integers(2, 49, size=2))
        r = int(rng.integers(1, min(n, m) + 1))
        u, _ = np.linalg.qr(rng.normal(size=(n, r)))
        v, _ = np.linalg.qr(rng.normal(size=(m, r)))
        w0 = (u * rng.uniform(0.5, 2.0, size=r)) @ v.T
        a = rng.normal(size=n)
        b = rng.normal(size=m)
        result = verify_rank_bound(w0, a, b)
        assert result.rank_w0 == r
        assert result.holds, (n, m, r, result)


def test_hyper_delta_is_elementwise_scaled_base(rng: np.random.Generator) -> None:
    w0 = rng.normal(size=(5, 4))
    layer = HyperAdaptLinear(w0)
    layer.a[:] = rng.uniform(0.5, 2.0, size=5)
    layer.b[:] = rng.uniform(0.5, 2.0, size=4)
    expected = (np.outer(layer.a, layer.b) - 1.0) * w0
    assert relative_error(layer.delta_weight(), expected) < 1e-12


def test_delta_is_zero_at_init(rng: np.random.Generator) -> None:
    w0 = rng.normal(size=(6, 3))
    for layer in (HyperAdaptLinear(w0), LoRALinear(w0, rank=2, rng=rng), FullLinear(w0)):
        assert np.array_equal(layer.delta_weight(), np.zeros((6, 3)))
