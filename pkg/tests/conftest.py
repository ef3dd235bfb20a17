from __future__ import annotations

from typing import Any, Callable

import numpy as np
import pytest

from hyperlab.model import ACTIVATIONS, MLPSpec, Model, TransformerSpec
from hyperlab.numeric import Matrix


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def low_rank_matrix(rng: np.random.Generator, n: int, m: int, rank: int) -> Matrix:
    return rng.normal(size=(n, rank)) @ rng.normal(size=(rank, m))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        f_plus = f()
        arr[idx] = orig - h
        f_minus = f()
        arr[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def assert_grads_close(numeric: list[np.ndarray], analytic: list[np.ndarray]) -> None:
    assert len(numeric) == len(analytic)
    for num, ana in zip(numeric, analytic):
        assert num.shape == ana.shape
    num_flat = np.concatenate([g.ravel() for g in numeric])
    ana_flat = np.concatenate([g.ravel() for g in analytic])
    scale = max(np.linalg.norm(num_flat), np.linalg.norm(ana_flat))
    assert scale > 0
    assert np.linalg.norm(num_flat - ana_flat) <= 1e-6 * scale


def random_mlp(rng: np.random.Generator) -> MLPSpec:
    depth = int(rng.integers(1, 4))
    widths = tuple(int(w) for w in rng.integers(1, 9, size=depth + 1))
    activation = str(rng.choice(ACTIVATIONS))
    return MLPSpec(widths, activation=activation, bias=bool(rng.integers(2)))


def random_transformer(rng: np.random.Generator) -> TransformerSpec:
    return TransformerSpec(
        vocab=int(rng.integers(4, 8)),
        d_model=int(rng.integers(4, 9)),
        n_layers=int(rng.integers(1, 3)),
        d_ff=int(rng.integers(4, 11)),
        max_seq=int(rng.integers(3, 6)),
    )


def random_inputs(rng: np.random.Generator, arch: MLPSpec | TransformerSpec, batch: int) -> Any:
    if isinstance(arch, MLPSpec):
        return rng.normal(size=(batch, arch.widths[0]))
    return rng.integers(0, arch.vocab, size=(batch, arch.max_seq))


def perturb(model: Model, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Move every trainable slot away from its initial value, in place."""
    for _, slot in model.parameters():
        slot.value[...] += scale * rng.normal(size=slot.value.shape)
