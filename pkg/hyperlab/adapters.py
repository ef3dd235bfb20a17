from __future__ import annotations

import abc
import re
from dataclasses import dataclass
from enum import Enum

import numpy as np

from hyperlab.numeric import (
    Matrix,
    Vector,
    exact_rank,
    matmul,
    scale_rows_cols,
)
from hyperlab.utils import ConfigError, DimensionError, FloatArray


class Method(str, Enum):
    FROZEN = "frozen"
    FULL = "full"
    HYPER = "hyper"
    LORA = "lora"

    # see utils.Style
    def __format__(self, format_spec: str) -> str:
        return self.value


_KIND_RE = re.compile(r"^\s*(frozen|full|hyper|lora)\s*(?:[:(]\s*(\d+)\s*\)?)?\s*$", re.I)


@dataclass(frozen=True, order=True)
class AdapterKind:
    method: Method
    rank: int | None = None

    def __post_init__(self) -> None:
        if self.method is Method.LORA:
            if self.rank is None or self.rank < 1:
                raise ConfigError(f"LoRA needs a positive rank, got {self.rank!r}")
        elif self.rank is not None:
            raise ConfigError(f"{self.method} does not take a rank")

    def __str__(self) -> str:
        if self.method is Method.LORA:
            return f"lora({self.rank})"
        return self.method.value

    @classmethod
    def parse(cls, text: str) -> AdapterKind:
        match = _KIND_RE.match(text)
        if match is None:
            raise ConfigError(f"unknown adapter kind {text!r} (use frozen, full, hyper or lora:R)")
        method = Method(match.group(1).lower())
        rank = int(match.group(2)) if match.group(2) is not None else None
        return cls(method, rank)

    @classmethod
    def lora(cls, rank: int) -> AdapterKind:
        return cls(Method.LORA, rank)


FROZEN = AdapterKind(Method.FROZEN)
FULL = AdapterKind(Method.FULL)
HYPER = AdapterKind(Method.HYPER)


@dataclass(frozen=True)
class LoraConfig:
    # None means alpha = 2 * r
    alpha: float | None = None
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"lora dropout must be in [0, 1), got {self.dropout}")

    def alpha_for(self, rank: int) -> float:
        return float(2 * rank) if self.alpha is None else float(self.alpha)


@dataclass(frozen=True)
class LoraPreset:
    rank: int
    config: LoraConfig


# large-model regimens; desk runs use LoraConfig() unless a config picks one of these
LORA_PRESETS = {
    "lora": LoraPreset(32, LoraConfig(alpha=64.0, dropout=0.05)),
    "lora-r1": LoraPreset(1, LoraConfig(alpha=2.0, dropout=0.05)),
}


def lora_preset(name: str) -> LoraPreset:
    try:
        return LORA_PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown lora preset {name!r}, choose from {sorted(LORA_PRESETS)}"
        ) from None


@dataclass(frozen=True, eq=False)
class ParamSlot:
    name: str
    value: FloatArray
    # weight decay pulls towards this value when decaying to identity
    anchor: float = 0.0


DropoutKey = tuple[int, int, int]


def dropout_mask(key: DropoutKey, shape: tuple[int, ...], p: float) -> FloatArray:
    """Inverted dropout mask drawn from a generator keyed by (seed, step, layer id).

    Backward regenerates the mask from the same key instead of storing it.
    """
    rng = np.random.default_rng([abs(k) for k in key])
    keep = rng.random(shape) >= p
    return keep.astype(np.float64) / (1.0 - p)


def _frozen_copy(arr: FloatArray) -> FloatArray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


class AdapterLinear(abc.ABC):
    kind: AdapterKind

    def __init__(self, w0: Matrix, bias: Vector | None = None, *, train_bias: bool = False):
        if w0.ndim != 2:
            raise DimensionError(f"expected a 2-d weight, got shape {w0.shape}")
        if bias is not None and bias.shape != (w0.shape[0],):
            raise DimensionError(f"bias of shape {bias.shape} does not match {w0.shape[0]} rows")
        if train_bias and bias is None:
            raise ConfigError("train_bias needs a bias vector")
        self.w0 = _frozen_copy(w0)
        self.train_bias = train_bias
        self.bias: Vector | None
        if bias is None:
            self.bias = None
        elif train_bias:
            self.bias = np.array(bias, dtype=np.float64)
        else:
            self.bias = _frozen_copy(bias)

    @property
    def shape(self) -> tuple[int, int]:
        n, m = self.w0.shape
        return n, m

    def __repr__(self) -> str:
        n, m = self.shape
        return f"{type(self).__name__}({n}x{m}, kind={self.kind}, params={self.param_count()})"

    def _check_input(self, x: Matrix) -> None:
        if x.ndim != 2 or x.shape[1] != self.shape[1]:
            raise DimensionError(
                f"input of shape {x.shape} does not match a layer with {self.shape[1]} inputs"
            )

    def _add_bias(self, y: Matrix) -> Matrix:
        if self.bias is not None:
            return y + self.bias[None, :]
        return y

    def _bias_slots(self) -> list[ParamSlot]:
        if self.train_bias:
            assert self.bias is not None
            return [ParamSlot("bias", self.bias)]
        return []

    @abc.abstractmethod
    def effective_weight(self) -> Matrix:
        """The dense weight W' with forward(x) == x @ W'.T + bias."""

    @abc.abstractmethod
    def trainable_params(self) -> list[ParamSlot]: ...

    def forward(self, x: Matrix, dropout_key: DropoutKey | None = None) -> Matrix:
        self._check_input(x)
        return self._add_bias(matmul(x, self.effective_weight().T))

    def delta_weight(self) -> Matrix:
        return self.effective_weight() - self.w0

    def param_count(self) -> int:
        return sum(slot.value.size for slot in self.trainable_params())


class FrozenLinear(AdapterLinear):
    kind = FROZEN

    def __init__(self, w0: Matrix, bias: Vector | None = None):
        super().__init__(w0, bias, train_bias=False)

    def effective_weight(self) -> Matrix:
        return self.w0

    def trainable_params(self) -> list[ParamSlot]:
        return []


class FullLinear(AdapterLinear):
    kind = FULL

    def __init__(self, w0: Matrix, bias: Vector | None = None, *, train_bias: bool = False):
        super().__init__(w0, bias, train_bias=train_bias)
        self.w = np.array(w0, dtype=np.float64)

    def effective_weight(self) -> Matrix:
        return self.w

    def trainable_params(self) -> list[ParamSlot]:
        return [ParamSlot("w", self.w), *self._bias_slots()]


class HyperAdaptLinear(AdapterLinear):
    """W' = diag(a) @ w0 @ diag(b) with a and b stored as vectors, starting at one."""

    kind = HYPER

    def __init__(self, w0: Matrix, bias: Vector | None = None, *, train_bias: bool = False):
        super().__init__(w0, bias, train_bias=train_bias)
        n, m = self.shape
        self.a = np.ones(n, dtype=np.float64)
        self.b = np.ones(m, dtype=np.float64)

    def effective_weight(self) -> Matrix:
        return scale_rows_cols(self.w0, self.a, self.b)

    def trainable_params(self) -> list[ParamSlot]:
        return [
            ParamSlot("a", self.a, anchor=1.0),
            ParamSlot("b", self.b, anchor=1.0),
            *self._bias_slots(),
        ]


class LoRALinear(AdapterLinear):
    """W' = w0 + (alpha / r) * B @ A with B starting at zero."""

    def __init__(
        self,
        w0: Matrix,
        bias: Vector | None = None,
        *,
        rank: int,
        alpha: float | None = None,
        dropout: float = 0.0,
        train_bias: bool = False,
        rng: np.random.Generator | None = None,
    ):
        super().__init__(w0, bias, train_bias=train_bias)
        if rank < 1:
            raise ConfigError(f"LoRA rank must be positive, got {rank}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"lora dropout must be in [0, 1), got {dropout}")
        self.kind = AdapterKind.lora(rank)
        self.rank = rank
        self.alpha = float(2 * rank) if alpha is None else float(alpha)
        self.dropout = dropout
        n, m = self.shape
        if rng is None:
            rng = np.random.default_rng(0)
        self.B = np.zeros((n, rank), dtype=np.float64)
        self.A = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, m))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def mask(self, dropout_key: DropoutKey | None, shape: tuple[int, ...]) -> FloatArray | None:
        if dropout_key is None or self.dropout == 0.0:
            return None
        return dropout_mask(dropout_key, shape, self.dropout)

    def adapter_input(self, x: Matrix, dropout_key: DropoutKey | None) -> Matrix:
        mask = self.mask(dropout_key, x.shape)
        return x if mask is None else x * mask

    def forward(self, x: Matrix, dropout_key: DropoutKey | None = None) -> Matrix:
        self._check_input(x)
        base = matmul(x, self.w0.T)
        hidden = matmul(self.adapter_input(x, dropout_key), self.A.T)
        return self._add_bias(base + self.scaling * matmul(hidden, self.B.T))

    def effective_weight(self) -> Matrix:
        return self.w0 + self.scaling * matmul(self.B, self.A)

    def trainable_params(self) -> list[ParamSlot]:
        return [ParamSlot("B", self.B), ParamSlot("A", self.A), *self._bias_slots()]


def wrap(
    w0: Matrix,
    bias: Vector | None,
    kind: AdapterKind,
    *,
    lora: LoraConfig = LoraConfig(),
    train_bias: bool = False,
    rng: np.random.Generator | None = None,
) -> AdapterLinear:
    if kind.method is Method.FROZEN:
        return FrozenLinear(w0, bias)
    if kind.method is Method.FULL:
        return FullLinear(w0, bias, train_bias=train_bias)
    if kind.method is Method.HYPER:
        return HyperAdaptLinear(w0, bias, train_bias=train_bias)
    if kind.method is Method.LORA:
        assert kind.rank is not None
        return LoRALinear(
            w0,
            bias,
            rank=kind.rank,
            alpha=lora.alpha_for(kind.rank),
            dropout=lora.dropout,
            train_bias=train_bias,
            rng=rng,
        )
    raise ValueError(f"unknown adapter kind {kind}")


def expected_param_count(kind: AdapterKind, n: int, m: int, *, train_bias: bool = False) -> int:
    """Closed-form trainable parameter count for an n x m layer."""
    bias = n if train_bias and kind.method is not Method.FROZEN else 0
    if kind.method is Method.FROZEN:
        return 0
    if kind.method is Method.FULL:
        return n * m + bias
    if kind.method is Method.HYPER:
        return n + m + bias
    assert kind.rank is not None
    return kind.rank * (n + m) + bias


@dataclass(frozen=True)
class RankBound:
    rank_dw: int
    rank_w0: int
    bound: int

    @property
    def holds(self) -> bool:
        return self.rank_dw <= self.bound


def rank_bound(rank_w0: int, n: int, m: int) -> int:
    return min(2 * rank_w0, n, m)


def verify_rank_bound(w0: Matrix, a: Vector, b: Vector) -> RankBound:
    """Check rank(diag(a) w0 diag(b) - w0) <= min(2 rank(w0), n, m)."""
    n, m = w0.shape
    delta = scale_rows_cols(w0, a, b) - w0
    rank_w0 = exact_rank(w0)
    return RankBound(exact_rank(delta), rank_w0, rank_bound(rank_w0, n, m))
