from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from hyperlab.adapters import ParamSlot
from hyperlab.model import Model
from hyperlab.utils import (
    ConfigError,
    FloatArray,
    NumericError,
    TrainingAborted,
    sha256_array,
)

SCHEDULES = ("constant", "cosine")
LOSSES = ("mse", "xent")


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # decay a, b of diagonal-scaling adapters towards 1 instead of towards 0
    decay_to_identity: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"AdamW betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("AdamW eps must be positive and weight_decay non-negative")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    lr: float = 3e-3
    schedule: str = "cosine"
    warmup_steps: int = 10
    max_grad_norm: float = 1.0
    batch_size: int = 32
    epochs: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be non-negative, got {self.warmup_steps}")
        if not self.max_grad_norm > 0:
            raise ConfigError(f"max_grad_norm must be positive, got {self.max_grad_norm}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")

    def total_steps(self, n_examples: int) -> int:
        return self.epochs * math.ceil(n_examples / self.batch_size)

    def check_steps(self, total_steps: int) -> None:
        if total_steps > 0 and self.warmup_steps > total_steps:
            raise ConfigError(
                f"warmup_steps ({self.warmup_steps}) exceeds the {total_steps} optimizer steps"
            )


# published regimens, scaled only in batch size
_TRAIN_PRESETS: dict[str, dict[str, Any]] = {
    "glue": dict(lr=3e-3, schedule="constant", warmup_steps=10, batch_size=128, epochs=10),
    "arithmetic": dict(
        lr=3e-3, schedule="cosine", warmup_steps=100, max_grad_norm=1.0, batch_size=256, epochs=3
    ),
    "commonsense": dict(
        lr=3e-3, schedule="cosine", warmup_steps=100, max_grad_norm=1.0, batch_size=128, epochs=2
    ),
}

# learning rates by adapter method for the published regimens
PRESET_LRS = {"hyper": 3e-3, "lora": 1e-4, "full": 1e-4}


def train_config_preset(name: str, **overrides: Any) -> TrainConfig:
    try:
        base = _TRAIN_PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown train preset {name!r}, choose from {sorted(_TRAIN_PRESETS)}"
        ) from None
    return TrainConfig(**{**base, **overrides})


def lr_at(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``config.lr``, then constant or cosine decay to zero at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = config.warmup_steps
    if step < warmup:
        return config.lr * step / warmup
    if config.schedule == "constant" or total_steps == warmup:
        return config.lr
    progress = (step - warmup) / (total_steps - warmup)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: list[FloatArray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_global_norm(grads: list[FloatArray], max_norm: float) -> list[FloatArray]:
    if not max_norm > 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


@dataclass
class AdamWState:
    step: int
    m: list[FloatArray]
    v: list[FloatArray]

    @classmethod
    def for_params(cls, params: list[ParamSlot]) -> AdamWState:
        return cls(
            0,
            [np.zeros_like(p.value) for p in params],
            [np.zeros_like(p.value) for p in params],
        )


def adamw_step(
    state: AdamWState,
    params: list[ParamSlot],
    grads: list[FloatArray],
    lr_t: float,
    config: AdamWConfig,
) -> None:
    """One AdamW update, in place, with decoupled weight decay on trainable slots only."""
    assert len(params) == len(grads) == len(state.m) == len(state.v)
    state.step += 1
    t = state.step
    correction1 = 1.0 - config.beta1**t
    correction2 = 1.0 - config.beta2**t
    for slot, g, m, v in zip(params, grads, state.m, state.v):
        assert slot.value.shape == g.shape == m.shape
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        if config.weight_decay:
            anchor = slot.anchor if config.decay_to_identity else 0.0
            slot.value[...] -= lr_t * config.weight_decay * (slot.value - anchor)
        m_hat = m / correction1
        v_hat = v / correction2
        slot.value[...] -= lr_t * m_hat / (np.sqrt(v_hat) + config.eps)


# ==============================
# data and losses
# ==============================


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: FloatArray
    targets: FloatArray
    loss: str = "mse"

    def __post_init__(self) -> None:
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if len(self.inputs) != len(self.targets):
            raise ConfigError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.inputs)

    def take(self, idx: Any) -> Dataset:
        return Dataset(self.inputs[idx], self.targets[idx], self.loss)


def mse_loss(pred: FloatArray, target: FloatArray) -> tuple[float, FloatArray]:
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cross_entropy(logits: FloatArray, targets: FloatArray) -> tuple[float, FloatArray]:
    flat = np.asarray(targets, dtype=np.intp).reshape(-1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(flat))
    loss = -float(np.mean(log_probs[rows, flat]))
    grad = np.exp(log_probs)
    grad[rows, flat] -= 1.0
    return loss, grad / len(flat)


def loss_fn(kind: str) -> Callable[[FloatArray, FloatArray], tuple[float, FloatArray]]:
    return mse_loss if kind == "mse" else cross_entropy


@dataclass(frozen=True)
class Evaluation:
    loss: float
    accuracy: float | None

    @property
    def metric(self) -> float:
        """Token accuracy for sequence tasks, MSE for regression."""
        return self.accuracy if self.accuracy is not None else self.loss


def evaluate(model: Model, data: Dataset) -> Evaluation:
    out = model.predict(data.inputs)
    loss, _ = loss_fn(data.loss)(out, data.targets)
    accuracy = None
    if data.loss == "xent":
        accuracy = float(np.mean(out.argmax(axis=1) == np.asarray(data.targets).reshape(-1)))
    return Evaluation(loss, accuracy)


# ==============================
# training loop
# ==============================


@dataclass(eq=False)
class TrainResult:
    config: TrainConfig
    loss_curve: list[float]
    lr_curve: list[float]
    final_params: dict[str, FloatArray]
    wallclock: float
    train_eval: Evaluation
    eval: Evaluation | None
    frozen_checksums: dict[str, str]
    param_checksums: dict[str, str]

    @property
    def final_metric(self) -> float:
        return (self.eval or self.train_eval).metric

    def checksums(self) -> dict[str, str]:
        return {**self.frozen_checksums, **self.param_checksums}


def tensor_checksums(tensors: dict[str, FloatArray]) -> dict[str, str]:
    return {name: sha256_array(value) for name, value in tensors.items()}


def train(
    model: Model,
    data: Dataset,
    config: TrainConfig,
    *,
    eval_data: Dataset | None = None,
) -> TrainResult:
    """Train ``model``'s trainable slots in place; everything else stays bitwise unchanged."""
    total = config.total_steps(len(data))
    config.check_steps(total)
    start_t = time.perf_counter()
    frozen_before = tensor_checksums(model.frozen_tensors())

    named = model.parameters()
    params = [slot for _, slot in named]
    state = AdamWState.for_params(params)
    rng = np.random.default_rng(config.seed)
    compute = loss_fn(data.loss)
    loss_curve: list[float] = []
    lr_curve: list[float] = []

    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(data))
        for begin in range(0, len(data), config.batch_size):
            batch = data.take(order[begin : begin + config.batch_size])
            try:
                out, cache = model.forward(batch.inputs, dropout=(config.seed, step))
            except NumericError as e:
                raise TrainingAborted(
                    f"non-finite activations at step {step}: {e}", step=step, loss_curve=loss_curve
                ) from e
            loss, g_out = compute(out, batch.targets)
            if not math.isfinite(loss):
                raise TrainingAborted(
                    f"loss became {loss} at step {step}", step=step, loss_curve=loss_curve
                )
            lr_t = lr_at(step, config, total)
            if params:
                grads = clip_global_norm(model.backward(cache, g_out), config.max_grad_norm)
                adamw_step(state, params, grads, lr_t, config.optimizer)
            loss_curve.append(loss)
            lr_curve.append(lr_t)
            step += 1

    frozen_after = tensor_checksums(model.frozen_tensors())
    assert frozen_before == frozen_after, "frozen weights changed during training"
    final_params = {name: np.array(slot.value) for name, slot in named}
    return TrainResult(
        config=config,
        loss_curve=loss_curve,
        lr_curve=lr_curve,
        final_params=final_params,
        wallclock=time.perf_counter() - start_t,
        train_eval=evaluate(model, data),
        eval=evaluate(model, eval_data) if eval_data is not None else None,
        frozen_checksums=frozen_after,
        param_checksums=tensor_checksums(final_params),
    )


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
