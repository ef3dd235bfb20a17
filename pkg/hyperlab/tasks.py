from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from hyperlab.adapters import FULL, HYPER, AdapterKind, FrozenLinear, LoraConfig
from hyperlab.model import MLPSpec, Model, TransformerSpec, adapter_map_for
from hyperlab.numeric import Matrix, Vector, exact_rank
from hyperlab.training import Dataset, Evaluation, TrainConfig, TrainResult, evaluate, train
from hyperlab.utils import ConfigError, FloatArray, NumericError

TASK_KINDS = ("scaled-teacher", "lowrank-teacher", "seq-copy", "seq-sort")

# independent generator streams per seed
_WEIGHTS, _TRAIN, _EVAL, _TEACHER = 0, 1, 2, 3


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    n: int = 16
    m: int = 16
    r_true: int = 1
    vocab: int = 8
    seq_len: int = 6
    n_train: int = 256
    n_eval: int = 256
    noise_std: float = 0.0
    # log-uniform range of the diagonal teacher scales
    scale_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(
                f"task kind must be one of {TASK_KINDS}, got {self.kind!r}", key="kind"
            )
        if self.noise_std < 0:
            raise ConfigError(
                f"noise_std must be non-negative, got {self.noise_std}", key="noise_std"
            )
        for key in ("n_train", "n_eval"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key=key)
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(
                f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}",
                key="scale_range",
            )
        if self.is_sequence:
            self._check_sequence()
        else:
            self._check_teacher()

    def _check_teacher(self) -> None:
        for key in ("n", "m"):
            if getattr(self, key) < 2:
                raise ConfigError(f"teacher tasks need n, m >= 2, got {self.n}x{self.m}", key=key)
        if self.kind == "lowrank-teacher" and not 0 <= self.r_true < min(self.n, self.m):
            raise ConfigError(
                f"r_true must lie in [0, {min(self.n, self.m)}), got {self.r_true}", key="r_true"
            )

    def _check_sequence(self) -> None:
        if self.vocab < 4:
            raise ConfigError(f"sequence tasks need vocab >= 4, got {self.vocab}", key="vocab")
        if self.seq_len < 2:
            raise ConfigError(
                f"sequence tasks need seq_len >= 2, got {self.seq_len}", key="seq_len"
            )
        total = self.n_train + self.n_eval
        if self.vocab**self.seq_len < total:
            raise ConfigError(
                f"only {self.vocab ** self.seq_len} distinct sequences for {total} examples",
                key="n_train",
            )

    @property
    def is_sequence(self) -> bool:
        return self.kind.startswith("seq-")


@dataclass(eq=False)
class RegressionTask:
    kind: str
    w0: Matrix
    teacher: Matrix
    train: Dataset
    eval: Dataset
    # scaled teacher: diagonal factors; low-rank teacher: update factors
    a_star: Vector | None = None
    b_star: Vector | None = None
    lowrank_b: Matrix | None = None
    lowrank_a: Matrix | None = None

    @property
    def shape(self) -> tuple[int, int]:
        n, m = self.w0.shape
        return n, m

    def base_model(self) -> Model:
        n, m = self.shape
        return Model(MLPSpec((m, n), activation="identity"), {"fc0": FrozenLinear(self.w0)})


@dataclass(eq=False)
class SeqTask:
    kind: str
    vocab: int
    seq_len: int
    train: Dataset
    eval: Dataset


Task = RegressionTask | SeqTask


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _inputs(seed: int, stream: int, count: int, m: int) -> Matrix:
    return _rng(seed, stream).normal(0.0, 1.0, size=(count, m))


def _regression_split(
    teacher: Matrix, seed: int, stream: int, count: int, noise_std: float
) -> Dataset:
    x = _inputs(seed, stream, count, teacher.shape[1])
    y = x @ teacher.T
    if noise_std:
        y = y + _rng(seed, 10 + stream).normal(0.0, noise_std, size=y.shape)
    return Dataset(x, y, "mse")


def _base_weight(n: int, m: int, seed: int) -> Matrix:
    w0 = _rng(seed, _WEIGHTS).normal(0.0, 1.0 / math.sqrt(m), size=(n, m))
    if exact_rank(w0) != min(n, m):
        raise NumericError(f"drew a rank-deficient {n}x{m} base weight for seed {seed}")
    return w0


def make_scaled_teacher(
    n: int,
    m: int,
    seed: int,
    *,
    n_train: int = 256,
    n_eval: int = 256,
    noise_std: float = 0.0,
    scale_range: tuple[float, float] = (0.5, 2.0),
) -> RegressionTask:
    """A teacher diag(a*) @ w0 @ diag(b*) that a diagonal-scaling adapter can match exactly."""
    if n < 2 or m < 2:
        raise ConfigError(f"teacher tasks need n, m >= 2, got {n}x{m}")
    w0 = _base_weight(n, m, seed)
    lo, hi = math.log(scale_range[0]), math.log(scale_range[1])
    rng = _rng(seed, _TEACHER)
    a_star = np.exp(rng.uniform(lo, hi, size=n))
    b_star = np.exp(rng.uniform(lo, hi, size=m))
    teacher = w0 * a_star[:, None] * b_star[None, :]
    return RegressionTask(
        "scaled-teacher",
        w0,
        teacher,
        _regression_split(teacher, seed, _TRAIN, n_train, noise_std),
        _regression_split(teacher, seed, _EVAL, n_eval, noise_std),
        a_star=a_star,
        b_star=b_star,
    )


def make_lowrank_teacher(
    n: int,
    m: int,
    r_true: int,
    seed: int,
    *,
    n_train: int = 256,
    n_eval: int = 256,
    noise_std: float = 0.0,
) -> RegressionTask:
    """A teacher w0 + B* @ A* of rank-r_true update, inside LoRA's reach for r >= r_true."""
    if n < 2 or m < 2:
        raise ConfigError(f"teacher tasks need n, m >= 2, got {n}x{m}")
    if not 0 <= r_true < min(n, m):
        raise ConfigError(f"r_true must lie in [0, {min(n, m)}), got {r_true}")
    w0 = _base_weight(n, m, seed)
    rng = _rng(seed, _TEACHER)
    b_factor = rng.normal(0.0, 1.0, size=(n, r_true))
    a_factor = rng.normal(0.0, 1.0 / math.sqrt(m), size=(r_true, m))
    teacher = w0 + b_factor @ a_factor
    return RegressionTask(
        "lowrank-teacher",
        w0,
        teacher,
        _regression_split(teacher, seed, _TRAIN, n_train, noise_std),
        _regression_split(teacher, seed, _EVAL, n_eval, noise_std),
        lowrank_b=b_factor,
        lowrank_a=a_factor,
    )


def seq_target(kind: str, tokens: Any) -> Any:
    tokens = np.asarray(tokens)
    if kind == "seq-copy":
        return tokens.copy()
    if kind == "seq-sort":
        return np.sort(tokens, axis=-1)
    raise ConfigError(f"not a sequence task: {kind!r}")


def make_seq_task(
    kind: str, vocab: int, seq_len: int, n_examples: int, seed: int, *, n_eval: int | None = None
) -> SeqTask:
    """Uniform random token sequences; train and eval sequences never coincide."""
    if vocab < 4 or seq_len < 2:
        raise ConfigError(
            f"sequence tasks need vocab >= 4 and seq_len >= 2, got {vocab}, {seq_len}"
        )
    if n_eval is None:
        n_eval = max(1, n_examples // 4)
    total = n_examples + n_eval
    if vocab**seq_len < total:
        raise ConfigError(f"only {vocab ** seq_len} distinct sequences for {total} examples")
    rng = _rng(seed, _TRAIN)
    seen: set[bytes] = set()
    rows: list[Any] = []
    while len(rows) < total:
        for row in rng.integers(0, vocab, size=(total, seq_len)):
            key = row.tobytes()
            if key not in seen:
                seen.add(key)
                rows.append(row)
                if len(rows) == total:
                    break
    tokens = np.array(rows, dtype=np.intp)
    targets = seq_target(kind, tokens)
    train_split = Dataset(tokens[:n_examples], targets[:n_examples], "xent")
    eval_split = Dataset(tokens[n_examples:], targets[n_examples:], "xent")
    return SeqTask(kind, vocab, seq_len, train_split, eval_split)


def build_task(spec: TaskSpec, seed: int) -> Task:
    if spec.kind == "scaled-teacher":
        return make_scaled_teacher(
            spec.n,
            spec.m,
            seed,
            n_train=spec.n_train,
            n_eval=spec.n_eval,
            noise_std=spec.noise_std,
            scale_range=spec.scale_range,
        )
    if spec.kind == "lowrank-teacher":
        return make_lowrank_teacher(
            spec.n,
            spec.m,
            spec.r_true,
            seed,
            n_train=spec.n_train,
            n_eval=spec.n_eval,
            noise_std=spec.noise_std,
        )
    return make_seq_task(
        spec.kind, spec.vocab, spec.seq_len, spec.n_train, seed, n_eval=spec.n_eval
    )


# ==============================
# oracles
# ==============================


def lowrank_oracle_mse(task: RegressionTask, rank: int, data: Dataset | None = None) -> float:
    """Best MSE any rank-``rank`` update of w0 can reach on ``data`` (train split by default).

    Reduced-rank regression: the least-squares update is truncated in the metric of the input
    covariance, so the optimum is the least-squares residual plus the Eckart-Young tail.
    """
    data = data or task.train
    x, y = data.inputs, data.targets
    count, m = x.shape
    if count < m:
        raise ConfigError(f"need at least {m} examples for the oracle, got {count}")
    residual = y - x @ task.w0.T
    delta_ls = np.linalg.lstsq(x, residual, rcond=None)[0].T
    ls_error = float(np.sum((residual - x @ delta_ls.T) ** 2))
    chol = np.linalg.cholesky(x.T @ x)
    sigma = np.linalg.svd(delta_ls @ chol, compute_uv=False)
    tail = float(np.sum(sigma[rank:] ** 2))
    return (ls_error + tail) / y.size


def _hyper_mse(w0: Matrix, a: Vector, b: Vector, x: Matrix, y: Matrix) -> float:
    pred = x @ (w0 * a[:, None] * b[None, :]).T
    return float(np.mean((pred - y) ** 2))


def hyper_oracle_mse(
    task: RegressionTask,
    *,
    data: Dataset | None = None,
    restarts: int = 4,
    iterations: int = 300,
    seed: int = 0,
) -> tuple[float, Vector, Vector]:
    """Alternating least squares over (a, b); returns the best MSE over restarts and its a, b.

    Restart 0 starts from the identity, the rest from log-uniform scales in [0.5, 2].
    """
    data = data or task.train
    x, y = data.inputs, data.targets
    w0 = task.w0
    n, m = w0.shape
    gram = x.T @ x
    rng = np.random.default_rng([seed, 0xA15])
    best: tuple[float, Vector, Vector] | None = None
    for restart in range(restarts):
        if restart == 0:
            a, b = np.ones(n), np.ones(m)
        else:
            a = np.exp(rng.uniform(math.log(0.5), math.log(2.0), size=n))
            b = np.exp(rng.uniform(math.log(0.5), math.log(2.0), size=m))
        for _ in range(iterations):
            z = x @ (w0 * b[None, :]).T
            denom = np.sum(z * z, axis=0)
            a = np.where(denom > 0, np.sum(z * y, axis=0) / np.where(denom > 0, denom, 1.0), a)
            aw = w0 * a[:, None]
            normal = gram * (aw.T @ aw)
            rhs = np.sum(x * (y @ aw), axis=0)
            b = np.linalg.lstsq(normal, rhs, rcond=None)[0]
        mse = _hyper_mse(w0, a, b, x, y)
        if best is None or mse < best[0]:
            best = (mse, a, b)
    assert best is not None
    return best


# ==============================
# pretraining dependence
# ==============================


@dataclass(eq=False)
class PairedResult:
    pretrain: TrainResult
    pretrained: TrainResult
    random_init: TrainResult
    # evaluation of the adapted pretrained model before its first step
    pretrained_start: Evaluation
    random_start: Evaluation


def _dims(task: Task) -> tuple[int, ...]:
    if isinstance(task, SeqTask):
        return task.vocab, task.seq_len
    return task.shape


def pretrain_model(
    arch: TransformerSpec | MLPSpec, task: Task, config: TrainConfig, seed: int
) -> tuple[Model, TrainResult]:
    """Train every linear layer and the embeddings of a fresh model, then freeze it."""
    everything = {name: FULL for name in arch.layer_shapes()}
    model = Model.init(arch, seed).adapt(everything, train_extras=True, seed=seed)
    result = train(model, task.train, config, eval_data=task.eval)
    return model.merged(), result


def pretrain_then_adapt(
    arch: TransformerSpec | MLPSpec,
    pretrain_task: Task,
    adapt_task: Task,
    pretrain_config: TrainConfig,
    adapt_config: TrainConfig,
    *,
    kind: AdapterKind = HYPER,
    lora: LoraConfig = LoraConfig(),
    targets: tuple[str, ...] | None = None,
    seed: int = 0,
) -> PairedResult:
    """Adapt a pretrained model and a random-init model of the same architecture alike.

    Pretraining trains every linear layer and the embeddings; adaptation trains only the
    adapters on the targeted layers. Both runs share the adaptation config.
    """
    if _dims(pretrain_task) != _dims(adapt_task):
        raise ConfigError(
            f"pretraining task dimensions {_dims(pretrain_task)} differ from "
            f"adaptation task dimensions {_dims(adapt_task)}"
        )
    pretrained, pretrain_result = pretrain_model(arch, pretrain_task, pretrain_config, seed)

    adapter_map = adapter_map_for(arch, kind, targets)
    adapted = pretrained.adapt(adapter_map, lora=lora, seed=seed)
    pretrained_start = evaluate(adapted, adapt_task.train)
    adapted_result = train(adapted, adapt_task.train, adapt_config, eval_data=adapt_task.eval)

    scratch = Model.init(arch, seed).adapt(adapter_map, lora=lora, seed=seed)
    random_start = evaluate(scratch, adapt_task.train)
    scratch_result = train(scratch, adapt_task.train, adapt_config, eval_data=adapt_task.eval)
    return PairedResult(
        pretrain_result, adapted_result, scratch_result, pretrained_start, random_start
    )


# ==============================
# persistence
# ==============================


def _dataset_rows(data: Dataset) -> Iterator[dict[str, Any]]:
    if data.loss == "xent":
        for tokens, target in zip(data.inputs, data.targets):
            yield {"tokens": [int(t) for t in tokens], "target": [int(t) for t in target]}
    else:
        for x, y in zip(data.inputs, data.targets):
            yield {"x": [float(v) for v in x], "y": [float(v) for v in y]}


def write_jsonl(data: Dataset, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in _dataset_rows(data):
            f.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_jsonl(path: Path) -> Dataset:
    inputs: list[Any] = []
    targets: list[Any] = []
    loss = "mse"
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{lineno}: {e.msg}") from e
            if "tokens" in row:
                loss = "xent"
                inputs.append(row["tokens"])
                targets.append(row["target"])
            else:
                inputs.append(row["x"])
                targets.append(row["y"])
    dtype: Any = np.intp if loss == "xent" else np.float64
    arr_in: FloatArray = np.array(inputs, dtype=dtype)
    arr_out: FloatArray = np.array(targets, dtype=dtype)
    return Dataset(arr_in, arr_out, loss)
