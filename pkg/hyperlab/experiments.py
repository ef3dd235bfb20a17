"""Experiment configs: a strict JSON schema and the built-in experiments.

Every error raised while reading a config names the offending key and the line it sits on.
"""

from __future__ import annotations

import json
import json.decoder
import json.scanner
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterator

from hyperlab.adapters import AdapterKind, LoraConfig, Method, lora_preset
from hyperlab.model import (
    Architecture,
    MLPSpec,
    TransformerSpec,
    arch_from_dict,
    arch_to_dict,
    module_name,
)
from hyperlab.tasks import TaskSpec
from hyperlab.training import PRESET_LRS, AdamWConfig, TrainConfig, train_config_preset, with_seed
from hyperlab.utils import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    arch: Architecture
    # module names to adapt; None adapts every linear layer of an MLP and the
    # attention and feed-forward projections of a transformer
    targets: tuple[str, ...] | None = None
    train_bias: bool = False


@dataclass(frozen=True)
class AnalysisConfig:
    rank_threshold: float = 1e-2
    emit_svg: bool = True


@dataclass(frozen=True)
class PretrainConfig:
    task: TaskSpec
    train: TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: ModelConfig
    task: TaskSpec
    adapters: tuple[AdapterKind, ...]
    train: TrainConfig
    output_dir: Path
    seeds: tuple[int, ...]
    lora: LoraConfig = LoraConfig()
    lr_by_method: dict[str, float] = field(default_factory=dict)
    analysis: AnalysisConfig = AnalysisConfig()
    pretrain: PretrainConfig | None = None

    def __post_init__(self) -> None:
        if not self.adapters:
            raise ConfigError("adapters must not be empty")
        if len(set(self.adapters)) != len(self.adapters):
            raise ConfigError("adapters must not repeat")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must not repeat")

    def train_config(self, kind: AdapterKind, seed: int) -> TrainConfig:
        config = self.train
        lr = self.lr_by_method.get(kind.method.value)
        if lr is not None:
            config = replace(config, lr=lr)
        return with_seed(config, seed)

    def to_json(self) -> dict[str, Any]:
        """Canonical form; reading it back gives an equal config."""
        ret: dict[str, Any] = {
            "name": self.name,
            "model": _model_json(self.model),
            "task": _task_json(self.task),
            "adapters": [str(k) for k in self.adapters],
            "lora": {"alpha": self.lora.alpha, "dropout": self.lora.dropout},
            "train": train_json(self.train),
            "lr_by_method": dict(sorted(self.lr_by_method.items())),
            "analysis": {
                "rank_threshold": self.analysis.rank_threshold,
                "emit_svg": self.analysis.emit_svg,
            },
            "output_dir": str(self.output_dir),
            "seeds": list(self.seeds),
        }
        if self.pretrain is not None:
            ret["pretrain"] = {
                "task": _task_json(self.pretrain.task),
                "train": train_json(self.pretrain.train),
            }
        return ret

    def canonical_bytes(self) -> bytes:
        return (json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n").encode()


def _model_json(model: ModelConfig) -> dict[str, Any]:
    return {
        "arch": arch_to_dict(model.arch),
        "targets": None if model.targets is None else list(model.targets),
        "train_bias": model.train_bias,
    }


def _task_json(task: TaskSpec) -> dict[str, Any]:
    return {
        "kind": task.kind,
        "n": task.n,
        "m": task.m,
        "r_true": task.r_true,
        "vocab": task.vocab,
        "seq_len": task.seq_len,
        "n_train": task.n_train,
        "n_eval": task.n_eval,
        "noise_std": task.noise_std,
        "scale_range": list(task.scale_range),
    }


def train_json(train: TrainConfig) -> dict[str, Any]:
    opt = train.optimizer
    return {
        "lr": train.lr,
        "schedule": train.schedule,
        "warmup_steps": train.warmup_steps,
        "max_grad_norm": train.max_grad_norm,
        "batch_size": train.batch_size,
        "epochs": train.epochs,
        "optimizer": {
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "weight_decay": opt.weight_decay,
            "decay_to_identity": opt.decay_to_identity,
        },
    }


def default_arch(task: TaskSpec) -> Architecture:
    if task.is_sequence:
        return TransformerSpec(vocab=task.vocab, max_seq=task.seq_len)
    return MLPSpec((task.m, task.n), activation="identity")


# ==============================
# line-aware JSON
# ==============================


class _Node(dict[str, Any]):
    """A decoded JSON object that remembers the line of each of its values."""

    line: int = 1
    key_lines: dict[str, int]


def _line_of(s: str, idx: int) -> int:
    return s.count("\n", 0, idx) + 1


class _LocatingDecoder(json.JSONDecoder):
    def __init__(self) -> None:
        super().__init__()
        self.parse_object = self._parse_object
        # the C scanner ignores parse_object overrides
        self.scan_once = json.scanner.py_make_scanner(self)

    def _parse_object(
        self,
        s_and_end: tuple[str, int],
        strict: bool,
        scan_once: Callable[[str, int], tuple[Any, int]],
        object_hook: Any,
        object_pairs_hook: Any,
        memo: dict[str, str] | None = None,
    ) -> tuple[_Node, int]:
        s, end = s_and_end
        starts: list[int] = []

        def recording(string: str, idx: int) -> tuple[Any, int]:
            starts.append(idx)
            return scan_once(string, idx)

        pairs, end_out = json.decoder.JSONObject(  # type: ignore[attr-defined]
            (s, end), strict, recording, None, list, memo
        )
        node = _Node()
        node.line = _line_of(s, end)
        node.key_lines = {}
        for (key, value), idx in zip(pairs, starts):
            if key in node:
                raise ConfigError(f"line {_line_of(s, idx)}: duplicate key {key!r}")
            node[key] = value
            node.key_lines[key] = _line_of(s, idx)
        return node, end_out


def loads_config_json(text: str) -> Any:
    try:
        return _LocatingDecoder().decode(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno}: {e.msg}") from None


class _Reader:
    """Typed access to one JSON object; ``finish`` rejects the keys nobody asked for."""

    def __init__(self, node: Any, where: str, source: str, line: int = 1) -> None:
        if not isinstance(node, _Node):
            raise ConfigError(f"{source}:{line}: {where or 'config'} must be an object")
        self.node = node
        self.where = where
        self.source = source
        self.seen: set[str] = set()

    def _path(self, key: str) -> str:
        return f"{self.where}.{key}" if self.where else key

    def line(self, key: str | None = None) -> int:
        if key is not None and key in self.node.key_lines:
            return self.node.key_lines[key]
        return self.node.line

    def error(self, key: str | None, message: str) -> ConfigError:
        at = f"{self._path(key)}: " if key is not None else ""
        return ConfigError(f"{self.source}:{self.line(key)}: {at}{message}")

    @contextmanager
    def anchored(self, key: str | None = None) -> Iterator[None]:
        try:
            yield
        except ConfigError as e:
            if str(e).startswith(f"{self.source}:"):
                raise
            raise self.error(e.key or key, str(e)) from None

    def has(self, key: str) -> bool:
        return key in self.node

    def get(self, key: str, kind: type | tuple[type, ...], default: Any = ...) -> Any:
        self.seen.add(key)
        if key not in self.node:
            if default is ...:
                raise self.error(key, "missing required key")
            return default
        value = self.node[key]
        if value is None and default is None:
            return None
        kinds = kind if isinstance(kind, tuple) else (kind,)
        ok = isinstance(value, kinds) and not (isinstance(value, bool) and bool not in kinds)
        if float in kinds and isinstance(value, int) and not isinstance(value, bool):
            value, ok = float(value), True
        if not ok:
            names = " or ".join(k.__name__ for k in kinds)
            raise self.error(key, f"expected {names}, got {type(value).__name__}")
        return value

    def child(self, key: str, *, optional: bool = False) -> _Reader | None:
        self.seen.add(key)
        if key not in self.node:
            if optional:
                return None
            raise self.error(key, "missing required key")
        return _Reader(self.node[key], self._path(key), self.source, self.line(key))

    def finish(self) -> None:
        unknown = [k for k in self.node if k not in self.seen]
        if unknown:
            raise self.error(unknown[0], "unknown key")


def _read_task(r: _Reader) -> TaskSpec:
    defaults = TaskSpec(kind="scaled-teacher")
    with r.anchored("kind"):
        kind = r.get("kind", str)
        scale_range = r.get("scale_range", list, list(defaults.scale_range))
        if len(scale_range) != 2 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in scale_range
        ):
            raise r.error("scale_range", "expected [lo, hi]")
        spec = TaskSpec(
            kind=kind,
            n=r.get("n", int, defaults.n),
            m=r.get("m", int, defaults.m),
            r_true=r.get("r_true", int, defaults.r_true),
            vocab=r.get("vocab", int, defaults.vocab),
            seq_len=r.get("seq_len", int, defaults.seq_len),
            n_train=r.get("n_train", int, defaults.n_train),
            n_eval=r.get("n_eval", int, defaults.n_eval),
            noise_std=r.get("noise_std", float, defaults.noise_std),
            scale_range=(float(scale_range[0]), float(scale_range[1])),
        )
    r.finish()
    return spec


def _read_train(r: _Reader) -> TrainConfig:
    preset = r.get("preset", str, None)
    with r.anchored("preset"):
        base = train_config_preset(preset) if preset is not None else TrainConfig()
    opt = base.optimizer
    o = r.child("optimizer", optional=True)
    if o is not None:
        with o.anchored():
            opt = AdamWConfig(
                beta1=o.get("beta1", float, opt.beta1),
                beta2=o.get("beta2", float, opt.beta2),
                eps=o.get("eps", float, opt.eps),
                weight_decay=o.get("weight_decay", float, opt.weight_decay),
                decay_to_identity=o.get("decay_to_identity", bool, opt.decay_to_identity),
            )
        o.finish()
    with r.anchored():
        config = TrainConfig(
            optimizer=opt,
            lr=r.get("lr", float, base.lr),
            schedule=r.get("schedule", str, base.schedule),
            warmup_steps=r.get("warmup_steps", int, base.warmup_steps),
            max_grad_norm=r.get("max_grad_norm", float, base.max_grad_norm),
            batch_size=r.get("batch_size", int, base.batch_size),
            epochs=r.get("epochs", int, base.epochs),
        )
    r.finish()
    return config


def _check_warmup(
    r: _Reader | None, parent: _Reader, key: str, train: TrainConfig, task: TaskSpec
) -> None:
    reader, at = (r, "warmup_steps") if r is not None else (parent, key)
    with reader.anchored(at):
        train.check_steps(train.total_steps(task.n_train))


def _read_model(r: _Reader | None, task: TaskSpec) -> ModelConfig:
    arch = default_arch(task)
    if r is None:
        return ModelConfig(arch)
    raw_arch = r.get("arch", dict, None)
    if raw_arch is not None:
        with r.anchored("arch"):
            arch = arch_from_dict(raw_arch)
            _check_arch(arch, task)
    targets = r.get("targets", list, None)
    if targets is not None:
        known = {module_name(name) for name in arch.layer_shapes()}
        for t in targets:
            if not isinstance(t, str) or t not in known:
                raise r.error("targets", f"unknown module {t!r}, choose from {sorted(known)}")
        targets = tuple(targets)
    train_bias = r.get("train_bias", bool, False)
    if train_bias and not (isinstance(arch, MLPSpec) and arch.bias):
        raise r.error("train_bias", "the model has no biases to train")
    r.finish()
    return ModelConfig(arch, targets, train_bias)


def _check_arch(arch: Architecture, task: TaskSpec) -> None:
    if task.is_sequence:
        if not isinstance(arch, TransformerSpec):
            raise ConfigError("sequence tasks need a transformer")
        if arch.vocab != task.vocab or arch.max_seq < task.seq_len:
            raise ConfigError(
                f"transformer (vocab {arch.vocab}, max_seq {arch.max_seq}) cannot hold "
                f"the task (vocab {task.vocab}, seq_len {task.seq_len})"
            )
    elif arch != default_arch(task):
        raise ConfigError(f"teacher tasks use a single {task.n}x{task.m} identity layer")


def _read_adapters(r: _Reader, lora_rank: int | None) -> tuple[AdapterKind, ...]:
    """Parse adapter names; a bare "lora" takes its rank from the selected lora preset."""
    kinds = []
    for text in r.get("adapters", list):
        if not isinstance(text, str):
            raise r.error("adapters", f"expected adapter names, got {text!r}")
        if lora_rank is not None and text.strip().lower() == "lora":
            kinds.append(AdapterKind.lora(lora_rank))
            continue
        with r.anchored("adapters"):
            kinds.append(AdapterKind.parse(text))
    return tuple(kinds)


def _read_seeds(r: _Reader) -> tuple[int, ...]:
    seeds = r.get("seeds", list)
    if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise r.error("seeds", "seeds must be non-negative integers")
    return tuple(seeds)


def parse_experiment(text: str, source: str = "<config>") -> ExperimentConfig:
    with _anchor_source(source):
        data = loads_config_json(text)
    r = _Reader(data, "", source)

    task_reader = r.child("task")
    assert task_reader is not None
    task = _read_task(task_reader)
    model = _read_model(r.child("model", optional=True), task)

    lora = LoraConfig()
    lora_rank: int | None = None
    lo = r.child("lora", optional=True)
    if lo is not None:
        preset = lo.get("preset", str, None)
        if preset is not None:
            with lo.anchored("preset"):
                chosen = lora_preset(preset)
            lora, lora_rank = chosen.config, chosen.rank
        with lo.anchored():
            lora = LoraConfig(
                alpha=lo.get("alpha", float, lora.alpha),
                dropout=lo.get("dropout", float, lora.dropout),
            )
        lo.finish()

    train_reader = r.child("train", optional=True)
    train = _read_train(train_reader) if train_reader is not None else TrainConfig()
    _check_warmup(train_reader, r, "train", train, task)

    lr_by_method: dict[str, float] = {}
    by_method = r.child("lr_by_method", optional=True)
    if by_method is not None:
        for method in by_method.node:
            if method not in {m.value for m in Method}:
                raise by_method.error(method, "unknown adapter method")
            lr_by_method[method] = by_method.get(method, float)
            if not lr_by_method[method] > 0:
                raise by_method.error(method, "learning rate must be positive")
        by_method.finish()
    if train_reader is None or not train_reader.has("lr"):
        # no learning rate given: each method starts from its regimen default
        lr_by_method = {**PRESET_LRS, **lr_by_method}

    analysis = AnalysisConfig()
    a = r.child("analysis", optional=True)
    if a is not None:
        analysis = AnalysisConfig(
            rank_threshold=a.get("rank_threshold", float, analysis.rank_threshold),
            emit_svg=a.get("emit_svg", bool, analysis.emit_svg),
        )
        if not analysis.rank_threshold > 0:
            raise a.error("rank_threshold", "must be positive")
        a.finish()

    pretrain = None
    p = r.child("pretrain", optional=True)
    if p is not None:
        pretrain_task_reader = p.child("task")
        assert pretrain_task_reader is not None
        pretrain_task = _read_task(pretrain_task_reader)
        pretrain_train_reader = p.child("train", optional=True)
        pretrain_train = (
            _read_train(pretrain_train_reader) if pretrain_train_reader else TrainConfig()
        )
        _check_warmup(pretrain_train_reader, p, "train", pretrain_train, pretrain_task)
        p.finish()
        if not (task.is_sequence and pretrain_task.is_sequence):
            raise r.error("pretrain", "pretraining is only supported between sequence tasks")
        if (pretrain_task.vocab, pretrain_task.seq_len) != (task.vocab, task.seq_len):
            raise r.error("pretrain", "pretraining and adaptation tasks must share vocab/seq_len")
        pretrain = PretrainConfig(pretrain_task, pretrain_train)

    with r.anchored():
        config = ExperimentConfig(
            name=r.get("name", str, Path(source).stem),
            model=model,
            task=task,
            adapters=_read_adapters(r, lora_rank),
            train=train,
            output_dir=Path(r.get("output_dir", str, "runs")),
            seeds=_read_seeds(r),
            lora=lora,
            lr_by_method=lr_by_method,
            analysis=analysis,
            pretrain=pretrain,
        )
    r.finish()
    return config


@contextmanager
def _anchor_source(source: str) -> Iterator[None]:
    try:
        yield
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_experiment(path: Path) -> ExperimentConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path}: invalid UTF-8 at byte {e.start}") from None
    return parse_experiment(text, str(path))


# ==============================
# built-in experiments
# ==============================


def get_experiments() -> dict[str, ExperimentConfig]:
    experiments = [
        ExperimentConfig(
            name="scaled-teacher",
            model=ModelConfig(MLPSpec((16, 16), activation="identity")),
            task=TaskSpec(kind="scaled-teacher", n=16, m=16, n_train=256, n_eval=256),
            adapters=(
                AdapterKind.parse("hyper"),
                AdapterKind.lora(1),
                AdapterKind.lora(8),
                AdapterKind.parse("full"),
            ),
            train=TrainConfig(
                lr=1e-2, schedule="cosine", warmup_steps=50, batch_size=64, epochs=500
            ),
            output_dir=Path("runs/scaled-teacher"),
            seeds=(0, 1, 2, 3, 4),
        ),
        ExperimentConfig(
            name="lowrank-teacher",
            model=ModelConfig(MLPSpec((16, 16), activation="identity")),
            task=TaskSpec(kind="lowrank-teacher", n=16, m=16, r_true=2),
            adapters=(AdapterKind.parse("hyper"), AdapterKind.lora(2), AdapterKind.parse("full")),
            train=TrainConfig(
                lr=1e-2, schedule="cosine", warmup_steps=50, batch_size=64, epochs=500
            ),
            output_dir=Path("runs/lowrank-teacher"),
            seeds=(0, 1, 2, 3, 4),
        ),
        ExperimentConfig(
            name="seq-sort",
            model=ModelConfig(TransformerSpec(vocab=8, d_model=32, d_ff=64, max_seq=5)),
            task=TaskSpec(kind="seq-sort", vocab=8, seq_len=5, n_train=2048, n_eval=512),
            adapters=(AdapterKind.parse("hyper"), AdapterKind.lora(4), AdapterKind.parse("full")),
            train=TrainConfig(
                lr=3e-3, schedule="cosine", warmup_steps=50, batch_size=32, epochs=20
            ),
            lr_by_method={"hyper": 1e-2},
            output_dir=Path("runs/seq-sort"),
            seeds=(0, 1, 2, 3, 4),
            pretrain=PretrainConfig(
                TaskSpec(kind="seq-copy", vocab=8, seq_len=5, n_train=2048, n_eval=512),
                TrainConfig(lr=3e-3, schedule="cosine", warmup_steps=50, batch_size=32, epochs=30),
            ),
        ),
    ]
    return {e.name: e for e in experiments}


def get_experiment(name: str) -> ExperimentConfig:
    experiments = get_experiments()
    try:
        return experiments[name]
    except KeyError:
        raise ConfigError(
            f"unknown experiment {name!r}, choose from {', '.join(experiments)}"
        ) from None

