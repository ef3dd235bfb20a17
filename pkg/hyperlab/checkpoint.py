"""Adapter checkpoints and dense model weight directories.

An adapter checkpoint is a single JSON document holding the trainable slots of every layer.
A weight directory holds ``manifest.json`` plus one raw little-endian float64 blob per
tensor, named after the tensor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from hyperlab.adapters import (
    AdapterKind,
    AdapterLinear,
    FrozenLinear,
    LoraConfig,
    LoRALinear,
    Method,
    wrap,
)
from hyperlab.model import (
    Architecture,
    Model,
    TransformerSpec,
    arch_from_dict,
    arch_to_dict,
)
from hyperlab.utils import CheckpointError, ConfigError, FloatArray, StructuralError

ADAPTER_FORMAT = "hyperlab-adapter/1"
WEIGHTS_FORMAT = "hyperlab-weights/1"
MANIFEST = "manifest.json"


def _load_json(path: Path) -> Any:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e.strerror}") from e
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{path}: invalid UTF-8 at byte {e.start}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise CheckpointError(f"{path}: {e.msg} at byte {offset}") from e


def _dump_json(data: Any, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=1, sort_keys=True)
        f.write("\n")


def _require(data: Any, key: str, kind: type, where: str) -> Any:
    if not isinstance(data, dict) or key not in data:
        raise CheckpointError(f"{where}: missing {key!r}")
    value = data[key]
    if not isinstance(value, kind):
        raise CheckpointError(f"{where}: {key!r} should be {kind.__name__}")
    return value


def _arch(data: Any, where: str) -> Architecture:
    try:
        return arch_from_dict(_require(data, "arch", dict, where))
    except ConfigError as e:
        raise CheckpointError(f"{where}: {e}") from None


# ==============================
# adapter checkpoints
# ==============================


@dataclass(eq=False)
class LayerEntry:
    name: str
    kind: AdapterKind
    shape: tuple[int, int]
    params: dict[str, FloatArray]
    alpha: float | None = None

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass(eq=False)
class AdapterCheckpoint:
    arch: Architecture
    layers: list[LayerEntry]
    extras: dict[str, FloatArray] = field(default_factory=dict)

    def param_count(self) -> int:
        return sum(e.param_count() for e in self.layers) + sum(
            v.size for v in self.extras.values()
        )


def _tensor_json(arr: FloatArray) -> Any:
    # json writes floats with repr, which round-trips float64 exactly
    return np.asarray(arr, dtype=np.float64).tolist()


def save_adapter(model: Model, path: Path) -> None:
    layers = []
    for name, layer in model.layers.items():
        entry: dict[str, Any] = {
            "name": name,
            "kind": str(layer.kind),
            "shape": list(layer.shape),
            "params": {slot.name: _tensor_json(slot.value) for slot in layer.trainable_params()},
        }
        if isinstance(layer, LoRALinear):
            entry["r"] = layer.rank
            entry["alpha"] = layer.alpha
        layers.append(entry)
    data: dict[str, Any] = {
        "format": ADAPTER_FORMAT,
        "arch": arch_to_dict(model.arch),
        "layers": layers,
    }
    if model.train_extras:
        data["extras"] = {k: _tensor_json(v) for k, v in model.extras.items()}
    _dump_json(data, path)


def _array(value: Any, where: str) -> FloatArray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise CheckpointError(f"{where}: not a numeric array") from None
    if not np.all(np.isfinite(arr)):
        raise CheckpointError(f"{where}: contains NaN or Inf")
    return arr


def load_adapter(path: Path) -> AdapterCheckpoint:
    data = _load_json(path)
    where = str(path)
    if _require(data, "format", str, where) != ADAPTER_FORMAT:
        raise CheckpointError(f"{where}: not an adapter checkpoint ({data['format']!r})")
    arch = _arch(data, where)
    layers = []
    for i, raw in enumerate(_require(data, "layers", list, where)):
        at = f"{where}: layers[{i}]"
        try:
            kind = AdapterKind.parse(_require(raw, "kind", str, at))
        except ConfigError as e:
            raise CheckpointError(f"{at}: {e}") from None
        if kind.rank is not None and _require(raw, "r", int, at) != kind.rank:
            raise CheckpointError(f"{at}: r={raw['r']} does not match kind {kind}")
        shape = _require(raw, "shape", list, at)
        if len(shape) != 2 or not all(isinstance(s, int) and s > 0 for s in shape):
            raise CheckpointError(f"{at}: bad shape {shape!r}")
        params = {
            k: _array(v, f"{at}.params.{k}")
            for k, v in _require(raw, "params", dict, at).items()
        }
        alpha = raw.get("alpha")
        layers.append(
            LayerEntry(_require(raw, "name", str, at), kind, (shape[0], shape[1]), params, alpha)
        )
    extras = {k: _array(v, f"{where}: extras.{k}") for k, v in data.get("extras", {}).items()}
    return AdapterCheckpoint(arch, layers, extras)


def _restore_layer(base: AdapterLinear, entry: LayerEntry) -> AdapterLinear:
    if base.shape != entry.shape:
        raise StructuralError(
            f"layer {entry.name}: checkpoint shape {entry.shape} does not match base {base.shape}"
        )
    layer = wrap(
        base.effective_weight(),
        base.bias,
        entry.kind,
        lora=LoraConfig(alpha=entry.alpha),
        train_bias="bias" in entry.params and base.bias is not None,
    )
    slots = {slot.name: slot for slot in layer.trainable_params()}
    if set(slots) != set(entry.params):
        raise StructuralError(
            f"layer {entry.name}: checkpoint holds {sorted(entry.params)}, "
            f"a {entry.kind} layer needs {sorted(slots)}"
        )
    for name, slot in slots.items():
        value = entry.params[name]
        if value.shape != slot.value.shape:
            raise StructuralError(
                f"layer {entry.name}.{name}: shape {value.shape}, want {slot.value.shape}"
            )
        slot.value[...] = value
    return layer


def apply_adapter(base: Model, checkpoint: AdapterCheckpoint) -> Model:
    """The adapted model ``checkpoint`` describes, on top of ``base``'s (merged) weights."""
    names = [e.name for e in checkpoint.layers]
    if checkpoint.arch != base.arch or names != list(base.layers):
        raise StructuralError(
            f"checkpoint layers {names} do not match base model layers {list(base.layers)}"
        )
    layers = {e.name: _restore_layer(base.layers[e.name], e) for e in checkpoint.layers}
    extras = {k: np.array(v) for k, v in base.extras.items()}
    for k, v in checkpoint.extras.items():
        if k not in extras or extras[k].shape != v.shape:
            raise StructuralError(f"checkpoint extra {k!r} does not match the base model")
        extras[k] = np.array(v)
    return Model(base.arch, layers, extras, train_extras=bool(checkpoint.extras))


def describe_adapter(checkpoint: AdapterCheckpoint) -> list[str]:
    """Human readable per-layer summary used by ``hyperlab inspect``."""
    lines = []
    for e in checkpoint.layers:
        n, m = e.shape
        lines.append(f"{e.name}: {e.kind} {n}x{m} params={e.param_count()}")
        if e.kind.method is Method.HYPER:
            for name in ("a", "b"):
                v = e.params[name]
                lines.append(
                    f"    {name}: min={v.min():.6g} max={v.max():.6g} mean={v.mean():.6g} "
                    f"max|{name}-1|={np.abs(v - 1.0).max():.6g}"
                )
        elif e.kind.method is Method.LORA:
            lines.append(f"    rank={e.kind.rank} alpha={e.alpha}")
    if checkpoint.extras:
        lines.append(f"extras: {', '.join(sorted(checkpoint.extras))}")
    lines.append(f"total trainable params: {checkpoint.param_count()}")
    return lines


# ==============================
# dense weight directories
# ==============================


def _tensors(model: Model) -> dict[str, FloatArray]:
    ret: dict[str, FloatArray] = {}
    for name, layer in model.layers.items():
        ret[f"{name}.weight"] = layer.effective_weight()
        if layer.bias is not None:
            ret[f"{name}.bias"] = layer.bias
    ret.update(model.extras)
    return ret


def save_model_weights(model: Model, directory: Path) -> None:
    """Write the dense effective weights of ``model``; adapters are folded in."""
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, value in _tensors(model).items():
        blob = np.ascontiguousarray(value, dtype="<f8").tobytes()
        filename = f"{name}.bin"
        (directory / filename).write_bytes(blob)
        entries.append(
            {
                "name": name,
                "shape": list(value.shape),
                "file": filename,
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        )
    manifest = {"format": WEIGHTS_FORMAT, "arch": arch_to_dict(model.arch), "tensors": entries}
    _dump_json(manifest, directory / MANIFEST)


def load_model_weights(directory: Path) -> Model:
    """A frozen model from a weight directory written by ``save_model_weights``."""
    path = directory / MANIFEST
    manifest = _load_json(path)
    where = str(path)
    if _require(manifest, "format", str, where) != WEIGHTS_FORMAT:
        raise CheckpointError(f"{where}: not a weight manifest ({manifest['format']!r})")
    arch = _arch(manifest, where)
    tensors: dict[str, FloatArray] = {}
    for i, entry in enumerate(_require(manifest, "tensors", list, where)):
        at = f"{where}: tensors[{i}]"
        name = _require(entry, "name", str, at)
        shape = tuple(_require(entry, "shape", list, at))
        blob_path = directory / _require(entry, "file", str, at)
        try:
            blob = blob_path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read {blob_path}: {e.strerror}") from e
        if hashlib.sha256(blob).hexdigest() != entry.get("sha256"):
            raise CheckpointError(f"{blob_path}: checksum does not match the manifest")
        count = int(np.prod(shape)) if shape else 1
        if len(blob) != 8 * count:
            raise CheckpointError(f"{blob_path}: {len(blob)} bytes, want {8 * count}")
        tensors[name] = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(shape)

    layers: dict[str, AdapterLinear] = {}
    for name in arch.layer_shapes():
        try:
            weight = tensors.pop(f"{name}.weight")
        except KeyError:
            raise StructuralError(f"{directory}: no weight for layer {name}") from None
        layers[name] = FrozenLinear(weight, tensors.pop(f"{name}.bias", None))
    wanted = {"tok_emb", "pos_emb"} if isinstance(arch, TransformerSpec) else set()
    if set(tensors) != wanted:
        raise StructuralError(
            f"{directory}: tensors {sorted(tensors)} do not fit the architecture, "
            f"want {sorted(wanted)}"
        )
    return Model(arch, layers, tensors)

