from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

import numpy as np

from hyperlab.adapters import (
    FROZEN,
    AdapterKind,
    AdapterLinear,
    DropoutKey,
    FrozenLinear,
    LoraConfig,
    ParamSlot,
    wrap,
)
from hyperlab.grads import layer_grad
from hyperlab.numeric import Matrix
from hyperlab.utils import ConfigError, DimensionError, FloatArray, StructuralError

ACTIVATIONS = ("tanh", "relu", "gelu", "identity")
TRANSFORMER_MODULES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple[int, ...]
    activation: str = "tanh"
    bias: bool = False

    def __post_init__(self) -> None:
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ConfigError(f"MLP needs at least two positive widths, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {
            f"fc{i}": (self.widths[i + 1], self.widths[i]) for i in range(len(self.widths) - 1)
        }


@dataclass(frozen=True)
class TransformerSpec:
    vocab: int
    d_model: int = 32
    n_layers: int = 1
    n_heads: int = 1
    d_ff: int = 64
    max_seq: int = 8

    def __post_init__(self) -> None:
        if self.n_heads != 1:
            raise ConfigError("the tiny transformer is single-head")
        if min(self.vocab, self.d_model, self.n_layers, self.d_ff, self.max_seq) < 1:
            raise ConfigError(f"transformer sizes must be positive: {self}")

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        d, f = self.d_model, self.d_ff
        shapes: dict[str, tuple[int, int]] = {}
        for i in range(self.n_layers):
            prefix = f"blocks.{i}."
            shapes[prefix + "q_proj"] = (d, d)
            shapes[prefix + "k_proj"] = (d, d)
            shapes[prefix + "v_proj"] = (d, d)
            shapes[prefix + "o_proj"] = (d, d)
            shapes[prefix + "gate_proj"] = (f, d)
            shapes[prefix + "up_proj"] = (f, d)
            shapes[prefix + "down_proj"] = (d, f)
        shapes["lm_head"] = (self.vocab, d)
        return shapes


Architecture = Union[MLPSpec, TransformerSpec]


def module_name(layer_name: str) -> str:
    return layer_name.rsplit(".", 1)[-1]


def arch_to_dict(arch: Architecture) -> dict[str, Any]:
    if isinstance(arch, MLPSpec):
        return {
            "type": "mlp",
            "widths": list(arch.widths),
            "activation": arch.activation,
            "bias": arch.bias,
        }
    return {
        "type": "transformer",
        "vocab": arch.vocab,
        "d_model": arch.d_model,
        "n_layers": arch.n_layers,
        "n_heads": arch.n_heads,
        "d_ff": arch.d_ff,
        "max_seq": arch.max_seq,
    }


def arch_from_dict(data: Mapping[str, Any]) -> Architecture:
    fields = dict(data)
    kind = fields.pop("type", None)
    try:
        if kind == "mlp":
            fields["widths"] = tuple(int(w) for w in fields.get("widths", ()))
            return MLPSpec(**fields)
        if kind == "transformer":
            return TransformerSpec(**fields)
    except TypeError as e:
        raise ConfigError(f"bad {kind} architecture: {e}") from None
    raise ConfigError(f"architecture type must be 'mlp' or 'transformer', got {kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    arch: Architecture
    adapter_map: Mapping[str, AdapterKind] = field(default_factory=dict)

    def __post_init__(self) -> None:
        names = set(self.arch.layer_shapes())
        keys = set(self.adapter_map)
        if keys != names:
            missing = sorted(names - keys)
            extra = sorted(keys - names)
            raise StructuralError(
                f"adapter map does not match the model's linear layers "
                f"(missing: {missing}, unknown: {extra})"
            )


def adapter_map_for(
    arch: Architecture, kind: AdapterKind, targets: tuple[str, ...] | None = None
) -> dict[str, AdapterKind]:
    """Assign ``kind`` to every layer whose module name is in ``targets`` and freeze the rest.

    ``targets=None`` selects every linear layer of an MLP and the q/k/v/o/gate/up/down
    projections of a transformer.
    """
    if targets is None:
        targets = TRANSFORMER_MODULES if isinstance(arch, TransformerSpec) else None
    ret = {}
    for name in arch.layer_shapes():
        hit = targets is None or module_name(name) in targets
        ret[name] = kind if hit else FROZEN
    return ret


@dataclass
class _Cache:
    inputs: Any
    entries: list[dict[str, Any]]
    dropout: tuple[int, int] | None


class Model:
    def __init__(
        self,
        arch: Architecture,
        layers: dict[str, AdapterLinear],
        extras: dict[str, FloatArray] | None = None,
        *,
        train_extras: bool = False,
    ) -> None:
        shapes = arch.layer_shapes()
        if list(layers) != list(shapes):
            raise StructuralError(
                f"layers {list(layers)} do not match architecture layers {list(shapes)}"
            )
        for name, layer in layers.items():
            if layer.shape != shapes[name]:
                raise StructuralError(f"layer {name} has shape {layer.shape}, want {shapes[name]}")
        self.arch = arch
        self.layers = layers
        self.extras = extras if extras is not None else {}
        self.train_extras = train_extras
        self._index = {name: i for i, name in enumerate(layers)}
        if isinstance(arch, TransformerSpec):
            assert self.extras["tok_emb"].shape == (arch.vocab, arch.d_model)
            assert self.extras["pos_emb"].shape == (arch.max_seq, arch.d_model)

    # ==============================
    # construction
    # ==============================

    @classmethod
    def init(cls, arch: Architecture, seed: int) -> Model:
        """A frozen model with Gaussian(0, 1/sqrt(fan_in)) weights."""
        rng = np.random.default_rng(seed)
        layers: dict[str, AdapterLinear] = {}
        for name, (n, m) in arch.layer_shapes().items():
            w0 = rng.normal(0.0, 1.0 / math.sqrt(m), size=(n, m))
            bias = None
            if isinstance(arch, MLPSpec) and arch.bias:
                bias = rng.normal(0.0, 0.1, size=n)
            layers[name] = FrozenLinear(w0, bias)
        extras: dict[str, FloatArray] = {}
        if isinstance(arch, TransformerSpec):
            extras["tok_emb"] = rng.normal(0.0, 1.0, size=(arch.vocab, arch.d_model))
            extras["pos_emb"] = rng.normal(0.0, 1.0, size=(arch.max_seq, arch.d_model))
        return cls(arch, layers, extras)

    def adapt(
        self,
        adapter_map: Mapping[str, AdapterKind],
        *,
        lora: LoraConfig = LoraConfig(),
        train_bias: bool = False,
        train_extras: bool = False,
        seed: int = 0,
    ) -> Model:
        """Wrap the current (merged) weights of every layer in a fresh adapter."""
        spec = ModelSpec(self.arch, adapter_map)
        rng = np.random.default_rng([seed, 0x10AA])
        layers: dict[str, AdapterLinear] = {}
        for name, layer in self.layers.items():
            kind = spec.adapter_map[name]
            layers[name] = wrap(
                layer.effective_weight(),
                layer.bias,
                kind,
                lora=lora,
                train_bias=train_bias and layer.bias is not None,
                rng=rng,
            )
        extras = {k: np.array(v) for k, v in self.extras.items()}
        return Model(self.arch, layers, extras, train_extras=train_extras)

    def merged(self) -> Model:
        """A frozen dense model computing the same function."""
        layers: dict[str, AdapterLinear] = {
            name: FrozenLinear(np.array(layer.effective_weight()), layer.bias)
            for name, layer in self.layers.items()
        }
        extras = {k: np.array(v) for k, v in self.extras.items()}
        return Model(self.arch, layers, extras)

    @property
    def adapter_map(self) -> dict[str, AdapterKind]:
        return {name: layer.kind for name, layer in self.layers.items()}

    # ==============================
    # parameters
    # ==============================

    def parameters(self) -> list[tuple[str, ParamSlot]]:
        ret = [
            (f"{name}.{slot.name}", slot)
            for name, layer in self.layers.items()
            for slot in layer.trainable_params()
        ]
        if self.train_extras:
            ret.extend((name, ParamSlot(name, value)) for name, value in self.extras.items())
        return ret

    def parameter_count(self) -> int:
        return sum(slot.value.size for _, slot in self.parameters())

    def base_parameter_count(self) -> int:
        total = 0
        for layer in self.layers.values():
            total += layer.w0.size
            if layer.bias is not None:
                total += layer.bias.size
        return total + sum(v.size for v in self.extras.values())

    def frozen_tensors(self) -> dict[str, FloatArray]:
        ret: dict[str, FloatArray] = {}
        for name, layer in self.layers.items():
            ret[f"{name}.w0"] = layer.w0
            if layer.bias is not None and not layer.train_bias:
                ret[f"{name}.bias"] = layer.bias
        if not self.train_extras:
            ret.update(self.extras)
        return ret

    # ==============================
    # forward / backward
    # ==============================

    def _key(self, dropout: tuple[int, int] | None, name: str) -> DropoutKey | None:
        if dropout is None:
            return None
        return (dropout[0], dropout[1], self._index[name])

    def forward(self, inputs: Any, dropout: tuple[int, int] | None = None) -> tuple[Matrix, _Cache]:
        """Run the model. ``dropout`` is (seed, step) during training and None otherwise."""
        if isinstance(self.arch, MLPSpec):
            return self._forward_mlp(np.asarray(inputs, dtype=np.float64), dropout)
        return self._forward_transformer(np.asarray(inputs, dtype=np.intp), dropout)

    def predict(self, inputs: Any) -> Matrix:
        return self.forward(inputs)[0]

    def backward(self, cache: _Cache, g_out: Matrix) -> list[FloatArray]:
        """Gradients for every slot of ``parameters()``, in the same order."""
        if isinstance(self.arch, MLPSpec):
            grads = self._backward_mlp(cache, g_out)
        else:
            grads = self._backward_transformer(cache, g_out)
        ret = []
        for name, layer in self.layers.items():
            ret.extend(grads[name])
        if self.train_extras:
            ret.extend(grads[name] for name in self.extras)
        return ret

    def _layer(self, name: str, x: Matrix, dropout: tuple[int, int] | None) -> Matrix:
        return self.layers[name].forward(x, self._key(dropout, name))

    def _layer_back(
        self,
        grads: dict[str, Any],
        name: str,
        x: Matrix,
        g_y: Matrix,
        dropout: tuple[int, int] | None,
    ) -> Matrix:
        bundle = layer_grad(self.layers[name], x, g_y, self._key(dropout, name))
        grads[name] = bundle.params
        return bundle.x

    # mlp

    def _forward_mlp(
        self, x: Matrix, dropout: tuple[int, int] | None
    ) -> tuple[Matrix, _Cache]:
        assert isinstance(self.arch, MLPSpec)
        if x.ndim != 2 or x.shape[1] != self.arch.widths[0]:
            raise DimensionError(f"expected inputs of width {self.arch.widths[0]}, got {x.shape}")
        entries = []
        h = x
        names = list(self.layers)
        for i, name in enumerate(names):
            z = self._layer(name, h, dropout)
            entries.append({"x": h, "z": z})
            h = z if i == len(names) - 1 else _activate(self.arch.activation, z)
        return h, _Cache(x, entries, dropout)

    def _backward_mlp(self, cache: _Cache, g_out: Matrix) -> dict[str, Any]:
        assert isinstance(self.arch, MLPSpec)
        grads: dict[str, Any] = {}
        names = list(self.layers)
        g = g_out
        for i in reversed(range(len(names))):
            entry = cache.entries[i]
            if i != len(names) - 1:
                g = g * _activate_grad(self.arch.activation, entry["z"])
            g = self._layer_back(grads, names[i], entry["x"], g, cache.dropout)
        return grads

    # transformer

    def _forward_transformer(
        self, tokens: Any, dropout: tuple[int, int] | None
    ) -> tuple[Matrix, _Cache]:
        arch = self.arch
        assert isinstance(arch, TransformerSpec)
        if tokens.ndim != 2 or tokens.shape[1] > arch.max_seq:
            raise DimensionError(
                f"expected a batch of at most {arch.max_seq} tokens per row, got {tokens.shape}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= arch.vocab):
            raise DimensionError(f"token ids must lie in [0, {arch.vocab})")
        batch, seq = tokens.shape
        d = arch.d_model
        h = self.extras["tok_emb"][tokens] + self.extras["pos_emb"][None, :seq]
        entries: list[dict[str, Any]] = []
        for i in range(arch.n_layers):
            p = f"blocks.{i}."
            z1, rstd1 = _layer_norm(h)
            z1f = z1.reshape(-1, d)
            q = self._layer(p + "q_proj", z1f, dropout).reshape(batch, seq, d)
            k = self._layer(p + "k_proj", z1f, dropout).reshape(batch, seq, d)
            v = self._layer(p + "v_proj", z1f, dropout).reshape(batch, seq, d)
            probs = _softmax(np.einsum("btd,bsd->bts", q, k) / math.sqrt(d))
            attn = np.einsum("bts,bsd->btd", probs, v).reshape(-1, d)
            h = h + self._layer(p + "o_proj", attn, dropout).reshape(batch, seq, d)
            z2, rstd2 = _layer_norm(h)
            z2f = z2.reshape(-1, d)
            gate = self._layer(p + "gate_proj", z2f, dropout)
            up = self._layer(p + "up_proj", z2f, dropout)
            hidden = _gelu(gate) * up
            h = h + self._layer(p + "down_proj", hidden, dropout).reshape(batch, seq, d)
            entries.append(
                {
                    "z1": z1f,
                    "rstd1": rstd1,
                    "q": q,
                    "k": k,
                    "v": v,
                    "probs": probs,
                    "attn": attn,
                    "z2": z2f,
                    "rstd2": rstd2,
                    "gate": gate,
                    "up": up,
                    "hidden": hidden,
                }
            )
        zf, rstdf = _layer_norm(h)
        zff = zf.reshape(-1, d)
        logits = self._layer("lm_head", zff, dropout)
        entries.append({"zf": zff, "rstdf": rstdf})
        return logits, _Cache(tokens, entries, dropout)

    def _backward_transformer(self, cache: _Cache, g_out: Matrix) -> dict[str, Any]:
        arch = self.arch
        assert isinstance(arch, TransformerSpec)
        tokens = cache.inputs
        batch, seq = tokens.shape
        d = arch.d_model
        grads: dict[str, Any] = {}
        head = cache.entries[-1]
        g = self._layer_back(grads, "lm_head", head["zf"], g_out, cache.dropout)
        g_h = _layer_norm_grad(
            head["zf"].reshape(batch, seq, d), head["rstdf"], g.reshape(batch, seq, d)
        )
        for i in reversed(range(arch.n_layers)):
            p = f"blocks.{i}."
            e = cache.entries[i]
            # feed-forward branch
            g_f = g_h.reshape(-1, d)
            g_hidden = self._layer_back(grads, p + "down_proj", e["hidden"], g_f, cache.dropout)
            g_gate = g_hidden * e["up"] * _gelu_grad(e["gate"])
            g_up = g_hidden * _gelu(e["gate"])
            g_z2 = self._layer_back(grads, p + "up_proj", e["z2"], g_up, cache.dropout)
            g_z2 = g_z2 + self._layer_back(grads, p + "gate_proj", e["z2"], g_gate, cache.dropout)
            g_h = g_h + _layer_norm_grad(
                e["z2"].reshape(batch, seq, d), e["rstd2"], g_z2.reshape(batch, seq, d)
            )
            # attention branch
            g_attn = self._layer_back(
                grads, p + "o_proj", e["attn"], g_h.reshape(-1, d), cache.dropout
            ).reshape(batch, seq, d)
            probs = e["probs"]
            g_probs = np.einsum("btd,bsd->bts", g_attn, e["v"])
            g_v = np.einsum("bts,btd->bsd", probs, g_attn)
            g_scores = probs * (g_probs - np.sum(g_probs * probs, axis=-1, keepdims=True))
            g_scores = g_scores / math.sqrt(d)
            g_q = np.einsum("bts,bsd->btd", g_scores, e["k"])
            g_k = np.einsum("bts,btd->bsd", g_scores, e["q"])
            g_z1 = self._layer_back(
                grads, p + "q_proj", e["z1"], g_q.reshape(-1, d), cache.dropout
            )
            g_z1 = g_z1 + self._layer_back(
                grads, p + "k_proj", e["z1"], g_k.reshape(-1, d), cache.dropout
            )
            g_z1 = g_z1 + self._layer_back(
                grads, p + "v_proj", e["z1"], g_v.reshape(-1, d), cache.dropout
            )
            g_h = g_h + _layer_norm_grad(
                e["z1"].reshape(batch, seq, d), e["rstd1"], g_z1.reshape(batch, seq, d)
            )
        g_tok = np.zeros_like(self.extras["tok_emb"])
        np.add.at(g_tok, tokens, g_h)
        g_pos = np.zeros_like(self.extras["pos_emb"])
        g_pos[:seq] = g_h.sum(axis=0)
        grads["tok_emb"] = g_tok
        grads["pos_emb"] = g_pos
        return grads


# ==============================
# elementwise pieces
# ==============================


def _activate(name: str, z: Matrix) -> Matrix:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "gelu":
        return _gelu(z)
    return z


def _activate_grad(name: str, z: Matrix) -> Matrix:
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "gelu":
        return _gelu_grad(z)
    return np.ones_like(z)


def _gelu(x: FloatArray) -> FloatArray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _gelu_grad(x: FloatArray) -> FloatArray:
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _softmax(x: FloatArray) -> FloatArray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_norm(x: FloatArray) -> tuple[FloatArray, FloatArray]:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LN_EPS)
    return centered * rstd, rstd


def _layer_norm_grad(y: FloatArray, rstd: FloatArray, g_y: FloatArray) -> FloatArray:
    mean_g = g_y.mean(axis=-1, keepdims=True)
    mean_gy = (g_y * y).mean(axis=-1, keepdims=True)
    return rstd * (g_y - mean_g - y * mean_gy)
