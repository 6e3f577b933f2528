"""Post-norm encoder-decoder transformer with addressable sub-layers.

Every residual sub-layer (encoder self-attention, encoder feed-forward,
decoder self-attention, decoder encoder-attention, decoder feed-forward)
is a first-class component: it can be masked (its function output replaced
by zeros before the residual add), interpolated between its initialization
and its trained weights, or removed from the architecture outright. The
residual path and the post-residual layer norm always stay, which makes
masking and structural removal bit-exactly equivalent at evaluation time.

Each sub-layer owns the layer-norm parameters that follow it, so the
per-component parameter sets partition everything except embeddings and
the output projection.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import tensor as tz
from .data import BOS, EOS, PAD
from .tensor import Tensor

NEG_INF = -1e9  # additive attention mask value; finite to keep softmax clean

# sub-stream ids under the init seed
_STREAM_INIT = 0


class Side(enum.Enum):
    ENCODER = "enc"
    DECODER = "dec"


class Kind(enum.Enum):
    SELF_ATTENTION = "sa"
    ENCODER_ATTENTION = "ea"
    FEED_FORWARD = "ff"


_KIND_ORDER = {Kind.SELF_ATTENTION: 0, Kind.ENCODER_ATTENTION: 1, Kind.FEED_FORWARD: 2}
_SIDE_ORDER = {Side.ENCODER: 0, Side.DECODER: 1}
_KIND_LABEL = {Kind.SELF_ATTENTION: "SA", Kind.ENCODER_ATTENTION: "EA", Kind.FEED_FORWARD: "FF"}


@dataclass(frozen=True)
class ComponentId:
    """Address of one residual sub-layer: side, 0-based layer, kind."""

    side: Side
    layer: int
    kind: Kind

    def __post_init__(self):
        if self.side is Side.ENCODER and self.kind is Kind.ENCODER_ATTENTION:
            raise ValueError("encoder layers have no encoder-attention sub-layer")
        if self.layer < 0:
            raise ValueError(f"layer index must be >= 0, got {self.layer}")

    @property
    def key(self) -> str:
        return f"{self.side.value}.{self.layer}.{self.kind.value}"

    @property
    def family(self) -> str:
        prefix = "E" if self.side is Side.ENCODER else "D"
        return f"{prefix}:{_KIND_LABEL[self.kind]}"

    def sort_key(self) -> tuple:
        return (_SIDE_ORDER[self.side], self.layer, _KIND_ORDER[self.kind])

    def __str__(self) -> str:
        return f"{self.family}@{self.layer}"

    @staticmethod
    def parse(key: str) -> "ComponentId":
        try:
            side_s, layer_s, kind_s = key.split(".")
            return ComponentId(Side(side_s), int(layer_s), Kind(kind_s))
        except (ValueError, KeyError) as err:
            raise ValueError(f"malformed component key '{key}'") from err


FAMILIES = ("E:SA", "E:FF", "D:SA", "D:EA", "D:FF")


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 32
    d_ff: int = 64
    n_heads: int = 4
    src_vocab: int = 32
    tgt_vocab: int = 32
    max_len: int = 24
    dropout: float = 0.1
    layerdrop: float = 0.0
    removed: frozenset = field(default_factory=frozenset)

    def validate(self) -> None:
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("enc_layers and dec_layers must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.src_vocab <= 3 or self.tgt_vocab <= 3:
            raise ValueError("vocabularies must have room for payload beyond pad/bos/eos")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (0.0 <= self.layerdrop <= 1.0):
            raise ValueError(f"layerdrop must be in [0, 1], got {self.layerdrop}")
        for cid in self.removed:
            self._check_slot(cid)

    def _check_slot(self, cid: ComponentId) -> None:
        depth = self.enc_layers if cid.side is Side.ENCODER else self.dec_layers
        if cid.layer >= depth:
            raise ValueError(f"component {cid.key} is outside a {depth}-layer stack")


def config_to_dict(config: ModelConfig) -> dict:
    out = {
        "enc_layers": config.enc_layers,
        "dec_layers": config.dec_layers,
        "d_model": config.d_model,
        "d_ff": config.d_ff,
        "n_heads": config.n_heads,
        "src_vocab": config.src_vocab,
        "tgt_vocab": config.tgt_vocab,
        "max_len": config.max_len,
        "dropout": config.dropout,
        "layerdrop": config.layerdrop,
        "removed": sorted(cid.key for cid in config.removed),
    }
    return out


def config_from_dict(doc: dict) -> ModelConfig:
    removed = frozenset(ComponentId.parse(key) for key in doc.get("removed", []))
    fields = {k: doc[k] for k in (
        "enc_layers", "dec_layers", "d_model", "d_ff", "n_heads",
        "src_vocab", "tgt_vocab", "max_len", "dropout", "layerdrop",
    )}
    return ModelConfig(removed=removed, **fields)


def iter_slots(config: ModelConfig):
    """All sub-layer slots in forward order, including removed ones."""
    for layer in range(config.enc_layers):
        yield ComponentId(Side.ENCODER, layer, Kind.SELF_ATTENTION)
        yield ComponentId(Side.ENCODER, layer, Kind.FEED_FORWARD)
    for layer in range(config.dec_layers):
        yield ComponentId(Side.DECODER, layer, Kind.SELF_ATTENTION)
        yield ComponentId(Side.DECODER, layer, Kind.ENCODER_ATTENTION)
        yield ComponentId(Side.DECODER, layer, Kind.FEED_FORWARD)


def components(config: ModelConfig) -> list[ComponentId]:
    """Existing (non-removed) components in canonical order."""
    return [cid for cid in iter_slots(config) if cid not in config.removed]


@dataclass(frozen=True)
class MaskSpec:
    """Components whose function output is zeroed before the residual add."""

    masked: frozenset

    def __init__(self, masked=()):
        object.__setattr__(self, "masked", frozenset(masked))

    def validate(self, config: ModelConfig) -> None:
        existing = set(components(config))
        for cid in self.masked:
            if cid not in existing:
                raise ValueError(f"mask names unknown or removed component {cid.key}")


EMPTY_MASK = MaskSpec()


@dataclass(frozen=True)
class InterpolationSpec:
    """Per-component blend factor: 0 is the initialization, 1 the trained value."""

    alphas: tuple

    def __init__(self, alphas=()):
        items = tuple(sorted(dict(alphas).items(), key=lambda kv: kv[0].sort_key()))
        for _, alpha in items:
            if not (0.0 <= alpha <= 1.0):
                raise ValueError(f"interpolation factor must be in [0, 1], got {alpha}")
        object.__setattr__(self, "alphas", items)

    def as_dict(self) -> dict:
        return dict(self.alphas)

    def validate(self, config: ModelConfig) -> None:
        existing = set(components(config))
        for cid, _ in self.alphas:
            if cid not in existing:
                raise ValueError(f"interpolation names unknown or removed component {cid.key}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _attention_param_names(prefix: str) -> list[str]:
    names = []
    for proj in ("wq", "wk", "wv", "wo"):
        names.append(f"{prefix}.{proj}")
        names.append(f"{prefix}.b{proj[1]}")
    return names


def component_param_names(config: ModelConfig, cid: ComponentId) -> tuple[str, ...]:
    """Parameter names owned by one component, post-LN included."""
    config._check_slot(cid)
    if cid in config.removed:
        raise KeyError(f"component {cid.key} was removed from this architecture")
    prefix = cid.key
    if cid.kind is Kind.FEED_FORWARD:
        names = [f"{prefix}.w1", f"{prefix}.b1", f"{prefix}.w2", f"{prefix}.b2"]
    else:
        names = _attention_param_names(prefix)
    names += [f"{prefix}.ln_g", f"{prefix}.ln_b"]
    return tuple(names)


def param_layout(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init kind) for every parameter, in canonical order.

    Removed slots keep only their post-residual layer norm: the residual
    path still runs through it, which is what makes removal and masking
    coincide bit for bit.
    """
    d, f = config.d_model, config.d_ff
    layout: list[tuple[str, tuple, str]] = [
        ("src_embed", (config.src_vocab, d), "xavier"),
        ("tgt_embed", (config.tgt_vocab, d), "xavier"),
    ]
    for cid in iter_slots(config):
        prefix = cid.key
        if cid not in config.removed:
            if cid.kind is Kind.FEED_FORWARD:
                layout += [
                    (f"{prefix}.w1", (d, f), "xavier"),
                    (f"{prefix}.b1", (f,), "zeros"),
                    (f"{prefix}.w2", (f, d), "xavier"),
                    (f"{prefix}.b2", (d,), "zeros"),
                ]
            else:
                for proj in ("wq", "wk", "wv", "wo"):
                    layout += [
                        (f"{prefix}.{proj}", (d, d), "xavier"),
                        (f"{prefix}.b{proj[1]}", (d,), "zeros"),
                    ]
        layout += [(f"{prefix}.ln_g", (d,), "ones"), (f"{prefix}.ln_b", (d,), "zeros")]
    layout += [
        ("out_proj.w", (d, config.tgt_vocab), "xavier"),
        ("out_proj.b", (config.tgt_vocab,), "zeros"),
    ]
    return layout


def scaffold_param_names(config: ModelConfig) -> tuple[str, ...]:
    """Parameters owned by no component: embeddings, output projection, and
    the orphaned layer norms of removed slots."""
    names = ["src_embed", "tgt_embed", "out_proj.w", "out_proj.b"]
    for cid in config.removed:
        names += [f"{cid.key}.ln_g", f"{cid.key}.ln_b"]
    return tuple(sorted(names))


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in param_layout(config))


@dataclass
class Parameters:
    """Current weights plus the frozen initialization snapshot."""

    config: ModelConfig
    values: dict
    init_values: dict
    step: int = 0
    meta: dict = field(default_factory=dict)

    def clone(self) -> "Parameters":
        return Parameters(
            config=self.config,
            values={k: tz.parameter(v.data) for k, v in self.values.items()},
            init_values={k: v.copy() for k, v in self.init_values.items()},
            step=self.step,
            meta=dict(self.meta),
        )

    def as_arrays(self) -> dict:
        return {k: v.data for k, v in self.values.items()}


def init_model(config: ModelConfig, seed: int) -> Parameters:
    """Xavier-uniform weights, zero biases, unit layer-norm scales.

    Draw order follows the canonical layout, so one (config, seed) pair
    always produces bit-identical weights.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _STREAM_INIT])))
    values: dict[str, Tensor] = {}
    for name, shape, init_kind in param_layout(config):
        if init_kind == "xavier":
            fan_in, fan_out = shape[0], shape[1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape)
        elif init_kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        values[name] = tz.parameter(arr)
    init_values = {name: t.data.copy() for name, t in values.items()}
    return Parameters(config=config, values=values, init_values=init_values, step=0,
                      meta={"init_seed": seed})


def remove_components(config: ModelConfig, ids) -> ModelConfig:
    ids = frozenset(ids)
    for cid in ids:
        config._check_slot(cid)
        if cid in config.removed:
            raise ValueError(f"component {cid.key} is already removed")
    return replace(config, removed=config.removed | ids)


def interpolate_values(params: Parameters, interp: Optional[InterpolationSpec]) -> dict:
    """Effective weight arrays under an interpolation toward initialization.

    Endpoints are returned by copy of the exact stored arrays, never through
    arithmetic, so alpha=0 reproduces the initialization bit for bit and
    alpha=1 reproduces the trained weights bit for bit.
    """
    arrays = {k: v.data for k, v in params.values.items()}
    if interp is None:
        return arrays
    interp.validate(params.config)
    out = dict(arrays)
    for cid, alpha in interp.alphas:
        for name in component_param_names(params.config, cid):
            if alpha == 0.0:
                out[name] = params.init_values[name]
            elif alpha == 1.0:
                out[name] = arrays[name]
            else:
                out[name] = (1.0 - alpha) * params.init_values[name] + alpha * arrays[name]
    return out


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class TrainStreams:
    """Named RNG streams consumed by a training-mode forward pass."""

    dropout: np.random.Generator
    layerdrop: np.random.Generator


_PE_CACHE: dict = {}


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    key = (length, d_model)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        idx = np.arange(0, d_model, 2)[None, :]
        angles = pos / np.power(10000.0, idx / d_model)
        pe = np.zeros((length, d_model))
        pe[:, 0::2] = np.sin(angles)
        pe[:, 1::2] = np.cos(angles)
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def pad_mask_bias(token_rows: np.ndarray) -> np.ndarray:
    """(B, 1, 1, T) additive bias hiding pad keys."""
    return np.where(token_rows == PAD, NEG_INF, 0.0)[:, None, None, :]


def causal_bias(length: int) -> np.ndarray:
    """(1, 1, T, T) additive bias hiding future keys."""
    upper = np.triu(np.full((length, length), NEG_INF), k=1)
    return upper[None, None, :, :]


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tz.add(tz.matmul(x, w), b)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    head = tz.reshape(x, (b, t, n_heads, d // n_heads))
    return tz.transpose(head, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return tz.reshape(tz.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def _attention(values: dict, prefix: str, query: Tensor, memory: Tensor,
               bias: np.ndarray, n_heads: int) -> Tensor:
    q = _split_heads(_linear(query, values[f"{prefix}.wq"], values[f"{prefix}.bq"]), n_heads)
    k = _split_heads(_linear(memory, values[f"{prefix}.wk"], values[f"{prefix}.bk"]), n_heads)
    v = _split_heads(_linear(memory, values[f"{prefix}.wv"], values[f"{prefix}.bv"]), n_heads)
    d_head = q.shape[-1]
    scores = tz.scale(tz.matmul(q, tz.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
    scores = tz.add(scores, tz.constant(bias))
    context = tz.matmul(tz.softmax(scores), v)
    return _linear(_merge_heads(context), values[f"{prefix}.wo"], values[f"{prefix}.bo"])


def _feed_forward(values: dict, prefix: str, x: Tensor) -> Tensor:
    hidden = tz.relu(_linear(x, values[f"{prefix}.w1"], values[f"{prefix}.b1"]))
    return _linear(hidden, values[f"{prefix}.w2"], values[f"{prefix}.b2"])


def residual_block(
    values: dict,
    config: ModelConfig,
    cid: ComponentId,
    x: Tensor,
    memory: Optional[Tensor],
    self_bias: Optional[np.ndarray],
    cross_bias: Optional[np.ndarray],
    *,
    masked: bool = False,
    mode: str = "eval",
    streams: Optional[TrainStreams] = None,
    hook: Optional[Callable[[ComponentId, Tensor], Tensor]] = None,
) -> Tensor:
    """One residual sub-layer: function, optional zeroing, dropout, add, LN.

    LayerDrop draws one Bernoulli per existing sub-layer before the mask
    decision, and the residual dropout mask is drawn even when the function
    output is zeroed, so masked and instrumented passes consume RNG streams
    identically and stay bit-for-bit comparable.
    """
    prefix = cid.key
    training = mode == "train"
    removed = cid in config.removed

    f_out: Optional[Tensor] = None
    if not removed:
        dropped = False
        if training and config.layerdrop > 0.0:
            assert streams is not None
            dropped = float(streams.layerdrop.random()) < config.layerdrop
        if masked or dropped:
            f_out = tz.constant(np.zeros(x.shape))
        else:
            if cid.kind is Kind.SELF_ATTENTION:
                f_out = _attention(values, prefix, x, x, self_bias, config.n_heads)
            elif cid.kind is Kind.ENCODER_ATTENTION:
                f_out = _attention(values, prefix, x, memory, cross_bias, config.n_heads)
            else:
                f_out = _feed_forward(values, prefix, x)
            if hook is not None:
                f_out = hook(cid, f_out)
        if training and config.dropout > 0.0:
            assert streams is not None
            f_out = tz.dropout(f_out, config.dropout, streams.dropout)
        summed = tz.add(x, f_out)
    else:
        summed = x
    return tz.layer_norm(summed, values[f"{prefix}.ln_g"], values[f"{prefix}.ln_b"])


def _as_tensors(values: dict) -> dict:
    return {k: (v if isinstance(v, Tensor) else tz.constant(v)) for k, v in values.items()}


def _embed(values: dict, table_name: str, ids: np.ndarray, d_model: int,
           config: ModelConfig, mode: str, streams: Optional[TrainStreams]) -> Tensor:
    emb = tz.scale(tz.embedding_lookup(values[table_name], ids), math.sqrt(d_model))
    pe = positional_encoding(ids.shape[1], d_model)[None, :, :]
    x = tz.add(emb, tz.constant(pe))
    if mode == "train" and config.dropout > 0.0:
        assert streams is not None
        x = tz.dropout(x, config.dropout, streams.dropout)
    return x


def encode(
    values: dict,
    config: ModelConfig,
    src: np.ndarray,
    *,
    mask: MaskSpec = EMPTY_MASK,
    mode: str = "eval",
    streams: Optional[TrainStreams] = None,
    hook=None,
    collect: Optional[dict] = None,
) -> tuple[Tensor, np.ndarray]:
    """Run the encoder stack; returns (memory, source pad bias)."""
    values = _as_tensors(values)
    src = np.asarray(src)
    src_bias = pad_mask_bias(src)
    x = _embed(values, "src_embed", src, config.d_model, config, mode, streams)
    for layer in range(config.enc_layers):
        for kind in (Kind.SELF_ATTENTION, Kind.FEED_FORWARD):
            cid = ComponentId(Side.ENCODER, layer, kind)
            if collect is not None:
                collect[f"in/{cid.key}"] = x.data
            x = residual_block(
                values, config, cid, x, None, src_bias, None,
                masked=cid in mask.masked, mode=mode, streams=streams, hook=hook,
            )
            if collect is not None:
                collect[f"out/{cid.key}"] = x.data
    if collect is not None:
        collect["enc_out"] = x.data
    return x, src_bias


def decode_logits(
    values: dict,
    config: ModelConfig,
    memory: Tensor,
    src_bias: np.ndarray,
    tgt_prefix: np.ndarray,
    *,
    mask: MaskSpec = EMPTY_MASK,
    mode: str = "eval",
    streams: Optional[TrainStreams] = None,
    hook=None,
    collect: Optional[dict] = None,
) -> Tensor:
    """Run the decoder stack over a (B, T) prefix; returns (B, T, V) logits."""
    values = _as_tensors(values)
    tgt_prefix = np.asarray(tgt_prefix)
    t_len = tgt_prefix.shape[1]
    self_bias = causal_bias(t_len) + pad_mask_bias(tgt_prefix)
    x = _embed(values, "tgt_embed", tgt_prefix, config.d_model, config, mode, streams)
    for layer in range(config.dec_layers):
        for kind in (Kind.SELF_ATTENTION, Kind.ENCODER_ATTENTION, Kind.FEED_FORWARD):
            cid = ComponentId(Side.DECODER, layer, kind)
            if collect is not None:
                collect[f"in/{cid.key}"] = x.data
            x = residual_block(
                values, config, cid, x, memory, self_bias, src_bias,
                masked=cid in mask.masked, mode=mode, streams=streams, hook=hook,
            )
            if collect is not None:
                collect[f"out/{cid.key}"] = x.data
    if collect is not None:
        collect["dec_out"] = x.data
    return _linear(x, values["out_proj.w"], values["out_proj.b"])


def forward(
    params: Parameters,
    src: np.ndarray,
    tgt_prefix: np.ndarray,
    *,
    mask: Optional[MaskSpec] = None,
    interp: Optional[InterpolationSpec] = None,
    mode: str = "eval",
    streams: Optional[TrainStreams] = None,
    hook=None,
    collect: Optional[dict] = None,
) -> Tensor:
    """Teacher-forced pass: (B, S) source and (B, T) target prefix to logits."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got '{mode}'")
    mask = mask if mask is not None else EMPTY_MASK
    mask.validate(params.config)
    if mode == "train" and (params.config.dropout > 0.0 or params.config.layerdrop > 0.0):
        if streams is None:
            raise ValueError("train mode needs TrainStreams for dropout/layerdrop")
    if interp is not None and interp.alphas:
        values = interpolate_values(params, interp)
    else:
        values = params.values
    memory, src_bias = encode(
        values, params.config, src, mask=mask, mode=mode, streams=streams,
        hook=hook, collect=collect,
    )
    return decode_logits(
        values, params.config, memory, src_bias, tgt_prefix, mask=mask,
        mode=mode, streams=streams, hook=hook, collect=collect,
    )
