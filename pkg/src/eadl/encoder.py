"""Configurable pre-layer-norm transformer encoder with MLM and
token-classification heads, plus a bit-exact binary checkpoint format.

The attention stage of every layer is driven by an AttentionSpec, so the
same weights can run dense, windowed, block-sparse, strided or landmark
attention. Forward returns every layer's hidden states (the hidden-state
loss needs them)."""

from __future__ import annotations

import dataclasses
import functools
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import numcore as nc
from .errors import ContractError, FormatError, InputError, LengthError, ParameterError
from .numcore import Tensor

CHECKPOINT_MAGIC = b"EADL"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# config and weights


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_positions: int
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    attention_spec: att.AttentionSpec = field(default_factory=att.Full)
    dropout_p: float = 0.0
    num_tags: int = 9
    tie_mlm_head: bool = True

    def validate(self) -> None:
        if self.vocab_size < 1 or self.max_positions < 1:
            raise ParameterError("vocab_size and max_positions must be >= 1")
        if self.num_layers < 0:
            raise ParameterError("num_layers must be >= 0")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads != 0:
            raise ParameterError(
                f"hidden_dim ({self.hidden_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.num_tags < 0:
            raise ParameterError("num_tags must be >= 0")
        self.attention_spec.validate()

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class LayerWeights:
    attn_q: Tensor
    attn_k: Tensor
    attn_v: Tensor
    attn_out: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    ffn_in: Tensor
    ffn_in_bias: Tensor
    ffn_out: Tensor
    ffn_out_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor


@dataclass
class ModelWeights:
    token_embeddings: Tensor
    position_embeddings: Tensor
    layers: list[LayerWeights]
    final_norm_gain: Tensor | None
    final_norm_bias: Tensor | None
    mlm_proj: Tensor | None  # present only for an untied MLM head
    mlm_bias: Tensor
    cls_head: Tensor | None


_LAYER_FIELDS = [f.name for f in dataclasses.fields(LayerWeights)]


def named_tensors(config: ModelConfig, weights: ModelWeights) -> list[tuple[str, Tensor]]:
    """Canonical (name, tensor) manifest; ordering defines the checkpoint
    payload layout."""
    out = [
        ("token_embeddings", weights.token_embeddings),
        ("position_embeddings", weights.position_embeddings),
    ]
    for i, layer in enumerate(weights.layers):
        for name in _LAYER_FIELDS:
            out.append((f"layers.{i}.{name}", getattr(layer, name)))
    if config.num_layers >= 1:
        out.append(("final_norm_gain", weights.final_norm_gain))
        out.append(("final_norm_bias", weights.final_norm_bias))
    if not config.tie_mlm_head:
        out.append(("mlm_proj", weights.mlm_proj))
    out.append(("mlm_bias", weights.mlm_bias))
    if config.num_tags >= 1:
        out.append(("cls_head", weights.cls_head))
    return out


def init_weights(config: ModelConfig, seed: int = 0, sigma: float = 0.02) -> ModelWeights:
    """Gaussian matrices and embeddings, unit norms, zero biases;
    deterministic in `seed`. The default sigma suits full-size hidden
    dims; desk-scale configs train faster around sigma = 0.1."""
    config.validate()
    rng = nc.make_rng(seed)
    h, f = config.hidden_dim, config.ffn_dim

    def mat(*shape):
        return Tensor(rng.normal(0.0, sigma, size=shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    layers = [
        LayerWeights(
            attn_q=mat(h, h), attn_k=mat(h, h), attn_v=mat(h, h), attn_out=mat(h, h),
            norm1_gain=ones(h), norm1_bias=zeros(h),
            ffn_in=mat(h, f), ffn_in_bias=zeros(f),
            ffn_out=mat(f, h), ffn_out_bias=zeros(h),
            norm2_gain=ones(h), norm2_bias=zeros(h),
        )
        for _ in range(config.num_layers)
    ]
    return ModelWeights(
        token_embeddings=mat(config.vocab_size, h),
        position_embeddings=mat(config.max_positions, h),
        layers=layers,
        final_norm_gain=ones(h) if config.num_layers >= 1 else None,
        final_norm_bias=zeros(h) if config.num_layers >= 1 else None,
        mlm_proj=None if config.tie_mlm_head else mat(h, config.vocab_size),
        mlm_bias=zeros(config.vocab_size),
        cls_head=mat(h, config.num_tags) if config.num_tags >= 1 else None,
    )


def count_params(config: ModelConfig) -> int:
    """Backbone parameter count (embeddings, layer blocks, final norm);
    task-head parameters are excluded."""
    h, f = config.hidden_dim, config.ffn_dim
    per_layer = 4 * h * h + 2 * (h * f) + f + h + 4 * h
    total = config.vocab_size * h + config.max_positions * h
    total += config.num_layers * per_layer
    if config.num_layers >= 1:
        total += 2 * h
    return total


def per_layer_params(config: ModelConfig) -> int:
    h, f = config.hidden_dim, config.ffn_dim
    return 4 * h * h + 2 * (h * f) + f + h + 4 * h


# ---------------------------------------------------------------------------
# forward


@dataclass
class EncoderOutput:
    layer_hidden: list[Tensor]  # after each layer's residuals
    final_hidden: Tensor  # after the final norm


@functools.lru_cache(maxsize=128)
def _mask_for(spec: att.AttentionSpec, n: int) -> att.AttentionMask:
    return att.build_mask(spec, n)


def _layer_spec(spec: att.AttentionSpec, layer_index: int) -> att.AttentionSpec:
    # random blocks are fixed per layer by xor-deriving the seed
    if isinstance(spec, att.BlockSparse) and spec.random_blocks > 0:
        return dataclasses.replace(spec, seed=spec.seed ^ layer_index)
    return spec


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, l, h = x.data.shape
    return nc.transpose(nc.reshape(x, (b, l, num_heads, h // num_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, nh, l, dh = x.data.shape
    return nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (b, l, nh * dh))


def forward(
    config: ModelConfig,
    weights: ModelWeights,
    token_ids: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Run the encoder stack on integer token ids [B, L].

    Eval mode is a pure function of (weights, token_ids, attention_spec);
    train mode applies seeded dropout and requires `rng`.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and config.dropout_p > 0.0 and rng is None:
        raise ParameterError("training with dropout requires an rng")
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise InputError(f"token_ids must be [batch, length], got shape {ids.shape}")
    b, l = ids.shape
    if l > config.max_positions:
        raise LengthError(f"sequence length {l} exceeds max_positions {config.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InputError("token id out of vocabulary range")

    def drop(t: Tensor) -> Tensor:
        return nc.dropout(t, config.dropout_p, rng, training)

    x = nc.add(
        nc.embedding_lookup(weights.token_embeddings, ids),
        nc.embedding_lookup(weights.position_embeddings, np.arange(l)),
    )
    x = drop(x)

    spec = config.attention_spec
    layer_hidden: list[Tensor] = []
    for idx, layer in enumerate(weights.layers):
        a = nc.layer_norm(x, layer.norm1_gain, layer.norm1_bias)
        q = _split_heads(nc.matmul(a, layer.attn_q), config.num_heads)
        k = _split_heads(nc.matmul(a, layer.attn_k), config.num_heads)
        v = _split_heads(nc.matmul(a, layer.attn_v), config.num_heads)
        if isinstance(spec, att.Full):
            ctx = att.dense_attention(q, k, v)
        elif isinstance(spec, att.Nystrom):
            ctx = att.nystrom_attention(q, k, v, min(spec.landmarks, l), spec.pinv_iters)
        else:
            mask = _mask_for(_layer_spec(spec, idx), l)
            ctx = att.masked_attention(q, k, v, mask)
        x = nc.add(x, drop(nc.matmul(_merge_heads(ctx), layer.attn_out)))

        h2 = nc.layer_norm(x, layer.norm2_gain, layer.norm2_bias)
        h2 = nc.gelu(nc.add(nc.matmul(h2, layer.ffn_in), layer.ffn_in_bias))
        h2 = nc.add(nc.matmul(h2, layer.ffn_out), layer.ffn_out_bias)
        x = nc.add(x, drop(h2))
        layer_hidden.append(x)

    final = x
    if config.num_layers >= 1:
        final = nc.layer_norm(x, weights.final_norm_gain, weights.final_norm_bias)
    return EncoderOutput(layer_hidden=layer_hidden, final_hidden=final)


def mlm_logits(config: ModelConfig, weights: ModelWeights, final_hidden: Tensor) -> Tensor:
    """Project hidden states to vocabulary logits (tied to the token
    embedding by default)."""
    if config.tie_mlm_head:
        proj = nc.transpose(weights.token_embeddings)
    else:
        proj = weights.mlm_proj
    return nc.add(nc.matmul(final_hidden, proj), weights.mlm_bias)


def token_classification_logits(config: ModelConfig, weights: ModelWeights, final_hidden: Tensor) -> Tensor:
    if weights.cls_head is None:
        raise ContractError("model has no classification head (num_tags = 0)")
    return nc.matmul(final_hidden, weights.cls_head)


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "EADL" | version u32 LE | metadata length u32 LE | metadata JSON
# (config + ordered manifest of {name, shape}) | concatenated raw
# little-endian f32 payloads in manifest order, no padding.

_SPEC_TAGS = {
    att.Full: "full",
    att.SlidingWindow: "sliding_window",
    att.BlockSparse: "block_sparse",
    att.Nystrom: "nystrom",
    att.LocalSparseGlobal: "local_sparse_global",
}
_TAG_SPECS = {v: k for k, v in _SPEC_TAGS.items()}


def spec_to_dict(spec: att.AttentionSpec) -> dict:
    d = {"variant": _SPEC_TAGS[type(spec)]}
    for f in dataclasses.fields(spec):
        value = getattr(spec, f.name)
        d[f.name] = list(value) if isinstance(value, tuple) else value
    return d


def spec_from_dict(d: dict) -> att.AttentionSpec:
    d = dict(d)
    tag = d.pop("variant", None)
    if tag not in _TAG_SPECS:
        raise FormatError("manifest_mismatch", f"unknown attention variant {tag!r}")
    cls = _TAG_SPECS[tag]
    names = {f.name for f in dataclasses.fields(cls)}
    if set(d) != names:
        raise FormatError("manifest_mismatch", f"bad fields for variant {tag!r}: {sorted(d)}")
    if "global_tokens" in d and isinstance(d["global_tokens"], list):
        d["global_tokens"] = tuple(d["global_tokens"])
    return cls(**d)


def config_to_dict(config: ModelConfig) -> dict:
    d = dataclasses.asdict(config)
    d["attention_spec"] = spec_to_dict(config.attention_spec)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    names = {f.name for f in dataclasses.fields(ModelConfig)}
    if set(d) != names:
        raise FormatError("manifest_mismatch", f"bad config fields: {sorted(d)}")
    d = dict(d)
    d["attention_spec"] = spec_from_dict(d["attention_spec"])
    return ModelConfig(**d)


def save_checkpoint(config: ModelConfig, weights: ModelWeights, path) -> None:
    manifest = named_tensors(config, weights)
    meta = {
        "config": config_to_dict(config),
        "manifest": [{"name": n, "shape": list(t.data.shape)} for n, t in manifest],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in manifest:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ModelWeights]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad_magic", f"not a checkpoint file: magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError("bad_version", f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    meta_end = 12 + meta_len
    if len(raw) < meta_end:
        raise FormatError("truncated", "metadata extends past end of file")
    try:
        meta = json.loads(raw[12:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError("manifest_mismatch", f"unreadable metadata: {e}") from e
    config = config_from_dict(meta["config"])
    config.validate()

    expected = _expected_manifest(config)
    got = [(entry["name"], tuple(entry["shape"])) for entry in meta["manifest"]]
    if got != expected:
        raise FormatError(
            "manifest_mismatch",
            f"manifest does not match config-derived shapes (got {got[:3]}..., want {expected[:3]}...)",
        )

    floats_needed = sum(int(np.prod(shape)) for _, shape in expected)
    payload = raw[meta_end:]
    if len(payload) < 4 * floats_needed:
        raise FormatError(
            "truncated",
            f"payload holds {len(payload) // 4} floats, manifest declares {floats_needed}",
        )
    if len(payload) > 4 * floats_needed:
        raise FormatError("manifest_mismatch", "payload longer than manifest declares")
    flat = np.frombuffer(payload, dtype="<f4")

    tensors: dict[str, Tensor] = {}
    offset = 0
    for name, shape in expected:
        size = int(np.prod(shape))
        arr = flat[offset : offset + size].reshape(shape).copy()  # frombuffer is read-only
        tensors[name] = Tensor(arr, requires_grad=True)
        offset += size
    weights = _weights_from_named(config, tensors)
    return config, weights


def _expected_manifest(config: ModelConfig) -> list[tuple[str, tuple]]:
    h, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    shapes = {
        "attn_q": (h, h), "attn_k": (h, h), "attn_v": (h, h), "attn_out": (h, h),
        "norm1_gain": (h,), "norm1_bias": (h,),
        "ffn_in": (h, f), "ffn_in_bias": (f,),
        "ffn_out": (f, h), "ffn_out_bias": (h,),
        "norm2_gain": (h,), "norm2_bias": (h,),
    }
    out = [("token_embeddings", (v, h)), ("position_embeddings", (config.max_positions, h))]
    for i in range(config.num_layers):
        for name in _LAYER_FIELDS:
            out.append((f"layers.{i}.{name}", shapes[name]))
    if config.num_layers >= 1:
        out.append(("final_norm_gain", (h,)))
        out.append(("final_norm_bias", (h,)))
    if not config.tie_mlm_head:
        out.append(("mlm_proj", (h, v)))
    out.append(("mlm_bias", (v,)))
    if config.num_tags >= 1:
        out.append(("cls_head", (h, config.num_tags)))
    return out


def _weights_from_named(config: ModelConfig, tensors: dict[str, Tensor]) -> ModelWeights:
    layers = []
    for i in range(config.num_layers):
        layers.append(LayerWeights(**{name: tensors[f"layers.{i}.{name}"] for name in _LAYER_FIELDS}))
    return ModelWeights(
        token_embeddings=tensors["token_embeddings"],
        position_embeddings=tensors["position_embeddings"],
        layers=layers,
        final_norm_gain=tensors.get("final_norm_gain"),
        final_norm_bias=tensors.get("final_norm_bias"),
        mlm_proj=tensors.get("mlm_proj"),
        mlm_bias=tensors["mlm_bias"],
        cls_head=tensors.get("cls_head"),
    )


def clone_weights(config: ModelConfig, weights: ModelWeights) -> ModelWeights:
    """Deep copy with bit-identical payloads."""
    named = {n: Tensor(t.data.copy(), requires_grad=True) for n, t in named_tensors(config, weights)}
    return _weights_from_named(config, named)
