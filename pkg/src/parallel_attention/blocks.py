"""Embeddings, positional encoding, and the encoder/decoder layers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionMask, MultiHeadParams, multi_head_attention
from .exceptions import ConfigError
from .tensor import Tensor, add, gather_rows, layer_norm, matmul, relu, scale

LN_EPS = 1e-6


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, d_model: int) -> "LayerNormParams":
        return cls(ones(d_model), zeros(d_model))

    def parameters(self):
        return [("gain", self.gain), ("bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, LN_EPS)


@dataclass
class FeedForward:
    """affine → ReLU → affine."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, d_model: int, d_ff: int) -> "FeedForward":
        return cls(xavier_uniform(rng, d_model, d_ff), zeros(d_ff),
                   xavier_uniform(rng, d_ff, d_model), zeros(d_model))

    def parameters(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(relu(add(matmul(x, self.w1), self.b1)), self.w2), self.b2)


def _attention_params(rng: np.random.Generator, d_model: int, heads: int) -> MultiHeadParams:
    if heads < 1 or d_model % heads:
        raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
    return MultiHeadParams(*(xavier_uniform(rng, d_model, d_model) for _ in range(4)), heads=heads)


def _prefixed(prefix: str, pairs):
    return [(f"{prefix}.{name}", t) for name, t in pairs]


@dataclass
class EncoderLayer:
    self_attn: MultiHeadParams
    ffn: FeedForward
    norm1: LayerNormParams
    norm2: LayerNormParams

    @classmethod
    def create(cls, rng: np.random.Generator, d_model: int, d_ff: int, heads: int) -> "EncoderLayer":
        return cls(_attention_params(rng, d_model, heads), FeedForward.create(rng, d_model, d_ff),
                   LayerNormParams.create(d_model), LayerNormParams.create(d_model))

    def parameters(self):
        return (_prefixed("self_attn", self.self_attn.parameters())
                + _prefixed("ffn", self.ffn.parameters())
                + _prefixed("norm1", self.norm1.parameters())
                + _prefixed("norm2", self.norm2.parameters()))


@dataclass
class DecoderLayer:
    self_attn: MultiHeadParams
    cross_attn: MultiHeadParams
    ffn: FeedForward
    norm1: LayerNormParams
    norm2: LayerNormParams
    norm3: LayerNormParams

    @classmethod
    def create(cls, rng: np.random.Generator, d_model: int, d_ff: int, heads: int) -> "DecoderLayer":
        return cls(_attention_params(rng, d_model, heads), _attention_params(rng, d_model, heads),
                   FeedForward.create(rng, d_model, d_ff), LayerNormParams.create(d_model),
                   LayerNormParams.create(d_model), LayerNormParams.create(d_model))

    def parameters(self):
        return (_prefixed("self_attn", self.self_attn.parameters())
                + _prefixed("cross_attn", self.cross_attn.parameters())
                + _prefixed("ffn", self.ffn.parameters())
                + _prefixed("norm1", self.norm1.parameters())
                + _prefixed("norm2", self.norm2.parameters())
                + _prefixed("norm3", self.norm3.parameters()))


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: even columns sin(pos / 10000^(2i/d)), odd columns cos of the same angle."""
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.empty((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def embed(ids, table: Tensor, pe: np.ndarray) -> Tensor:
    """Row gather scaled by √d_model plus the positional slice. ``ids``: ``[len]`` or ``[batch, len]``."""
    ids = np.asarray(ids)
    length = ids.shape[-1]
    if length > pe.shape[0]:
        raise ConfigError(f"sequence length {length} exceeds max_len {pe.shape[0]}")
    d_model = table.shape[1]
    return add(scale(gather_rows(table, ids), math.sqrt(d_model)), Tensor(pe[:length]))


def encoder_layer_forward(x: Tensor, layer: EncoderLayer, src_mask: AttentionMask | None = None,
                          record: list | None = None) -> Tensor:
    """Post-norm: y = norm(x + attn(x)); out = norm(y + ffn(y))."""
    a, w = multi_head_attention(x, x, x, layer.self_attn, src_mask)
    if record is not None:
        record.append(w)
    y = layer.norm1(add(x, a))
    return layer.norm2(add(y, layer.ffn(y)))


def decoder_layer_forward(y: Tensor, enc: Tensor, layer: DecoderLayer,
                          self_mask: AttentionMask | None = None,
                          cross_mask: AttentionMask | None = None,
                          record: list | None = None) -> Tensor:
    """Masked self-attention, cross-attention over ``enc``, then FFN; each wrapped in add & norm."""
    a, w_self = multi_head_attention(y, y, y, layer.self_attn, self_mask)
    h1 = layer.norm1(add(y, a))
    c, w_cross = multi_head_attention(h1, enc, enc, layer.cross_attn, cross_mask)
    h2 = layer.norm2(add(h1, c))
    if record is not None:
        record.extend((w_self, w_cross))
    return layer.norm3(add(h2, layer.ffn(h2)))
