"""Scaled dot-product and multi-head attention with padding and causal masks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionError, MaskError
from .tensor import Tensor, masked_fill, matmul, reshape, softmax, swapaxes, scale

MASK_FILL = -1e9


@dataclass(frozen=True)
class AttentionMask:
    """Boolean ``allowed`` matrix broadcastable to ``[..., q_len, k_len]``."""

    allowed: np.ndarray
    kind: str = "padding"

    def __and__(self, other: "AttentionMask") -> "AttentionMask":
        return AttentionMask(np.logical_and(self.allowed, other.allowed), "combined")

    def expand_heads(self) -> "AttentionMask":
        """Insert a head axis so the mask applies to ``[..., heads, q, k]`` scores."""
        return AttentionMask(self.allowed[..., None, :, :], self.kind)


def make_causal_mask(length: int) -> AttentionMask:
    if length < 1:
        raise ConfigError(f"causal mask length must be positive, got {length}")
    return AttentionMask(np.tril(np.ones((length, length), dtype=bool)), "causal")


def make_padding_mask(ids, pad_id: int = 0) -> AttentionMask:
    """Keys equal to ``pad_id`` are disallowed. ``ids`` is ``[k_len]`` or ``[batch, k_len]``."""
    valid = np.asarray(ids) != pad_id
    return AttentionMask(valid[..., None, :], "padding")


def _check_mask(allowed: np.ndarray, scores_shape: tuple) -> np.ndarray:
    if allowed.ndim > len(scores_shape) or any(
            m not in (1, s) for m, s in zip(allowed.shape[::-1], scores_shape[::-1])):
        raise DimensionError(f"mask shape {allowed.shape} does not fit attention scores {scores_shape}")
    full = np.broadcast_to(allowed, scores_shape)
    if not full.any(axis=-1).all():
        raise MaskError("attention mask leaves a query row with no allowed key")
    return full


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 mask: AttentionMask | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / √d_k) v over the last two axes; returns (output, weights)."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape} and key width {k.shape} differ")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key length {k.shape} and value length {v.shape} differ")
    scores = scale(matmul(q, swapaxes(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = masked_fill(scores, _check_mask(mask.allowed, scores.shape), MASK_FILL)
    weights = softmax(scores)
    return matmul(weights, v), weights


@dataclass
class MultiHeadParams:
    """Fused projections ``[d_model, d_model]``; head ``i`` owns columns ``i*d_k:(i+1)*d_k``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def parameters(self):
        return [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return swapaxes(reshape(x, (*lead, n, heads, d // heads)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    return reshape(swapaxes(x, -2, -3), (*lead, n, h * dk))


def multi_head_attention(x_q: Tensor, x_k: Tensor, x_v: Tensor, params: MultiHeadParams,
                         mask: AttentionMask | None = None) -> tuple[Tensor, Tensor]:
    """Project, attend per head, concatenate, project back.

    Inputs are ``[..., len, d_model]``; weights come back as ``[..., heads, q_len, k_len]``.
    """
    d_model, h = x_q.shape[-1], params.heads
    if h < 1 or d_model % h:
        raise ConfigError(f"d_model={d_model} is not divisible by heads={h}")
    q = _split_heads(matmul(x_q, params.w_q), h)
    k = _split_heads(matmul(x_k, params.w_k), h)
    v = _split_heads(matmul(x_v, params.w_v), h)
    out, weights = scaled_dot_product_attention(q, k, v, mask.expand_heads() if mask is not None else None)
    return matmul(_merge_heads(out), params.w_o), weights
