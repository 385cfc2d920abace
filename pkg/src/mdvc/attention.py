"""Scaled dot-product and multi-head attention.

Masks are plain boolean numpy arrays shaped (query_len, key_len), or
(batch, query_len, key_len) for batched inputs, with True marking an
allowed position. They are data, not graph nodes: no gradient flows
through a mask.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, concat, matmul, scale, softmax, transpose_last


def build_mask(query_len: int, key_len: int, causal: bool = False,
               key_padding: Sequence[bool] | np.ndarray | None = None) -> np.ndarray:
    """Combine a causal triangle with key-padding columns.

    key_padding flags padded key positions with True; those columns are
    disallowed for every query. With causal=True query i may only see
    keys j <= i.
    """
    mask = np.ones((query_len, key_len), dtype=bool)
    if causal:
        mask &= np.tril(np.ones((query_len, key_len), dtype=bool))
    if key_padding is not None:
        pad = np.asarray(key_padding, dtype=bool)
        if pad.shape != (key_len,):
            raise ShapeError(f"key_padding length {pad.shape} != key_len {key_len}")
        mask &= ~pad[None, :]
    return mask


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kT / sqrt(d_k)) v with optional position masking."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape} != key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key rows {k.shape} != value rows {v.shape}")
    d_k = q.shape[-1]
    logits = scale(matmul(q, transpose_last(k)), 1.0 / math.sqrt(d_k))
    weights = softmax(logits, mask=mask)
    return matmul(weights, v)


class AttentionWeights:
    """Per-head query/key/value projections plus one output projection.

    Each head h owns three (d_model, d_head) matrices; head outputs are
    concatenated in head order and mapped back to d_model by w_out.
    Projections carry no biases.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if n_heads < 1 or d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.w_q = [_xavier(rng, d_model, self.d_head) for _ in range(n_heads)]
        self.w_k = [_xavier(rng, d_model, self.d_head) for _ in range(n_heads)]
        self.w_v = [_xavier(rng, d_model, self.d_head) for _ in range(n_heads)]
        self.w_out = _xavier(rng, self.d_head * n_heads, d_model)

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        for h in range(self.n_heads):
            named[f"{prefix}.q{h}"] = self.w_q[h]
            named[f"{prefix}.k{h}"] = self.w_k[h]
            named[f"{prefix}.v{h}"] = self.w_v[h]
        named[f"{prefix}.out"] = self.w_out
        return named


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, weights: AttentionWeights,
                         mask: np.ndarray | None = None) -> Tensor:
    """Project into each head, attend, concatenate, and project back."""
    if q.shape[-1] != weights.d_model:
        raise ShapeError(f"query width {q.shape} != d_model {weights.d_model}")
    heads = []
    for h in range(weights.n_heads):
        heads.append(scaled_dot_product_attention(
            matmul(q, weights.w_q[h]),
            matmul(k, weights.w_k[h]),
            matmul(v, weights.w_v[h]),
            mask=mask,
        ))
    return matmul(concat(heads), weights.w_out)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                  requires_grad=True)
