"""Pre-norm transformer building blocks.

Both the encoder and the decoder normalize before each sub-layer and
add the sub-layer's (dropped-out) output to a residual. The decoder's
second residual is anchored, by default, at the layer input rather
than at the output of the self-attention block; residual_mode
"standard" switches to the more common anchoring. No extra
normalization is applied after the final layer of a stack.
"""

from __future__ import annotations

import math

import numpy as np

from .attention import AttentionWeights, multi_head_attention, _xavier
from .errors import ConfigError, ParamError
from .tensor import Tensor, add, dropout, embedding, layer_norm, matmul, relu, scale

RESIDUAL_MODES = ("verbatim", "standard")


def positional_encoding(n_positions: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table: sin on even columns, cos on odd ones.

    Column pair 2i / 2i+1 shares the angular rate 1/10000^(2i/d_model).
    """
    if d_model % 2 != 0:
        raise ParamError(f"positional encoding needs an even width, got {d_model}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((n_positions, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(pos / rate)
    table[:, 1::2] = np.cos(pos / rate)
    return table


def embed_scaled(ids: np.ndarray, table: Tensor) -> Tensor:
    """Embedding lookup scaled by sqrt(embedding width)."""
    return scale(embedding(table, ids), math.sqrt(table.shape[-1]))


class DropoutPolicy:
    """One dropout switch threaded through a whole forward pass.

    Evaluation mode is the identity; training mode draws masks from the
    generator it was built with, so a fixed seed fixes the pass.
    """

    def __init__(self, p: float = 0.0, rng: np.random.Generator | None = None):
        if not 0.0 <= p < 1.0:
            raise ParamError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng
        self.train = rng is not None and p > 0.0

    @classmethod
    def inference(cls) -> "DropoutPolicy":
        return cls(0.0, None)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.train:
            return x
        return dropout(x, self.p, train=True, rng=self.rng)


class LayerNormParams:
    """Learnable gain (ones) and bias (zeros) for one normalization site."""

    def __init__(self, width: int):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class FcnWeights:
    """Two-layer position-wise network with a ReLU between."""

    def __init__(self, d_model: int, d_inner: int, rng: np.random.Generator):
        if d_inner <= d_model:
            raise ConfigError(
                f"inner width {d_inner} must exceed model width {d_model}"
            )
        self.w1 = _xavier(rng, d_model, d_inner)
        self.b1 = Tensor(np.zeros(d_inner), requires_grad=True)
        self.w2 = _xavier(rng, d_inner, d_model)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def fcn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """relu(x w1 + b1) w2 + b2, applied to each position independently."""
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2)


class EncoderLayerWeights:
    def __init__(self, d_model: int, n_heads: int, d_inner: int,
                 rng: np.random.Generator):
        self.norm_attn = LayerNormParams(d_model)
        self.attn = AttentionWeights(d_model, n_heads, rng)
        self.norm_fcn = LayerNormParams(d_model)
        self.fcn = FcnWeights(d_model, d_inner, rng)

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        named.update(self.norm_attn.named_tensors(f"{prefix}.norm_attn"))
        named.update(self.attn.named_tensors(f"{prefix}.attn"))
        named.update(self.norm_fcn.named_tensors(f"{prefix}.norm_fcn"))
        named.update(self.fcn.named_tensors(f"{prefix}.fcn"))
        return named


def encoder_layer(z: Tensor, w: EncoderLayerWeights, drop: DropoutPolicy,
                  mask: np.ndarray | None = None) -> Tensor:
    """Self-attention then position-wise network, each pre-normed."""
    normed = w.norm_attn(z)
    r = add(z, drop(multi_head_attention(normed, normed, normed, w.attn, mask=mask)))
    normed = w.norm_fcn(r)
    return add(r, drop(fcn(normed, w.fcn.w1, w.fcn.b1, w.fcn.w2, w.fcn.b2)))


class DecoderLayerWeights:
    def __init__(self, d_model: int, n_heads: int, d_inner: int,
                 rng: np.random.Generator):
        self.norm_self = LayerNormParams(d_model)
        self.self_attn = AttentionWeights(d_model, n_heads, rng)
        self.norm_cross = LayerNormParams(d_model)
        self.cross_attn = AttentionWeights(d_model, n_heads, rng)
        self.norm_fcn = LayerNormParams(d_model)
        self.fcn = FcnWeights(d_model, d_inner, rng)

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        named.update(self.norm_self.named_tensors(f"{prefix}.norm_self"))
        named.update(self.self_attn.named_tensors(f"{prefix}.self_attn"))
        named.update(self.norm_cross.named_tensors(f"{prefix}.norm_cross"))
        named.update(self.cross_attn.named_tensors(f"{prefix}.cross_attn"))
        named.update(self.norm_fcn.named_tensors(f"{prefix}.norm_fcn"))
        named.update(self.fcn.named_tensors(f"{prefix}.fcn"))
        return named


def decoder_layer(g: Tensor, memory: Tensor, w: DecoderLayerWeights,
                  drop: DropoutPolicy, self_mask: np.ndarray | None = None,
                  memory_mask: np.ndarray | None = None,
                  residual_mode: str = "verbatim") -> Tensor:
    """Masked self-attention, attention over the encoder, then the FCN.

    residual_mode picks the anchor of the second residual connection:
    "verbatim" adds the encoder-attention output to the layer input g,
    "standard" adds it to the self-attention output b.
    """
    if residual_mode not in RESIDUAL_MODES:
        raise ConfigError(f"unknown residual_mode {residual_mode!r}")
    normed = w.norm_self(g)
    b = add(g, drop(multi_head_attention(normed, normed, normed, w.self_attn,
                                         mask=self_mask)))
    normed = w.norm_cross(b)
    anchor = g if residual_mode == "verbatim" else b
    u = add(anchor, drop(multi_head_attention(normed, memory, memory, w.cross_attn,
                                              mask=memory_mask)))
    normed = w.norm_fcn(u)
    return add(u, drop(fcn(normed, w.fcn.w1, w.fcn.b1, w.fcn.w2, w.fcn.b2)))


class EncoderStack:
    def __init__(self, n_layers: int, d_model: int, n_heads: int, d_inner: int,
                 rng: np.random.Generator):
        if n_layers < 1:
            raise ConfigError(f"encoder needs at least one layer, got {n_layers}")
        self.layers = [EncoderLayerWeights(d_model, n_heads, d_inner, rng)
                       for _ in range(n_layers)]

    def __call__(self, z: Tensor, drop: DropoutPolicy,
                 mask: np.ndarray | None = None) -> Tensor:
        for layer in self.layers:
            z = encoder_layer(z, layer, drop, mask=mask)
        return z

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        for i, layer in enumerate(self.layers):
            named.update(layer.named_tensors(f"{prefix}.{i}"))
        return named


class DecoderStack:
    def __init__(self, n_layers: int, d_model: int, n_heads: int, d_inner: int,
                 rng: np.random.Generator):
        if n_layers < 1:
            raise ConfigError(f"decoder needs at least one layer, got {n_layers}")
        self.layers = [DecoderLayerWeights(d_model, n_heads, d_inner, rng)
                       for _ in range(n_layers)]

    def __call__(self, g: Tensor, memory: Tensor, drop: DropoutPolicy,
                 self_mask: np.ndarray | None = None,
                 memory_mask: np.ndarray | None = None,
                 residual_mode: str = "verbatim") -> Tensor:
        for layer in self.layers:
            g = decoder_layer(g, memory, layer, drop, self_mask=self_mask,
                              memory_mask=memory_mask, residual_mode=residual_mode)
        return g

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        for i, layer in enumerate(self.layers):
            named.update(layer.named_tensors(f"{prefix}.{i}"))
        return named
