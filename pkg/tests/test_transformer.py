import numpy as np
import pytest
from conftest import gradcheck

from mdvc.attention import build_mask
from mdvc.errors import ConfigError, ParamError
from mdvc.tensor import Tensor, mul, sum_tensor
from mdvc.transformer import (
    DecoderLayerWeights,
    DecoderStack,
    DropoutPolicy,
    EncoderLayerWeights,
    EncoderStack,
    FcnWeights,
    LayerNormParams,
    decoder_layer,
    embed_scaled,
    encoder_layer,
    fcn,
    positional_encoding,
)

EVAL = DropoutPolicy.inference()


# ------------------------------------------------- independent references

def np_layer_norm(x, gain, bias, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def np_softmax(z, mask=None):
    if mask is not None:
        z = np.where(mask, z, -1.0e9)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def np_mha(q, k, v, w, mask=None):
    outs = []
    for h in range(w.n_heads):
        qh = q @ w.w_q[h].data
        kh = k @ w.w_k[h].data
        vh = v @ w.w_v[h].data
        att = np_softmax(qh @ np.swapaxes(kh, -1, -2) / np.sqrt(qh.shape[-1]), mask)
        outs.append(att @ vh)
    return np.concatenate(outs, axis=-1) @ w.w_out.data


def np_fcn(x, w):
    return np.maximum(x @ w.w1.data + w.b1.data, 0.0) @ w.w2.data + w.b2.data


def np_norm(x, params):
    return np_layer_norm(x, params.gain.data, params.bias.data)


# ------------------------------------------------------------ embeddings

def test_positional_encoding_frozen_row():
    table = positional_encoding(2, 4)
    np.testing.assert_allclose(table[1], [0.84147, 0.54030, 0.01000, 0.99995],
                               atol=1e-4)
    expected = [np.sin(1.0), np.cos(1.0), np.sin(0.01), np.cos(0.01)]
    np.testing.assert_allclose(table[1], expected, atol=1e-12)
    np.testing.assert_allclose(table[0], [0.0, 1.0, 0.0, 1.0], atol=1e-15)


def test_positional_encoding_rates_share_column_pairs():
    table = positional_encoding(50, 8)
    for i in range(4):
        rate = 10000.0 ** (2 * i / 8)
        angles = np.arange(50) / rate
        np.testing.assert_allclose(table[:, 2 * i], np.sin(angles), atol=1e-12)
        np.testing.assert_allclose(table[:, 2 * i + 1], np.cos(angles), atol=1e-12)


def test_positional_encoding_rejects_odd_width():
    with pytest.raises(ParamError):
        positional_encoding(4, 5)


def test_embed_scaled_multiplies_by_sqrt_width():
    table = Tensor(np.ones((3, 512)))
    out = embed_scaled(np.array([1]), table)
    np.testing.assert_allclose(out.data, np.full((1, 512), 22.627416997969522),
                               atol=1e-12)


# -------------------------------------------------------------- dropout

def test_dropout_policy_inference_is_identity():
    x = Tensor(np.ones(4))
    assert EVAL(x) is x
    assert DropoutPolicy(0.5, None)(x) is x  # no rng means eval
    assert DropoutPolicy(0.0, np.random.default_rng(0))(x) is x


def test_dropout_policy_validates_rate():
    with pytest.raises(ParamError):
        DropoutPolicy(1.0, np.random.default_rng(0))


def test_dropout_policy_train_mode_draws_masks():
    policy = DropoutPolicy(0.5, np.random.default_rng(0))
    out = policy(Tensor(np.ones(1000)))
    assert (out.data == 0.0).any() and (out.data == 2.0).any()


# ------------------------------------------------------------------ fcn

def test_fcn_hand_example():
    x = Tensor([[1.0, 0.0]])
    w1 = Tensor([[1.0, -1.0], [0.0, 0.0]])
    b1 = Tensor(np.zeros(2))
    w2 = Tensor(np.eye(2))
    b2 = Tensor(np.zeros(2))
    np.testing.assert_allclose(fcn(x, w1, b1, w2, b2).data, [[1.0, 0.0]], atol=1e-12)


def test_fcn_zero_weights_give_zero_output():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    zeros = Tensor(np.zeros((4, 8))), Tensor(np.zeros(8)), Tensor(np.zeros((8, 4)))
    out = fcn(x, zeros[0], zeros[1], zeros[2], Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((3, 4)))


def test_fcn_weights_require_wider_inner():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        FcnWeights(8, 8, rng)
    with pytest.raises(ConfigError):
        FcnWeights(8, 4, rng)
    w = FcnWeights(1024, 2048, rng)
    x = Tensor(rng.normal(size=(3, 1024)))
    assert fcn(x, w.w1, w.b1, w.w2, w.b2).shape == (3, 1024)


# --------------------------------------------------------- layer oracles

def test_encoder_layer_matches_manual_composition():
    rng = np.random.default_rng(42)
    w = EncoderLayerWeights(6, 2, 12, rng)
    x = rng.normal(size=(2, 4, 6))
    mask = build_mask(4, 4, key_padding=[False, False, False, True])

    zbar = np_norm(x, w.norm_attn)
    r = x + np_mha(zbar, zbar, zbar, w.attn, mask)
    expected = r + np_fcn(np_norm(r, w.norm_fcn), w.fcn)

    out = encoder_layer(Tensor(x), w, EVAL, mask=mask)
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


@pytest.mark.parametrize("mode", ["verbatim", "standard"])
def test_decoder_layer_matches_manual_composition(mode):
    rng = np.random.default_rng(7)
    w = DecoderLayerWeights(6, 2, 12, rng)
    g = rng.normal(size=(2, 3, 6))
    memory = rng.normal(size=(2, 5, 6))
    self_mask = build_mask(3, 3, causal=True)

    gbar = np_norm(g, w.norm_self)
    b = g + np_mha(gbar, gbar, gbar, w.self_attn, self_mask)
    bbar = np_norm(b, w.norm_cross)
    anchor = g if mode == "verbatim" else b
    u = anchor + np_mha(bbar, memory, memory, w.cross_attn)
    expected = u + np_fcn(np_norm(u, w.norm_fcn), w.fcn)

    out = decoder_layer(Tensor(g), Tensor(memory), w, EVAL,
                        self_mask=self_mask, residual_mode=mode)
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_residual_modes_differ():
    rng = np.random.default_rng(8)
    w = DecoderLayerWeights(4, 2, 8, rng)
    g = Tensor(rng.normal(size=(1, 3, 4)))
    memory = Tensor(rng.normal(size=(1, 4, 4)))
    a = decoder_layer(g, memory, w, EVAL, residual_mode="verbatim")
    b = decoder_layer(g, memory, w, EVAL, residual_mode="standard")
    assert np.abs(a.data - b.data).max() > 1e-6


def test_decoder_layer_rejects_unknown_mode():
    rng = np.random.default_rng(9)
    w = DecoderLayerWeights(4, 2, 8, rng)
    with pytest.raises(ConfigError):
        decoder_layer(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 2, 4))),
                      w, EVAL, residual_mode="postnorm")


def _zero_attention(attn):
    for t in (*attn.w_q, *attn.w_k, *attn.w_v, attn.w_out):
        t.data[:] = 0.0


def test_zeroed_layers_are_identity():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 3, 6))

    enc = EncoderLayerWeights(6, 2, 12, rng)
    _zero_attention(enc.attn)
    enc.fcn.w1.data[:] = 0.0
    enc.fcn.w2.data[:] = 0.0
    out = encoder_layer(Tensor(x), enc, EVAL)
    np.testing.assert_array_equal(out.data, x)

    dec = DecoderLayerWeights(6, 2, 12, rng)
    _zero_attention(dec.self_attn)
    _zero_attention(dec.cross_attn)
    dec.fcn.w1.data[:] = 0.0
    dec.fcn.w2.data[:] = 0.0
    for mode in ("verbatim", "standard"):
        out = decoder_layer(Tensor(x), Tensor(rng.normal(size=(2, 4, 6))), dec,
                            EVAL, residual_mode=mode)
        np.testing.assert_array_equal(out.data, x)


# ---------------------------------------------------------------- stacks

def test_stack_of_two_equals_double_application():
    rng = np.random.default_rng(11)
    stack = EncoderStack(2, 6, 2, 12, rng)
    x = Tensor(rng.normal(size=(1, 4, 6)))
    manual = encoder_layer(encoder_layer(x, stack.layers[0], EVAL),
                           stack.layers[1], EVAL)
    np.testing.assert_array_equal(stack(x, EVAL).data, manual.data)

    dstack = DecoderStack(2, 6, 2, 12, rng)
    g = Tensor(rng.normal(size=(1, 3, 6)))
    mem = Tensor(rng.normal(size=(1, 4, 6)))
    manual = decoder_layer(
        decoder_layer(g, mem, dstack.layers[0], EVAL), mem, dstack.layers[1], EVAL)
    np.testing.assert_array_equal(dstack(g, mem, EVAL).data, manual.data)


def test_stack_needs_at_least_one_layer():
    rng = np.random.default_rng(12)
    with pytest.raises(ConfigError):
        EncoderStack(0, 6, 2, 12, rng)
    with pytest.raises(ConfigError):
        DecoderStack(0, 6, 2, 12, rng)


def test_stack_names_are_per_layer_and_unique():
    rng = np.random.default_rng(13)
    stack = DecoderStack(2, 4, 2, 8, rng)
    names = stack.named_tensors("dec")
    assert any(n.startswith("dec.0.") for n in names)
    assert any(n.startswith("dec.1.") for n in names)
    assert len(names) == len(set(names))


# ------------------------------------------------------------ properties

def test_decoder_causality_prefix_is_bit_identical():
    rng = np.random.default_rng(14)
    w = DecoderLayerWeights(8, 2, 16, rng)
    mem = Tensor(rng.normal(size=(1, 5, 8)))
    g = rng.normal(size=(1, 6, 8))
    mask = build_mask(6, 6, causal=True)
    base = decoder_layer(Tensor(g), mem, w, EVAL, self_mask=mask).data
    for t in (1, 3, 5):
        altered = g.copy()
        altered[:, t:, :] = rng.normal(size=(1, 6 - t, 8))
        out = decoder_layer(Tensor(altered), mem, w, EVAL, self_mask=mask).data
        np.testing.assert_array_equal(out[:, :t, :], base[:, :t, :])


def test_encoder_is_sensitive_to_row_order_once_positions_added():
    rng = np.random.default_rng(15)
    w = EncoderLayerWeights(6, 2, 12, rng)
    x = rng.normal(size=(4, 6))
    pe = positional_encoding(4, 6)
    out = encoder_layer(Tensor(x + pe), w, EVAL).data
    perm = x[::-1] + pe
    out_perm = encoder_layer(Tensor(perm), w, EVAL).data
    assert np.abs(out[::-1] - out_perm).max() > 1e-6


def test_grad_encoder_layer():
    rng = np.random.default_rng(16)
    w = EncoderLayerWeights(4, 2, 8, rng)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    probe = rng.normal(size=(2, 3, 4))
    leaves = [x] + list(w.named_tensors("e").values())
    gradcheck(lambda: sum_tensor(mul(encoder_layer(x, w, EVAL), Tensor(probe))),
              leaves, sample=25)


def test_grad_decoder_layer_both_modes():
    rng = np.random.default_rng(17)
    w = DecoderLayerWeights(4, 2, 8, rng)
    g = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
    mem = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
    mask = build_mask(3, 3, causal=True)
    probe = rng.normal(size=(1, 3, 4))
    leaves = [g, mem] + list(w.named_tensors("d").values())
    for mode in ("verbatim", "standard"):
        for leaf in leaves:
            leaf.zero_grad()
        gradcheck(
            lambda: sum_tensor(mul(
                decoder_layer(g, mem, w, EVAL, self_mask=mask, residual_mode=mode),
                Tensor(probe))),
            leaves, sample=20)


def test_layer_norm_params_initialize_to_identity_transform():
    params = LayerNormParams(5)
    np.testing.assert_array_equal(params.gain.data, np.ones(5))
    np.testing.assert_array_equal(params.bias.data, np.zeros(5))
