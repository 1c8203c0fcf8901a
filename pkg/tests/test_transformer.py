"""Attention stack: oracles, equivariance, scaling identity, gradients."""

import math

import numpy as np
import pytest

from nerfdesk.autodiff import (Graph, Tensor, attention, backward, tsum)
from nerfdesk.rng import Prng
from nerfdesk.transformer import (DESK, AttentionConfig, count_params,
                                  init_transformer_params, layer_norm,
                                  layer_weights, multi_head,
                                  positional_encode, stack_param_count,
                                  stack_weights, transformer_forward)

from test_autodiff import check_grad, np_softmax


def rand(shape, seed):
    return Prng(seed).normal(shape)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(layers=-1)
    with pytest.raises(ValueError):
        AttentionConfig(heads=3, d_model=32)
    with pytest.raises(ValueError):
        AttentionConfig(heads=0)
    assert AttentionConfig(heads=4, d_model=32).d_k == 8


# ---------------------------------------------------------------------------
# attention oracles


def test_scaled_dot_attention_brute_force():
    q, k, v = rand((6, 8), 1), rand((9, 8), 2), rand((9, 5), 3)
    got = attention(Tensor(q), Tensor(k), Tensor(v)).value
    ref = np_softmax(q @ k.T / math.sqrt(8)) @ v
    assert np.abs(got - ref).max() < 1e-12


def test_attention_weight_rows_sum_to_one():
    q, k = rand((5, 4), 4), rand((7, 4), 5)
    # recover the weights by attending onto an identity value matrix
    eye = np.eye(7)
    p = attention(Tensor(q), Tensor(k), Tensor(eye)).value
    assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12


def test_scaling_identity():
    # attention with default 1/sqrt(d_k) equals unscaled attention on q/sqrt(d_k)
    q, k, v = rand((4, 16), 6), rand((6, 16), 7), rand((6, 3), 8)
    scaled = attention(Tensor(q), Tensor(k), Tensor(v)).value
    temp = attention(Tensor(q / math.sqrt(16)), Tensor(k), Tensor(v),
                     scale=1.0).value
    assert np.abs(scaled - temp).max() < 1e-12


def test_multi_head_matches_brute_force():
    cfg = AttentionConfig(layers=1, heads=2, d_model=8, d_ff=16)
    params = init_transformer_params(cfg, Prng(10))
    w = layer_weights(params, 0)
    x = rand((5, 8), 11)
    got = multi_head(Tensor(x), Tensor(x), w, heads=2).value

    dk = 4
    outs = []
    for i in range(2):
        qi = x @ w.wq.value[:, i * dk:(i + 1) * dk]
        ki = x @ w.wk.value[:, i * dk:(i + 1) * dk]
        vi = x @ w.wv.value[:, i * dk:(i + 1) * dk]
        outs.append(np_softmax(qi @ ki.T / math.sqrt(dk)) @ vi)
    ref = np.concatenate(outs, axis=1) @ w.wo.value + w.bo.value
    assert np.abs(got - ref).max() < 1e-10


def test_multi_head_rejects_bad_width():
    cfg = AttentionConfig(layers=1, heads=2, d_model=8, d_ff=16)
    w = layer_weights(init_transformer_params(cfg, Prng(1)), 0)
    with pytest.raises(ValueError):
        multi_head(Tensor(np.zeros((4, 6))), Tensor(np.zeros((4, 6))), w,
                   heads=4)


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_statistics():
    x = rand((7, 12), 12)
    gain = np.ones(12)
    bias = np.zeros(12)
    out = layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).value
    assert np.abs(out.mean(axis=1)).max() < 1e-12
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-4  # eps-shifted variance


def test_layer_norm_grad():
    x = rand((3, 6), 13)
    g = rand((6,), 14)
    b = rand((6,), 15)
    check_grad(lambda a, gg, bb: tsum(layer_norm(a, gg, bb)), x, g, b)


# ---------------------------------------------------------------------------
# full stack


def test_empty_stack_is_identity():
    x = rand((9, 16), 16)
    out = transformer_forward(Tensor(x), [], heads=2)
    assert np.array_equal(out.value, x)


def test_permutation_equivariance_bit_exact():
    cfg = AttentionConfig(layers=2, heads=2, d_model=16, d_ff=24)
    weights = stack_weights(init_transformer_params(cfg, Prng(21)), cfg)
    x = rand((11, 16), 22)
    perm = Prng(23).shuffle(11)
    base = transformer_forward(Tensor(x), weights, heads=2).value
    permuted = transformer_forward(Tensor(x[perm]), weights, heads=2).value
    assert np.array_equal(base[perm], permuted)


def test_stack_changes_tokens_and_is_deterministic():
    cfg = AttentionConfig(layers=1, heads=1, d_model=8, d_ff=8)
    weights = stack_weights(init_transformer_params(cfg, Prng(30)), cfg)
    x = rand((4, 8), 31)
    a = transformer_forward(Tensor(x), weights, heads=1).value
    b = transformer_forward(Tensor(x), weights, heads=1).value
    assert np.array_equal(a, b)
    assert not np.array_equal(a, x)


def test_stack_gradients():
    cfg = AttentionConfig(layers=1, heads=2, d_model=8, d_ff=8)
    params = init_transformer_params(cfg, Prng(33))
    x = rand((4, 8), 34)

    for pname in ("transformer.layer0.wq", "transformer.layer0.wo",
                  "transformer.layer0.ff.w1", "transformer.layer0.norm1.gain"):
        base = params[pname].value.copy()

        def run(arr):
            params[pname].value = arr
            weights = stack_weights(params, cfg)
            return transformer_forward(Tensor(x), weights, heads=2)

        with Graph():
            out = tsum(run(base.copy()))
            grads = backward(out)
        got = grads[params[pname]]

        eps = 1e-6
        flat = base.reshape(-1)
        ref = np.zeros_like(flat)
        for i in range(flat.size):
            probe = base.copy().reshape(-1)
            probe[i] = flat[i] + eps
            hi = tsum(run(probe.reshape(base.shape))).item()
            probe[i] = flat[i] - eps
            lo = tsum(run(probe.reshape(base.shape))).item()
            ref[i] = (hi - lo) / (2 * eps)
        params[pname].value = base
        scale = max(np.abs(ref).max(), 1e-8)
        assert np.abs(got.reshape(-1) - ref).max() / scale < 1e-4, pname


def test_token_grads_flow_through_stack():
    cfg = AttentionConfig(layers=1, heads=1, d_model=4, d_ff=4)
    weights_p = init_transformer_params(cfg, Prng(40))
    x = rand((3, 4), 41)

    def build(t):
        return tsum(transformer_forward(t, stack_weights(weights_p, cfg),
                                        heads=1))

    check_grad(build, x)


# ---------------------------------------------------------------------------
# positional encoding


def test_positional_encode_origin():
    out = positional_encode(np.zeros((1, 3)), 4)
    assert out.shape == (1, 27)
    assert np.array_equal(out[0, :3], np.zeros(3))
    sin_cos = out[0, 3:].reshape(4, 6)
    assert np.array_equal(sin_cos[:, :3], np.zeros((4, 3)))
    assert np.array_equal(sin_cos[:, 3:], np.ones((4, 3)))


def test_positional_encode_width():
    for nf in (0, 1, 4, 10):
        assert positional_encode(np.zeros((5, 3)), nf).shape == (5, 3 + 6 * nf)


def test_positional_encode_first_frequency():
    out = positional_encode(np.array([[0.5, 0.0, 0.0]]), 1)
    # layout [p, sin(pi p), cos(pi p)]
    assert abs(out[0, 3] - 1.0) < 1e-12          # sin(pi/2)
    assert abs(out[0, 6]) < 1e-12                # cos(pi/2)
    assert abs(out[0, 4]) < 1e-15 and abs(out[0, 7] - 1.0) < 1e-15


def test_positional_encode_frequency_doubling():
    p = np.array([[0.3, -0.2, 0.9]])
    out = positional_encode(p, 3)
    for j in range(3):
        base = 3 + 6 * j
        assert np.allclose(out[0, base:base + 3], np.sin(2.0**j * np.pi * p[0]))
        assert np.allclose(out[0, base + 3:base + 6],
                           np.cos(2.0**j * np.pi * p[0]))


# ---------------------------------------------------------------------------
# parameter counting


def test_stack_param_count_matches_reality():
    for cfg in (DESK, AttentionConfig(layers=1, heads=1, d_model=8, d_ff=12),
                AttentionConfig(layers=3, heads=4, d_model=16, d_ff=7)):
        params = init_transformer_params(cfg, Prng(50))
        assert count_params(params, "transformer") == stack_param_count(cfg)


def test_desk_param_count_value():
    assert stack_param_count(DESK) == 16896
