"""Multi-head self-attention stack for aggregating global context over tokens.

Blocks are pre-norm residual: ``x + attn(norm(x))`` then ``x + ff(norm(x))``.
There are no positional terms inside the stack, so the forward pass commutes
with token permutation; with the exactly-rounded attention reductions and
row-stable linear maps used here that equivariance holds bit for bit, not
just approximately.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, attention, concat, matmul, mean, mul,
                       relu, sqrt, sub, take)


@dataclass(frozen=True)
class AttentionConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    n_freq: int = 4
    d_ff: int = 64

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layers must be nonnegative")
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ValueError(
                f"heads ({self.heads}) must divide d_model ({self.d_model})"
            )
        if self.d_k < 1:
            raise ValueError("per-head key width must be at least 1")

    @property
    def d_k(self):
        return self.d_model // self.heads


#: desk-scale default: small enough for CPU test budgets
DESK = AttentionConfig(layers=2, heads=2, d_model=32, n_freq=4, d_ff=64)

#: large preset for scale experiments; not exercised by the test suite
FULL_SCALE = AttentionConfig(layers=6, heads=8, d_model=512, n_freq=10, d_ff=1024)


@dataclass
class LayerWeights:
    """One block's tensors; projection matrices pack heads along columns."""

    wq: Tensor          # (d, d), head i occupies columns [i*d_k, (i+1)*d_k)
    wk: Tensor          # (d, d)
    wv: Tensor          # (d, d)
    wo: Tensor          # (d, d)
    bo: Tensor          # (d,)
    norm1_gain: Tensor  # (d,)
    norm1_bias: Tensor  # (d,)
    norm2_gain: Tensor  # (d,)
    norm2_bias: Tensor  # (d,)
    ff_w1: Tensor       # (d, d_ff)
    ff_b1: Tensor       # (d_ff,)
    ff_w2: Tensor       # (d_ff, d)
    ff_b2: Tensor       # (d,)


_LAYER_FIELDS = (
    ("wq", "wq"), ("wk", "wk"), ("wv", "wv"), ("wo", "wo"), ("bo", "bo"),
    ("norm1_gain", "norm1.gain"), ("norm1_bias", "norm1.bias"),
    ("norm2_gain", "norm2.gain"), ("norm2_bias", "norm2.bias"),
    ("ff_w1", "ff.w1"), ("ff_b1", "ff.b1"),
    ("ff_w2", "ff.w2"), ("ff_b2", "ff.b2"),
)


def init_transformer_params(cfg, rng, prefix="transformer"):
    """Named parameter tensors for the whole stack, seeded deterministically.

    Weights are normal draws scaled by 1/sqrt(fan_in); biases start at zero
    and norm gains at one.  The residual-branch output projections (wo and
    ff.w2) are further scaled by 0.1 so each block starts close to the
    identity, which trains far more reliably at small widths.  Draw order
    is layer by layer, field by field.
    """
    d, f = cfg.d_model, cfg.d_ff
    params = {}
    for i in range(cfg.layers):
        base = f"{prefix}.layer{i}"
        params[f"{base}.wq"] = Tensor(rng.normal((d, d)) / math.sqrt(d))
        params[f"{base}.wk"] = Tensor(rng.normal((d, d)) / math.sqrt(d))
        params[f"{base}.wv"] = Tensor(rng.normal((d, d)) / math.sqrt(d))
        params[f"{base}.wo"] = Tensor(rng.normal((d, d)) * (0.1 / math.sqrt(d)))
        params[f"{base}.bo"] = Tensor(np.zeros(d))
        params[f"{base}.norm1.gain"] = Tensor(np.ones(d))
        params[f"{base}.norm1.bias"] = Tensor(np.zeros(d))
        params[f"{base}.norm2.gain"] = Tensor(np.ones(d))
        params[f"{base}.norm2.bias"] = Tensor(np.zeros(d))
        params[f"{base}.ff.w1"] = Tensor(rng.normal((d, f)) / math.sqrt(d))
        params[f"{base}.ff.b1"] = Tensor(np.zeros(f))
        params[f"{base}.ff.w2"] = Tensor(rng.normal((f, d)) * (0.1 / math.sqrt(f)))
        params[f"{base}.ff.b2"] = Tensor(np.zeros(d))
    return params


def layer_weights(params, index, prefix="transformer"):
    base = f"{prefix}.layer{index}"
    kw = {field: params[f"{base}.{suffix}"] for field, suffix in _LAYER_FIELDS}
    return LayerWeights(**kw)


def stack_weights(params, cfg, prefix="transformer"):
    return [layer_weights(params, i, prefix) for i in range(cfg.layers)]


def scaled_dot_attention(q, k, v, scale=None):
    """softmax(q kᵀ · scale) v; ``scale`` defaults to 1/sqrt(key width)."""
    return attention(q, k, v, scale=scale)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-token normalization over the feature axis."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = centered / sqrt(add(var, Tensor(eps)))
    return add(mul(normed, gain), bias)


def multi_head(xq, xkv, w, heads):
    """Concat of per-head attention outputs, projected by ``wo``.

    Head ``i`` attends with queries ``xq @ wq[:, i]``-slice against keys and
    values projected from ``xkv``.
    """
    d = xq.shape[1]
    if d % heads != 0:
        raise ValueError(f"heads ({heads}) must divide width ({d})")
    dk = d // heads
    outs = []
    for i in range(heads):
        cols = (slice(None), slice(i * dk, (i + 1) * dk))
        qi = matmul(xq, take(w.wq, cols), row_stable=True)
        ki = matmul(xkv, take(w.wk, cols), row_stable=True)
        vi = matmul(xkv, take(w.wv, cols), row_stable=True)
        outs.append(attention(qi, ki, vi))
    cat = outs[0] if heads == 1 else concat(outs, axis=1)
    return add(matmul(cat, w.wo, row_stable=True), w.bo)


def transformer_forward(tokens, weights, heads):
    """Pre-norm residual stack; an empty ``weights`` list is the identity."""
    x = tokens
    for w in weights:
        normed = layer_norm(x, w.norm1_gain, w.norm1_bias)
        x = add(x, multi_head(normed, normed, w, heads))
        h = layer_norm(x, w.norm2_gain, w.norm2_bias)
        h = add(matmul(relu(add(matmul(h, w.ff_w1, row_stable=True), w.ff_b1)),
                       w.ff_w2, row_stable=True), w.ff_b2)
        x = add(x, h)
    return x


def positional_encode(p, n_freq):
    """[p, sin(2^j pi p), cos(2^j pi p)] for j < n_freq, per coordinate.

    Output width is 3 + 6 * n_freq.  Plain numpy: positions are inputs, not
    differentiated quantities.
    """
    p = np.asarray(p, dtype=np.float64)
    parts = [p]
    for j in range(n_freq):
        arg = (2.0 ** j) * np.pi * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def count_params(params, prefix):
    return sum(t.value.size for name, t in params.items()
               if name.startswith(prefix))


def stack_param_count(cfg):
    """Trainable scalars in a stack of cfg.layers blocks."""
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 4 * d * d + d + 4 * d + d * f + f + f * d + d
    return cfg.layers * per_layer
