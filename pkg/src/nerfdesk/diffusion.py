"""Latent-feature diffusion: scheduled Gaussian corruption, a clean-sample
predicting denoiser MLP, its training loss, ancestral reverse sampling, and
export of the conditioning vector consumed by the radiance-field decoder.

The denoiser predicts the clean sample directly; an epsilon-target loss is
available as an option but the clean-sample form is the default everywhere.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat, matmul, mean, relu, reshape, sum_sq


# ---------------------------------------------------------------------------
# noise schedule


class NoiseSchedule:
    """Cumulative signal-retention coefficients a_1..a_T of the forward
    corruption x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps.

    Coefficients must be nonincreasing within [0, 1]; exact 0 is accepted so
    the pure-noise limit is expressible, exact 1 likewise for the identity
    limit.
    """

    __slots__ = ("alpha",)

    def __init__(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.ndim != 1 or alpha.size < 1:
            raise ValueError("schedule needs a 1-D, nonempty coefficient list")
        if np.any(alpha < 0.0) or np.any(alpha > 1.0):
            raise ValueError("schedule coefficients must lie in [0, 1]")
        if np.any(np.diff(alpha) > 0.0):
            raise ValueError("schedule coefficients must be nonincreasing")
        self.alpha = alpha

    @property
    def T(self):
        return int(self.alpha.size)

    @classmethod
    def linear(cls, T=50, beta_min=1e-4, beta_max=0.02):
        """Cumulative products of (1 - beta) with beta linearly spaced."""
        if T < 1:
            raise ValueError("T must be at least 1")
        beta = np.linspace(beta_min, beta_max, T)
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta range must lie strictly inside (0, 1)")
        return cls(np.cumprod(1.0 - beta))

    def alpha_bar(self, t):
        """Coefficient at step t; t may be a scalar or integer array.

        t = 0 denotes the uncorrupted data point and returns 1.
        """
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise TypeError("t must be integer-valued")
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"t out of range [0, {self.T}]")
        padded = np.concatenate(([1.0], self.alpha))
        out = padded[t]
        return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# time embedding


def time_embedding(t, width=16):
    """Sinusoidal embedding of integer steps; rows are [sin | cos] halves.

    Scalar t gives shape (width,); an array of steps gives (len(t), width).
    """
    if width < 2 or width % 2 != 0:
        raise ValueError("embedding width must be a positive even number")
    t_arr = np.asarray(t, dtype=np.float64)
    scalar = t_arr.ndim == 0
    half = width // 2
    k = np.arange(half, dtype=np.float64)
    freq = np.power(10000.0, -k / half)
    phase = t_arr.reshape(-1, 1) * freq[None, :]
    emb = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
    return emb[0] if scalar else emb


# ---------------------------------------------------------------------------
# denoiser


@dataclass
class DenoiserNet:
    """Three-layer MLP mapping (x_t, time embedding) back to a clean sample."""

    w1: Tensor  # (x_width + temb_width, hidden)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (hidden, hidden)
    b2: Tensor  # (hidden,)
    w3: Tensor  # (hidden, x_width)
    b3: Tensor  # (x_width,)
    temb_width: int = 16

    @property
    def x_width(self):
        return self.w3.shape[1]

    @property
    def hidden(self):
        return self.w1.shape[1]


_NET_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")


def init_denoiser_params(x_width, hidden, rng, temb_width=16,
                         prefix="diffusion.net"):
    """Named denoiser tensors; weights are normal draws scaled 1/sqrt(fan_in)."""
    d_in = x_width + temb_width
    params = {
        f"{prefix}.w1": Tensor(rng.normal((d_in, hidden)) / math.sqrt(d_in)),
        f"{prefix}.b1": Tensor(np.zeros(hidden)),
        f"{prefix}.w2": Tensor(rng.normal((hidden, hidden)) / math.sqrt(hidden)),
        f"{prefix}.b2": Tensor(np.zeros(hidden)),
        f"{prefix}.w3": Tensor(rng.normal((hidden, x_width)) / math.sqrt(hidden)),
        f"{prefix}.b3": Tensor(np.zeros(x_width)),
    }
    return params


def denoiser_net(params, prefix="diffusion.net", temb_width=16):
    kw = {name: params[f"{prefix}.{name}"] for name in _NET_FIELDS}
    return DenoiserNet(temb_width=temb_width, **kw)


def init_latent_params(x_width, d_lat, rng, prefix="diffusion.latent"):
    """Projection taking a pooled clean-sample prediction to the decoder
    conditioning width."""
    return {
        f"{prefix}.w": Tensor(rng.normal((x_width, d_lat)) / math.sqrt(x_width)),
        f"{prefix}.b": Tensor(np.zeros(d_lat)),
    }


# ---------------------------------------------------------------------------
# forward corruption


def forward_diffuse(x0, t, schedule, rng):
    """Corrupt x0 to step t: x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps.

    ``t`` is a scalar step or one step per leading-axis row of a batched x0.
    Returns (x_t, eps); both limits are exact: a_t = 1 reproduces x0 and
    a_t = 0 returns eps itself.
    """
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"t out of range [1, {schedule.T}]")
    a = schedule.alpha_bar(t_arr)
    if t_arr.ndim == 1:
        if x0.ndim < 2 or x0.shape[0] != t_arr.shape[0]:
            raise ValueError("per-sample t needs one step per batch row")
        a = np.asarray(a).reshape((-1,) + (1,) * (x0.ndim - 1))
    eps = rng.normal(x0.shape)
    x_t = x0 * np.sqrt(a) + eps * np.sqrt(1.0 - a)
    return x_t, Tensor(eps)


# ---------------------------------------------------------------------------
# denoiser forward pass


def denoise_predict(net, x_t, t):
    """Deterministic clean-sample prediction for x_t at step(s) t."""
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    flat = x_t.ndim == 1
    h = reshape(x_t, (1, -1)) if flat else x_t
    if h.ndim != 2 or h.shape[1] != net.x_width:
        raise ValueError(
            f"input width {x_t.shape} does not match net width {net.x_width}"
        )
    temb = time_embedding(t, net.temb_width)
    if temb.ndim == 1:
        temb = np.broadcast_to(temb, (h.shape[0], net.temb_width))
    elif temb.shape[0] != h.shape[0]:
        raise ValueError("per-sample t needs one step per batch row")
    z = concat([h, Tensor(np.ascontiguousarray(temb))], axis=1)
    z = relu(add(matmul(z, net.w1), net.b1))
    z = relu(add(matmul(z, net.w2), net.b2))
    out = add(matmul(z, net.w3), net.b3)
    return reshape(out, (-1,)) if flat else out


def predict_clean(net, x_t, t, schedule, target="x0"):
    """Clean-sample estimate regardless of training target.

    Under the epsilon target the net output is a noise estimate and is
    converted through x0 = (x_t - sqrt(1-a) eps) / sqrt(a).
    """
    out = denoise_predict(net, x_t, t)
    if target == "x0":
        return out
    if target != "eps":
        raise ValueError(f"unknown target {target!r}")
    a = np.asarray(schedule.alpha_bar(np.asarray(t)))
    if np.any(a <= 0.0):
        raise ValueError("epsilon target needs a_t > 0 to recover x0")
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    return (x_t - out * np.sqrt(1.0 - a)) / np.sqrt(a)


# ---------------------------------------------------------------------------
# training loss


def diffusion_loss(net, batch, schedule, rng, target="x0"):
    """Mean over the batch of the squared L2 gap to the training target.

    Each row draws its own uniform step in 1..T and its own noise; the graph
    reaches the denoiser parameters so the loss is trainable.
    """
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ValueError("batch must be (n, width) with n >= 1")
    if target not in ("x0", "eps"):
        raise ValueError(f"unknown target {target!r}")
    n = batch.shape[0]
    t = rng.randint(1, schedule.T + 1, n)
    x_t, eps = forward_diffuse(batch, t, schedule, rng)
    pred = denoise_predict(net, x_t, t)
    ref = batch if target == "x0" else eps
    return sum_sq(pred, ref) / float(n)


# ---------------------------------------------------------------------------
# reverse process


def _step_ladder(T, steps):
    """Descending unique steps from T toward 1, ``steps`` rungs at most."""
    ts = np.round(np.linspace(T, 1, int(steps))).astype(np.int64)
    ladder = []
    for t in ts:
        t = int(t)
        if not ladder or t < ladder[-1]:
            ladder.append(t)
    return ladder


def reverse_sample(net, schedule, shape, rng, steps, target="x0"):
    """Ancestral sampling from pure noise down the step ladder.

    Each rung re-expresses the posterior in terms of the predicted clean
    sample; the final rung lands on that prediction itself, so steps = 1 is
    exactly denoise_predict on the initial noise at t = T.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x = Tensor(rng.normal(shape))
    ladder = _step_ladder(schedule.T, steps)
    for i, t in enumerate(ladder):
        t_next = ladder[i + 1] if i + 1 < len(ladder) else 0
        a = schedule.alpha_bar(t)
        a_next = schedule.alpha_bar(t_next)
        x0_hat = predict_clean(net, x, t, schedule, target=target)
        if a < 1.0:
            eps_hat = (x - x0_hat * math.sqrt(a)) / math.sqrt(1.0 - a)
        else:
            eps_hat = Tensor(np.zeros(x.shape))
        # Posterior variance in nested-corruption form; collapses to the
        # standard beta_t (1 - a_{t-1}) / (1 - a_t) on consecutive rungs.
        if a >= 1.0:
            var = 0.0
        elif a_next <= 0.0:
            var = 1.0
        else:
            var = (1.0 - a_next) / (1.0 - a) * (1.0 - a / a_next)
        var = max(var, 0.0)
        dir_coef = math.sqrt(max(1.0 - a_next - var, 0.0))
        z = rng.normal(x.shape)
        x = x0_hat * math.sqrt(a_next) + eps_hat * dir_coef + Tensor(z) * math.sqrt(var)
    return x


# ---------------------------------------------------------------------------
# latent export


def extract_latent(x0_hat, w, b):
    """Pool a clean-sample prediction over leading axes and project it to the
    decoder conditioning width.  Differentiable end to end."""
    x0_hat = x0_hat if isinstance(x0_hat, Tensor) else Tensor(x0_hat)
    pooled = x0_hat
    while pooled.ndim > 1:
        pooled = mean(pooled, axis=0)
    lat = add(matmul(reshape(pooled, (1, -1)), w), b)
    return reshape(lat, (-1,))
