"""Conditioned radiance-field decoder and volumetric rendering.

Ray samples become tokens (position encoding concatenated with a broadcast
conditioning vector, linearly embedded); a context stage, either the
attention stack or a parameter-matched per-token MLP, produces per-sample
features; a small MLP head maps feature + position encoding to density and
color; emission-absorption compositing integrates each ray against a
background color.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, composite as _composite_op, concat,
                       matmul, mul, relu, reshape, sigmoid, softplus, sum_sq)
from .scene import camera_ray_grid
from .transformer import positional_encode, transformer_forward


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RenderConfig:
    """Ray-marching span and budget plus the compositing background."""

    near: float
    far: float
    samples_per_ray: int
    background: tuple = (0.0, 0.0, 0.0)
    density_shift: float = -5.0

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be at least 2")
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (3,) or not np.all(np.isfinite(bg)):
            raise ValueError("background must be three finite channels")

    @property
    def bg(self):
        return np.asarray(self.background, dtype=np.float64)


# ---------------------------------------------------------------------------
# decoder parameters


@dataclass
class FieldNet:
    """MLP head scoring one sample: feature + encoded position -> (density
    logit, three color logits)."""

    w1: Tensor  # (context width + encoding width, hidden)
    b1: Tensor
    w2: Tensor  # (hidden, hidden)
    b2: Tensor
    w3: Tensor  # (hidden, 4)
    b3: Tensor


_FIELD_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")


def init_field_params(d_model, n_freq, rng, hidden=64, prefix="field"):
    pos_width = 3 + 6 * n_freq
    d_in = d_model + pos_width
    return {
        f"{prefix}.w1": Tensor(rng.normal((d_in, hidden)) / math.sqrt(d_in)),
        f"{prefix}.b1": Tensor(np.zeros(hidden)),
        f"{prefix}.w2": Tensor(rng.normal((hidden, hidden)) / math.sqrt(hidden)),
        f"{prefix}.b2": Tensor(np.zeros(hidden)),
        f"{prefix}.w3": Tensor(rng.normal((hidden, 4)) / math.sqrt(hidden)),
        f"{prefix}.b3": Tensor(np.zeros(4)),
    }


def field_net(params, prefix="field"):
    return FieldNet(**{n: params[f"{prefix}.{n}"] for n in _FIELD_FIELDS})


def init_embed_params(d_lat, n_freq, d_model, rng, prefix="embed"):
    """Linear lift from (position encoding | conditioning) to token width."""
    d_in = 3 + 6 * n_freq + d_lat
    return {
        f"{prefix}.w": Tensor(rng.normal((d_in, d_model)) / math.sqrt(d_in)),
        f"{prefix}.b": Tensor(np.zeros(d_model)),
    }


@dataclass
class AttentionContext:
    """Context stage backed by the attention stack."""

    weights: list  # list of transformer.LayerWeights
    heads: int


@dataclass
class TokenMLP:
    """Per-token context stage used when the attention stack is ablated;
    width chosen by the harness to match the stack's parameter count."""

    w1: Tensor  # (d_model, width)
    b1: Tensor
    w2: Tensor  # (width, width)
    b2: Tensor
    w3: Tensor  # (width, d_model)
    b3: Tensor


def init_token_mlp_params(d_model, width, rng, prefix="tokenmlp"):
    return {
        f"{prefix}.w1": Tensor(rng.normal((d_model, width)) / math.sqrt(d_model)),
        f"{prefix}.b1": Tensor(np.zeros(width)),
        f"{prefix}.w2": Tensor(rng.normal((width, width)) / math.sqrt(width)),
        f"{prefix}.b2": Tensor(np.zeros(width)),
        f"{prefix}.w3": Tensor(rng.normal((width, d_model)) / math.sqrt(width)),
        f"{prefix}.b3": Tensor(np.zeros(d_model)),
    }


def token_mlp(params, prefix="tokenmlp"):
    return TokenMLP(**{n: params[f"{prefix}.{n}"] for n in _FIELD_FIELDS})


def token_mlp_params_count(d_model, width):
    """Trainable scalars in a TokenMLP of the given width."""
    return (d_model * width + width + width * width + width
            + width * d_model + d_model)


def matched_mlp_width(target_count, d_model):
    """Width whose TokenMLP parameter count comes nearest the target."""
    # count(w) = w^2 + (2 d + 2) w + d is increasing in w >= 0
    best, best_gap = 1, float("inf")
    w = 1
    while True:
        gap = abs(token_mlp_params_count(d_model, w) - target_count)
        if gap < best_gap:
            best, best_gap = w, gap
        if token_mlp_params_count(d_model, w) > target_count:
            break
        w += 1
    return best


def apply_context(tokens, context, group=None):
    """Run the configured context stage over a (N, d) token Tensor.

    With `group` set, attention runs independently over consecutive blocks
    of that many tokens; the renderer passes S so samples attend only
    within their own ray and a pixel's value never depends on which other
    rays share the forward pass. Per-token stages ignore the argument.
    """
    if context is None:
        return tokens
    if isinstance(context, AttentionContext):
        if group is None or tokens.shape[0] == group:
            return transformer_forward(tokens, context.weights, context.heads)
        n = tokens.shape[0]
        if n % group:
            raise ValueError(f"token count {n} not divisible by group {group}")
        parts = [
            transformer_forward(tokens[i:i + group], context.weights, context.heads)
            for i in range(0, n, group)
        ]
        return concat(parts, axis=0)
    if isinstance(context, TokenMLP):
        z = relu(add(matmul(tokens, context.w1), context.b1))
        z = relu(add(matmul(z, context.w2), context.b2))
        return add(matmul(z, context.w3), context.b3)
    raise TypeError(f"unknown context stage {type(context).__name__}")


@dataclass
class Decoder:
    """Everything needed to score ray samples: token embedding, context
    stage, and the density/color head."""

    field: FieldNet
    embed_w: Tensor
    embed_b: Tensor
    context: object
    n_freq: int
    density_shift: float = -5.0


# ---------------------------------------------------------------------------
# sampling


def stratified_samples(n_rays, near, far, samples_per_ray, rng=None):
    """Per-ray depths and segment lengths over equal strata of [near, far].

    Without an rng each stratum contributes its midpoint (deterministic
    evaluation); with one, a uniform jitter inside each stratum.
    """
    s = int(samples_per_ray)
    if s < 2:
        raise ValueError("samples_per_ray must be at least 2")
    h = (far - near) / s
    base = near + h * np.arange(s)
    if rng is None:
        t = np.broadcast_to(base + 0.5 * h, (n_rays, s)).copy()
    else:
        t = base[None, :] + rng.uniform((n_rays, s)) * h
    delta = np.full((n_rays, s), h)
    return t, delta


# ---------------------------------------------------------------------------
# decoding and compositing


@dataclass
class RaySampleBatch:
    """Per-ray stratified samples with their decoded densities and colors."""

    positions: np.ndarray  # (R, S, 3)
    delta: np.ndarray      # (R, S); None until a sampler provides it
    sigma: Tensor          # (R, S), nonnegative
    rgb: Tensor            # (R, S, 3), in (0, 1)


def field_eval(decoder, positions, latent, delta=None):
    """Score sample positions (R, S, 3) under a conditioning vector.

    Returns a RaySampleBatch with softplus densities (shifted so random
    initializations start near-transparent) and sigmoid colors; the whole
    path is graph-attached.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[2] != 3:
        raise ValueError(f"positions must be (R, S, 3), got {positions.shape}")
    r, s, _ = positions.shape
    flat = positions.reshape(-1, 3)
    enc = positional_encode(flat, decoder.n_freq)
    enc_t = Tensor(enc)
    latent = latent if isinstance(latent, Tensor) else Tensor(latent)
    ones = Tensor(np.ones((flat.shape[0], 1)))
    lat_rows = mul(ones, reshape(latent, (1, -1)))
    tokens = add(matmul(concat([enc_t, lat_rows], axis=1), decoder.embed_w),
                 decoder.embed_b)
    feat = apply_context(tokens, decoder.context, group=s)
    head_in = concat([feat, enc_t], axis=1)
    z = relu(add(matmul(head_in, decoder.field.w1), decoder.field.b1))
    z = relu(add(matmul(z, decoder.field.w2), decoder.field.b2))
    out = add(matmul(z, decoder.field.w3), decoder.field.b3)
    sigma = softplus(out[:, 0] + decoder.density_shift)
    rgb = sigmoid(out[:, 1:4])
    return RaySampleBatch(
        positions=positions,
        delta=delta,
        sigma=reshape(sigma, (r, s)),
        rgb=reshape(rgb, (r, s, 3)),
    )


def composite(batch, background):
    """Integrate a RaySampleBatch to (pixel colors, opacities)."""
    if batch.delta is None:
        raise ValueError("batch carries no segment lengths")
    return _composite_op(batch.sigma, batch.delta, batch.rgb, background)


def render_rays(decoder, latent, origins, dirs, cfg, rng=None):
    """Render one bundle of rays; origins (3,) or (R, 3), unit dirs (R, 3).

    Returns (pixel (R, 3), opacity (R,)) Tensors, graph-attached when a
    graph is active.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    origins = np.asarray(origins, dtype=np.float64)
    n = dirs.shape[0]
    t, delta = stratified_samples(n, cfg.near, cfg.far, cfg.samples_per_ray,
                                  rng)
    if origins.ndim == 1:
        origins = origins[None, :]
    positions = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    batch = field_eval(decoder, positions, latent, delta=delta)
    return composite(batch, cfg.bg)


def render_image(decoder, latent, camera, cfg, rng=None, token_limit=256):
    """Full-frame render, chunked so one forward holds at most
    ``token_limit`` tokens.  Deterministic when ``rng`` is None."""
    dirs = camera_ray_grid(camera)
    n = dirs.shape[0]
    chunk = max(1, int(token_limit) // int(cfg.samples_per_ray))
    img = np.empty((n, 3))
    for lo in range(0, n, chunk):
        d = dirs[lo:lo + chunk]
        pixel, _ = render_rays(decoder, latent, camera.position, d, cfg, rng)
        img[lo:lo + chunk] = pixel.value
    return img.reshape(camera.height, camera.width, 3)


def render_loss(pred, gt):
    """Mean squared error over all channels; graph-attached."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return sum_sq(pred, gt) / float(pred.size)


# ---------------------------------------------------------------------------
# geometry export


def composite_weights(sigma, delta):
    """Emission-absorption weights w_i = T_i alpha_i, plain numpy."""
    sd = sigma * delta
    om = np.exp(-sd)
    alpha = -np.expm1(-sd)
    t = np.cumprod(om, axis=1)
    t_excl = np.concatenate([np.ones((sigma.shape[0], 1)), t[:, :-1]], axis=1)
    return t_excl * alpha


def extract_point_cloud(decoder, latent, camera, cfg, threshold=0.5,
                        token_limit=256):
    """One surface point per ray whose opacity clears the threshold, at the
    weight-averaged sample depth along that ray."""
    _, cloud = render_view(decoder, latent, camera, cfg, threshold,
                           token_limit)
    return cloud


def render_view(decoder, latent, camera, cfg, threshold=0.5,
                token_limit=256):
    """Deterministic full-frame render plus the surface points it implies.

    One decoding pass serves both outputs: the image from compositing, the
    point cloud from thresholding per-ray opacity (weight sum) and placing
    a point at the weight-averaged depth.
    """
    dirs = camera_ray_grid(camera)
    n = dirs.shape[0]
    chunk = max(1, int(token_limit) // int(cfg.samples_per_ray))
    img = np.empty((n, 3))
    points = []
    for lo in range(0, n, chunk):
        d = dirs[lo:lo + chunk]
        t, delta = stratified_samples(d.shape[0], cfg.near, cfg.far,
                                      cfg.samples_per_ray, None)
        positions = (camera.position[None, None, :]
                     + t[:, :, None] * d[:, None, :])
        batch = field_eval(decoder, positions, latent, delta=delta)
        pixel, _ = composite(batch, cfg.bg)
        img[lo:lo + chunk] = pixel.value
        w = composite_weights(batch.sigma.value, delta)
        wsum = w.sum(axis=1)
        hit = wsum > threshold
        if np.any(hit):
            depth = (w[hit] * t[hit]).sum(axis=1) / wsum[hit]
            points.append(camera.position[None, :] + depth[:, None] * d[hit])
    cloud = (np.concatenate(points, axis=0) if points
             else np.empty((0, 3)))
    return img.reshape(camera.height, camera.width, 3), cloud
