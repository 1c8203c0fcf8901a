"""Decoder tokenization, context stages, sampling, and compositing."""

import math

import numpy as np
import pytest

from nerfdesk.autodiff import Graph, Tensor, backward
from nerfdesk.renderer import (AttentionContext, Decoder, RenderConfig,
                               TokenMLP, apply_context, composite,
                               composite_weights, extract_point_cloud,
                               field_eval, field_net, init_embed_params,
                               init_field_params, init_token_mlp_params,
                               matched_mlp_width, render_image, render_loss,
                               render_rays, render_view, stratified_samples,
                               token_mlp, token_mlp_params_count)
from nerfdesk.rng import Prng
from nerfdesk.scene import Camera, camera_ray_grid, make_camera_ring
from nerfdesk.transformer import (DESK, AttentionConfig,
                                  init_transformer_params, positional_encode,
                                  stack_param_count, stack_weights,
                                  transformer_forward)

from test_autodiff import check_grad


# ---------------------------------------------------------------------------
# fixtures


D_LAT, D_MODEL, N_FREQ, HIDDEN = 3, 8, 1, 12
SMALL = AttentionConfig(layers=1, heads=2, d_model=D_MODEL, n_freq=N_FREQ,
                        d_ff=16)


def small_params(seed=11, attention=True):
    rng = Prng(seed)
    params = {}
    params.update(init_embed_params(D_LAT, N_FREQ, D_MODEL, rng))
    if attention:
        params.update(init_transformer_params(SMALL, rng))
    else:
        params.update(init_token_mlp_params(D_MODEL, 10, rng))
    params.update(init_field_params(D_MODEL, N_FREQ, rng, hidden=HIDDEN))
    return params


def small_decoder(seed=11, attention=True):
    params = small_params(seed, attention)
    if attention:
        ctx = AttentionContext(stack_weights(params, SMALL), SMALL.heads)
    else:
        ctx = token_mlp(params)
    dec = Decoder(field=field_net(params), embed_w=params["embed.w"],
                  embed_b=params["embed.b"], context=ctx, n_freq=N_FREQ)
    return params, dec


def constant_field_decoder(density_logit, color_logits):
    """Decoder whose head ignores its input: out = b3 everywhere.

    With context None the token stage passes through, so sigma and rgb are
    spatially constant and analytically known.
    """
    params = small_params()
    for name in ("field.w1", "field.w2", "field.w3"):
        params[name] = Tensor(np.zeros(params[name].shape))
    b3 = np.array([density_logit, *color_logits], dtype=np.float64)
    params["field.b3"] = Tensor(b3)
    return Decoder(field=field_net(params), embed_w=params["embed.w"],
                   embed_b=params["embed.b"], context=None, n_freq=N_FREQ)


def tiny_camera(resolution=4, radius=3.0):
    return make_camera_ring(1, radius, resolution=resolution, fov_deg=40.0)[0]


# ---------------------------------------------------------------------------
# config


def test_render_config_validation():
    cfg = RenderConfig(near=1.0, far=2.0, samples_per_ray=4)
    assert cfg.bg.shape == (3,) and cfg.bg.dtype == np.float64
    with pytest.raises(ValueError):
        RenderConfig(near=2.0, far=2.0, samples_per_ray=4)
    with pytest.raises(ValueError):
        RenderConfig(near=0.0, far=1.0, samples_per_ray=1)
    with pytest.raises(ValueError):
        RenderConfig(near=0.0, far=1.0, samples_per_ray=4,
                     background=(0.1, 0.2))
    with pytest.raises(ValueError):
        RenderConfig(near=0.0, far=1.0, samples_per_ray=4,
                     background=(0.1, 0.2, math.inf))


# ---------------------------------------------------------------------------
# stratified sampling


def test_stratified_midpoints_exact():
    t, delta = stratified_samples(3, 2.0, 4.0, 4, rng=None)
    h = 0.5
    ref = 2.0 + h * (np.arange(4) + 0.5)
    assert t.shape == (3, 4) and delta.shape == (3, 4)
    for r in range(3):
        assert np.array_equal(t[r], ref)
    assert np.all(delta == h)


def test_stratified_jitter_stays_in_stratum():
    near, far, s = 1.0, 3.0, 5
    h = (far - near) / s
    t, delta = stratified_samples(200, near, far, s, rng=Prng(5))
    lo = near + h * np.arange(s)
    assert np.all(t >= lo[None, :]) and np.all(t < lo[None, :] + h)
    assert np.all(delta == h)
    # jitter must differ between rays
    assert not np.array_equal(t[0], t[1])


def test_stratified_rejects_single_sample():
    with pytest.raises(ValueError):
        stratified_samples(1, 0.0, 1.0, 1)


# ---------------------------------------------------------------------------
# field evaluation


def test_field_eval_shapes_and_ranges():
    _, dec = small_decoder()
    pos = Prng(20).normal((5, 4, 3))
    latent = Prng(21).normal((D_LAT,))
    batch = field_eval(dec, pos, latent)
    assert batch.sigma.shape == (5, 4)
    assert batch.rgb.shape == (5, 4, 3)
    assert np.all(batch.sigma.value >= 0.0)
    assert np.all(batch.rgb.value > 0.0) and np.all(batch.rgb.value < 1.0)
    assert batch.delta is None
    with pytest.raises(ValueError):
        field_eval(dec, np.zeros((5, 3)), latent)
    with pytest.raises(ValueError):
        field_eval(dec, np.zeros((5, 4, 2)), latent)


def test_composite_requires_delta():
    _, dec = small_decoder()
    batch = field_eval(dec, np.zeros((2, 2, 3)), np.zeros(D_LAT))
    with pytest.raises(ValueError):
        composite(batch, np.zeros(3))


def test_zero_density_composites_to_background():
    from nerfdesk.renderer import RaySampleBatch
    bg = np.array([0.25, 0.5, 0.75])
    batch = RaySampleBatch(
        positions=np.zeros((3, 4, 3)),
        delta=np.full((3, 4), 0.3),
        sigma=Tensor(np.zeros((3, 4))),
        rgb=Tensor(Prng(30).uniform((3, 4, 3))),
    )
    pixel, opacity = composite(batch, bg)
    assert np.array_equal(opacity.value, np.zeros(3))
    for r in range(3):
        assert np.array_equal(pixel.value[r], bg)


def test_composite_matches_manual_two_samples():
    # constant density c and color col over two segments of length h:
    # alpha = 1 - e^{-ch}; pixel = (w1 + w2) col + e^{-2ch} bg
    c, h = 1.3, 0.45
    col = np.array([0.2, 0.6, 0.9])
    bg = np.array([0.1, 0.1, 0.2])
    from nerfdesk.renderer import RaySampleBatch
    batch = RaySampleBatch(
        positions=np.zeros((1, 2, 3)),
        delta=np.full((1, 2), h),
        sigma=Tensor(np.full((1, 2), c)),
        rgb=Tensor(np.broadcast_to(col, (1, 2, 3)).copy()),
    )
    pixel, opacity = composite(batch, bg)
    alpha = 1.0 - math.exp(-c * h)
    w1 = alpha
    w2 = math.exp(-c * h) * alpha
    ref = (w1 + w2) * col + math.exp(-2 * c * h) * bg
    assert np.allclose(pixel.value[0], ref, atol=1e-12)
    assert opacity.value[0] == pytest.approx(w1 + w2, abs=1e-12)


def test_composite_weights_brute_force():
    sigma = Prng(31).uniform((4, 6)) * 3.0
    delta = Prng(32).uniform((4, 6)) * 0.5 + 0.05
    w = composite_weights(sigma, delta)
    for r in range(4):
        t_run = 1.0
        for i in range(6):
            sd = sigma[r, i] * delta[r, i]
            ref = t_run * -np.expm1(-sd)
            assert w[r, i] == pytest.approx(ref, rel=1e-12)
            t_run *= np.exp(-sd)
    assert np.all(w.sum(axis=1) <= 1.0 + 1e-12)


# ---------------------------------------------------------------------------
# context stages


def test_apply_context_none_is_identity():
    tokens = Tensor(Prng(33).normal((6, D_MODEL)))
    assert apply_context(tokens, None) is tokens


def test_apply_context_rejects_unknown_stage():
    with pytest.raises(TypeError):
        apply_context(Tensor(np.zeros((2, 2))), object())


def test_token_mlp_matches_brute_force_and_ignores_group():
    params = small_params(attention=False)
    ctx = token_mlp(params)
    assert isinstance(ctx, TokenMLP)
    x = Prng(34).normal((7, D_MODEL))
    out = apply_context(Tensor(x), ctx, group=7)
    z = np.maximum(x @ ctx.w1.value + ctx.b1.value, 0.0)
    z = np.maximum(z @ ctx.w2.value + ctx.b2.value, 0.0)
    ref = z @ ctx.w3.value + ctx.b3.value
    assert np.allclose(out.value, ref, rtol=1e-12, atol=1e-14)
    grouped = apply_context(Tensor(x), ctx, group=1)
    assert np.array_equal(grouped.value, out.value)


def test_attention_group_blocks_are_independent_forwards():
    params, dec = small_decoder()
    ctx = dec.context
    x = Prng(35).normal((9, D_MODEL))
    out = apply_context(Tensor(x), ctx, group=3)
    for b in range(3):
        rows = x[3 * b:3 * b + 3]
        ref = transformer_forward(Tensor(rows), ctx.weights, ctx.heads)
        assert np.array_equal(out.value[3 * b:3 * b + 3], ref.value)
    with pytest.raises(ValueError):
        apply_context(Tensor(x), ctx, group=4)


def test_pixel_independent_of_cobatched_rays():
    # the context stage groups tokens by ray, so rendering rays together
    # and one at a time must agree
    _, dec = small_decoder()
    latent = Prng(36).normal((D_LAT,))
    cfg = RenderConfig(near=1.0, far=3.0, samples_per_ray=3,
                       background=(0.1, 0.2, 0.3))
    dirs = Prng(37).normal((6, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.array([0.0, 0.0, -2.0])
    pixel_all, op_all = render_rays(dec, latent, origin, dirs, cfg)
    for r in range(6):
        p, o = render_rays(dec, latent, origin, dirs[r:r + 1], cfg)
        assert np.allclose(p.value[0], pixel_all.value[r],
                           rtol=1e-10, atol=1e-12)
        assert np.allclose(o.value[0], op_all.value[r],
                           rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------------------
# rendering


def test_render_rays_origin_broadcast():
    _, dec = small_decoder()
    latent = Prng(38).normal((D_LAT,))
    cfg = RenderConfig(near=1.0, far=2.0, samples_per_ray=2)
    dirs = np.tile(np.array([[0.0, 0.0, 1.0]]), (3, 1))
    origin = np.array([0.5, -0.5, -2.0])
    a, _ = render_rays(dec, latent, origin, dirs, cfg)
    b, _ = render_rays(dec, latent, np.tile(origin, (3, 1)), dirs, cfg)
    assert np.array_equal(a.value, b.value)


def test_render_rays_matches_manual_pipeline():
    _, dec = small_decoder()
    latent = Prng(39).normal((D_LAT,))
    cfg = RenderConfig(near=1.5, far=3.5, samples_per_ray=4,
                       background=(0.3, 0.3, 0.3))
    dirs = Prng(40).normal((2, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.zeros(3)
    pixel, opacity = render_rays(dec, latent, origin, dirs, cfg)
    t, delta = stratified_samples(2, cfg.near, cfg.far, 4, None)
    positions = origin[None, None, :] + t[:, :, None] * dirs[:, None, :]
    batch = field_eval(dec, positions, latent, delta=delta)
    ref_pixel, ref_op = composite(batch, cfg.bg)
    assert np.array_equal(pixel.value, ref_pixel.value)
    assert np.array_equal(opacity.value, ref_op.value)


def test_render_image_chunking_invariance():
    _, dec = small_decoder()
    latent = Prng(41).normal((D_LAT,))
    cam = tiny_camera()
    cfg = RenderConfig(near=1.0, far=5.0, samples_per_ray=3,
                       background=(0.05, 0.05, 0.1))
    wide = render_image(dec, latent, cam, cfg, token_limit=256)
    narrow = render_image(dec, latent, cam, cfg, token_limit=3)
    assert wide.shape == (4, 4, 3)
    assert np.allclose(wide, narrow, rtol=1e-10, atol=1e-12)
    again = render_image(dec, latent, cam, cfg, token_limit=256)
    assert np.array_equal(wide, again)


def test_render_view_image_matches_render_image():
    _, dec = small_decoder()
    latent = Prng(42).normal((D_LAT,))
    cam = tiny_camera()
    cfg = RenderConfig(near=1.0, far=5.0, samples_per_ray=3)
    img, _ = render_view(dec, latent, cam, cfg)
    ref = render_image(dec, latent, cam, cfg)
    assert np.array_equal(img, ref)


def test_render_view_opaque_field_hits_every_ray():
    # huge constant density: every ray is opaque, the surface point sits at
    # the first stratum midpoint
    dec = constant_field_decoder(60.0, (0.0, 1.0, -1.0))
    cam = tiny_camera()
    cfg = RenderConfig(near=2.0, far=4.0, samples_per_ray=4)
    img, cloud = render_view(dec, latent=np.zeros(D_LAT), camera=cam,
                             cfg=cfg)
    n = cam.height * cam.width
    assert cloud.shape == (n, 3)
    depths = np.linalg.norm(cloud - cam.position[None, :], axis=1)
    dirs = camera_ray_grid(cam)
    h = (cfg.far - cfg.near) / cfg.samples_per_ray
    # ray directions are unit vectors, so depth along the ray is distance
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
    assert np.allclose(depths, cfg.near + 0.5 * h, atol=1e-6)
    col = 1.0 / (1.0 + np.exp(-np.array([0.0, 1.0, -1.0])))
    assert np.allclose(img, np.broadcast_to(col, img.shape), atol=1e-9)


def test_render_view_transparent_field_is_background():
    dec = constant_field_decoder(-60.0, (2.0, 0.0, -2.0))
    cam = tiny_camera()
    bg = (0.12, 0.34, 0.56)
    cfg = RenderConfig(near=2.0, far=4.0, samples_per_ray=4, background=bg)
    img, cloud = render_view(dec, latent=np.zeros(D_LAT), camera=cam,
                             cfg=cfg)
    assert cloud.shape == (0, 3)
    assert np.allclose(img, np.broadcast_to(np.asarray(bg), img.shape),
                       atol=1e-12)
    assert extract_point_cloud(dec, np.zeros(D_LAT), cam, cfg).shape == (0, 3)


# ---------------------------------------------------------------------------
# gradients through the full render


def test_render_gradients_match_finite_differences():
    params, dec = small_decoder()
    latent0 = Prng(43).normal((D_LAT,))
    cfg = RenderConfig(near=1.0, far=2.5, samples_per_ray=2)
    dirs = Prng(44).normal((2, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.array([0.0, 0.0, -1.5])
    gt = Prng(45).uniform((2, 3))

    def run(dec_, latent_):
        pixel, _ = render_rays(dec_, latent_, origin, dirs, cfg)
        return render_loss(pixel, gt)

    def build_latent(lat):
        return run(dec, lat)

    check_grad(build_latent, latent0.copy(), tol=1e-4)

    def build_embed(w):
        d = Decoder(field=dec.field, embed_w=w, embed_b=dec.embed_b,
                    context=dec.context, n_freq=dec.n_freq)
        return run(d, Tensor(latent0))

    check_grad(build_embed, params["embed.w"].value.copy(), tol=1e-4)

    def build_field_w3(w3):
        from nerfdesk.renderer import FieldNet
        f = dec.field
        field = FieldNet(w1=f.w1, b1=f.b1, w2=f.w2, b2=f.b2, w3=w3, b3=f.b3)
        d = Decoder(field=field, embed_w=dec.embed_w, embed_b=dec.embed_b,
                    context=dec.context, n_freq=dec.n_freq)
        return run(d, Tensor(latent0))

    check_grad(build_field_w3, params["field.w3"].value.copy(), tol=1e-4)


def test_render_loss_validation_and_value():
    pred = Tensor(np.array([[0.0, 1.0]]))
    gt = np.array([[0.5, 0.5]])
    loss = render_loss(pred, gt)
    assert loss.value == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        render_loss(pred, np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# parameter-matched ablation stage


def test_matched_mlp_width_is_argmin():
    target = stack_param_count(DESK)
    w = matched_mlp_width(target, DESK.d_model)
    counts = {v: token_mlp_params_count(DESK.d_model, v)
              for v in range(1, 200)}
    best = min(counts, key=lambda v: abs(counts[v] - target))
    assert w == best
    assert abs(counts[w] - target) / target < 0.10


def test_token_mlp_count_matches_arrays():
    params = init_token_mlp_params(6, 9, Prng(50))
    total = sum(int(np.prod(p.shape)) for p in params.values())
    assert total == token_mlp_params_count(6, 9)
