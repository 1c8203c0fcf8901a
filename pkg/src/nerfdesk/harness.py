"""Training, evaluation, ablation, and reporting around the renderer.

A run directory holds: ``checkpoint.dtnf`` (final parameters, plus
interval snapshots), ``losses.csv`` (per-step loss log), ``metrics.csv``
(held-out view scores once evaluated), and ``run_record.json`` (config
echo and provenance; wall-clock fields there are the only outputs that
vary between repeats of the same seed).
"""

import json
import math
import os
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .autodiff import Graph, Tensor, backward, sum_sq
from .checkpoint import load_checkpoint, save_checkpoint
from .config import VARIANTS, config_text
from .diffusion import (NoiseSchedule, denoiser_net, diffusion_loss,
                        extract_latent, forward_diffuse, init_denoiser_params,
                        init_latent_params, predict_clean)
from .metrics import chamfer, image_report, read_metrics_csv, write_metrics_csv
from .optim import AdamState, adam_step, named_grads
from .renderer import (AttentionContext, Decoder, RenderConfig, field_net,
                       init_embed_params, init_field_params,
                       init_token_mlp_params, matched_mlp_width, render_rays,
                       render_view, token_mlp)
from .rng import ALGORITHM, Prng
from .scene import (camera_ray_grid, load_scene, make_camera_ring,
                    near_far_for, oracle_render, sample_point_cloud)
from .transformer import (AttentionConfig, init_transformer_params,
                          stack_param_count, stack_weights)

#: width of the per-view feature vectors the diffusion stage models
FEATURE_WIDTH = 64
#: downsampled grid feeding the feature projection (8 x 8 x 3 = 192 inputs)
FEATURE_GRID = 8

#: ground-truth surface cloud used for Chamfer evaluation
GT_CLOUD_POINTS = 2048
GT_CLOUD_SEED = 910

# child-stream keys of the run seed, one per independent purpose
_KEY_TRAIN = 1
_KEY_EVAL = 2
_KEY_INIT = 11
_KEY_FEATURES = 201

FINAL_CHECKPOINT = "checkpoint.dtnf"


def uses_diffusion(variant):
    return variant in ("full", "no_transformer")


def uses_attention(variant):
    return variant in ("full", "no_diffusion")


def split_views(n_views, held_out_every):
    """(training view indices, held-out view indices)."""
    idx = np.arange(n_views)
    hold = idx % held_out_every == 0
    return idx[~hold], idx[hold]


def attention_config(cfg):
    return AttentionConfig(layers=cfg.layers, heads=cfg.heads,
                           d_model=cfg.d_model, n_freq=cfg.n_freq,
                           d_ff=cfg.d_ff)


def schedule_for(cfg):
    return NoiseSchedule.linear(cfg.T, cfg.beta_min, cfg.beta_max)


# ---------------------------------------------------------------------------
# scene plumbing with per-process caches (oracle renders are pure functions
# of their inputs, and test suites revisit the same views many times)


def _scene_key(scene):
    prims = tuple(
        (p.kind, p.center.tobytes(), p.size.tobytes(), p.density,
         p.albedo.tobytes())
        for p in scene.primitives
    )
    return prims, scene.background.tobytes()


def _camera_key(camera):
    return (camera.position.tobytes(), camera.rotation.tobytes(),
            camera.fx, camera.fy, camera.cx, camera.cy,
            camera.width, camera.height)


_ORACLE_CACHE = {}
_CLOUD_CACHE = {}


def oracle_view(scene, camera, samples, near, far):
    key = (_scene_key(scene), _camera_key(camera), int(samples),
           float(near), float(far))
    img = _ORACLE_CACHE.get(key)
    if img is None:
        img = oracle_render(scene, camera, samples, near=near, far=far)
        _ORACLE_CACHE[key] = img
    return img


def gt_cloud(scene):
    key = _scene_key(scene)
    pts = _CLOUD_CACHE.get(key)
    if pts is None:
        pts = sample_point_cloud(scene, GT_CLOUD_POINTS, GT_CLOUD_SEED)
        _CLOUD_CACHE[key] = pts
    return pts


def render_config_for(scene, camera, cfg):
    near, far = near_far_for(scene, camera,
                             cfg.near or None, cfg.far or None)
    return RenderConfig(near=near, far=far,
                        samples_per_ray=cfg.samples_per_ray,
                        background=tuple(scene.background))


# ---------------------------------------------------------------------------
# parameters and features


def build_params(cfg):
    """Freshly initialized named parameters for the config's variant.

    Draw order is embedding, context stage, field head, then the diffusion
    nets or the constant conditioning vector, all from one child stream of
    the run seed.
    """
    rng = Prng(cfg.seed).child(_KEY_INIT)
    params = {}
    params.update(init_embed_params(cfg.d_lat, cfg.n_freq, cfg.d_model, rng))
    tcfg = attention_config(cfg)
    if uses_attention(cfg.variant):
        params.update(init_transformer_params(tcfg, rng))
    else:
        width = matched_mlp_width(stack_param_count(tcfg), cfg.d_model)
        params.update(init_token_mlp_params(cfg.d_model, width, rng))
    params.update(init_field_params(cfg.d_model, cfg.n_freq, rng))
    if uses_diffusion(cfg.variant):
        params.update(init_denoiser_params(FEATURE_WIDTH, cfg.denoiser_hidden,
                                           rng))
        params.update(init_latent_params(FEATURE_WIDTH, cfg.d_lat, rng))
    else:
        params["latent_const"] = Tensor(np.zeros(cfg.d_lat))
    return params


def params_from_checkpoint(path):
    return {name: Tensor(arr) for name, arr in load_checkpoint(path).items()}


def make_decoder(params, cfg):
    try:
        if uses_attention(cfg.variant):
            context = AttentionContext(
                stack_weights(params, attention_config(cfg)), cfg.heads)
        else:
            context = token_mlp(params)
        return Decoder(field=field_net(params), embed_w=params["embed.w"],
                       embed_b=params["embed.b"], context=context,
                       n_freq=cfg.n_freq)
    except KeyError as e:
        raise ValueError(
            f"checkpoint is missing parameter {e.args[0]!r} required by "
            f"variant {cfg.variant!r}"
        ) from None


def view_features(images, seed):
    """Per-view feature rows for the diffusion stage.

    Block-average each training render to an 8 x 8 x 3 grid, flatten, and
    push through a fixed seeded projection to FEATURE_WIDTH.  The
    projection is not trainable and is recomputed from the seed wherever
    features are needed.
    """
    images = np.asarray(images, dtype=np.float64)
    n, h, w, _ = images.shape
    g = FEATURE_GRID
    if h % g or w % g:
        raise ValueError(f"resolution must be a multiple of {g}, "
                         f"got {h}x{w}")
    small = images.reshape(n, g, h // g, g, w // g, 3).mean(axis=(2, 4))
    flat = small.reshape(n, g * g * 3)
    proj = Prng(seed).child(_KEY_FEATURES).normal((flat.shape[1],
                                                   FEATURE_WIDTH))
    proj /= math.sqrt(flat.shape[1])
    return flat @ proj


def training_latent(params, cfg, schedule, feature_row, rng):
    """Conditioning vector for one view: corrupt its feature row to
    latent_t, predict the clean row, pool and project.  Graph-attached so
    the render loss reaches the denoiser."""
    net = denoiser_net(params)
    x_t, _ = forward_diffuse(feature_row, cfg.latent_t, schedule, rng)
    x0_hat = predict_clean(net, x_t, cfg.latent_t, schedule,
                           target=cfg.diffusion_target)
    return extract_latent(x0_hat, params["diffusion.latent.w"],
                          params["diffusion.latent.b"])


def evaluation_latent(params, cfg, schedule, features):
    """Deterministic conditioning for held-out rendering: corrupt every
    training feature row with the evaluation stream, denoise, and pool."""
    net = denoiser_net(params)
    rng = Prng(cfg.seed).child(_KEY_EVAL)
    t = np.full(features.shape[0], cfg.latent_t, dtype=np.int64)
    x_t, _ = forward_diffuse(features, t, schedule, rng)
    x0_hat = predict_clean(net, x_t, t, schedule,
                           target=cfg.diffusion_target)
    return extract_latent(x0_hat, params["diffusion.latent.w"],
                          params["diffusion.latent.b"])


# ---------------------------------------------------------------------------
# losses


def total_loss(render_term, diffusion_term, lambda_diff):
    """render + lambda * diffusion on one graph."""
    if lambda_diff < 0:
        raise ValueError("lambda_diff must be nonnegative")
    if diffusion_term is None or lambda_diff == 0.0:
        return render_term
    return render_term + diffusion_term * float(lambda_diff)


def _chunked_render_loss(decoder, latent, position, dirs, gt_pixels, rcfg,
                         token_limit, rng):
    """MSE over a ray batch, rendered in chunks within the token cap."""
    chunk = max(1, int(token_limit) // int(rcfg.samples_per_ray))
    parts = None
    for lo in range(0, dirs.shape[0], chunk):
        pix, _ = render_rays(decoder, latent, position, dirs[lo:lo + chunk],
                             rcfg, rng)
        part = sum_sq(pix, gt_pixels[lo:lo + chunk])
        parts = part if parts is None else parts + part
    return parts / float(gt_pixels.size)


# ---------------------------------------------------------------------------
# training


def train(cfg, out_dir, run_name=None):
    """Train one run and write its artifacts into ``out_dir``.

    Returns the run record (also serialized to ``run_record.json``).
    """
    if not cfg.scene:
        raise ValueError("config does not name a scene file")
    os.makedirs(out_dir, exist_ok=True)
    run_name = run_name or f"{cfg.variant}-seed{cfg.seed}"
    scene = load_scene(cfg.scene)
    cams = make_camera_ring(cfg.n_views, cfg.ring_radius,
                            resolution=cfg.resolution, fov_deg=cfg.fov_deg)
    train_idx, _ = split_views(cfg.n_views, cfg.held_out_every)
    rcfgs = {int(i): render_config_for(scene, cams[i], cfg)
             for i in train_idx}
    gt = {int(i): oracle_view(scene, cams[i], cfg.oracle_samples,
                              rcfgs[int(i)].near, rcfgs[int(i)].far)
          for i in train_idx}
    dirs = {int(i): camera_ray_grid(cams[i]) for i in train_idx}
    n_pix = cfg.resolution * cfg.resolution

    diffusing = uses_diffusion(cfg.variant)
    features = None
    schedule = None
    if diffusing:
        stack = np.stack([gt[int(i)] for i in train_idx])
        features = view_features(stack, cfg.seed)
        schedule = schedule_for(cfg)

    params = build_params(cfg)
    opt = AdamState(params, lr=cfg.lr, beta1=cfg.adam_beta1,
                    beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    t_rng = Prng(cfg.seed).child(_KEY_TRAIN)

    wall_start = time.time()
    loss_rows = []
    snapshots = []
    for step in range(cfg.steps):
        pick = t_rng.randint(0, len(train_idx))
        view = int(train_idx[pick])
        rays = t_rng.randint(0, n_pix, cfg.rays_per_step)
        gt_pix = gt[view].reshape(n_pix, 3)[rays]
        with Graph():
            decoder = make_decoder(params, cfg)
            if diffusing:
                d_loss = diffusion_loss(denoiser_net(params), features,
                                        schedule, t_rng,
                                        target=cfg.diffusion_target)
                latent = training_latent(params, cfg, schedule,
                                         features[pick], t_rng)
            else:
                d_loss = None
                latent = params["latent_const"]
            r_loss = _chunked_render_loss(
                decoder, latent, cams[view].position, dirs[view][rays],
                gt_pix, rcfgs[view], cfg.token_limit, t_rng)
            loss = total_loss(r_loss, d_loss, cfg.lambda_diff)
            grads = backward(loss)
        adam_step(params, named_grads(params, grads), opt)
        loss_rows.append((step, r_loss.item(),
                          d_loss.item() if d_loss is not None else 0.0,
                          loss.item()))
        done = step + 1
        if (cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0
                and done < cfg.steps):
            name = f"checkpoint_{done:06d}.dtnf"
            save_checkpoint(os.path.join(out_dir, name),
                            {k: p.value for k, p in params.items()})
            snapshots.append(name)

    save_checkpoint(os.path.join(out_dir, FINAL_CHECKPOINT),
                    {k: p.value for k, p in params.items()})
    snapshots.append(FINAL_CHECKPOINT)
    _write_losses(os.path.join(out_dir, "losses.csv"), loss_rows)

    record = {
        "run": run_name,
        "config": config_text(cfg),
        "version": __version__,
        "prng_algorithm": ALGORITHM,
        "steps": cfg.steps,
        "checkpoints": snapshots,
        "wall_time_s": time.time() - wall_start,
    }
    with open(os.path.join(out_dir, "run_record.json"), "w",
              encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return record


def _write_losses(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,render_loss,diffusion_loss,total_loss\n")
        for step, r, d, t in rows:
            fh.write(f"{step},{r!r},{d!r},{t!r}\n")


def read_losses(path):
    """Parse losses.csv into an (n, 4) float array of columns
    step, render, diffusion, total."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "step,render_loss,diffusion_loss,total_loss":
            raise ValueError(f"unexpected loss log header in {path}")
        rows = [[float(x) for x in line.strip().split(",")]
                for line in fh if line.strip()]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


# ---------------------------------------------------------------------------
# evaluation


def inference_latent(params, cfg):
    """The conditioning vector used outside training: the denoised latent of
    the training views' features for diffusion variants, the trained constant
    otherwise."""
    if uses_diffusion(cfg.variant):
        scene = load_scene(cfg.scene)
        cams = make_camera_ring(cfg.n_views, cfg.ring_radius,
                                resolution=cfg.resolution, fov_deg=cfg.fov_deg)
        train_idx, _ = split_views(cfg.n_views, cfg.held_out_every)
        rcfgs_train = [render_config_for(scene, cams[i], cfg)
                       for i in train_idx]
        stack = np.stack([
            oracle_view(scene, cams[i], cfg.oracle_samples, rc.near, rc.far)
            for i, rc in zip(train_idx, rcfgs_train)])
        features = view_features(stack, cfg.seed)
        return evaluation_latent(params, cfg, schedule_for(cfg), features)
    if "latent_const" not in params:
        raise ValueError(
            "checkpoint is missing parameter 'latent_const' required "
            f"by variant {cfg.variant!r}")
    return params["latent_const"]


def evaluate(params, cfg, out_csv=None, run_name=None):
    """Score every held-out view against the oracle; returns the per-view
    MetricsReport list (the MEAN row is added by the CSV writer)."""
    if not cfg.scene:
        raise ValueError("config does not name a scene file")
    run_name = run_name or f"{cfg.variant}-seed{cfg.seed}"
    scene = load_scene(cfg.scene)
    cams = make_camera_ring(cfg.n_views, cfg.ring_radius,
                            resolution=cfg.resolution, fov_deg=cfg.fov_deg)
    train_idx, eval_idx = split_views(cfg.n_views, cfg.held_out_every)
    decoder = make_decoder(params, cfg)
    latent = inference_latent(params, cfg)

    reference_cloud = gt_cloud(scene)
    reports = []
    for i in eval_idx:
        rcfg = render_config_for(scene, cams[i], cfg)
        ref = oracle_view(scene, cams[i], cfg.oracle_samples,
                          rcfg.near, rcfg.far)
        img, cloud = render_view(decoder, latent, cams[i], rcfg,
                                 token_limit=cfg.token_limit)
        # an empty prediction carries no geometry to score; inf marks it
        ch = chamfer(cloud, reference_cloud) if len(cloud) else math.inf
        reports.append(image_report(run_name, cfg.variant, int(i),
                                    img, ref, ch))
    if out_csv:
        write_metrics_csv(out_csv, reports)
    return reports


# ---------------------------------------------------------------------------
# ablation and reporting


def ablate(cfg, seeds, out_dir):
    """Train and evaluate every variant at every seed under ``out_dir``.

    Directory layout: ``out_dir/<variant>-seed<seed>/``.  Returns
    {(variant, seed): run record}.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("no seeds given")
    records = {}
    for variant in VARIANTS:
        for seed in seeds:
            run_cfg = replace(cfg, variant=variant, seed=int(seed))
            name = f"{variant}-seed{seed}"
            rdir = os.path.join(out_dir, name)
            rec = train(run_cfg, rdir, run_name=name)
            params = params_from_checkpoint(
                os.path.join(rdir, FINAL_CHECKPOINT))
            evaluate(params, run_cfg,
                     out_csv=os.path.join(rdir, "metrics.csv"),
                     run_name=name)
            records[(variant, seed)] = rec
    return records


_TABLE_COLUMNS = ("mse", "psnr_db", "ssim", "chamfer", "fidelity_mae",
                  "fidelity_sim")


def report(run_dirs):
    """Aggregate MEAN rows per variant into a text table and write
    plot-ready loss curves next to each run's loss log.

    Returns the table text.  Raises if any directory lacks a metrics CSV.
    """
    if not run_dirs:
        raise ValueError("no run directories given")
    by_variant = {}
    for d in run_dirs:
        mpath = os.path.join(d, "metrics.csv")
        if not os.path.isfile(mpath):
            raise FileNotFoundError(f"missing metrics CSV: {mpath}")
        means = [r for r in read_metrics_csv(mpath) if r.view == "MEAN"]
        if not means:
            raise ValueError(f"no MEAN row in {mpath}")
        by_variant.setdefault(means[-1].variant, []).append(means[-1])
        _write_plot_data(d)

    order = {v: i for i, v in enumerate(VARIANTS)}
    lines = ["variant runs " + " ".join(_TABLE_COLUMNS)]
    for variant in sorted(by_variant, key=lambda v: (order.get(v, len(order)),
                                                     v)):
        rows = by_variant[variant]
        n = len(rows)
        agg = [sum(getattr(r, c) for r in rows) / n for c in _TABLE_COLUMNS]
        lines.append(f"{variant} {n} " + " ".join(_fmt_cell(v) for v in agg))
    return "\n".join(lines) + "\n"


def _fmt_cell(x):
    return "inf" if math.isinf(x) else repr(float(x))


def _write_plot_data(run_dir):
    lpath = os.path.join(run_dir, "losses.csv")
    if not os.path.isfile(lpath):
        return
    rows = read_losses(lpath)
    pdir = os.path.join(run_dir, "plots")
    os.makedirs(pdir, exist_ok=True)
    for col, name in ((1, "render_loss"), (2, "diffusion_loss"),
                      (3, "total_loss")):
        with open(os.path.join(pdir, f"{name}.dat"), "w",
                  encoding="utf-8") as fh:
            for row in rows:
                fh.write(f"{int(row[0])} {row[col]!r}\n")
