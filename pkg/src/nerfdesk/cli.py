"""Command-line entry points for the pipeline.

Subcommands: gen-scene, train, render, eval, ablate, report.  Every failure
exits nonzero after printing a single ``error: ...`` line to stderr.
"""

import argparse
import sys

from .config import parse_config
from .harness import (ablate, evaluate, inference_latent, make_decoder,
                      params_from_checkpoint, render_config_for, report,
                      train)
from .renderer import render_view
from .scene import (generate_scene, load_scene, make_camera_ring, save_scene,
                    write_ppm)


def _parse_seeds(text):
    """Seed lists: '0..4' (inclusive range) or '0,1,2' or a single integer."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _cmd_gen_scene(args):
    scene = generate_scene(args.seed)
    save_scene(args.out, scene)
    print(f"wrote {args.out} ({len(scene.primitives)} primitives)")
    return 0


def _cmd_train(args):
    cfg = parse_config(args.config)
    record = train(cfg, args.out)
    print(f"trained {record['steps']} steps -> {args.out}")
    return 0


def _cmd_render(args):
    cfg = parse_config(args.config)
    if not 0 <= args.view < cfg.n_views:
        raise ValueError(
            f"view {args.view} out of range for {cfg.n_views} views")
    params = params_from_checkpoint(args.checkpoint)
    decoder = make_decoder(params, cfg)
    latent = inference_latent(params, cfg)
    scene = load_scene(cfg.scene)
    cams = make_camera_ring(cfg.n_views, cfg.ring_radius,
                            resolution=cfg.resolution, fov_deg=cfg.fov_deg)
    camera = cams[args.view]
    rcfg = render_config_for(scene, camera, cfg)
    img, _ = render_view(decoder, latent, camera, rcfg,
                         token_limit=cfg.token_limit)
    write_ppm(args.out, img)
    print(f"wrote {args.out} ({img.shape[1]}x{img.shape[0]})")
    return 0


def _cmd_eval(args):
    cfg = parse_config(args.config)
    params = params_from_checkpoint(args.checkpoint)
    reports = evaluate(params, cfg, out_csv=args.out)
    mean_psnr = sum(r.psnr_db for r in reports) / len(reports)
    print(f"wrote {args.out} ({len(reports)} views, "
          f"mean psnr {mean_psnr:.2f} dB)")
    return 0


def _cmd_ablate(args):
    cfg = parse_config(args.config)
    seeds = _parse_seeds(args.seeds)
    records = ablate(cfg, seeds, args.out)
    print(f"completed {len(records)} runs -> {args.out}")
    return 0


def _cmd_report(args):
    table = report(args.dirs)
    print(table)
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="nerfdesk",
        description="Train and evaluate the desk-scale diffusion/attention "
                    "radiance-field pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="write a procedural scene file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("train", help="train one run from a config file")
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render one camera view to PPM")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--view", type=int, required=True, metavar="N")
    p.add_argument("--out", required=True, metavar="PPM")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="score held-out views to CSV")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run all four variants over seeds")
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--seeds", default="0..4", metavar="0..4")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", help="summarize finished run directories")
    p.add_argument("dirs", nargs="+", metavar="DIR")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
