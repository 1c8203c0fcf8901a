"""Run configuration: a flat, typed `key = value` text format.

Every key has a default; unknown or duplicated keys are rejected with the
offending line number so configs stay reproducible.  The scene path is
resolved relative to the config file's directory at parse time.
"""

import os
from dataclasses import dataclass, fields

VARIANTS = ("full", "no_diffusion", "no_transformer", "neither")

DIFFUSION_TARGETS = ("x0", "eps")


@dataclass
class RunConfig:
    # experiment
    seed: int = 0
    variant: str = "full"
    scene: str = ""
    # camera ring and data split
    n_views: int = 12
    ring_radius: float = 3.3
    resolution: int = 32
    fov_deg: float = 45.0
    held_out_every: int = 3
    # diffusion feature generator
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.02
    d_lat: int = 16
    denoiser_hidden: int = 64
    latent_t: int = 1
    diffusion_target: str = "x0"
    # attention stack
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    n_freq: int = 4
    d_ff: int = 64
    # rendering (near/far of 0 mean: derive from the scene bounds per camera)
    near: float = 0.0
    far: float = 0.0
    samples_per_ray: int = 8
    oracle_samples: int = 512
    # optimization
    lr: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_diff: float = 0.1
    steps: int = 400
    rays_per_step: int = 32
    token_limit: int = 256
    checkpoint_interval: int = 200

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(
                f"variant must be one of {', '.join(VARIANTS)}; "
                f"got {self.variant!r}"
            )
        if self.diffusion_target not in DIFFUSION_TARGETS:
            raise ValueError(
                f"diffusion_target must be one of "
                f"{', '.join(DIFFUSION_TARGETS)}; got {self.diffusion_target!r}"
            )
        _require(self.n_views >= 2, "n_views must be at least 2")
        _require(self.ring_radius > 0, "ring_radius must be positive")
        _require(self.resolution >= 2, "resolution must be at least 2")
        _require(0 < self.fov_deg < 180, "fov_deg must lie in (0, 180)")
        _require(2 <= self.held_out_every <= self.n_views,
                 "held_out_every must lie in [2, n_views]")
        _require(self.T >= 1, "T must be at least 1")
        _require(0 < self.beta_min <= self.beta_max < 1,
                 "betas must satisfy 0 < beta_min <= beta_max < 1")
        _require(self.d_lat >= 1, "d_lat must be at least 1")
        _require(self.denoiser_hidden >= 1, "denoiser_hidden must be >= 1")
        _require(1 <= self.latent_t <= self.T,
                 "latent_t must lie in [1, T]")
        _require(self.layers >= 0, "layers must be nonnegative")
        _require(self.heads >= 1, "heads must be at least 1")
        _require(self.d_model % self.heads == 0,
                 "heads must divide d_model")
        _require(self.n_freq >= 1, "n_freq must be at least 1")
        _require(self.d_ff >= 1, "d_ff must be at least 1")
        if self.near or self.far:
            _require(0 <= self.near < self.far,
                     "explicit span needs 0 <= near < far")
        _require(self.samples_per_ray >= 2, "samples_per_ray must be >= 2")
        _require(self.oracle_samples >= 2, "oracle_samples must be >= 2")
        _require(self.lr > 0, "lr must be positive")
        _require(0 <= self.adam_beta1 < 1, "adam_beta1 must lie in [0, 1)")
        _require(0 <= self.adam_beta2 < 1, "adam_beta2 must lie in [0, 1)")
        _require(self.adam_eps > 0, "adam_eps must be positive")
        _require(self.lambda_diff >= 0, "lambda_diff must be nonnegative")
        _require(self.steps >= 0, "steps must be nonnegative")
        _require(self.rays_per_step >= 1, "rays_per_step must be >= 1")
        _require(self.token_limit >= self.samples_per_ray,
                 "token_limit must fit at least one ray of samples")
        _require(self.checkpoint_interval >= 0,
                 "checkpoint_interval must be nonnegative")


def _require(ok, msg):
    if not ok:
        raise ValueError(msg)


def _field_types():
    by_name = {"int": int, "float": float, "str": str}
    out = {}
    for f in fields(RunConfig):
        out[f.name] = by_name[f.type] if isinstance(f.type, str) else f.type
    return out


_FIELDS = _field_types()


def parse_config_text(text, base_dir="."):
    """Parse config text; see parse_config for the file form."""
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in kwargs:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        cast = _FIELDS[key]
        try:
            kwargs[key] = cast(value)
        except ValueError:
            raise ValueError(
                f"line {lineno}: cannot parse {value!r} as "
                f"{cast.__name__} for key {key!r}"
            ) from None
    cfg = RunConfig(**kwargs)
    if cfg.scene and not os.path.isabs(cfg.scene):
        cfg.scene = os.path.normpath(os.path.join(base_dir, cfg.scene))
    return cfg


def parse_config(path):
    """Load a RunConfig from a config file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text, base_dir=os.path.dirname(os.path.abspath(path)))


def config_text(cfg):
    """Render a RunConfig as config text; floats use repr so a round trip
    through parse_config_text reproduces the exact values."""
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def write_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_text(cfg))
