"""nerfdesk: a desk-scale neural radiance field pipeline, built for testability.

Float64 tensors with reverse-mode autodiff, a counter-based PRNG, procedural
synthetic scenes with an analytic volumetric oracle, a diffusion feature
generator, a self-attention aggregator, a conditioned radiance-field
renderer, the full evaluation-metric suite, and a deterministic training and
ablation harness.
"""

__version__ = "0.1.0"

from .autodiff import Graph, Tensor, backward
from .backend import BACKEND_NAME
from .rng import Prng

__all__ = ["Graph", "Tensor", "backward", "Prng", "BACKEND_NAME", "__version__"]
