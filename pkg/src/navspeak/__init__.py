"""navspeak: desk-scale navigation instruction generation.

Synthetic 2.5D worlds rendered with analytic raycasting, BEV perception
with depth-consistency-weighted deformable sampling, perspective-BEV
fusion, a prompt-tuned tiny decoder, instance-guided iterative refinement,
and the captioning metrics to score it all.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, no_grad
from .config import RunConfig, desk_preset, micro_preset, paper_preset

__all__ = [
    "Tensor",
    "no_grad",
    "RunConfig",
    "desk_preset",
    "micro_preset",
    "paper_preset",
    "__version__",
]
