"""Dense float64 arithmetic, a reverse-mode tape with HVP support, and RNG."""

from .ops import as_tensor, cosine_sim, fd_gradient, lp_norm, max_rel_error, project_lp
from .rng import Rng
from .tape import Node, Tape, backward, hvp, vjp

__all__ = [
    "Node",
    "Rng",
    "Tape",
    "as_tensor",
    "backward",
    "cosine_sim",
    "fd_gradient",
    "hvp",
    "lp_norm",
    "max_rel_error",
    "project_lp",
    "vjp",
]
