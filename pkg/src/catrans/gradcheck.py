"""End-to-end finite-difference check of the whole model graph."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, tiny_config
from .episodes import DatasetSplit, generate_episode
from .model import CATrans, episode_loss

SIZES = {
    "tiny": dict(image_size=16, channels=(2, 2, 2, 2), mask_channels=(2, 2, 2, 2), decoder_channels=(2, 2, 2, 2)),
    "small": dict(image_size=32, channels=(4, 4, 4, 4), mask_channels=(4, 4, 4, 4), decoder_channels=(4, 4, 4, 4)),
}
# coordinates probed per parameter tensor; None means every coordinate
COORDS = {"tiny": None, "small": 6}


@dataclass
class GradReport:
    size: str
    max_error: float
    worst_param: str
    worst_index: int
    g_analytic: float
    g_numeric: float
    n_params: int

    def line(self) -> str:
        return (f"gradcheck {self.size}: max relative error {self.max_error:.3e} at {self.worst_param}"
                f"[{self.worst_index}] (analytic {self.g_analytic:.6e}, numeric {self.g_numeric:.6e})")


def gradcheck_config(size: str = "tiny", **overrides) -> ModelConfig:
    if size not in SIZES:
        raise ValueError(f"unknown size {size!r}; choose from {sorted(SIZES)}")
    return tiny_config(**{**SIZES[size], **overrides})


def model_gradcheck(size: str = "tiny", seed: int = 0, variant: str = "full", jitter: float = 0.2,
                    eps: float = 1e-3, order: int = 4) -> GradReport:
    """Check every parameter of a 64-bit model on one episode.

    Parameters get a random jitter first so the check does not sit on the
    structured initial values (identity projections, zero layers), where
    many gradients vanish exactly.

    The norms use the standard 1e-5 variance floor here. The large training
    floors shrink mask and affinity gradients to ~1e-10, where one ulp of
    round-off in the loss already exceeds the tolerance; their backward rule
    is the same code and is checked per module.

    A five-point stencil with a 1e-3 step keeps both truncation and round-off
    below the tolerance; probes that cross a ReLU kink are retried with a
    smaller step.
    """
    cfg = gradcheck_config(size, variant=variant, seed=seed, ln_eps_mask=1e-5, ln_eps_affinity=1e-5)
    rng = np.random.default_rng(seed)
    model = CATrans(cfg, rng)
    named = list(model.named_parameters())
    for _, p in named:
        p.data += rng.normal(0.0, jitter, size=p.shape)
    ep = generate_episode(DatasetSplit(cfg.fold), "train", cfg.shots, seed, cfg)

    def objective():
        return episode_loss(model, ep)[0]

    params = [p for _, p in named]
    err, (pi, idx, g_ad, g_fd) = T.grad_check_detail(objective, params, eps, max_coords=COORDS[size],
                                                     rng=np.random.default_rng(seed + 1), kink_guard=True,
                                                     order=order)
    return GradReport(size, err, named[pi][0], idx, g_ad, g_fd, len(params))
