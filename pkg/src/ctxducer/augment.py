"""Training-time perturbations of embedded sequences.

Applied in a fixed order: time warp, time masking, embedding masking,
additive Gaussian noise. Each perturbation is expressed as constant
gathers/masks on the tape, so gradients still reach the embedding table.
Inert settings are skipped entirely, making a disabled config a bitwise
identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError


@dataclass
class AugmentConfig:
    enabled: bool = True
    warp_max_shift: int = 1
    time_mask_num: int = 1
    time_mask_max_width: int = 2
    embed_mask_num: int = 1
    embed_mask_max_width: int = 2
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for name in ("warp_max_shift", "time_mask_num", "time_mask_max_width",
                     "embed_mask_num", "embed_mask_max_width"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def _warp(x: Tensor, max_shift: int, rng: np.random.Generator) -> Tensor:
    t = x.shape[0]
    if t < 3:
        return x
    anchor = int(rng.integers(1, t - 1))
    shift = int(rng.integers(-max_shift, max_shift + 1))
    moved = min(max(anchor + shift, 1), t - 2)
    if moved == anchor:
        return x
    # piecewise-linear source positions through (0,0), (moved -> anchor), (t-1, t-1)
    src = np.empty(t)
    src[: moved + 1] = np.linspace(0.0, anchor, moved + 1)
    src[moved:] = np.linspace(anchor, t - 1, t - moved)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, t - 1)
    w = (src - lo)[:, None] * np.ones((1, x.shape[1]))
    a = ad.mul(ad.gather_rows(x, lo), Tensor(1.0 - w))
    b = ad.mul(ad.gather_rows(x, hi), Tensor(w))
    return ad.add(a, b)


def augment(x: Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> Tensor:
    """Perturb a (T, E) embedded sequence; deterministic given ``rng`` state.

    Mask widths wider than the sequence are clamped, never an error.
    """
    cfg.validate()
    if not cfg.enabled:
        return x
    t, e = x.shape

    if cfg.warp_max_shift > 0:
        x = _warp(x, cfg.warp_max_shift, rng)

    mask = np.ones((t, e))
    masked = False
    for _ in range(cfg.time_mask_num):
        width = int(rng.integers(0, min(cfg.time_mask_max_width, t) + 1))
        if width > 0:
            start = int(rng.integers(0, t - width + 1))
            mask[start : start + width, :] = 0.0
            masked = True
    for _ in range(cfg.embed_mask_num):
        width = int(rng.integers(0, min(cfg.embed_mask_max_width, e) + 1))
        if width > 0:
            start = int(rng.integers(0, e - width + 1))
            mask[:, start : start + width] = 0.0
            masked = True
    if masked:
        x = ad.mul(x, Tensor(mask))

    if cfg.noise_sigma > 0:
        x = ad.add(x, Tensor(cfg.noise_sigma * rng.standard_normal((t, e))))
    return x
