"""Diagonal Gaussian algebra used for every latent variable in the model.

All operations broadcast over leading batch dimensions; the event dimension is
the last axis and is summed over where a scalar is expected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

LOG_2PI = math.log(2.0 * math.pi)
MIN_SCALE = 1e-4
WEIGHT_TOL = 1e-6


@dataclass(frozen=True)
class DiagGaussian:
    """Normal distribution with diagonal covariance, parameterized by loc and scale."""

    loc: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        if self.loc.shape != self.scale.shape:
            raise ValueError(
                f"loc and scale shapes differ: {tuple(self.loc.shape)} vs {tuple(self.scale.shape)}"
            )
        # NaN passes here so the trainer can report it as a non-finite loss
        if bool(torch.any(self.scale <= 0)):
            raise ValueError("scale must be strictly positive")

    @classmethod
    def from_raw(cls, loc: torch.Tensor, raw_scale: torch.Tensor) -> "DiagGaussian":
        """Build from an unconstrained network output for the scale."""
        return cls(loc, positive(raw_scale))

    @classmethod
    def standard(cls, shape, like: Optional[torch.Tensor] = None) -> "DiagGaussian":
        kw = {} if like is None else {"dtype": like.dtype, "device": like.device}
        return cls(torch.zeros(shape, **kw), torch.ones(shape, **kw))

    @property
    def dim(self) -> int:
        return self.loc.shape[-1]

    @property
    def shape(self) -> torch.Size:
        return self.loc.shape

    def rsample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        noise = torch.randn(self.loc.shape, generator=generator,
                            dtype=self.loc.dtype, device=self.loc.device)
        return sample_reparam(self, noise)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.loc.detach(), self.scale.detach())

    def __getitem__(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.loc[idx], self.scale[idx])

    def reshape(self, *shape) -> "DiagGaussian":
        return DiagGaussian(self.loc.reshape(*shape), self.scale.reshape(*shape))


def positive(raw: torch.Tensor) -> torch.Tensor:
    """Smooth map from the reals onto the positive reals used at all scale heads."""
    return F.softplus(raw) + MIN_SCALE


def _check_dims(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"{what}: dimension mismatch ({a.shape[-1]} vs {b.shape[-1]})")


def sample_reparam(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    _check_dims(g.loc, noise, "sample_reparam")
    return g.loc + g.scale * noise


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """Closed-form KL(q || p), summed over the event dimension."""
    _check_dims(q.loc, p.loc, "kl_divergence")
    var_ratio = (q.scale / p.scale) ** 2
    mahal = ((q.loc - p.loc) / p.scale) ** 2
    return 0.5 * (var_ratio + mahal - 1.0 - torch.log(var_ratio)).sum(-1)


def log_prob(g: DiagGaussian, x: torch.Tensor) -> torch.Tensor:
    _check_dims(g.loc, x, "log_prob")
    z = (x - g.loc) / g.scale
    return (-0.5 * z ** 2 - torch.log(g.scale) - 0.5 * LOG_2PI).sum(-1)


def fuse_weighted(vars: Sequence[DiagGaussian], weights: torch.Tensor) -> DiagGaussian:
    """Weighted average of independent Gaussians.

    Means are combined with the weights, variances with the squared weights.
    ``weights`` has the list length as its last axis and may carry batch
    dimensions that broadcast against the Gaussians' leading dimensions.
    """
    if len(vars) == 0:
        raise ValueError("fuse_weighted needs at least one Gaussian")
    weights = torch.as_tensor(weights, dtype=vars[0].loc.dtype, device=vars[0].loc.device)
    if weights.shape[-1] != len(vars):
        raise ValueError(f"expected {len(vars)} weights, got {weights.shape[-1]}")
    if bool(torch.any(weights < 0)):
        raise ValueError("weights must be non-negative")
    if bool(torch.any((weights.sum(-1) - 1.0).abs() > WEIGHT_TOL)):
        raise ValueError("weights must sum to one")
    d = vars[0].dim
    for g in vars[1:]:
        if g.dim != d:
            raise ValueError("all Gaussians must share the event dimension")

    loc = torch.stack([g.loc for g in vars], dim=-2)
    var = torch.stack([g.scale ** 2 for g in vars], dim=-2)
    w = weights.unsqueeze(-1)
    return DiagGaussian((w * loc).sum(-2), torch.sqrt((w ** 2 * var).sum(-2)))


def mode(g: DiagGaussian) -> torch.Tensor:
    return g.loc


def draw(g: DiagGaussian, use_modes: bool = False,
         generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Sample with the reparameterization trick, or return the mode."""
    return mode(g) if use_modes else g.rsample(generator)


def cat(gs: Sequence[DiagGaussian], dim: int) -> DiagGaussian:
    return DiagGaussian(torch.cat([g.loc for g in gs], dim), torch.cat([g.scale for g in gs], dim))


def stack(gs: Sequence[DiagGaussian], dim: int) -> DiagGaussian:
    return DiagGaussian(torch.stack([g.loc for g in gs], dim), torch.stack([g.scale for g in gs], dim))
