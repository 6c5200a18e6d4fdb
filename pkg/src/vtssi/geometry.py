"""Differentiable crop/paste with bilinear sampling, and the glimpse centering mask.

Coordinate convention, used everywhere in the package:

* normalized frame coordinates run over [-1, 1] per axis, where -1 is the
  center of the first pixel and +1 the center of the last one;
* a box is (size, position) with the position being the window center and
  the window spanning ``position +- size`` in normalized coordinates, so
  ``size == 1`` covers the whole frame;
* 2-vectors are ordered (x, y), i.e. (column, row).
"""
from __future__ import annotations

import torch
import torch.nn.functional as F


def _unit_grid(n: int, dtype, device) -> torch.Tensor:
    if n == 1:
        return torch.zeros(1, dtype=dtype, device=device)
    return torch.linspace(-1.0, 1.0, n, dtype=dtype, device=device)


def _as_batch(img: torch.Tensor):
    lead = img.shape[:-2]
    return img.reshape(-1, 1, *img.shape[-2:]), lead


def st_extract(frame: torch.Tensor, size: torch.Tensor, position: torch.Tensor, g: int) -> torch.Tensor:
    """Crop the box window out of ``frame`` and resample it onto a g x g glimpse.

    ``frame`` is [..., H, W]; ``size`` and ``position`` are [..., 2] with the
    same leading dimensions. Samples falling outside the frame read as zero.
    """
    src, lead = _as_batch(frame)
    b = src.shape[0]
    size = size.reshape(b, 1, 1, 2)
    position = position.reshape(b, 1, 1, 2)
    v = _unit_grid(g, frame.dtype, frame.device)
    gy, gx = torch.meshgrid(v, v, indexing="ij")
    base = torch.stack([gx, gy], dim=-1).unsqueeze(0)  # [1, g, g, 2]
    grid = position + size * base
    out = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.reshape(*lead, g, g)


def st_paste(glimpse: torch.Tensor, size: torch.Tensor, position: torch.Tensor,
             height: int, width: int) -> torch.Tensor:
    """Inverse transform: place a glimpse into the box window of an empty H x W canvas."""
    src, lead = _as_batch(glimpse)
    b = src.shape[0]
    size = size.reshape(b, 1, 1, 2)
    position = position.reshape(b, 1, 1, 2)
    ys = _unit_grid(height, glimpse.dtype, glimpse.device)
    xs = _unit_grid(width, glimpse.dtype, glimpse.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    canvas = torch.stack([gx, gy], dim=-1).unsqueeze(0)  # [1, H, W, 2]
    grid = (canvas - position) / size
    out = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.reshape(*lead, height, width)


def regularization_kernel(g: int, sigma_k: float, flatten_p: float = 0.0,
                          dtype=torch.float32, device=None) -> torch.Tensor:
    """Bell-shaped glimpse mask with values in (0, 1] and maximum exactly 1.

    A zero-mean isotropic Gaussian bump of scale ``sigma_k`` is evaluated on a
    g x g grid over [-1, 1]^2, divided by its maximum, then flattened towards
    one by ``(k + p) / (1 + p)``.
    """
    if g < 1:
        raise ValueError("glimpse size must be >= 1")
    if not sigma_k > 0:
        raise ValueError("sigma_k must be positive")
    if flatten_p < 0:
        raise ValueError("flatten_p must be non-negative")
    v = _unit_grid(g, torch.float64, device)
    yy, xx = torch.meshgrid(v, v, indexing="ij")
    k = torch.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma_k ** 2))
    k = k / k.max()
    k = (k + flatten_p) / (1.0 + flatten_p)
    return k.to(dtype)


def flatten_schedule(step: int, increment: float = 0.1, every: int = 1000,
                     maximum: float = 100.0) -> float:
    """Mask flattening parameter p after ``step`` gradient steps."""
    return min(maximum, increment * (step // every))
