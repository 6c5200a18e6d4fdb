"""Consensus over per-frame scene latents from the first K frames.

A bidirectional LSTM reads the concatenated distribution parameters of each
frame's latents and scores the frames; the softmax of the scores weights a
slot-wise average of the count, size, and description distributions. Slot
``i`` of every frame is fused with slot ``i`` of the others.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .air import AirLatents
from .config import RectConfig
from .gaussian import DiagGaussian, fuse_weighted


@dataclass
class Rectified:
    cnt: DiagGaussian  # [B, 1]
    size: DiagGaussian  # [B, N, 2]
    desc: DiagGaussian  # [B, N, d]
    weights: torch.Tensor  # [B, K]


def _params(lat: AirLatents) -> torch.Tensor:
    """Concatenated locs and scales of count, sizes, descriptions: [B, K, P]."""
    parts = [lat.cnt.dist.loc, lat.cnt.dist.scale]
    for g in (lat.size.dist, lat.desc.dist):
        parts += [g.loc.flatten(-2), g.scale.flatten(-2)]
    return torch.cat(parts, dim=-1)


def fuse_frames(lat: AirLatents, weights: torch.Tensor) -> Rectified:
    """Weighted fusion across the frame axis of ``lat`` ([B, K, ...]) with weights [B, K]."""
    K = weights.shape[-1]

    def fuse(g: DiagGaussian, extra: int) -> DiagGaussian:
        w = weights.reshape(weights.shape[0], *([1] * extra), K)
        return fuse_weighted([g[:, k] for k in range(K)], w)

    return Rectified(
        cnt=fuse(lat.cnt.dist, 0),
        size=fuse(lat.size.dist, 1),
        desc=fuse(lat.desc.dist, 1),
        weights=weights,
    )


class RectNet(nn.Module):
    def __init__(self, cfg: RectConfig, max_objects: int, desc_dim: int):
        super().__init__()
        self.cfg = cfg
        n_in = 2 + 4 * max_objects + 2 * desc_dim * max_objects
        self.lstm = nn.LSTM(n_in, cfg.hidden, batch_first=True, bidirectional=True)
        self.head = nn.Sequential(
            nn.Linear(2 * cfg.hidden, cfg.dense), nn.ReLU(),
            nn.Linear(cfg.dense, cfg.dense), nn.ReLU(),
            nn.Linear(cfg.dense, 1),
        )

    def weights(self, lat: AirLatents) -> torch.Tensor:
        o, _ = self.lstm(_params(lat))
        return F.softmax(self.head(o).squeeze(-1), dim=-1)

    def forward(self, lat: AirLatents, one_hot: bool = False) -> Rectified:
        """Rectify latents shaped [B, K, ...]. ``one_hot`` picks the top-weighted frame."""
        if lat.cnt.value.shape[1] == 0:
            raise ValueError("rectification needs at least one frame")
        w = self.weights(lat)
        if one_hot:
            w = F.one_hot(w.argmax(-1), w.shape[-1]).to(w.dtype)
        return fuse_frames(lat, w)
