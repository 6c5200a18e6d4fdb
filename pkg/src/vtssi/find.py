"""Locate a known object in new frames from its description.

The description is translated once into a bank of convolution kernels; every
frame is convolved with that bank and a shared feature network, and a small
MLP maps the features plus the previous position to a position posterior.
"""
from __future__ import annotations

from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .air import Latent
from .config import FindConfig
from .gaussian import DiagGaussian, draw


class FindNet(nn.Module):
    def __init__(self, cfg: FindConfig, desc_dim: int, frame_hw):
        super().__init__()
        self.cfg = cfg
        k1, k2 = cfg.ker_hidden
        n_ker = cfg.n_kernels * cfg.kernel_size ** 2
        self.kernel_mlp = nn.Sequential(
            nn.Linear(desc_dim, k1), nn.ReLU(),
            nn.Linear(k1, k2), nn.ReLU(),
            nn.Linear(k2, n_ker),
        )
        c1, c2 = cfg.conv_channels
        q1, q2 = cfg.conv_kernels
        self.conv = nn.Sequential(
            nn.MaxPool2d(2, 2),
            nn.Conv2d(cfg.n_kernels, c1, q1), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(c1, c2, q2), nn.ReLU(),
            nn.Flatten(),
        )
        with torch.no_grad():
            n_flat = self.conv(torch.zeros(1, cfg.n_kernels, *frame_hw)).numel()
        f1, f2 = cfg.feat_hidden
        self.feat_mlp = nn.Sequential(
            nn.Linear(n_flat, f1), nn.ReLU(),
            nn.Linear(f1, f2), nn.ReLU(),
            nn.Linear(f2, cfg.feat_dim),
        )
        h, hh = cfg.pos_hidden, cfg.pos_head
        self.pos_body = nn.Sequential(
            nn.Linear(cfg.feat_dim + 2, h), nn.Tanh(),
            nn.Linear(h, h), nn.Tanh(),
        )
        self.pos_loc = nn.Sequential(nn.Linear(h, hh), nn.Tanh(), nn.Linear(hh, 2))
        self.pos_scale = nn.Sequential(nn.Linear(h, hh), nn.Tanh(), nn.Linear(hh, 2))
        self.kernels_derived = 0

    def derive_kernels(self, desc_value: torch.Tensor) -> torch.Tensor:
        """Kernel banks [R, n_k, k, k, 1] for descriptions [R, d]."""
        self.kernels_derived += desc_value.shape[0]
        k = self.cfg.kernel_size
        out = self.kernel_mlp(desc_value)
        return out.reshape(desc_value.shape[0], self.cfg.n_kernels, k, k, 1)

    def features(self, frames: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
        """Per-frame features [R, T, feat] for frames [R, T, H, W] and banks [R, n_k, k, k, 1].

        Each object's frames are convolved with its own bank ('same' zero padding).
        """
        R, T, H, W = frames.shape
        n_k, k = self.cfg.n_kernels, self.cfg.kernel_size
        x = frames.transpose(0, 1).reshape(T, R, H, W)
        weight = bank.permute(0, 1, 4, 2, 3).reshape(R * n_k, 1, k, k)
        # 'same' output size; for even k the extra row/column of padding goes after
        lo = (k - 1) // 2
        x = F.pad(x, (lo, k - 1 - lo, lo, k - 1 - lo))
        y = F.relu(F.conv2d(x, weight, groups=R))  # [T, R*n_k, H, W]
        y = y.reshape(T, R, n_k, H, W).transpose(0, 1).reshape(R * T, n_k, H, W)
        f = self.feat_mlp(self.conv(y))
        return f.reshape(R, T, -1)

    def step(self, feat: torch.Tensor, prev_position: torch.Tensor) -> DiagGaussian:
        h = self.pos_body(torch.cat([feat, prev_position], dim=-1))
        return DiagGaussian.from_raw(torch.tanh(self.pos_loc(h)), self.pos_scale(h))

    def track(self, frames: torch.Tensor, desc_value: torch.Tensor,
              init_position: Optional[torch.Tensor] = None, use_modes: bool = False,
              generator: Optional[torch.Generator] = None) -> List[Latent]:
        """Position latents for every frame of ``frames`` [R, T, H, W]."""
        bank = self.derive_kernels(desc_value)
        feats = self.features(frames, bank)
        prev = init_position if init_position is not None else frames.new_zeros(frames.shape[0], 2)
        out = []
        for t in range(frames.shape[1]):
            dist = self.step(feats[:, t], prev)
            prev = draw(dist, use_modes, generator)
            out.append(Latent(dist, prev))
        return out


def find_prior(prev_position_value: torch.Tensor, scale: float = 0.1) -> DiagGaussian:
    """Prior of the next position: centered on the previous sample, no gradient through it."""
    loc = prev_position_value.detach()
    return DiagGaussian(loc, torch.full_like(loc, scale))
