"""Markov motion model over object positions.

An LSTM infers motion latents from the position track; two transition
networks predict the next position and motion from the current ones. From
step M+1 on, predictions and inferences are fused by a scalar weight, and the
predicted distributions act as the priors of the fused ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from .air import Latent
from .config import FusionPolicy, MotConfig
from .gaussian import DiagGaussian, draw, fuse_weighted


class _GaussHead(nn.Module):
    """Two separate tanh heads producing loc and raw scale."""

    def __init__(self, n_in: int, hidden: int, n_out: int):
        super().__init__()
        self.loc = nn.Sequential(nn.Linear(n_in, hidden), nn.Tanh(), nn.Linear(hidden, n_out))
        self.scale = nn.Sequential(nn.Linear(n_in, hidden), nn.Tanh(), nn.Linear(hidden, n_out))

    def forward(self, h: torch.Tensor, squash=None) -> DiagGaussian:
        loc = self.loc(h)
        if squash is not None:
            loc = squash(loc)
        return DiagGaussian.from_raw(loc, self.scale(h))


class Transition(nn.Module):
    def __init__(self, n_in: int, hidden: int, head: int, n_out: int, squash=None):
        super().__init__()
        self.body = nn.Sequential(nn.Linear(n_in, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh())
        self.head = _GaussHead(hidden, head, n_out)
        self.squash = squash

    def forward(self, position: torch.Tensor, motion: torch.Tensor) -> DiagGaussian:
        return self.head(self.body(torch.cat([position, motion], dim=-1)), self.squash)


@dataclass
class MotOutput:
    positions: List[Latent]  # final, t = 1..T
    motions: List[Latent]  # final, t = M..T
    pred_positions: List[DiagGaussian]  # t = M+1..T
    pred_motions: List[DiagGaussian]  # t = M+1..T
    weights: List[torch.Tensor]  # fusion weight per step, t = M+1..T


def fuse_step(pred: DiagGaussian, inferred: DiagGaussian, w) -> DiagGaussian:
    """Fuse a prediction with an inference: w * pred + (1 - w) * inferred."""
    w = torch.as_tensor(w, dtype=pred.loc.dtype, device=pred.loc.device)
    if bool(torch.any((w < 0) | (w > 1))):
        raise ValueError("fusion weight must lie in [0, 1]")
    weights = torch.stack(torch.broadcast_tensors(w, 1 - w), dim=-1)
    return fuse_weighted([pred, inferred], weights)


def fusion_weight(policy: FusionPolicy, shape, training: bool, like: torch.Tensor,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if not training:
        return torch.full(shape, policy.test_w, dtype=like.dtype, device=like.device)
    u = torch.rand(shape, generator=generator, dtype=like.dtype, device=like.device)
    return policy.w_min + (policy.w_max - policy.w_min) * u


class MotNet(nn.Module):
    def __init__(self, cfg: MotConfig, desc_dim: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.motion_dim
        self.lstm = nn.LSTM(2 + desc_dim + 2, cfg.lstm_hidden, batch_first=True)
        self.motion_head = _GaussHead(cfg.lstm_hidden, cfg.head, d)
        self.tr_pos = Transition(2 + d, cfg.tr_hidden, cfg.head, 2, squash=torch.tanh)
        self.tr_mot = Transition(2 + d, cfg.tr_hidden, cfg.head, d)

    def infer_motion(self, positions: torch.Tensor, size: torch.Tensor, desc: torch.Tensor,
                     M: int) -> DiagGaussian:
        """Motion posteriors [R, T-M+1, d] from position values [R, T, 2]."""
        T = positions.shape[1]
        if not 1 <= M <= T:
            raise ValueError(f"need 1 <= M <= T, got M={M}, T={T}")
        static = torch.cat([size, desc], dim=-1).unsqueeze(1).expand(-1, T, -1)
        h, _ = self.lstm(torch.cat([static, positions], dim=-1))
        return self.motion_head(h[:, M - 1:])

    def transition(self, position: torch.Tensor, motion: torch.Tensor):
        return self.tr_pos(position, motion), self.tr_mot(position, motion)

    def pipeline(self, inferred: List[Latent], size: torch.Tensor, desc: torch.Tensor, M: int,
                 policy: FusionPolicy, use_modes: bool = False,
                 generator: Optional[torch.Generator] = None,
                 fusion_generator: Optional[torch.Generator] = None) -> MotOutput:
        """Fuse inferred positions [t=1..T] with transition predictions from step M+1 on.

        Training-time fusion weights are drawn from ``fusion_generator``
        (falling back to ``generator``).
        """
        T = len(inferred)
        pos_values = torch.stack([lat.value for lat in inferred], dim=1)
        mot_dists = self.infer_motion(pos_values, size, desc, M)

        positions = list(inferred)
        motion0 = mot_dists[:, 0]
        motions = [Latent(motion0, draw(motion0, use_modes, generator))]
        pred_p, pred_m, weights = [], [], []
        like = pos_values
        for t in range(M, T):  # zero-based index of step t+1
            pp, pm = self.transition(positions[t - 1].value, motions[-1].value)
            w = fusion_weight(policy, (like.shape[0],), self.training, like,
                              fusion_generator or generator)
            fp = fuse_step(pp, inferred[t].dist, w)
            fm = fuse_step(pm, mot_dists[:, t - M + 1], w)
            positions[t] = Latent(fp, draw(fp, use_modes, generator))
            motions.append(Latent(fm, draw(fm, use_modes, generator)))
            pred_p.append(pp)
            pred_m.append(pm)
            weights.append(w)
        return MotOutput(positions, motions, pred_p, pred_m, weights)

    def rollout(self, position: torch.Tensor, motion: torch.Tensor, steps: int,
                use_modes: bool = True, generator: Optional[torch.Generator] = None
                ) -> List[Tuple[Latent, Latent]]:
        """Purely generative continuation: ``steps`` further (position, motion) pairs."""
        if steps < 0:
            raise ValueError("steps must be non-negative")
        out = []
        for _ in range(steps):
            pp, pm = self.transition(position, motion)
            position = draw(pp, use_modes, generator)
            motion = draw(pm, use_modes, generator)
            out.append((Latent(pp, position), Latent(pm, motion)))
        return out
