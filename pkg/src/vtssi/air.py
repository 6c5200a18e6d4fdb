"""Single-frame scene decomposition with continuous counting.

Inference maps a frame to a count latent and, for each of the ``N`` object
slots, size, position, and description latents. All ``N`` slots are always
computed so that frames can be batched; slots beyond the ceiling count are
silenced in generation by a zero step weight and excluded from the KL terms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn

from .config import AirConfig
from .gaussian import DiagGaussian, draw, kl_divergence, log_prob
from .geometry import flatten_schedule, regularization_kernel, st_extract, st_paste


@dataclass
class Latent:
    """A distribution together with the single value drawn from it."""

    dist: DiagGaussian
    value: torch.Tensor

    def __getitem__(self, idx) -> "Latent":
        return Latent(self.dist[idx], self.value[idx])


@dataclass
class AirLatents:
    cnt: Latent  # [..., 1]
    n_tilde: torch.Tensor  # [...]
    n_ceil: torch.Tensor  # [...], long
    size: Latent  # [..., N, 2]
    position: Latent  # [..., N, 2]
    desc: Latent  # [..., N, d]
    glimpses: torch.Tensor  # [..., N, g, g], encoder inputs

    @property
    def active(self) -> torch.Tensor:
        n = self.size.value.shape[-2]
        return torch.arange(n, device=self.n_ceil.device) < self.n_ceil.unsqueeze(-1)


def split_count(n_tilde, max_objects: int, validate: bool = True) -> torch.Tensor:
    """Split a real object count into per-slot step weights.

    ``2.4`` with four slots becomes ``[1, 1, 0.4, 0]``. Gradients reach
    ``n_tilde`` only through the fractional slot.
    """
    n_tilde = torch.as_tensor(n_tilde)
    if not torch.is_floating_point(n_tilde):
        n_tilde = n_tilde.double()
    if validate and bool(torch.any((n_tilde <= 0) | (n_tilde >= max_objects))):
        raise ValueError(f"n_tilde must lie in (0, {max_objects})")
    slots = torch.arange(max_objects, dtype=n_tilde.dtype, device=n_tilde.device)
    return torch.clamp(n_tilde.unsqueeze(-1) - slots, 0.0, 1.0)


def count_from_latent(cnt_sample, max_objects: int):
    """Real-valued count N * sigmoid(cnt) and its ceiling (at least one, at most N)."""
    cnt_sample = torch.as_tensor(cnt_sample)
    if not torch.is_floating_point(cnt_sample):
        cnt_sample = cnt_sample.double()
    n_tilde = max_objects * torch.sigmoid(cnt_sample)
    n_ceil = torch.ceil(n_tilde.detach()).long().clamp(1, max_objects)
    return n_tilde, n_ceil


def round_count(n_tilde: torch.Tensor) -> torch.Tensor:
    """Integer count reported at evaluation time (round half up)."""
    return torch.floor(n_tilde + 0.5).long()


def cnt_prior_loc(step: int, cfg: AirConfig) -> float:
    if step <= cfg.cnt_anneal_start:
        return cfg.cnt_prior_loc_start
    if step >= cfg.cnt_anneal_end:
        return cfg.cnt_prior_loc_end
    frac = (step - cfg.cnt_anneal_start) / (cfg.cnt_anneal_end - cfg.cnt_anneal_start)
    return cfg.cnt_prior_loc_start + frac * (cfg.cnt_prior_loc_end - cfg.cnt_prior_loc_start)


def mask_flattening(step: int, cfg: AirConfig) -> float:
    return flatten_schedule(step, cfg.flatten_increment, cfg.flatten_every, cfg.flatten_max)


def compose_canvas(glimpses: torch.Tensor, steps: torch.Tensor, size: torch.Tensor,
                   position: torch.Tensor, hw, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sum of pasted, mask- and step-weighted glimpses.

    glimpses [..., N, g, g], steps [..., N], size/position [..., N, 2] -> [..., H, W]
    """
    if mask is not None:
        glimpses = glimpses * mask
    glimpses = glimpses * steps[..., None, None]
    pasted = st_paste(glimpses, size, position, *hw)
    return pasted.sum(-3)


def _conv_out(module: nn.Module, shape) -> int:
    with torch.no_grad():
        return module(torch.zeros(1, 1, *shape)).numel()


def _head(n_in: int, hidden: int, n_out: int, act=nn.ReLU) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, hidden), act(), nn.Linear(hidden, n_out))


class AirNet(nn.Module):
    def __init__(self, cfg: AirConfig):
        super().__init__()
        self.cfg = cfg
        H, W = cfg.frame_hw
        c, (k1, k2, k3) = cfg.cnt_channels, cfg.cnt_kernels
        self.count_cnn = nn.Sequential(
            nn.ZeroPad2d(cfg.count_pad),
            nn.Conv2d(1, c, k1), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(c, c, k2), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(c, c, k3), nn.ReLU(),
            nn.Flatten(),
        )
        d1, d2 = cfg.cnt_dense
        self.count_head = nn.Sequential(
            nn.Linear(_conv_out(self.count_cnn, (H, W)), d1), nn.ReLU(),
            nn.Linear(d1, d2), nn.ReLU(),
            nn.Linear(d2, 2),
        )
        p = cfg.pre_channels
        self.pre_cnn = nn.Sequential(
            nn.Conv2d(1, p, 3), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(p, p, 3), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Flatten(),
        )
        self.loc_lstm = nn.LSTMCell(_conv_out(self.pre_cnn, (H, W)), cfg.loc_hidden)
        self.loc_dropout = nn.Dropout(cfg.loc_dropout)
        self.size_loc = _head(cfg.loc_hidden, cfg.loc_head, 2)
        self.size_scale = _head(cfg.loc_hidden, cfg.loc_head, 2)
        self.pos_loc = _head(cfg.loc_hidden, cfg.loc_head, 2)
        self.pos_scale = _head(cfg.loc_hidden, cfg.loc_head, 2)
        g2 = cfg.glimpse ** 2
        e1, e2 = cfg.enc_hidden
        self.encoder = nn.Sequential(
            nn.Linear(g2, e1), nn.ReLU(), nn.Linear(e1, e2), nn.ReLU(), nn.Linear(e2, 2 * cfg.desc_dim)
        )
        h1, h2 = cfg.dec_hidden
        self.decoder = nn.Sequential(
            nn.Linear(cfg.desc_dim, h1), nn.ReLU(), nn.Linear(h1, h2), nn.ReLU(), nn.Linear(h2, g2)
        )
        self.register_buffer("size_prior_loc", torch.tensor(cfg.size_prior_loc))
        self.frames_inferred = 0

    # -- inference --------------------------------------------------------------

    def infer(self, frames: torch.Tensor, use_modes: bool = False,
              generator: Optional[torch.Generator] = None) -> AirLatents:
        """Latents for every frame in ``frames`` [..., H, W]."""
        cfg = self.cfg
        lead = frames.shape[:-2]
        x = frames.reshape(-1, 1, *frames.shape[-2:])
        b = x.shape[0]
        self.frames_inferred += b

        raw = self.count_head(self.count_cnn(x))
        cnt = DiagGaussian.from_raw(raw[:, :1], raw[:, 1:])
        cnt_value = draw(cnt, use_modes, generator)
        n_tilde, n_ceil = count_from_latent(cnt_value[:, 0], cfg.max_objects)

        feats = self.pre_cnn(x)
        h = feats.new_zeros(b, cfg.loc_hidden)
        c = feats.new_zeros(b, cfg.loc_hidden)
        outs = []
        for _ in range(cfg.max_objects):
            h, c = self.loc_lstm(feats, (h, c))
            outs.append(self.loc_dropout(h))
        o = torch.stack(outs, dim=1)  # [b, N, hidden]
        size = DiagGaussian.from_raw(torch.sigmoid(self.size_loc(o)), self.size_scale(o))
        pos = DiagGaussian.from_raw(torch.tanh(self.pos_loc(o)), self.pos_scale(o))
        size_value = draw(size, use_modes, generator)
        pos_value = draw(pos, use_modes, generator)

        n = cfg.max_objects
        rep = x.expand(b, n, *x.shape[-2:]) if x.shape[1] == 1 else x
        glimpses = st_extract(rep, size_value, pos_value, cfg.glimpse)  # [b, N, g, g]
        enc = self.encoder(glimpses.reshape(b, n, -1))
        desc = DiagGaussian.from_raw(enc[..., :cfg.desc_dim], enc[..., cfg.desc_dim:])
        desc_value = draw(desc, use_modes, generator)

        def shape(t: torch.Tensor, tail: int) -> torch.Tensor:
            return t.reshape(*lead, *t.shape[t.dim() - tail:])

        def lat(g: DiagGaussian, v: torch.Tensor, tail: int) -> Latent:
            return Latent(DiagGaussian(shape(g.loc, tail), shape(g.scale, tail)), shape(v, tail))

        return AirLatents(
            cnt=lat(cnt, cnt_value, 1),
            n_tilde=n_tilde.reshape(lead),
            n_ceil=n_ceil.reshape(lead),
            size=lat(size, size_value, 2),
            position=lat(pos, pos_value, 2),
            desc=lat(desc, desc_value, 2),
            glimpses=shape(glimpses, 3),
        )

    # -- generation -------------------------------------------------------------

    def decode(self, desc_value: torch.Tensor) -> torch.Tensor:
        g = self.cfg.glimpse
        out = torch.sigmoid(self.decoder(desc_value))
        return out.reshape(*desc_value.shape[:-1], g, g)

    def generate(self, n_tilde: torch.Tensor, size: torch.Tensor, position: torch.Tensor,
                 desc: torch.Tensor, reg_p: float = 0.0, training: bool = False,
                 decoder: Optional[Callable[[torch.Tensor], torch.Tensor]] = None) -> torch.Tensor:
        """Likelihood mean canvas [..., H, W] from per-slot latent values.

        ``n_tilde`` is [...]; ``size``/``position`` [..., N, 2]; ``desc`` [..., N, d].
        The centering mask is applied only when ``training`` is set.
        """
        cfg = self.cfg
        glimpses = (decoder or self.decode)(desc)
        steps = split_count(n_tilde, cfg.max_objects, validate=False)
        mask = None
        if training:
            mask = regularization_kernel(cfg.glimpse, cfg.sigma_k, reg_p,
                                         dtype=glimpses.dtype, device=glimpses.device)
        return compose_canvas(glimpses, steps, size, position, cfg.frame_hw, mask)

    # -- priors and bound -------------------------------------------------------

    def cnt_prior(self, step: int, like: torch.Tensor) -> DiagGaussian:
        loc = torch.full_like(like, cnt_prior_loc(step, self.cfg))
        return DiagGaussian(loc, torch.full_like(like, self.cfg.cnt_prior_scale))

    def size_prior(self, like: torch.Tensor) -> DiagGaussian:
        return DiagGaussian(self.size_prior_loc.to(like.dtype).expand_as(like),
                            torch.full_like(like, self.cfg.size_prior_scale))


def frame_log_likelihood(frames: torch.Tensor, mean: torch.Tensor, sigma_l: float) -> torch.Tensor:
    """Per-pixel Gaussian log-likelihood of frames [..., H, W], summed over pixels."""
    mean = mean.flatten(-2)
    return log_prob(DiagGaussian(mean, torch.full_like(mean, sigma_l)), frames.flatten(-2))


def air_frame_elbo(net: AirNet, frames: torch.Tensor, lat: AirLatents, step: int,
                   training: bool = True) -> dict:
    """Single-frame bound: reconstruction minus KLs against the static priors.

    Returns per-frame tensors ``elbo``, ``recon``, ``kl_cnt``, ``kl_size``,
    ``kl_desc``, ``kl_pos`` with the frames' leading shape.
    """
    cfg = net.cfg
    canvas = net.generate(lat.n_tilde, lat.size.value, lat.position.value, lat.desc.value,
                          mask_flattening(step, cfg), training)
    recon = frame_log_likelihood(frames, canvas, cfg.sigma_l)
    active = lat.active.to(frames.dtype)
    kl_cnt = kl_divergence(lat.cnt.dist, net.cnt_prior(step, lat.cnt.dist.loc))
    kl_size = (kl_divergence(lat.size.dist, net.size_prior(lat.size.dist.loc)) * active).sum(-1)
    kl_desc = (kl_divergence(lat.desc.dist, DiagGaussian.standard(lat.desc.dist.shape, lat.desc.dist.loc))
               * active).sum(-1)
    kl_pos = (kl_divergence(lat.position.dist, DiagGaussian.standard(lat.position.dist.shape,
                                                                     lat.position.dist.loc))
              * active).sum(-1)
    elbo = recon - kl_cnt - kl_size - kl_desc - kl_pos
    return {"elbo": elbo, "recon": recon, "kl_cnt": kl_cnt, "kl_size": kl_size,
            "kl_desc": kl_desc, "kl_pos": kl_pos, "canvas": canvas}
