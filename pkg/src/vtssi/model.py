"""The full sequential model and its ablations.

Variants:

* ``air``: independent per-frame scene decomposition;
* ``find``: decomposition of frame 1, then description-driven tracking;
* ``rect_find``: consensus over the first K frames, then tracking;
* ``find_mot``: ``find`` plus the Markov motion model;
* ``vtssi``: consensus, tracking, and motion model together.

Per-object computations (tracking and motion) run only on slots below the
ceiling count of each sequence; the remaining slots are filled with inert
placeholders that carry zero weight in generation and no KL term.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn as nn

from .air import (AirLatents, AirNet, Latent, air_frame_elbo, compose_canvas, count_from_latent,
                  frame_log_likelihood, mask_flattening, split_count)
from .config import VtssiConfig
from .find import FindNet, find_prior
from .gaussian import DiagGaussian, draw, kl_divergence
from .geometry import regularization_kernel
from .mot import MotNet
from .rect import RectNet


@dataclass
class SceneLatents:
    variant: str
    K: int
    M: int
    T: int
    air: AirLatents  # [B, K, ...] ([B, T, ...] for the air variant)
    canvas: torch.Tensor  # [B, T, H, W] likelihood means
    cnt: Optional[Latent] = None  # [B, 1]
    n_tilde: Optional[torch.Tensor] = None  # [B]
    n_ceil: Optional[torch.Tensor] = None  # [B]
    size: Optional[Latent] = None  # [B, N, 2]
    desc: Optional[Latent] = None  # [B, N, d]
    inferred_positions: List[Latent] = field(default_factory=list)  # t = 1..T, [B, N, 2]
    positions: List[Latent] = field(default_factory=list)  # t = 1..T, [B, N, 2]
    motions: List[Latent] = field(default_factory=list)  # t = M..T, [B, N, m]
    pred_positions: List[DiagGaussian] = field(default_factory=list)  # t = M+1..T
    pred_motions: List[DiagGaussian] = field(default_factory=list)  # t = M+1..T
    rect_weights: Optional[torch.Tensor] = None  # [B, K]

    @property
    def active(self) -> torch.Tensor:
        if self.variant == "air":
            return self.air.active
        n = self.size.value.shape[1]
        return torch.arange(n, device=self.n_ceil.device) < self.n_ceil.unsqueeze(-1)

    def position_track(self) -> torch.Tensor:
        """Final position values [B, N, T, 2] (per-frame slots for the air variant)."""
        if self.variant == "air":
            return self.air.position.value.transpose(1, 2)
        return torch.stack([p.value for p in self.positions], dim=2)

    def inferred_track(self) -> torch.Tensor:
        if self.variant == "air" or not self.inferred_positions:
            return self.position_track()
        return torch.stack([p.value for p in self.inferred_positions], dim=2)


@dataclass
class KLTerm:
    latent: str
    prior: str
    object: Optional[int] = None
    t: Optional[int] = None


class _Rows:
    """Gather/scatter between [B, N, ...] slot tensors and packed active rows."""

    def __init__(self, active: torch.Tensor):
        self.shape = active.shape
        self.b, self.i = active.nonzero(as_tuple=True)

    def gather(self, x: torch.Tensor) -> torch.Tensor:
        return x[self.b, self.i]

    def gather_batch(self, x: torch.Tensor) -> torch.Tensor:
        return x[self.b]

    def scatter(self, rows: torch.Tensor, fill: float = 0.0) -> torch.Tensor:
        full = rows.new_full((*self.shape, *rows.shape[1:]), fill)
        return full.index_put((self.b, self.i), rows)

    def scatter_latent(self, lat: Latent) -> Latent:
        dist = DiagGaussian(self.scatter(lat.dist.loc), self.scatter(lat.dist.scale, 1.0))
        return Latent(dist, self.scatter(lat.value))

    def scatter_dist(self, g: DiagGaussian) -> DiagGaussian:
        return DiagGaussian(self.scatter(g.loc), self.scatter(g.scale, 1.0))


class VTSSIModel(nn.Module):
    def __init__(self, cfg: VtssiConfig):
        super().__init__()
        self.cfg = cfg
        a = cfg.air
        self.air = AirNet(a)
        self.find = FindNet(cfg.find, a.desc_dim, a.frame_hw) if cfg.uses_find else None
        self.rect = RectNet(cfg.rect, a.max_objects, a.desc_dim) if cfg.uses_rect else None
        self.mot = MotNet(cfg.mot, a.desc_dim) if cfg.uses_mot else None

    def horizons(self, T: int):
        """Rectification and motion prefixes, clipped to the sequence length."""
        K = min(self.cfg.K, T) if self.cfg.uses_rect else 1
        M = min(self.cfg.M, T)
        return K, M

    def render(self, n_tilde, size, position, desc, step: int = 0) -> torch.Tensor:
        """Canvases [B, T, H, W] from static latents and per-frame positions [B, T, N, 2]."""
        a = self.cfg.air
        glimpses = self.air.decode(desc)  # [B, N, g, g]
        T = position.shape[1]
        steps = split_count(n_tilde, a.max_objects, validate=False)
        mask = None
        if self.training:
            mask = regularization_kernel(a.glimpse, a.sigma_k, mask_flattening(step, a),
                                         dtype=glimpses.dtype, device=glimpses.device)
        expand = lambda x: x.unsqueeze(1).expand(-1, T, *x.shape[1:])
        return compose_canvas(expand(glimpses), expand(steps), expand(size), position,
                              a.frame_hw, mask)

    def forward(self, frames: torch.Tensor, use_modes: bool = False,
                generator: Optional[torch.Generator] = None, step: int = 0,
                one_hot_rect: bool = False,
                fusion_generator: Optional[torch.Generator] = None) -> SceneLatents:
        """Infer latents for frames [B, T, H, W] and render the likelihood means."""
        cfg = self.cfg
        B, T = frames.shape[:2]
        if cfg.variant == "air":
            lat = self.air.infer(frames, use_modes, generator)
            canvas = self.air.generate(lat.n_tilde, lat.size.value, lat.position.value,
                                       lat.desc.value, mask_flattening(step, cfg.air), self.training)
            return SceneLatents(cfg.variant, T, T, T, lat, canvas)

        K, M = self.horizons(T)
        lat = self.air.infer(frames[:, :K], use_modes, generator)
        rect_w = None
        if self.rect is not None:
            r = self.rect(lat, one_hot=one_hot_rect)
            rect_w = r.weights
            cnt = Latent(r.cnt, draw(r.cnt, use_modes, generator))
            size = Latent(r.size, draw(r.size, use_modes, generator))
            desc = Latent(r.desc, draw(r.desc, use_modes, generator))
        else:
            cnt, size, desc = lat.cnt[:, 0], lat.size[:, 0], lat.desc[:, 0]
        n_tilde, n_ceil = count_from_latent(cnt.value[:, 0], cfg.air.max_objects)
        active = torch.arange(cfg.air.max_objects, device=frames.device) < n_ceil.unsqueeze(-1)
        rows = _Rows(active)

        track = self.find.track(rows.gather_batch(frames), rows.gather(desc.value),
                                use_modes=use_modes, generator=generator)
        inferred = [rows.scatter_latent(p) for p in track]
        positions, motions, pred_p, pred_m = inferred, [], [], []
        if self.mot is not None:
            out = self.mot.pipeline(track, rows.gather(size.value), rows.gather(desc.value), M,
                                    cfg.fusion, use_modes, generator, fusion_generator)
            positions = [rows.scatter_latent(p) for p in out.positions]
            motions = [rows.scatter_latent(m) for m in out.motions]
            pred_p = [rows.scatter_dist(g) for g in out.pred_positions]
            pred_m = [rows.scatter_dist(g) for g in out.pred_motions]

        pos_values = torch.stack([p.value for p in positions], dim=1)  # [B, T, N, 2]
        canvas = self.render(n_tilde, size.value, pos_values, desc.value, step)
        return SceneLatents(cfg.variant, K, M, T, lat, canvas, cnt, n_tilde, n_ceil, size, desc,
                            inferred, positions, motions, pred_p, pred_m, rect_w)


# -----------------------------------------------------------------------------
# Evidence lower bound
# -----------------------------------------------------------------------------

def elbo_terms(variant: str, T: int, M: int, n_objects: int) -> List[KLTerm]:
    """The KL terms of the bound, each with the prior it is taken against."""
    terms: List[KLTerm] = []
    if variant == "air":
        for t in range(1, T + 1):
            terms.append(KLTerm("cnt", "cnt_annealed", None, t))
            for i in range(n_objects):
                terms += [KLTerm("size", "size_prior", i, t), KLTerm("desc", "standard_normal", i, t),
                          KLTerm("position", "standard_normal", i, t)]
        return terms
    mot = variant in ("find_mot", "vtssi")
    last_seed = min(M, T) if mot else T
    terms.append(KLTerm("cnt", "cnt_annealed"))
    for i in range(n_objects):
        terms += [KLTerm("size", "size_prior", i), KLTerm("desc", "standard_normal", i)]
        for t in range(1, T + 1):
            if t == 1:
                prior = "standard_normal"
            elif t <= last_seed:
                prior = "previous_position"
            else:
                prior = "predicted_position"
            terms.append(KLTerm("position", prior, i, t))
        if mot:
            terms.append(KLTerm("motion", "standard_normal", i, last_seed))
            terms += [KLTerm("motion", "predicted_motion", i, t) for t in range(last_seed + 1, T + 1)]
    return terms


def compute_elbo(model: VTSSIModel, frames: torch.Tensor, scene: SceneLatents, step: int = 0,
                 ) -> Dict[str, torch.Tensor]:
    """Single-sample bound per sequence plus its breakdown.

    Returns [B] tensors ``elbo``, ``recon``, ``kl_cnt``, ``kl_size``, ``kl_desc``,
    ``kl_pos``, ``kl_mot``, ``kl``; ``terms`` lists the KL terms taken.
    """
    cfg = model.cfg
    a = cfg.air
    T = frames.shape[1]
    if scene.variant == "air":
        r = air_frame_elbo(model.air, frames, scene.air, step, model.training)
        out = {k: r[k].sum(1) for k in ("elbo", "recon", "kl_cnt", "kl_size", "kl_desc", "kl_pos")}
        out["kl_mot"] = torch.zeros_like(out["elbo"])
    else:
        recon = frame_log_likelihood(frames, scene.canvas, a.sigma_l).sum(1)
        active = scene.active.to(frames.dtype)
        std = lambda g: DiagGaussian.standard(g.shape, g.loc)
        kl_cnt = kl_divergence(scene.cnt.dist, model.air.cnt_prior(step, scene.cnt.dist.loc))
        kl_size = (kl_divergence(scene.size.dist, model.air.size_prior(scene.size.dist.loc)) * active).sum(-1)
        kl_desc = (kl_divergence(scene.desc.dist, std(scene.desc.dist)) * active).sum(-1)

        last_seed = scene.M if model.mot is not None else T
        kl_pos = torch.zeros_like(recon)
        for t, pos in enumerate(scene.positions, start=1):
            if t == 1:
                prior = std(pos.dist)
            elif t <= last_seed:
                prior = find_prior(scene.positions[t - 2].value, cfg.find.prior_scale)
            else:
                prior = scene.pred_positions[t - last_seed - 1]
            kl_pos = kl_pos + (kl_divergence(pos.dist, prior) * active).sum(-1)

        kl_mot = torch.zeros_like(recon)
        for j, mot in enumerate(scene.motions):
            prior = std(mot.dist) if j == 0 else scene.pred_motions[j - 1]
            kl_mot = kl_mot + (kl_divergence(mot.dist, prior) * active).sum(-1)

        elbo = recon - kl_cnt - kl_size - kl_desc - kl_pos - kl_mot
        out = {"elbo": elbo, "recon": recon, "kl_cnt": kl_cnt, "kl_size": kl_size,
               "kl_desc": kl_desc, "kl_pos": kl_pos, "kl_mot": kl_mot}
    out["kl"] = out["kl_cnt"] + out["kl_size"] + out["kl_desc"] + out["kl_pos"] + out["kl_mot"]
    out["terms"] = elbo_terms(scene.variant, T, scene.M, a.max_objects)
    return out


def air_warmup_elbo(model: VTSSIModel, frames: torch.Tensor, scene: SceneLatents, step: int
                    ) -> torch.Tensor:
    """Per-frame decomposition bound over the frames the model ran AIR on, summed: [B]."""
    K = scene.air.n_tilde.shape[1]
    return air_frame_elbo(model.air, frames[:, :K], scene.air, step, model.training)["elbo"].sum(1)


# -----------------------------------------------------------------------------
# Prediction
# -----------------------------------------------------------------------------

@dataclass
class Prediction:
    positions: torch.Tensor  # [B, N, T_total, 2]
    frames: torch.Tensor  # [B, T_total, H, W]
    n_tilde: torch.Tensor  # [B]
    active: torch.Tensor  # [B, N]
    observed: int


def predict(model: VTSSIModel, frames: torch.Tensor, horizon: int, use_modes: bool = True,
            generator: Optional[torch.Generator] = None, one_hot_rect: bool = False) -> Prediction:
    """Infer from the seed frames [B, S, H, W], then roll out generatively up to ``horizon``."""
    cfg = model.cfg
    S = frames.shape[1]
    if S < max(cfg.K, cfg.M):
        raise ValueError(f"need at least max(K, M) = {max(cfg.K, cfg.M)} seed frames, got {S}")
    if horizon < S:
        raise ValueError("horizon must not be shorter than the seed")
    if horizon > S and model.mot is None:
        raise ValueError(f"variant {cfg.variant!r} has no motion model and cannot predict")
    scene = model(frames, use_modes=use_modes, generator=generator, one_hot_rect=one_hot_rect)
    if cfg.variant == "air":
        return Prediction(scene.position_track(), scene.canvas, scene.air.n_tilde,
                          scene.air.active, S)
    pos = scene.position_track()
    canvas = scene.canvas
    if horizon > S:
        steps = model.mot.rollout(scene.positions[-1].value, scene.motions[-1].value, horizon - S,
                                  use_modes, generator)
        future = torch.stack([p.value for p, _ in steps], dim=2)  # [B, N, H', 2]
        pos = torch.cat([pos, future], dim=2)
        canvas = torch.cat([canvas, model.render(scene.n_tilde, scene.size.value,
                                                 future.transpose(1, 2), scene.desc.value)], dim=1)
    return Prediction(pos, canvas, scene.n_tilde, scene.active, S)
