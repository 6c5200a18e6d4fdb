"""Model and trainer configuration.

Defaults give the full-scale setup (50x50 frames, T=20, N=2,
K=M=5). ``reduced_config`` gives the desk-scale variant used by the
acceptance run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from typing import Optional, Tuple

VARIANTS = ("air", "find", "rect_find", "find_mot", "vtssi")
ENV_PREFIX = "VTSSI_"


@dataclass
class AirConfig:
    frame_hw: Tuple[int, int] = (50, 50)
    max_objects: int = 2
    glimpse: int = 25
    desc_dim: int = 20
    sigma_l: float = 0.3
    size_prior_loc: Tuple[float, float] = (0.3, 0.4)
    size_prior_scale: float = 0.1
    cnt_prior_loc_start: float = -2.0
    cnt_prior_loc_end: float = -3.0
    cnt_anneal_start: int = 100_000
    cnt_anneal_end: int = 200_000
    cnt_prior_scale: float = 1.0
    sigma_k: float = 0.5
    flatten_increment: float = 0.1
    flatten_every: int = 1000
    flatten_max: float = 100.0
    loc_dropout: float = 0.4
    count_pad: int = 3
    cnt_channels: int = 16
    cnt_kernels: Tuple[int, int, int] = (5, 4, 3)
    cnt_dense: Tuple[int, int] = (256, 128)
    pre_channels: int = 16
    loc_hidden: int = 256
    loc_head: int = 64
    enc_hidden: Tuple[int, int] = (256, 128)
    dec_hidden: Tuple[int, int] = (128, 256)


@dataclass
class FindConfig:
    n_kernels: int = 8
    kernel_size: int = 10
    ker_hidden: Tuple[int, int] = (128, 256)
    conv_channels: Tuple[int, int] = (16, 32)
    conv_kernels: Tuple[int, int] = (5, 3)
    feat_hidden: Tuple[int, int] = (128, 64)
    feat_dim: int = 50
    pos_hidden: int = 64
    pos_head: int = 32
    prior_scale: float = 0.1


@dataclass
class RectConfig:
    hidden: int = 128
    dense: int = 64


@dataclass
class MotConfig:
    motion_dim: int = 10
    lstm_hidden: int = 64
    head: int = 32
    tr_hidden: int = 64


@dataclass
class FusionPolicy:
    w_min: float = 0.01
    w_max: float = 0.99
    test_w: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.w_min <= self.w_max <= 1.0:
            raise ValueError("fusion policy needs 0 <= w_min <= w_max <= 1")
        if not 0.0 <= self.test_w <= 1.0:
            raise ValueError("test_w must be in [0, 1]")


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-4
    lr_floor: float = 1e-5
    lr_decay: float = 0.9
    lr_decay_every: int = 20_000
    lr_decay_start: int = 200_000
    beta1: float = 0.5
    beta2: float = 0.999
    clip_norm: float = 5.0
    steps: int = 780_000
    curriculum_start: Optional[int] = None
    curriculum_period: Optional[int] = None
    air_warmup_curriculum_steps: int = 3
    log_every: int = 50
    checkpoint_every: int = 5000
    seed: int = 0


@dataclass
class VtssiConfig:
    variant: str = "vtssi"
    K: int = 5
    M: int = 5
    T: int = 20
    air: AirConfig = field(default_factory=AirConfig)
    find: FindConfig = field(default_factory=FindConfig)
    rect: RectConfig = field(default_factory=RectConfig)
    mot: MotConfig = field(default_factory=MotConfig)
    fusion: FusionPolicy = field(default_factory=FusionPolicy)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not 1 <= self.K <= self.T:
            raise ValueError("need 1 <= K <= T")
        if not 1 <= self.M <= self.T:
            raise ValueError("need 1 <= M <= T")

    @property
    def uses_rect(self) -> bool:
        return self.variant in ("rect_find", "vtssi")

    @property
    def uses_find(self) -> bool:
        return self.variant != "air"

    @property
    def uses_mot(self) -> bool:
        return self.variant in ("find_mot", "vtssi")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "VtssiConfig":
        return _build(cls, d)

    @classmethod
    def from_json(cls, text: str) -> "VtssiConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "VtssiConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, d: dict):
    kwargs = {}
    hints = {f.name: f for f in fields(cls)}
    for key, value in d.items():
        if key not in hints:
            raise ValueError(f"unknown config field {cls.__name__}.{key}")
        sub = _nested_type(cls, key)
        if sub is not None and isinstance(value, dict):
            value = _build(sub, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    (VtssiConfig, "air"): AirConfig,
    (VtssiConfig, "find"): FindConfig,
    (VtssiConfig, "rect"): RectConfig,
    (VtssiConfig, "mot"): MotConfig,
    (VtssiConfig, "fusion"): FusionPolicy,
    (VtssiConfig, "train"): TrainConfig,
}


def _nested_type(cls, key):
    return _NESTED.get((cls, key))


def apply_env_overrides(d: dict, environ=None, prefix: str = ENV_PREFIX) -> dict:
    """Override config fields from environment variables.

    ``VTSSI_K=4`` sets ``K``; ``VTSSI_TRAIN__LR=3e-4`` sets ``train.lr``.
    Values are parsed as JSON when possible, else kept as strings.
    """
    environ = os.environ if environ is None else environ
    d = json.loads(json.dumps(d))
    for name, raw in environ.items():
        if not name.startswith(prefix):
            continue
        path = name[len(prefix):].split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        for part in path[:-1]:
            key = _match_key(node, part)
            node = node.setdefault(key, {})
        node[_match_key(node, path[-1])] = value
    return d


def _match_key(node: dict, part: str) -> str:
    for k in node:
        if k.lower() == part.lower():
            return k
    return part.lower()


def reduced_config(variant: str = "vtssi") -> VtssiConfig:
    """Desk-scale setup: 32x32 frames, T=12, K=M=4, compressed schedules."""
    return VtssiConfig(
        variant=variant,
        K=4,
        M=4,
        T=12,
        air=AirConfig(
            frame_hw=(32, 32),
            glimpse=16,
            cnt_anneal_start=4000,
            cnt_anneal_end=8000,
            flatten_every=50,
        ),
        find=FindConfig(kernel_size=7),
        train=TrainConfig(
            batch_size=32,
            lr=3e-4,
            lr_floor=3e-5,
            lr_decay_start=15_000,
            lr_decay_every=3000,
            steps=20_000,
            curriculum_period=1500,
            log_every=50,
            checkpoint_every=2500,
        ),
    )
