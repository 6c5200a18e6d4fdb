"""Moving-sprite video sequences with ground-truth object centers.

Sprites move with constant velocity (bouncing off the frame edges) or along
random ellipses, and are rendered at sub-pixel offsets by bilinear
interpolation. Overlapping sprites are composited by clamped addition.

Positions are tracked as the real-valued offset of a sprite raster's top-left
pixel on the canvas; annotated centers are the centers of the raster's tight
bounding box carried along with that offset.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

FORMAT_VERSION = "1"
FRAMES_FILE = "frames.bin"
ANNOTATIONS_FILE = "annotations.jsonl"
MANIFEST_FILE = "manifest.json"
_MAGIC = b"VTSSIDS\x00"


class DatasetError(RuntimeError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass
class DataConfig:
    frame_hw: Tuple[int, int] = (50, 50)
    seq_len: int = 20
    max_objects: int = 2
    min_objects: int = 0
    motion: str = "linear"
    overlap_first_frame: bool = False
    bounce_mode: str = "appearance"
    sprite_source: str = "procedural"
    image_bank: Optional[str] = None
    sprite_size: Tuple[int, int] = (12, 20)
    speed_range: Tuple[float, float] = (1.0, 3.0)
    angular_speed_range: Tuple[float, float] = (0.1, 0.3)
    margin_px: int = 0
    placement_retries: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.frame_hw = tuple(int(v) for v in self.frame_hw)
        self.sprite_size = tuple(int(v) for v in self.sprite_size)
        self.speed_range = tuple(float(v) for v in self.speed_range)
        self.angular_speed_range = tuple(float(v) for v in self.angular_speed_range)
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if self.motion not in ("linear", "elliptic"):
            raise ValueError(f"unknown motion {self.motion!r}")
        if self.bounce_mode not in ("appearance", "bbox_corner"):
            raise ValueError(f"unknown bounce mode {self.bounce_mode!r}")
        if self.sprite_source not in ("procedural", "image_bank"):
            raise ValueError(f"unknown sprite source {self.sprite_source!r}")
        if self.sprite_source == "image_bank" and not self.image_bank:
            raise ValueError("sprite_source=image_bank needs an image_bank path")
        if self.sprite_source == "procedural" and max(self.sprite_size) > min(self.frame_hw):
            raise ValueError("sprites larger than the frame")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Sprite:
    raster: np.ndarray
    x0: int = field(init=False)
    x1: int = field(init=False)
    y0: int = field(init=False)
    y1: int = field(init=False)

    def __post_init__(self):
        self.raster = np.asarray(self.raster, dtype=np.float64)
        ys, xs = np.nonzero(self.raster > 0)
        if len(xs) == 0:
            raise ValueError("sprite raster has no nonzero pixel")
        self.x0, self.x1 = int(xs.min()), int(xs.max())
        self.y0, self.y1 = int(ys.min()), int(ys.max())

    @property
    def center(self) -> np.ndarray:
        """Tight bounding box center in raster coordinates (x, y)."""
        return np.array([(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0])

    def offset_range(self, hw: Tuple[int, int], margin: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        """Offsets (x, y) that keep every nonzero pixel inside the (margin-widened) frame."""
        h, w = hw
        lo = np.array([-self.x0 - margin, -self.y0 - margin], dtype=np.float64)
        hi = np.array([w - 1 - self.x1 + margin, h - 1 - self.y1 + margin], dtype=np.float64)
        return lo, hi


@dataclass
class SequenceAnnotation:
    count: int
    centers: np.ndarray  # [T, count, 2], pixels, (x, y)
    motion: List[dict]
    seed: int
    index: int = -1

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "count": self.count,
            "centers": self.centers.tolist(),
            "motion": self.motion,
            "seed": self.seed,
        }

    @classmethod
    def from_record(cls, rec: dict, seq_len: int) -> "SequenceAnnotation":
        centers = np.asarray(rec["centers"], dtype=np.float64).reshape(seq_len, rec["count"], 2)
        return cls(rec["count"], centers, rec["motion"], rec["seed"], rec.get("index", -1))


# -----------------------------------------------------------------------------
# Sprites
# -----------------------------------------------------------------------------

def procedural_sprite(rng: np.random.Generator, size_range: Tuple[int, int],
                      supersample: int = 4) -> Sprite:
    """Anti-aliased rectangle, ellipse, cross, or hollow frame of random extent."""
    lo, hi = size_range
    h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    kind = rng.choice(["rect", "ellipse", "cross", "frame"])
    s = supersample
    yy, xx = np.meshgrid((np.arange(h * s) + 0.5) / (h * s), (np.arange(w * s) + 0.5) / (w * s),
                         indexing="ij")
    u, v = 2 * xx - 1, 2 * yy - 1
    if kind == "rect":
        inside = np.ones_like(u, dtype=bool)
    elif kind == "ellipse":
        inside = u ** 2 + v ** 2 <= 1.0
    elif kind == "cross":
        t = rng.uniform(0.25, 0.45)
        inside = (np.abs(u) <= t) | (np.abs(v) <= t)
    else:
        t = rng.uniform(0.45, 0.65)
        inside = (np.abs(u) >= t) | (np.abs(v) >= t)
    raster = inside.reshape(h, s, w, s).mean(axis=(1, 3))
    raster *= rng.uniform(0.7, 1.0)
    return Sprite(raster)


_BANK_CACHE: dict = {}


def load_image_bank(path: str) -> np.ndarray:
    """Digit-like rasters from an .npy/.npz file as float [n, h, w] in [0, 1]."""
    if path not in _BANK_CACHE:
        arr = np.load(path)
        if isinstance(arr, np.lib.npyio.NpzFile):
            key = "images" if "images" in arr.files else arr.files[0]
            arr = arr[key]
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise DatasetError(f"image bank must be [n, h, w], got shape {arr.shape}")
        arr = arr.astype(np.float64)
        if arr.max() > 1.0:
            arr = arr / 255.0
        _BANK_CACHE[path] = np.clip(arr, 0.0, 1.0)
    return _BANK_CACHE[path]


def _draw_sprite(cfg: DataConfig, rng: np.random.Generator) -> Sprite:
    if cfg.sprite_source == "procedural":
        return procedural_sprite(rng, cfg.sprite_size)
    bank = load_image_bank(cfg.image_bank)
    for _ in range(100):
        raster = bank[rng.integers(len(bank))]
        if np.any(raster > 0):
            return Sprite(raster)
    raise DatasetError("image bank contains only empty rasters")


# -----------------------------------------------------------------------------
# Rendering
# -----------------------------------------------------------------------------

def render_sprite(sprite: Sprite, offset: Sequence[float], hw: Tuple[int, int]) -> np.ndarray:
    """Render one sprite with its raster origin at a real-valued (x, y) offset.

    Bilinear interpolation of the raster; integer offsets reproduce the
    raster exactly. Pixels outside the frame are dropped.
    """
    h, w = hw
    ox, oy = float(offset[0]), float(offset[1])
    ix, iy = math.floor(ox), math.floor(oy)
    fx, fy = ox - ix, oy - iy
    rh, rw = sprite.raster.shape
    pad = np.zeros((rh + 1, rw + 1))
    pad[:rh, :rw] = sprite.raster
    left = np.zeros_like(pad)
    left[:, 1:] = pad[:, :-1]
    up = np.zeros_like(pad)
    up[1:, :] = pad[:-1, :]
    upleft = np.zeros_like(pad)
    upleft[1:, 1:] = pad[:-1, :-1]
    patch = ((1 - fx) * (1 - fy)) * pad + (fx * (1 - fy)) * left \
        + ((1 - fx) * fy) * up + (fx * fy) * upleft

    canvas = np.zeros((h, w))
    r0, c0 = max(iy, 0), max(ix, 0)
    r1, c1 = min(iy + rh + 1, h), min(ix + rw + 1, w)
    if r0 < r1 and c0 < c1:
        canvas[r0:r1, c0:c1] = patch[r0 - iy:r1 - iy, c0 - ix:c1 - ix]
    return canvas


def composite(layers: Sequence[np.ndarray], hw: Tuple[int, int]) -> np.ndarray:
    if not layers:
        return np.zeros(hw)
    return np.clip(np.sum(layers, axis=0), 0.0, 1.0)


# -----------------------------------------------------------------------------
# Motion
# -----------------------------------------------------------------------------

def bounce_limits(sprite: Sprite, hw: Tuple[int, int], bounce_mode: str,
                  margin: float) -> Tuple[np.ndarray, np.ndarray]:
    """Offset interval per axis inside which a sprite moves without bouncing."""
    if bounce_mode == "appearance":
        return sprite.offset_range(hw, margin)
    h, w = hw
    # top-left bounding box corner must stay inside the widened frame
    lo = np.array([-sprite.x0 - margin, -sprite.y0 - margin], dtype=np.float64)
    hi = np.array([w - 1 - sprite.x0 + margin, h - 1 - sprite.y0 + margin], dtype=np.float64)
    return lo, hi


def linear_offsets(offset0: np.ndarray, velocity: np.ndarray, steps: int,
                   lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Constant-velocity offsets [steps, 2]; a velocity component flips whenever
    the next position would leave [lo, hi] along that axis."""
    pos = np.array(offset0, dtype=np.float64)
    vel = np.array(velocity, dtype=np.float64)
    out = np.empty((steps, 2))
    out[0] = pos
    for t in range(1, steps):
        nxt = pos + vel
        for a in range(2):
            if nxt[a] < lo[a] or nxt[a] > hi[a]:
                vel[a] = -vel[a]
                nxt[a] = min(max(pos[a] + vel[a], lo[a]), hi[a])
        pos = nxt
        out[t] = pos
    return out


def elliptic_trajectory(params: dict, t) -> np.ndarray:
    """Center of an ellipse-bound object at time(s) t: c + (a cos(phi + w t), b sin(phi + w t))."""
    t = np.asarray(t, dtype=np.float64)
    ang = params["phase"] + params["omega"] * t
    cx, cy = params["center"]
    return np.stack([cx + params["a"] * np.cos(ang), cy + params["b"] * np.sin(ang)], axis=-1)


def _sample_ellipse(sprite: Sprite, cfg: DataConfig, rng: np.random.Generator) -> dict:
    lo, hi = sprite.offset_range(cfg.frame_hw, cfg.margin_px)
    clo, chi = lo + sprite.center, hi + sprite.center
    span = chi - clo
    for _ in range(cfg.placement_retries):
        a, b = rng.uniform(0.2, 0.5) * span[0], rng.uniform(0.2, 0.5) * span[1]
        center = [rng.uniform(clo[0] + a, chi[0] - a), rng.uniform(clo[1] + b, chi[1] - b)]
        omega = rng.uniform(*cfg.angular_speed_range) * rng.choice([-1.0, 1.0])
        params = {"center": center, "a": a, "b": b,
                  "phase": rng.uniform(0, 2 * math.pi), "omega": omega}
        # extreme points of the ellipse must lie in the feasible center box
        if (center[0] - a >= clo[0] and center[0] + a <= chi[0]
                and center[1] - b >= clo[1] and center[1] + b <= chi[1]):
            return params
    raise PlacementError("could not fit an elliptic trajectory inside the frame")


# -----------------------------------------------------------------------------
# Sequences
# -----------------------------------------------------------------------------

def sequence_seed(base_seed: int, index: int) -> int:
    """Child seed of sequence ``index``; independent of every other index."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def _overlaps(layers: Sequence[np.ndarray]) -> bool:
    occupied = np.zeros(layers[0].shape, dtype=int)
    for layer in layers:
        occupied += layer > 0
    return bool(np.any(occupied > 1))


@dataclass
class SequencePlan:
    """Sprites and their per-step raster offsets [T, 2] before rendering."""

    sprites: List[Sprite]
    offsets: List[np.ndarray]
    motion: List[dict]


def plan_sequence(cfg: DataConfig, rng_seed: int) -> SequencePlan:
    rng = np.random.default_rng(rng_seed)
    hw, T = cfg.frame_hw, cfg.seq_len
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    sprites = [_draw_sprite(cfg, rng) for _ in range(count)]

    for _ in range(cfg.placement_retries):
        motion, offsets = [], []
        for sp in sprites:
            if cfg.motion == "linear":
                lo0, hi0 = sp.offset_range(hw)
                if np.any(hi0 < lo0):
                    raise PlacementError("sprite larger than the frame")
                off0 = rng.uniform(lo0, hi0)
                speed = rng.uniform(*cfg.speed_range)
                angle = rng.uniform(0, 2 * math.pi)
                vel = speed * np.array([math.cos(angle), math.sin(angle)])
                lo, hi = bounce_limits(sp, hw, cfg.bounce_mode, cfg.margin_px)
                offs = linear_offsets(off0, vel, T, lo, hi)
                motion.append({"type": "linear", "offset0": off0.tolist(), "velocity": vel.tolist()})
            else:
                params = _sample_ellipse(sp, cfg, rng)
                offs = elliptic_trajectory(params, np.arange(T)) - sp.center
                motion.append({"type": "elliptic", **params})
            offsets.append(offs)
        if cfg.overlap_first_frame or count < 2:
            break
        first = [render_sprite(sp, offs[0], hw) for sp, offs in zip(sprites, offsets)]
        if not _overlaps(first):
            break
    else:
        raise PlacementError("first-frame placement retry budget exhausted")
    for m, sp in zip(motion, sprites):
        m["sprite_hw"] = list(sp.raster.shape)
    return SequencePlan(sprites, offsets, motion)


def gen_sequence(cfg: DataConfig, rng_seed: int) -> Tuple[np.ndarray, SequenceAnnotation]:
    """One sequence: frames [T, H, W] in [0, 1] and its annotation."""
    plan = plan_sequence(cfg, rng_seed)
    hw, T = cfg.frame_hw, cfg.seq_len
    count = len(plan.sprites)
    frames = np.zeros((T, *hw))
    centers = np.zeros((T, count, 2))
    for t in range(T):
        layers = [render_sprite(sp, offs[t], hw) for sp, offs in zip(plan.sprites, plan.offsets)]
        frames[t] = composite(layers, hw)
        for i, (sp, offs) in enumerate(zip(plan.sprites, plan.offsets)):
            centers[t, i] = offs[t] + sp.center
    return frames, SequenceAnnotation(count, centers, plan.motion, int(rng_seed))


def _gen_indexed(args):
    cfg, index = args
    frames, ann = gen_sequence(cfg, sequence_seed(cfg.seed, index))
    ann.index = index
    return frames, ann


def generate(cfg: DataConfig, n: int, start: int = 0, workers: int = 1
             ) -> Iterator[Tuple[np.ndarray, SequenceAnnotation]]:
    jobs = [(cfg, start + i) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            yield from pool.map(_gen_indexed, jobs, chunksize=16)
    else:
        yield from map(_gen_indexed, jobs)


# -----------------------------------------------------------------------------
# Storage
# -----------------------------------------------------------------------------

def quantize(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_dataset(cfg: DataConfig, n_sequences: int, path, workers: int = 1) -> dict:
    """Write ``n_sequences`` sequences to directory ``path``; returns the manifest."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    T, (H, W) = cfg.seq_len, cfg.frame_hw
    digest = hashlib.sha256()
    header = _MAGIC + struct.pack("<4I", n_sequences, T, H, W)
    digest.update(header)
    with open(out / FRAMES_FILE, "wb") as fb, open(out / ANNOTATIONS_FILE, "w") as fa:
        fb.write(header)
        for frames, ann in generate(cfg, n_sequences, workers=workers):
            blob = quantize(frames).tobytes(order="C")
            digest.update(blob)
            fb.write(blob)
            fa.write(json.dumps(ann.to_record()) + "\n")
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(cfg),
        "n_sequences": n_sequences,
        "shape": [n_sequences, T, H, W],
        "dtype": "uint8",
        "byte_order": "little",
        "frames_file": FRAMES_FILE,
        "annotations_file": ANNOTATIONS_FILE,
        "frames_sha256": digest.hexdigest(),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(path) -> dict:
    p = Path(path) / MANIFEST_FILE
    if not p.exists():
        raise DatasetError(f"no manifest at {p}")
    try:
        manifest = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format {manifest.get('format_version')!r}")
    return manifest


def load_frames(path) -> np.ndarray:
    """All frames as a uint8 array [S, T, H, W], checked against the manifest."""
    manifest = read_manifest(path)
    raw = (Path(path) / manifest["frames_file"]).read_bytes()
    n = len(_MAGIC) + 16
    if raw[:len(_MAGIC)] != _MAGIC:
        raise DatasetError("frames file has a bad magic header")
    shape = list(struct.unpack("<4I", raw[len(_MAGIC):n]))
    if shape != manifest["shape"]:
        raise DatasetError(f"frames header {shape} does not match manifest {manifest['shape']}")
    if len(raw) - n != int(np.prod(shape)):
        raise DatasetError("frames file is truncated or oversized")
    if hashlib.sha256(raw).hexdigest() != manifest["frames_sha256"]:
        raise DatasetError("frames checksum mismatch")
    return np.frombuffer(raw, dtype=np.uint8, offset=n).reshape(shape)


def load_annotations(path) -> List[SequenceAnnotation]:
    manifest = read_manifest(path)
    T = manifest["shape"][1]
    lines = (Path(path) / manifest["annotations_file"]).read_text().splitlines()
    if len(lines) != manifest["n_sequences"]:
        raise DatasetError("annotation count does not match manifest")
    return [SequenceAnnotation.from_record(json.loads(line), T) for line in lines]


def read_dataset(path) -> Iterator[Tuple[np.ndarray, SequenceAnnotation]]:
    frames = load_frames(path)
    for seq, ann in zip(frames, load_annotations(path)):
        yield seq.astype(np.float64) / 255.0, ann


def reduced_data_config(seed: int = 0) -> DataConfig:
    """Desk-scale data: 32x32 frames, 12 steps, one or two procedural sprites, linear motion."""
    return DataConfig(frame_hw=(32, 32), seq_len=12, max_objects=2, min_objects=1,
                      motion="linear", sprite_size=(6, 10), speed_range=(1.0, 2.5), seed=seed)
