"""Training loop, schedules, seeding, and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch

from .config import TrainConfig, VtssiConfig
from .model import VTSSIModel, air_warmup_elbo, compute_elbo

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_FILE = "metrics.jsonl"
SEED_STREAMS = ("data", "init", "batches", "noise", "fusion")

# Curriculum defaults per variant: (start length, steps per increment).
CURRICULUM = {"vtssi": (6, 30_000)}
CURRICULUM_OTHER = (1, 20_000)


class NonFiniteLossError(RuntimeError):
    pass


# -----------------------------------------------------------------------------
# Schedules and seeds
# -----------------------------------------------------------------------------

def curriculum_len(step: int, variant: str, T: int, start: Optional[int] = None,
                   period: Optional[int] = None) -> int:
    """Length of the sequence prefix trained on at ``step``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    d_start, d_period = CURRICULUM.get(variant, CURRICULUM_OTHER)
    start = d_start if start is None else start
    period = d_period if period is None else period
    return min(start + step // period, T)


def curriculum_stage(step: int, variant: str, period: Optional[int] = None) -> int:
    """Number of curriculum increments applied so far."""
    return step // (CURRICULUM.get(variant, CURRICULUM_OTHER)[1] if period is None else period)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Constant rate, then exponential decay by ``lr_decay`` per ``lr_decay_every`` steps, floored."""
    if step <= cfg.lr_decay_start:
        return cfg.lr
    decayed = cfg.lr * cfg.lr_decay ** ((step - cfg.lr_decay_start) / cfg.lr_decay_every)
    return max(cfg.lr_floor, decayed)


def substream_seed(seed: int, name: str) -> int:
    """Independent seed for a named random stream derived from one global seed."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(seed, name))
    return g


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: VTSSIModel, step: int,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "global_step": int(step),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]):
    """Returns (model in eval mode, global_step, raw payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r} (expected {CHECKPOINT_VERSION})")
    cfg = VtssiConfig.from_dict(payload["config"])
    model = VTSSIModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["global_step"], payload


# -----------------------------------------------------------------------------
# Training
# -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: VTSSIModel
    steps: int
    checkpoints: list
    metrics_path: Path


def _scalars(out: Dict[str, torch.Tensor]) -> Dict[str, float]:
    keys = ("elbo", "recon", "kl", "kl_cnt", "kl_size", "kl_desc", "kl_pos", "kl_mot")
    return {k: float(out[k].detach().mean()) for k in keys}


def _dump_nonfinite(run_dir: Path, step: int, batch_idx: np.ndarray, out: dict) -> Path:
    per_seq = {}
    for k in ("elbo", "recon", "kl_cnt", "kl_size", "kl_desc", "kl_pos", "kl_mot"):
        per_seq[k] = [float(v) for v in out[k].detach()]
    bad = [int(batch_idx[i]) for i, v in enumerate(per_seq["elbo"]) if not math.isfinite(v)]
    dump = {"step": step, "offending_sequences": bad, "batch_indices": batch_idx.tolist(),
            "terms": per_seq}
    path = run_dir / "nonfinite.json"
    path.write_text(json.dumps(dump, indent=1))
    return path


def train(frames: Union[np.ndarray, torch.Tensor], cfg: VtssiConfig, run_dir: Union[str, Path],
          steps: Optional[int] = None, model: Optional[VTSSIModel] = None) -> TrainResult:
    """Maximize the single-sample bound on curriculum-truncated prefixes of ``frames`` [S, T, H, W]."""
    tc = cfg.train
    steps = tc.steps if steps is None else steps
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    if data.ndim != 4:
        raise ValueError("frames must be [sequences, T, H, W]")
    if data.shape[1] < cfg.T:
        raise ValueError(f"sequences have {data.shape[1]} frames, config needs T={cfg.T}")
    if tuple(data.shape[2:]) != tuple(cfg.air.frame_hw):
        raise ValueError(f"frame size {tuple(data.shape[2:])} does not match {cfg.air.frame_hw}")

    if model is None:
        torch.manual_seed(substream_seed(tc.seed, "init"))
        model = VTSSIModel(cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2))
    batch_rng = np.random.default_rng(substream_seed(tc.seed, "batches"))
    noise = torch_generator(tc.seed, "noise")
    fusion = torch_generator(tc.seed, "fusion")

    metrics_path = run_dir / METRICS_FILE
    checkpoints = []
    acc: Dict[str, float] = {}
    n_acc = 0
    t0 = time.time()
    with open(metrics_path, "w") as mlog:
        for step in range(steps):
            L = curriculum_len(step, cfg.variant, cfg.T, tc.curriculum_start, tc.curriculum_period)
            lr = lr_at(step, tc)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = batch_rng.choice(data.shape[0], size=min(tc.batch_size, data.shape[0]), replace=False)
            x = data[idx, :L]

            scene = model(x, generator=noise, step=step, fusion_generator=fusion)
            out = compute_elbo(model, x, scene, step)
            objective = out["elbo"]
            warmup = (cfg.variant == "vtssi"
                      and curriculum_stage(step, cfg.variant, tc.curriculum_period)
                      < tc.air_warmup_curriculum_steps)
            if warmup:
                aux = air_warmup_elbo(model, x, scene, step)
                objective = objective + aux
            loss = -objective.mean()
            if not torch.isfinite(loss):
                path = _dump_nonfinite(run_dir, step, idx, out)
                raise NonFiniteLossError(f"non-finite loss at step {step}; diagnostics in {path}")

            opt.zero_grad(set_to_none=True)
            loss.backward()
            gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), tc.clip_norm)
            opt.step()

            rec = _scalars(out)
            rec["elbo_per_frame"] = rec["elbo"] / L
            rec["loss"] = float(loss.detach())
            rec["grad_norm"] = float(gnorm)
            for k, v in rec.items():
                acc[k] = acc.get(k, 0.0) + v
            n_acc += 1
            if (step + 1) % tc.log_every == 0 or step + 1 == steps:
                entry = {"step": step + 1, "curriculum_len": L, "lr": lr, "air_warmup": warmup,
                         "elapsed_s": round(time.time() - t0, 2)}
                entry.update({k: v / n_acc for k, v in acc.items()})
                mlog.write(json.dumps(entry) + "\n")
                mlog.flush()
                log.info("step %d len %d elbo/frame %.2f", step + 1, L, entry["elbo_per_frame"])
                acc, n_acc = {}, 0
            if (step + 1) % tc.checkpoint_every == 0 or step + 1 == steps:
                path = run_dir / f"ckpt_{step + 1:07d}.pt"
                save_checkpoint(path, model, step + 1, opt)
                checkpoints.append(path)
    model.eval()
    return TrainResult(model, steps, checkpoints, metrics_path)


def read_metrics(path: Union[str, Path]) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def moving_average_at(records: list, step: int, key: str = "elbo_per_frame", window: int = 500) -> float:
    """Mean of ``key`` over logged windows ending in (step - window, step]."""
    vals = [r[key] for r in records if step - window < r["step"] <= step]
    if not vals:
        raise ValueError(f"no metrics logged in ({step - window}, {step}]")
    return float(np.mean(vals))
