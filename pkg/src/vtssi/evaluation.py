"""Counting accuracy and matched center errors for tracking and prediction."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .air import round_count
from .model import VTSSIModel, predict

REPORT_VERSION = "1"


def to_pixels(position, frame_hw) -> np.ndarray:
    """Normalized (x, y) in [-1, 1] to pixel-center coordinates of an (H, W) frame."""
    p = np.asarray(position, dtype=np.float64)
    H, W = frame_hw
    extent = np.array([W, H], dtype=np.float64)
    return (p + 1.0) / 2.0 * (extent - 1.0)


def match_objects(gt_tracks, inferred_tracks, prefix_len: int) -> List[Tuple[int, int]]:
    """Optimal one-to-one assignment of ground-truth to inferred tracks.

    Tracks are [objects, T, 2]. Minimizes the summed Euclidean error over the
    first ``prefix_len`` steps among all assignments of min(G, I) pairs; ties go
    to the lexicographically smallest list of (gt, inferred) pairs.
    """
    gt = np.asarray(gt_tracks, dtype=np.float64)
    inf = np.asarray(inferred_tracks, dtype=np.float64)
    G, I = len(gt), len(inf)
    if G == 0 or I == 0:
        return []
    cost = np.linalg.norm(gt[:, None, :prefix_len] - inf[None, :, :prefix_len], axis=-1).sum(-1)
    best, best_cost = None, math.inf
    if G <= I:
        candidates = ([(g, j) for g, j in enumerate(perm)] for perm in itertools.permutations(range(I), G))
    else:
        candidates = (sorted((g, j) for j, g in enumerate(perm))
                      for perm in itertools.permutations(range(G), I))
    for pairs in candidates:
        c = sum(cost[g, j] for g, j in pairs)
        if c < best_cost or (c == best_cost and pairs < best):
            best, best_cost = pairs, c
    return best


def count_accuracy(pred_counts, gt_counts, mode: str = "per_sequence") -> float:
    """Fraction of units counted correctly: sequences ([S] arrays) or frames ([S, T] arrays)."""
    pred = np.asarray(pred_counts)
    gt = np.asarray(gt_counts)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    expected_ndim = {"per_sequence": 1, "per_frame": 2}.get(mode)
    if expected_ndim is None:
        raise ValueError(f"unknown count mode {mode!r}")
    if pred.ndim != expected_ndim:
        raise ValueError(f"{mode} counts must be {expected_ndim}-d, got shape {pred.shape}")
    if pred.size == 0:
        return float("nan")
    return float(np.mean(pred == gt))


def matched_errors(gt_tracks, inferred_tracks, matching) -> np.ndarray:
    """Per-object, per-step Euclidean distances [pairs, T] for a matching."""
    gt = np.asarray(gt_tracks, dtype=np.float64)
    inf = np.asarray(inferred_tracks, dtype=np.float64)
    if not matching:
        return np.zeros((0, gt.shape[1]))
    g, j = zip(*matching)
    return np.linalg.norm(gt[list(g)] - inf[list(j)], axis=-1)


def position_errors(per_sequence: Sequence[Optional[np.ndarray]], split_at: int):
    """Mean-over-matched-objects error per step, split into inference and prediction parts.

    ``per_sequence`` holds [pairs, T] error arrays; ``None`` marks sequences
    excluded for a count mismatch. Returns (curve[:split_at], curve[split_at:]).
    """
    rows = [e for e in per_sequence if e is not None and len(e)]
    if not rows:
        return np.array([]), np.array([])
    T = rows[0].shape[1]
    curve = np.concatenate(rows, axis=0).mean(0)
    assert curve.shape == (T,)
    return curve[:split_at], curve[split_at:]


@dataclass
class EvalReport:
    variant: str
    count_mode: str
    count_accuracy: float
    observe: int
    horizon: int
    inference_error_curve: List[float]
    prediction_error_curve: Optional[List[float]]
    median_inference_error: float
    median_prediction_error: Dict[str, float]
    n_sequences: int
    n_error_sequences: int
    find_only: bool = False
    one_hot_rect: bool = False
    checkpoint_step: Optional[int] = None
    per_sequence: List[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    notes: str = ("sequences whose inferred count differs from the ground truth are excluded "
                  "from the error curves and medians")
    version: str = REPORT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))

    def validate(self) -> None:
        """Raise ValueError unless the report is structurally sound."""
        if self.version != REPORT_VERSION:
            raise ValueError(f"report version {self.version!r}")
        if not 0.0 <= self.count_accuracy <= 1.0:
            raise ValueError("count_accuracy outside [0, 1]")
        if self.count_mode not in ("per_sequence", "per_frame"):
            raise ValueError(f"count_mode {self.count_mode!r}")
        curves = [self.inference_error_curve]
        if self.prediction_error_curve is not None:
            if len(self.prediction_error_curve) not in (0, self.horizon):
                raise ValueError("prediction curve length differs from horizon")
            curves.append(self.prediction_error_curve)
        for c in curves:
            if any(not math.isfinite(v) or v < 0 for v in c):
                raise ValueError("error curves must be finite and non-negative")
        if len(self.per_sequence) != self.n_sequences:
            raise ValueError("per-sequence records do not match n_sequences")


def _tracks_px(track: torch.Tensor, n: int, frame_hw) -> np.ndarray:
    return to_pixels(track[:n].cpu().numpy(), frame_hw)


@torch.no_grad()
def evaluate(model: VTSSIModel, frames, annotations, observe: int, horizon: int,
             one_hot_rect: bool = False, find_only: bool = False, batch_size: int = 50,
             checkpoint_step: Optional[int] = None) -> EvalReport:
    """Mode-based evaluation of ``frames`` [S, T, H, W] against their annotations.

    The inference curve comes from a pass over all T observed frames; the
    prediction curve observes ``observe`` frames and generates up to ``horizon``.
    Objects are matched on the first ``observe`` steps.
    """
    model.eval()
    cfg = model.cfg
    x_all = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    S, T = x_all.shape[:2]
    hw = tuple(x_all.shape[2:])
    if horizon > T:
        raise ValueError(f"horizon {horizon} exceeds the {T} annotated frames")
    if observe > horizon:
        raise ValueError("observe must not exceed horizon")
    can_predict = model.mot is not None
    per_frame = cfg.variant == "air"

    records, inf_err, pred_err = [], [], []
    frame_pred, frame_gt = [], []
    for lo in range(0, S, batch_size):
        x = x_all[lo:lo + batch_size]
        scene = model(x, use_modes=True, one_hot_rect=one_hot_rect)
        if per_frame:
            counts_t = round_count(scene.air.n_tilde)  # [B, T]
            counts = counts_t[:, 0]
        else:
            counts = round_count(scene.n_tilde)
        track = scene.inferred_track() if find_only else scene.position_track()  # [B, N, T, 2]
        pred = None
        if can_predict and not per_frame:
            pred = predict(model, x[:, :observe], horizon, one_hot_rect=one_hot_rect).positions
        for b in range(x.shape[0]):
            ann = annotations[lo + b]
            gt = np.asarray(ann.centers, dtype=np.float64).transpose(1, 0, 2)  # [G, T, 2]
            n = int(counts[b])
            rec = {"index": lo + b, "gt_count": int(ann.count), "pred_count": n}
            if per_frame:
                frame_pred.append(counts_t[b].cpu().numpy())
                frame_gt.append(np.full(T, ann.count))
                rec["frame_counts"] = counts_t[b].tolist()
            if n != ann.count:
                inf_err.append(None)
                pred_err.append(None)
                records.append(rec)
                continue
            inf_px = _tracks_px(track[b], n, hw)
            m = match_objects(gt, inf_px, observe)
            e = matched_errors(gt, inf_px, m)
            inf_err.append(e)
            rec["matching"] = [list(p) for p in m]
            rec["inference_errors"] = e.tolist()
            if pred is not None:
                pred_px = _tracks_px(pred[b], n, hw)
                mp = match_objects(gt[:, :horizon], pred_px, observe)
                ep = matched_errors(gt[:, :horizon], pred_px, mp)
                pred_err.append(ep)
                rec["prediction_matching"] = [list(p) for p in mp]
                rec["prediction_errors"] = ep.tolist()
            records.append(rec)

    if per_frame:
        acc = count_accuracy(np.stack(frame_pred), np.stack(frame_gt), "per_frame")
    else:
        acc = count_accuracy([r["pred_count"] for r in records], [r["gt_count"] for r in records])
    inf_curve, _ = position_errors(inf_err, T)
    seq_means = [float(e.mean()) for e in inf_err if e is not None and len(e)]
    pred_curve, med_pred = None, {}
    if can_predict and not per_frame:
        pc, _ = position_errors(pred_err, horizon)
        pred_curve = pc.tolist()
        for k in range(1, horizon - observe + 1):
            vals = [float(e[:, observe + k - 1].mean()) for e in pred_err if e is not None and len(e)]
            med_pred[str(k)] = float(np.median(vals)) if vals else float("nan")
    return EvalReport(
        variant=cfg.variant,
        count_mode="per_frame" if per_frame else "per_sequence",
        count_accuracy=acc,
        observe=observe,
        horizon=horizon,
        inference_error_curve=inf_curve.tolist(),
        prediction_error_curve=pred_curve,
        median_inference_error=float(np.median(seq_means)) if seq_means else float("nan"),
        median_prediction_error=med_pred,
        n_sequences=len(records),
        n_error_sequences=len(seq_means),
        find_only=find_only,
        one_hot_rect=one_hot_rect,
        checkpoint_step=checkpoint_step,
        per_sequence=records,
        config=cfg.to_dict(),
    )


def compare_reports(reports: Dict[str, EvalReport]) -> dict:
    """Side-by-side summary; checks that tracking variants beat per-frame decomposition."""
    rows = {name: {"variant": r.variant, "count_accuracy": r.count_accuracy,
                   "count_mode": r.count_mode,
                   "median_inference_error": r.median_inference_error,
                   "mean_inference_error": float(np.mean(r.inference_error_curve))
                   if r.inference_error_curve else float("nan"),
                   "median_prediction_error": r.median_prediction_error}
            for name, r in reports.items()}
    air = [v["median_inference_error"] for v in rows.values() if v["variant"] == "air"]
    tracked = {k: v["median_inference_error"] for k, v in rows.items()
               if v["variant"] in ("find", "rect_find", "find_mot", "vtssi")}
    ordering = None
    if air and tracked:
        ordering = all(e < min(air) for e in tracked.values())
    return {"models": rows, "tracking_beats_air": ordering}
