"""Error curves and frame strips rendered with matplotlib."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402


def plot_error_curves(reports: Dict[str, EvalReport], out_path: Union[str, Path],
                      train_horizon: Optional[int] = None) -> Path:
    """Per-step center error of each report, with observation and training horizons marked."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    observe = None
    for name, r in reports.items():
        curve = r.prediction_error_curve or r.inference_error_curve
        if not curve:
            continue
        ax.plot(np.arange(1, len(curve) + 1), curve, marker="o", ms=3, label=name)
        if r.prediction_error_curve:
            observe = r.observe
    if observe is not None:
        ax.axvline(observe + 0.5, color="k", ls="--", lw=1, label="observation horizon")
    if train_horizon is not None:
        ax.axvline(train_horizon + 0.5, color="grey", ls=":", lw=1, label="training horizon")
    ax.set_xlabel("time step")
    ax.set_ylabel("center error (px)")
    ax.set_ylim(bottom=0)
    ax.legend(fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def frame_strip(generated: np.ndarray, out_path: Union[str, Path], truth: Optional[np.ndarray] = None,
                centers: Optional[np.ndarray] = None, observe: Optional[int] = None) -> Path:
    """One row of frames [T, H, W].

    With ``truth``, ground truth goes to the red channel and the generated frames to
    green and blue, so agreement shows as white. ``centers`` [T, N, 2] are marked as
    crosses; frames after ``observe`` get a yellow border.
    """
    gen = np.clip(np.asarray(generated, dtype=np.float64), 0, 1)
    T = gen.shape[0]
    fig, axes = plt.subplots(1, T, figsize=(1.1 * T, 1.3), squeeze=False)
    for t, ax in enumerate(axes[0]):
        if truth is not None:
            gt = np.clip(np.asarray(truth[t], dtype=np.float64), 0, 1)
            ax.imshow(np.stack([gt, gen[t], gen[t]], axis=-1), interpolation="nearest")
        else:
            ax.imshow(gen[t], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        if centers is not None:
            c = np.asarray(centers[t])
            ax.plot(c[:, 0], c[:, 1], "x", color="lime", ms=4, mew=1)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(str(t + 1), fontsize=6)
        if observe is not None and t >= observe:
            for s in ax.spines.values():
                s.set_edgecolor("gold")
                s.set_linewidth(2)
    fig.tight_layout(pad=0.2)
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
