"""Command-line entry point: gen-data, train, eval, predict, plot."""
from __future__ import annotations

import argparse
import json
import logging
import shlex
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import __version__
from .config import VtssiConfig, apply_env_overrides, reduced_config
from .data import DataConfig, DatasetError, load_annotations, load_frames, read_manifest, \
    reduced_data_config, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUN_MANIFEST = "run_manifest.json"

log = logging.getLogger("vtssi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


# -----------------------------------------------------------------------------
# Run manifest
# -----------------------------------------------------------------------------

def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass(frozen=True)
class RunManifest:
    command: str
    subcommand: str
    config_hash: Optional[str]
    code_version: str
    seeds: Dict[str, int]
    started_at: str
    outputs: List[str] = field(default_factory=list)

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2))
        return path


def _manifest(argv, sub: str, out_dir: Path, config_hash=None, seed: Optional[int] = None,
              outputs=(), name: str = RUN_MANIFEST) -> Path:
    from .train import SEED_STREAMS, substream_seed
    seeds = {}
    if seed is not None:
        seeds = {"global": seed, **{s: substream_seed(seed, s) for s in SEED_STREAMS}}
    m = RunManifest(command=shlex.join(["vtssi", *argv]), subcommand=sub, config_hash=config_hash,
                    code_version=code_version(), seeds=seeds,
                    started_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"), outputs=[str(o) for o in outputs])
    return m.write(out_dir / name)


# -----------------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------------

def cmd_gen_data(args, argv) -> int:
    base = reduced_data_config() if args.preset == "reduced" else DataConfig()
    d = asdict(base)
    if args.config:
        d.update(json.loads(Path(args.config).read_text()))
    overrides = {
        "motion": args.motion, "overlap_first_frame": args.overlap_first_frame,
        "bounce_mode": args.bounce.replace("-", "_") if args.bounce else None,
        "seq_len": args.t, "frame_hw": (args.hw, args.hw) if args.hw else None,
        "sprite_source": args.sprites.replace("-", "_") if args.sprites else None,
        "image_bank": args.image_bank, "max_objects": args.max_objects,
        "min_objects": args.min_objects, "margin_px": args.margin, "seed": args.seed,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    cfg = DataConfig.from_dict(d)
    out = Path(args.out)
    _manifest(argv, "gen-data", out, seed=cfg.seed, outputs=[out])
    m = write_dataset(cfg, args.n, out, workers=args.workers)
    print(f"wrote {m['n_sequences']} sequences of shape {m['shape'][1:]} to {out}")
    return EXIT_OK


def _load_train_config(args) -> VtssiConfig:
    if args.config:
        d = json.loads(Path(args.config).read_text())
    else:
        d = (reduced_config(args.variant or "vtssi") if args.preset == "reduced" else VtssiConfig()).to_dict()
    if args.variant:
        d["variant"] = args.variant
    if args.seed is not None:
        d.setdefault("train", {})["seed"] = args.seed
    return VtssiConfig.from_dict(apply_env_overrides(d))


def _frames(path) -> np.ndarray:
    return load_frames(path).astype(np.float32) / 255.0


def cmd_train(args, argv) -> int:
    from .train import train
    cfg = _load_train_config(args)
    manifest = read_manifest(args.data)
    S, T, H, W = manifest["shape"]
    if T < cfg.T or (H, W) != tuple(cfg.air.frame_hw):
        raise DatasetError(f"dataset [{T}, {H}, {W}] incompatible with config T={cfg.T}, "
                           f"frame_hw={cfg.air.frame_hw}")
    out = Path(args.out)
    _manifest(argv, "train", out, cfg.digest(), cfg.train.seed, outputs=[out])
    (out / "config.json").write_text(cfg.to_json())
    result = train(_frames(args.data), cfg, out, steps=args.steps)
    print(f"trained {result.steps} steps; last checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def _load_model(path):
    from .train import load_checkpoint
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args, argv) -> int:
    from .evaluation import evaluate
    model, step, _ = _load_model(args.checkpoint)
    frames = _frames(args.data)
    anns = load_annotations(args.data)
    if args.limit:
        frames, anns = frames[:args.limit], anns[:args.limit]
    report_path = Path(args.report)
    # named after the report so evaluating inside a run directory keeps the training manifest intact
    _manifest(argv, "eval", report_path.parent, model.cfg.digest(), args.seed, outputs=[report_path],
              name=f"{report_path.stem}.manifest.json")
    torch.manual_seed(args.seed)
    report = evaluate(model, frames, anns, args.observe, args.horizon, one_hot_rect=args.one_hot_rect,
                      find_only=args.find_only, checkpoint_step=step)
    report.validate()
    report.to_json(report_path)
    pred = report.median_prediction_error.get(str(args.horizon - args.observe))
    print(f"count accuracy {report.count_accuracy:.4f}; median inference error "
          f"{report.median_inference_error:.3f} px" + (f"; median prediction error at "
                                                      f"+{args.horizon - args.observe} {pred:.3f} px"
                                                      if pred is not None else ""))
    return EXIT_OK


def cmd_predict(args, argv) -> int:
    from .air import round_count
    from .evaluation import to_pixels
    from .model import predict
    from .plotting import frame_strip
    model, step, _ = _load_model(args.checkpoint)
    frames = _frames(args.data)
    anns = load_annotations(args.data)
    idx = args.index if args.index else list(range(min(args.n, len(frames))))
    if any(i < 0 or i >= len(frames) for i in idx):
        raise ValueError(f"sequence index out of range (dataset has {len(frames)})")
    out = Path(args.out)
    _manifest(argv, "predict", out, model.cfg.digest(), args.seed, outputs=[out])
    torch.manual_seed(args.seed)
    x = torch.as_tensor(frames[idx])
    with torch.no_grad():
        p = predict(model, x[:, :args.observe], args.horizon)
    hw = tuple(frames.shape[2:])
    records = []
    for k, i in enumerate(idx):
        n = int(round_count(p.n_tilde[k]))
        centers = to_pixels(p.positions[k, :n].numpy(), hw).transpose(1, 0, 2)  # [T, n, 2]
        gen = p.frames[k].numpy()
        truth = frames[i, :args.horizon] if frames.shape[1] >= args.horizon else None
        overlay = frame_strip(gen[:len(truth)] if truth is not None else gen, out / f"seq{i:05d}_overlay.png",
                              truth=truth, centers=centers, observe=args.observe)
        generated = frame_strip(gen, out / f"seq{i:05d}_generated.png", observe=args.observe)
        records.append({"index": i, "count": n, "positions_px": centers.tolist(),
                        "gt_count": anns[i].count, "gt_centers_px": anns[i].centers.tolist(),
                        "strips": [overlay.name, generated.name]})
    doc = {"checkpoint": str(args.checkpoint), "global_step": step, "observe": args.observe,
           "horizon": args.horizon, "sequences": records}
    (out / "positions.json").write_text(json.dumps(doc, indent=1))
    print(f"wrote predictions for {len(idx)} sequences to {out}")
    return EXIT_OK


def cmd_plot(args, argv) -> int:
    from .evaluation import EvalReport, compare_reports
    from .plotting import plot_error_curves
    reports = {}
    for path in args.report:
        if not Path(path).exists():
            raise FileNotFoundError(f"report not found: {path}")
        r = EvalReport.from_json(path)
        r.validate()
        reports[Path(path).stem] = r
    out = Path(args.out)
    _manifest(argv, "plot", out, None, None, outputs=[out / "error_curves.png", out / "comparison.json"])
    horizon = args.train_horizon
    if horizon is None:
        horizon = next(iter(reports.values())).config.get("T")
    path = plot_error_curves(reports, out / "error_curves.png", train_horizon=horizon)
    comparison = out / "comparison.json"
    comparison.write_text(json.dumps(compare_reports(reports), indent=1))
    print(f"wrote {path} and {comparison}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vtssi", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic moving-sprite dataset")
    g.add_argument("--preset", choices=["full", "reduced"], default="full")
    g.add_argument("--config", help="JSON file with DataConfig fields")
    g.add_argument("--motion", choices=["linear", "elliptic"])
    g.add_argument("--overlap-first-frame", type=_bool, default=None)
    g.add_argument("--bounce", choices=["appearance", "bbox-corner"])
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--t", type=int)
    g.add_argument("--hw", type=int)
    g.add_argument("--sprites", choices=["procedural", "image-bank"])
    g.add_argument("--image-bank")
    g.add_argument("--max-objects", type=int)
    g.add_argument("--min-objects", type=int)
    g.add_argument("--margin", type=int)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model variant")
    t.add_argument("--config", help="JSON file mirroring VtssiConfig")
    t.add_argument("--preset", choices=["full", "reduced"], default="full")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=["air", "find", "rect_find", "find_mot", "vtssi"])
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--observe", type=int, required=True)
    e.add_argument("--horizon", type=int, required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--one-hot-rect", action="store_true")
    e.add_argument("--find-only", action="store_true", help="score tracker outputs before fusion")
    e.add_argument("--limit", type=int, help="evaluate only the first N sequences")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="observe a prefix and generate the continuation")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--observe", type=int, required=True)
    r.add_argument("--horizon", type=int, required=True)
    r.add_argument("--index", type=int, nargs="*")
    r.add_argument("--n", type=int, default=4, help="number of sequences when --index is absent")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_predict)

    pl = sub.add_parser("plot", help="plot error curves and write a comparison of evaluation reports")
    pl.add_argument("--report", required=True, action="append")
    pl.add_argument("--out", required=True)
    pl.add_argument("--train-horizon", type=int)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args, argv)
    except (OSError, ValueError, KeyError, DatasetError, RuntimeError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"vtssi {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
