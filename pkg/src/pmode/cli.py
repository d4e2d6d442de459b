"""Command-line surface: generate / train / eval / infer."""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import cv2
import numpy as np


def _cmd_generate(args) -> int:
    from .scene import GenerationConfig, default_profiles, generate_dataset

    cfg = GenerationConfig(occlusion_rate=args.occlusion_rate)
    profiles = default_profiles((args.image_size, args.image_size),
                                count=args.profiles)
    manifest = generate_dataset(args.count, seed=args.seed, profiles=profiles,
                                out_dir=args.out, cfg=cfg)
    print(f"wrote {len(manifest.frames)} frames to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .train import TrainConfig, TrainingDiverged, train

    config = TrainConfig.from_json(args.config)
    try:
        result = train(config)
    except TrainingDiverged as e:
        print(f"training diverged at step {e.step}; "
              f"last good checkpoint: {e.checkpoint}", file=sys.stderr)
        return 1
    print(f"best checkpoint: {result.best_checkpoint}")
    print(f"final: bbox mAP {result.report.bbox_map:.4f}  "
          f"segm mAP {result.report.segm_map:.4f}  "
          f"MAPE {result.report.hnw_mape:.4f}")
    return 0


def _cmd_eval(args) -> int:
    from .model import load_checkpoint
    from .train import FrameStore, validate

    model, _ = load_checkpoint(args.checkpoint)
    store = FrameStore(args.data, model.config.input_size,
                       depth_mode=args.depth_mode)
    metrics = validate(model, store, store.image_ids,
                       depth_mode=args.depth_mode)
    doc = {k: (None if isinstance(v, float) and math.isnan(v) else v)
           for k, v in metrics.items()}
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n",
                              encoding="utf-8")
    print(json.dumps(doc, indent=2))
    return 0


def _cmd_infer(args) -> int:
    from .model import load_checkpoint
    from .video import (associate_tracks, infer_sequence, render_overlay,
                        semantic_consistency_report, write_dims_csv)

    frame_paths = sorted(Path(args.frames).glob("*.png")) + \
        sorted(Path(args.frames).glob("*.jpg"))
    if not frame_paths:
        warnings.warn(f"no frames found under {args.frames}")
    model, _ = load_checkpoint(args.checkpoint)
    estimates = infer_sequence(frame_paths, model, depth_mode=args.depth_mode)
    tracks = associate_tracks(estimates)

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for path, est in zip(frame_paths, estimates):
            bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
            if bgr is None:
                continue
            rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
            overlay = render_overlay(rgb, [est] if est else [])
            cv2.imwrite(str(out_dir / path.name),
                        cv2.cvtColor(overlay, cv2.COLOR_RGB2BGR))
    if args.csv:
        write_dims_csv(args.csv, estimates)
    if args.consistency:
        if tracks:
            report = semantic_consistency_report(tracks)
        else:
            report = {"tracks": [], "max_cv": 0.0, "mean_cv": 0.0,
                      "threshold": 0.15, "excluded_single_obs": 0,
                      "passed": True}
        Path(args.consistency).write_text(json.dumps(report, indent=2) + "\n",
                                          encoding="utf-8")
    n = sum(1 for e in estimates if e is not None)
    print(f"{len(frame_paths)} frames, {n} estimates, {len(tracks)} tracks")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmode",
        description="Instance segmentation with physical dimension regression")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="render a synthetic dataset")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--profiles", type=int, default=3)
    gen.add_argument("--occlusion-rate", type=float, default=0.2)
    gen.add_argument("--image-size", type=int, default=128)
    gen.add_argument("--out", required=True)
    gen.set_defaults(fn=_cmd_generate)

    tr = sub.add_parser("train", help="train from a JSON config")
    tr.add_argument("--config", required=True)
    tr.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--depth-mode", default=None, choices=["multiply"])
    ev.set_defaults(fn=_cmd_eval)

    inf = sub.add_parser("infer", help="run a frame directory")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--frames", required=True)
    inf.add_argument("--out", default=None)
    inf.add_argument("--csv", default=None)
    inf.add_argument("--consistency", default=None)
    inf.add_argument("--depth-mode", default=None, choices=["multiply"])
    inf.set_defaults(fn=_cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
