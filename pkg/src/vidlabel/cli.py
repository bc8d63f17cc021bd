"""Command-line pipeline: synth | discover | train | eval.

Every command is deterministic given its inputs, config and seed, writes
outputs atomically, and is idempotent. Exit codes: 0 success, 2 input or
validation error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config
from .discovery import DiscoveryConfig, discover_video
from .distill import TrainConfig, densify, train_stage1, train_stage2
from .iojson import atomic_write_text, dump_json
from .labelset import Labelset, is_dense, load_labelset, save_labelset
from .metrics import evaluate_labelsets
from .propagator import VideoClip, load_model, save_model
from .synthetic import save_video_files, synth_generate
from .tracks import load_trackset
from .validation import DivergenceError, InputError

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "num_videos", "num_discarded", "videos"],
    "properties": {
        "schema_version": {"const": 1},
        "num_videos": {"type": "integer", "minimum": 0},
        "num_discarded": {"type": "integer", "minimum": 0},
        "videos": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "id",
                    "num_tracks",
                    "num_groups",
                    "num_outliers",
                    "num_instances",
                    "discarded",
                    "assignments",
                ],
                "properties": {
                    "id": {"type": "string"},
                    "num_tracks": {"type": "integer", "minimum": 0},
                    "num_groups": {"type": "integer", "minimum": 0},
                    "num_outliers": {"type": "integer", "minimum": 0},
                    "num_instances": {"type": "integer", "minimum": 0},
                    "discarded": {"type": "boolean"},
                    "assignments": {"type": "array", "items": {"type": "integer"}},
                },
            },
        },
    },
}


def _apply_overrides(config: PipelineConfig, args) -> PipelineConfig:
    discovery = config.discovery
    if args.gamma_thr is not None:
        discovery = dataclasses.replace(discovery, gamma_thr=args.gamma_thr)
    if args.lambda_j is not None:
        discovery = dataclasses.replace(discovery, lambda_j=args.lambda_j)
    train = config.train
    if getattr(args, "steps", None) is not None:
        train = dataclasses.replace(train, steps=args.steps)
    seed = config.seed if args.seed is None else args.seed
    train = dataclasses.replace(train, seed=seed)
    return dataclasses.replace(config, discovery=discovery, train=train, seed=seed)


def cmd_synth(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gt_videos = []
    for offset in range(args.videos):
        video = synth_generate(config.synth, config.seed + offset)
        save_video_files(video, out)
        gt_videos.append(video.gt_video_labels())
    save_labelset(Labelset(tuple(gt_videos)), out / "gt_labelset.json")
    manifest = {
        "schema_version": 1,
        "seed": config.seed,
        "num_videos": args.videos,
        "video_ids": [v.video_id for v in gt_videos],
        "config": config.to_json(),
    }
    dump_json(manifest, out / "manifest.json")
    print(f"wrote {args.videos} videos to {out}")
    return 0


def _discover_one(path: Path, config: DiscoveryConfig):
    return discover_video(load_trackset(path), config)


def cmd_discover(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    track_files = sorted(Path(args.tracks).glob("*.tracks.json"))
    if not track_files:
        raise InputError(f"no *.tracks.json files under {args.tracks}")
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(
            pool.map(lambda p: _discover_one(p, config.discovery), track_files)
        )
    videos = [video for video, _ in results]
    reports = [report for _, report in results]
    labelset = Labelset(tuple(videos))
    save_labelset(labelset, args.out)
    report = {
        "schema_version": 1,
        "num_videos": len(videos),
        "num_discarded": sum(1 for v in videos if v.discarded),
        "videos": reports,
    }
    if args.report:
        dump_json(report, args.report)
    discarded = [v.video_id for v in videos if v.discarded]
    print(
        f"discovered {sum(len(v.instances) for v in videos)} instances in "
        f"{len(videos)} videos ({len(discarded)} discarded)"
    )
    return 0


def _load_clips(videos_dir: str | Path) -> list[VideoClip]:
    paths = sorted(Path(videos_dir).glob("*.features.npy"))
    if not paths:
        raise InputError(f"no *.features.npy files under {videos_dir}")
    clips = []
    for path in paths:
        video_id = path.name.removesuffix(".features.npy")
        clips.append(VideoClip(video_id, np.load(path)))
    return clips


def cmd_train(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    labelset = load_labelset(args.labelset)
    clips = _load_clips(args.videos)
    if args.stage == 2 and not is_dense(labelset):
        raise InputError(
            "stage 2 requires the dense labelset produced by stage 1 "
            "(annotated frames must be contiguous)"
        )
    if args.stage == 1:
        teacher, log = train_stage1(clips, labelset, config.train)
        dense = densify(teacher, clips, config.train.threshold, config.train.min_area)
        if args.out_labelset:
            save_labelset(dense, args.out_labelset)
    else:
        teacher, log = train_stage2(clips, labelset, config.train)
    save_model(teacher, args.out_model)
    if args.log:
        lines = "".join(json.dumps(row, sort_keys=True) + "\n" for row in log)
        atomic_write_text(args.log, lines)
    print(f"stage {args.stage}: trained {config.train.steps} steps, "
          f"final loss {log[-1]['total']:.4f}")
    return 0


def cmd_eval(args) -> int:
    gt = load_labelset(args.gt)
    if args.pred:
        pred = load_labelset(args.pred)
    else:
        model = load_model(args.model)
        clips = _load_clips(args.videos)
        pred = densify(model, clips)
    missing = sorted(set(gt.video_ids) - set(pred.video_ids))
    if missing:
        raise InputError(f"predictions missing videos: {missing}")
    metrics = evaluate_labelsets(pred, gt)
    payload = {
        "AP": metrics["AP"],
        "AP50": metrics["AP50"],
        "AP75": metrics["AP75"],
        "J": metrics["J"],
        "F": metrics["F"],
        "JF": metrics["JF"],
    }
    text = json.dumps(payload, sort_keys=True)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidlabel",
        description="Batch pseudo-labeling of videos from per-frame masks and point tracks",
    )
    parser.add_argument("--config", help="pipeline config JSON", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--gamma-thr", type=float, default=None, dest="gamma_thr")
    parser.add_argument("--lambda-j", type=float, default=None, dest="lambda_j")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("discover", help="keymask discovery over track files")
    p.add_argument("--tracks", required=True, help="directory of *.tracks.json")
    p.add_argument("--out", required=True, help="sparse labelset JSON output")
    p.add_argument("--report", default=None, help="per-video report JSON output")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("train", help="sparse-to-dense distillation training")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--labelset", required=True)
    p.add_argument("--videos", required=True, help="directory of *.features.npy")
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-labelset", default=None, help="dense labelset (stage 1)")
    p.add_argument("--log", default=None, help="line-delimited JSON training log")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a labelset or model against ground truth")
    p.add_argument("--pred", default=None, help="predicted labelset JSON")
    p.add_argument("--model", default=None, help="model file (with --videos)")
    p.add_argument("--videos", default=None)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None, help="metrics JSON output")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and not args.pred and not (args.model and args.videos):
        parser.error("eval needs --pred, or --model together with --videos")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
