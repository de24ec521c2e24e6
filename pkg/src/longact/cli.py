"""Command-line interface.

Heavy imports happen lazily so that ``--threads`` can pin the BLAS thread
pools before numpy is loaded.  Exit codes: 0 success, 2 configuration or
usage error, 3 stage/runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longact",
        description=(
            "Desk-scale temporal action detection: masked-autoencoder "
            "pretraining, per-frame segmentation, sliding-window extraction, "
            "blob detection, and tIoU-matched evaluation."
        ),
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="cap BLAS/OpenMP thread pools (set before numpy loads)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--curve", default=None, help="loss-curve CSV (default: next to checkpoint)")

    p = sub.add_parser("finetune", help="per-frame segmentation finetuning")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="pretraining checkpoint to start from")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--curve", default=None)

    p = sub.add_parser("extract", help="sliding-window timeline extraction")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output timeline directory")

    p = sub.add_parser("detect", help="detect segments on extracted timelines")
    common(p)
    p.add_argument("--timelines", required=True)
    p.add_argument("--ann", required=True, help="annotation JSON (for video ids)")
    p.add_argument("--out", required=True, help="output detections JSON")

    p = sub.add_parser("eval", help="tIoU-matched detection evaluation")
    common(p)
    p.add_argument("--dets", required=True)
    p.add_argument("--ann", required=True)
    p.add_argument("--timelines", default=None, help="enables video-level recognition mAP")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("diagnose", help="false-positive profile and sensitivity buckets")
    common(p)
    p.add_argument("--dets", required=True)
    p.add_argument("--ann", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("pipeline", help="run all stages end to end (cached)")
    common(p)
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("ablate", help="run one ablation axis")
    common(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument(
        "--seeds",
        default=None,
        help="comma-separated seeds (default: the config seed)",
    )
    return parser


def _load_cfg(args):
    from dataclasses import replace

    from .pipeline import default_config, load_config

    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _print_report(report) -> None:
    for alpha in report.thresholds:
        print(f"mAP@{alpha:g}: {report.map_per_threshold[alpha]:.4f}")
    print(f"average mAP: {report.average_map:.4f}")
    if report.recognition_video_map is not None:
        print(f"recognition video mAP: {report.recognition_video_map:.4f}")


def _cmd_gen(args) -> int:
    from .synthgen import generate_dataset, save_dataset

    cfg = _load_cfg(args)
    dataset = generate_dataset(cfg.gen, cfg.seed)
    save_dataset(dataset, args.out)
    total = sum(len(v.segments) for v in dataset.videos)
    print(f"wrote {len(dataset.videos)} videos, {total} segments to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    from .model import checkpoint_save
    from .pretrain import pretrain, write_loss_curve
    from .synthgen import load_dataset

    cfg = _load_cfg(args)
    dataset = load_dataset(args.data)
    params, curve = pretrain(dataset, cfg.pretrain, cfg.seed, hyper=cfg.model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_save(params, out)
    curve_path = Path(args.curve) if args.curve else out.with_suffix(".loss.csv")
    write_loss_curve(curve_path, curve, "masked_mse")
    print(
        f"masked MSE: {curve[0][1]:.6f} -> {curve[-1][1]:.6f} "
        f"over {len(curve) - 1} epochs"
    )
    return 0


def _cmd_finetune(args) -> int:
    from .model import checkpoint_load, checkpoint_save
    from .pretrain import write_loss_curve
    from .segtrain import finetune
    from .synthgen import load_dataset

    cfg = _load_cfg(args)
    dataset = load_dataset(args.data)
    params = checkpoint_load(args.ckpt)
    tuned, curve = finetune(params, dataset, cfg.finetune, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_save(tuned, out)
    curve_path = Path(args.curve) if args.curve else out.with_suffix(".loss.csv")
    write_loss_curve(curve_path, curve, "seg_loss")
    print(
        f"seg loss: {curve[0][1]:.6f} -> {curve[-1][1]:.6f} "
        f"over {len(curve) - 1} epochs"
    )
    return 0


def _cmd_extract(args) -> int:
    from .featext import extract_timeline, save_timeline
    from .model import checkpoint_load
    from .synthgen import load_dataset

    cfg = _load_cfg(args)
    dataset = load_dataset(args.data)
    params = checkpoint_load(args.ckpt)
    for video in dataset.videos:
        timeline = extract_timeline(
            params, video, cfg.span, cfg.window_stride, cfg.concat_last_k
        )
        save_timeline(timeline, args.out)
    print(f"wrote {len(dataset.videos)} timelines to {args.out}")
    return 0


def _cmd_detect(args) -> int:
    from .core import load_annotations
    from .detect import blob_detect, save_detections, threshold_merge_detect
    from .featext import load_timeline

    cfg = _load_cfg(args)
    _, annos = load_annotations(args.ann)
    dets = []
    for a in annos:
        timeline = load_timeline(args.timelines, a.video_id)
        if cfg.detector.kind == "blob":
            dets += blob_detect(
                timeline.scores, timeline.stride, a.video_id, cfg.detector.blob
            )
        else:
            dets += threshold_merge_detect(
                timeline.scores,
                timeline.stride,
                a.video_id,
                cfg.detector.merge_threshold,
                cfg.detector.merge_min_len,
            )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_detections(out, dets)
    print(f"wrote {len(dets)} detections to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    import numpy as np

    from .core import load_annotations
    from .detect import load_detections, recognize
    from .evaldiag import (
        average_map,
        flatten_ground_truth,
        save_report,
        video_map,
        write_map_csv,
    )
    from .featext import load_timeline

    cfg = _load_cfg(args)
    classes, annos = load_annotations(args.ann)
    gts = flatten_ground_truth(annos)
    dets = load_detections(args.dets)
    report = average_map(dets, gts, cfg.eval.thresholds)
    if args.timelines and cfg.eval.recognition:
        scores = []
        labels = np.zeros((len(annos), len(classes)), dtype=np.int64)
        for i, a in enumerate(annos):
            timeline = load_timeline(args.timelines, a.video_id)
            scores.append(recognize(timeline.scores))
            for seg in a.segments:
                labels[i, seg.class_id] = 1
        report.recognition_video_map = video_map(np.stack(scores), labels)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_report(report, out_dir / "report.json")
    write_map_csv(report, out_dir / "map_vs_threshold.csv")
    _print_report(report)
    return 0


def _cmd_diagnose(args) -> int:
    from .core import load_annotations
    from .detect import load_detections
    from .evaldiag import (
        SENSITIVITY_CHARACTERISTICS,
        flatten_ground_truth,
        fp_profile,
        sensitivity,
        write_fp_profile_csv,
        write_sensitivity_csv,
    )

    cfg = _load_cfg(args)
    _, annos = load_annotations(args.ann)
    gts = flatten_ground_truth(annos)
    dets = load_detections(args.dets)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    profile = fp_profile(dets, gts, cfg.eval.thresholds)
    write_fp_profile_csv(profile, out_dir / "fp_profile.csv")
    buckets = {
        name: sensitivity(dets, gts, name, thresholds=cfg.eval.thresholds)
        for name in (cfg.eval.sensitivity or SENSITIVITY_CHARACTERISTICS)
    }
    write_sensitivity_csv(buckets, out_dir / "sensitivity.csv")
    strictest = max(cfg.eval.thresholds)
    counts = profile[strictest]
    print(
        "false positives at tIoU "
        f"{strictest:g}: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
    )
    for name, result in buckets.items():
        values = ", ".join(f"{v:.3f}" for v in result.bucket_map)
        print(f"sensitivity[{name}]: {values}")
    return 0


def _cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    cfg = _load_cfg(args)
    report = run_pipeline(cfg, args.run_dir)
    _print_report(report)
    return 0


def _cmd_ablate(args) -> int:
    from .pipeline import run_ablation

    cfg = _load_cfg(args)
    seeds = None
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise SystemExit(2)
    rows = run_ablation(cfg, args.axis, args.run_dir, seeds=seeds)
    for name, seed, value in rows:
        print(f"{name} seed={seed}: average mAP {value:.4f}")
    return 0


_HANDLERS = {
    "gen": _cmd_gen,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "extract": _cmd_extract,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "diagnose": _cmd_diagnose,
    "pipeline": _cmd_pipeline,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return 2
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(args.threads)
    from .pipeline import ConfigError, StageError

    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
