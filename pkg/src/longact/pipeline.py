"""End-to-end pipeline orchestration with content-addressed stage caching.

A run directory is laid out as:

    config.json            resolved configuration (defaults filled in)
    manifest.json          stage cache keys and output hashes
    data/                  ann.json + per-video feature files
    ckpt/                  pretrain.ckpt, finetune.ckpt
    timelines/             per-video feature/score timelines
    dets/detections.json
    reports/               report.json, loss curves, CSV tables

Each stage owns a cache key derived from the exact configuration subset it
depends on plus its input stages' keys; a stage is skipped iff its key and
all its recorded output hashes still match.  All artifacts are written
deterministically (no timestamps, sorted JSON keys), so identical configs
reproduce byte-identical runs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset, load_annotations
from .detect import (
    BlobConfig,
    blob_detect,
    load_detections,
    recognize,
    save_detections,
    threshold_merge_detect,
)
from .evaldiag import (
    DEFAULT_TIOU_THRESHOLDS,
    SENSITIVITY_CHARACTERISTICS,
    EvalReport,
    average_map,
    flatten_ground_truth,
    fp_profile,
    load_report,
    save_report,
    sensitivity,
    video_map,
    write_fp_profile_csv,
    write_map_csv,
    write_sensitivity_csv,
)
from .featext import extract_timeline, load_timeline, save_timeline
from .model import ModelHyper, checkpoint_load, checkpoint_save
from .optim import OptimizerConfig
from .pretrain import PretrainConfig, pretrain, write_loss_curve
from .segtrain import REBALANCE_MODES, FinetuneConfig, SegLossConfig, finetune
from .synthgen import GenConfig, generate_dataset, load_dataset, save_dataset

CONFIG_VERSION = 1
MANIFEST_VERSION = 1

ABLATION_AXES = (
    "pretrain_on_off",
    "frozen_vs_finetuned",
    "rebalance_mode",
    "span_sweep",
    "data_fraction",
)
SPAN_SWEEP_SECONDS = (2.0, 4.0, 8.0, 16.0, 32.0)
DATA_FRACTIONS = (0.25, 0.5, 1.0)


class ConfigError(Exception):
    """Configuration file is malformed (unknown keys, bad types/values)."""


class StageError(RuntimeError):
    """A pipeline stage failed; names the stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = "blob"
    blob: BlobConfig = field(default_factory=BlobConfig)
    merge_threshold: float = 0.5
    merge_min_len: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("blob", "merge"):
            raise ValueError(f"detector kind must be 'blob' or 'merge', got {self.kind!r}")
        if not 0.0 <= self.merge_threshold <= 1.0:
            raise ValueError("merge_threshold must lie in [0, 1]")
        if self.merge_min_len < 0.0:
            raise ValueError("merge_min_len must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_TIOU_THRESHOLDS
    recognition: bool = True
    fp_profile: bool = True
    sensitivity: tuple[str, ...] = SENSITIVITY_CHARACTERISTICS

    def __post_init__(self) -> None:
        if not self.thresholds or any(not 0.0 < a <= 1.0 for a in self.thresholds):
            raise ValueError("thresholds must be non-empty and lie in (0, 1]")
        for name in self.sensitivity:
            if name not in SENSITIVITY_CHARACTERISTICS:
                raise ValueError(f"unknown sensitivity characteristic {name!r}")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    span: float = 8.0
    window_stride: float = 4.0
    concat_last_k: int = 1
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelHyper = field(default_factory=ModelHyper)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def default_config(seed: int = 0) -> PipelineConfig:
    """The benchmark configuration: ten classes, well-separated segments."""
    return parse_config({"seed": seed})


# ---------------------------------------------------------------------------
# Strict config parsing (fail-closed: unknown keys are errors)
# ---------------------------------------------------------------------------

def _check_keys(section: str, payload: dict, allowed: tuple[str, ...]) -> None:
    if not isinstance(payload, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = sorted(set(payload) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {unknown}")


def _num(section: str, payload: dict, key: str, default: float) -> float:
    value = payload.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{key} must be a number")
    return float(value)


def _int(section: str, payload: dict, key: str, default: int) -> int:
    value = payload.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{section}.{key} must be an integer")
    return value


def _bool(section: str, payload: dict, key: str, default: bool) -> bool:
    value = payload.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"{section}.{key} must be a boolean")
    return value


def _str(section: str, payload: dict, key: str, default: str) -> str:
    value = payload.get(key, default)
    if not isinstance(value, str):
        raise ConfigError(f"{section}.{key} must be a string")
    return value


def _pair(section: str, payload: dict, key: str, default: tuple[float, float]):
    value = payload.get(key)
    if value is None:
        return default
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value)
    ):
        raise ConfigError(f"{section}.{key} must be a pair of numbers")
    return (float(value[0]), float(value[1]))


def _num_list(section: str, payload: dict, key: str, default: tuple[float, ...]):
    value = payload.get(key)
    if value is None:
        return default
    if not isinstance(value, (list, tuple)) or not value or any(
        isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
    ):
        raise ConfigError(f"{section}.{key} must be a non-empty list of numbers")
    return tuple(float(v) for v in value)


def _parse_optimizer(
    section: str, payload: dict, default: OptimizerConfig
) -> OptimizerConfig:
    _check_keys(
        section,
        payload,
        ("kind", "lr", "momentum", "warmup_frac", "beta1", "beta2", "eps"),
    )
    try:
        return OptimizerConfig(
            kind=_str(section, payload, "kind", default.kind),
            lr=_num(section, payload, "lr", default.lr),
            momentum=_num(section, payload, "momentum", default.momentum),
            warmup_frac=_num(section, payload, "warmup_frac", default.warmup_frac),
            beta1=_num(section, payload, "beta1", default.beta1),
            beta2=_num(section, payload, "beta2", default.beta2),
            eps=_num(section, payload, "eps", default.eps),
        )
    except ValueError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _check_span(section: str, payload: dict, span: float) -> None:
    if "span" in payload and float(payload["span"]) != span:
        raise ConfigError(
            f"{section}.span {payload['span']} conflicts with the top-level span {span}"
        )


def parse_config(payload: dict) -> PipelineConfig:
    """Build a PipelineConfig from a JSON object, rejecting anything unknown."""
    _check_keys(
        "config",
        payload,
        (
            "version",
            "seed",
            "span",
            "window_stride",
            "concat_last_k",
            "gen",
            "model",
            "pretrain",
            "finetune",
            "detector",
            "eval",
        ),
    )
    if payload.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version: {payload.get('version')!r}")
    span = _num("config", payload, "span", 8.0)
    window_stride = _num("config", payload, "window_stride", span / 2.0)

    g = payload.get("gen", {})
    _check_keys(
        "gen",
        g,
        (
            "num_videos",
            "video_length_range",
            "fps",
            "feature_dim",
            "num_classes",
            "class_frequency_exponent",
            "segments_per_video",
            "segment_length_range",
            "overlap_probability",
            "min_gap",
            "noise_sigma",
            "signature_seed",
        ),
    )
    gd = GenConfig()
    gen = GenConfig(
        num_videos=_int("gen", g, "num_videos", gd.num_videos),
        video_length_range=_pair("gen", g, "video_length_range", gd.video_length_range),
        fps=_num("gen", g, "fps", gd.fps),
        feature_dim=_int("gen", g, "feature_dim", gd.feature_dim),
        num_classes=_int("gen", g, "num_classes", gd.num_classes),
        class_frequency_exponent=_num(
            "gen", g, "class_frequency_exponent", gd.class_frequency_exponent
        ),
        segments_per_video=_int("gen", g, "segments_per_video", gd.segments_per_video),
        segment_length_range=_pair(
            "gen", g, "segment_length_range", gd.segment_length_range
        ),
        overlap_probability=_num("gen", g, "overlap_probability", gd.overlap_probability),
        min_gap=_num("gen", g, "min_gap", gd.min_gap),
        noise_sigma=_num("gen", g, "noise_sigma", gd.noise_sigma),
        signature_seed=_int("gen", g, "signature_seed", gd.signature_seed),
    )
    try:
        gen.validate()
    except ValueError as exc:
        raise ConfigError(f"gen: {exc}") from exc

    m = payload.get("model", {})
    _check_keys("model", m, ("hidden_dim", "num_blocks", "kernel_width"))
    try:
        model = ModelHyper(
            feature_dim=gen.feature_dim,
            hidden_dim=_int("model", m, "hidden_dim", 32),
            num_classes=gen.num_classes,
            num_blocks=_int("model", m, "num_blocks", 4),
            kernel_width=_int("model", m, "kernel_width", 9),
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc

    p = payload.get("pretrain", {})
    _check_keys(
        "pretrain",
        p,
        ("span", "epochs", "batch", "mask_ratio", "per_patch_norm", "optimizer"),
    )
    _check_span("pretrain", p, span)
    try:
        pre = PretrainConfig(
            span=span,
            epochs=_int("pretrain", p, "epochs", 20),
            batch=_int("pretrain", p, "batch", 32),
            mask_ratio=_num("pretrain", p, "mask_ratio", 0.9),
            per_patch_norm=_bool("pretrain", p, "per_patch_norm", False),
            optimizer=_parse_optimizer(
                "pretrain.optimizer", p.get("optimizer", {}), PretrainConfig().optimizer
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"pretrain: {exc}") from exc

    f = payload.get("finetune", {})
    _check_keys("finetune", f, ("span", "epochs", "batch", "loss", "optimizer"))
    _check_span("finetune", f, span)
    loss_payload = f.get("loss", {})
    _check_keys(
        "finetune.loss",
        loss_payload,
        (
            "focal_gamma",
            "focal_alpha",
            "label_smoothing",
            "background_prior",
            "rebalance",
        ),
    )
    try:
        loss = SegLossConfig(
            focal_gamma=_num("finetune.loss", loss_payload, "focal_gamma", 2.0),
            focal_alpha=_num("finetune.loss", loss_payload, "focal_alpha", 0.25),
            label_smoothing=_num("finetune.loss", loss_payload, "label_smoothing", 1e-4),
            background_prior=_num("finetune.loss", loss_payload, "background_prior", 0.01),
            rebalance=_str("finetune.loss", loss_payload, "rebalance", "per_instance"),
        )
        fin = FinetuneConfig(
            span=span,
            epochs=_int("finetune", f, "epochs", 30),
            batch=_int("finetune", f, "batch", 32),
            loss=loss,
            optimizer=_parse_optimizer(
                "finetune.optimizer", f.get("optimizer", {}), FinetuneConfig().optimizer
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"finetune: {exc}") from exc

    d = payload.get("detector", {})
    _check_keys("detector", d, ("kind", "blob", "merge"))
    blob_payload = d.get("blob", {})
    _check_keys(
        "detector.blob",
        blob_payload,
        ("sigmas", "response_threshold", "nms_tiou", "max_per_class"),
    )
    merge_payload = d.get("merge", {})
    _check_keys("detector.merge", merge_payload, ("threshold", "min_len"))
    try:
        detector = DetectorConfig(
            kind=_str("detector", d, "kind", "blob"),
            blob=BlobConfig(
                sigmas=_num_list(
                    "detector.blob", blob_payload, "sigmas", BlobConfig().sigmas
                ),
                response_threshold=_num(
                    "detector.blob", blob_payload, "response_threshold", 0.2
                ),
                nms_tiou=_num("detector.blob", blob_payload, "nms_tiou", 0.5),
                max_per_class=_int("detector.blob", blob_payload, "max_per_class", 50),
            ),
            merge_threshold=_num("detector.merge", merge_payload, "threshold", 0.5),
            merge_min_len=_num("detector.merge", merge_payload, "min_len", 1.0),
        )
    except ValueError as exc:
        raise ConfigError(f"detector: {exc}") from exc

    e = payload.get("eval", {})
    _check_keys("eval", e, ("thresholds", "recognition", "fp_profile", "sensitivity"))
    sens = e.get("sensitivity", list(SENSITIVITY_CHARACTERISTICS))
    if not isinstance(sens, (list, tuple)) or any(not isinstance(s, str) for s in sens):
        raise ConfigError("eval.sensitivity must be a list of characteristic names")
    try:
        eval_cfg = EvalConfig(
            thresholds=_num_list("eval", e, "thresholds", DEFAULT_TIOU_THRESHOLDS),
            recognition=_bool("eval", e, "recognition", True),
            fp_profile=_bool("eval", e, "fp_profile", True),
            sensitivity=tuple(sens),
        )
    except ValueError as exc:
        raise ConfigError(f"eval: {exc}") from exc

    try:
        cfg = PipelineConfig(
            seed=_int("config", payload, "seed", 0),
            span=span,
            window_stride=window_stride,
            concat_last_k=_int("config", payload, "concat_last_k", 1),
            gen=gen,
            model=model,
            pretrain=pre,
            finetune=fin,
            detector=detector,
            eval=eval_cfg,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _validate_cross(cfg)
    return cfg


def _validate_cross(cfg: PipelineConfig) -> None:
    t_span = int(round(cfg.span * cfg.gen.fps))
    stride_frames = int(round(cfg.window_stride * cfg.gen.fps))
    if t_span < 2:
        raise ConfigError(f"span {cfg.span}s is under 2 frames at fps={cfg.gen.fps}")
    if stride_frames < 1 or t_span % stride_frames != 0:
        raise ConfigError(
            f"window_stride {cfg.window_stride}s must divide the span's {t_span} frames"
        )
    if cfg.span > cfg.gen.video_length_range[0]:
        raise ConfigError(
            f"span {cfg.span}s exceeds the shortest video ({cfg.gen.video_length_range[0]}s)"
        )
    if not 1 <= cfg.concat_last_k <= cfg.model.num_blocks:
        raise ConfigError(
            f"concat_last_k must lie in [1, {cfg.model.num_blocks}]"
        )


def load_config(path: str | Path) -> PipelineConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    return parse_config(payload)


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Fully resolved configuration (defaults filled), JSON-serializable."""
    return {
        "version": CONFIG_VERSION,
        "seed": cfg.seed,
        "span": cfg.span,
        "window_stride": cfg.window_stride,
        "concat_last_k": cfg.concat_last_k,
        "gen": {
            "num_videos": cfg.gen.num_videos,
            "video_length_range": list(cfg.gen.video_length_range),
            "fps": cfg.gen.fps,
            "feature_dim": cfg.gen.feature_dim,
            "num_classes": cfg.gen.num_classes,
            "class_frequency_exponent": cfg.gen.class_frequency_exponent,
            "segments_per_video": cfg.gen.segments_per_video,
            "segment_length_range": list(cfg.gen.segment_length_range),
            "overlap_probability": cfg.gen.overlap_probability,
            "min_gap": cfg.gen.min_gap,
            "noise_sigma": cfg.gen.noise_sigma,
            "signature_seed": cfg.gen.signature_seed,
        },
        "model": {
            "hidden_dim": cfg.model.hidden_dim,
            "num_blocks": cfg.model.num_blocks,
            "kernel_width": cfg.model.kernel_width,
        },
        "pretrain": {
            "epochs": cfg.pretrain.epochs,
            "batch": cfg.pretrain.batch,
            "mask_ratio": cfg.pretrain.mask_ratio,
            "per_patch_norm": cfg.pretrain.per_patch_norm,
            "optimizer": _optimizer_to_dict(cfg.pretrain.optimizer),
        },
        "finetune": {
            "epochs": cfg.finetune.epochs,
            "batch": cfg.finetune.batch,
            "loss": {
                "focal_gamma": cfg.finetune.loss.focal_gamma,
                "focal_alpha": cfg.finetune.loss.focal_alpha,
                "label_smoothing": cfg.finetune.loss.label_smoothing,
                "background_prior": cfg.finetune.loss.background_prior,
                "rebalance": cfg.finetune.loss.rebalance,
            },
            "optimizer": _optimizer_to_dict(cfg.finetune.optimizer),
        },
        "detector": {
            "kind": cfg.detector.kind,
            "blob": {
                "sigmas": list(cfg.detector.blob.sigmas),
                "response_threshold": cfg.detector.blob.response_threshold,
                "nms_tiou": cfg.detector.blob.nms_tiou,
                "max_per_class": cfg.detector.blob.max_per_class,
            },
            "merge": {
                "threshold": cfg.detector.merge_threshold,
                "min_len": cfg.detector.merge_min_len,
            },
        },
        "eval": {
            "thresholds": list(cfg.eval.thresholds),
            "recognition": cfg.eval.recognition,
            "fp_profile": cfg.eval.fp_profile,
            "sensitivity": list(cfg.eval.sensitivity),
        },
    }


def _optimizer_to_dict(opt: OptimizerConfig) -> dict:
    return {
        "kind": opt.kind,
        "lr": opt.lr,
        "momentum": opt.momentum,
        "warmup_frac": opt.warmup_frac,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
    }


# ---------------------------------------------------------------------------
# Stage caching
# ---------------------------------------------------------------------------

def _payload_hash(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Manifest:
    def __init__(self, run_dir: Path):
        self.path = run_dir / "manifest.json"
        self.run_dir = run_dir
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
            if self.data.get("version") != MANIFEST_VERSION:
                self.data = {"version": MANIFEST_VERSION, "stages": {}}
        else:
            self.data = {"version": MANIFEST_VERSION, "stages": {}}

    def is_fresh(self, stage: str, key: str) -> bool:
        entry = self.data["stages"].get(stage)
        if entry is None or entry.get("key") != key:
            return False
        for rel, digest in entry["outputs"].items():
            path = self.run_dir / rel
            if not path.exists() or _file_hash(path) != digest:
                return False
        return True

    def record(self, stage: str, key: str, outputs: list[Path]) -> None:
        self.data["stages"][stage] = {
            "key": key,
            "outputs": {
                str(p.relative_to(self.run_dir)): _file_hash(p) for p in sorted(outputs)
            },
        }
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _stage_gen(cfg: PipelineConfig, run: Path) -> list[Path]:
    dataset = generate_dataset(cfg.gen, cfg.seed)
    save_dataset(dataset, run / "data")
    out = [run / "data" / "ann.json"]
    out += [run / "data" / f"{v.video_id}.egof" for v in dataset.videos]
    return out


def _stage_pretrain(cfg: PipelineConfig, run: Path) -> list[Path]:
    dataset = load_dataset(run / "data")
    params, curve = pretrain(dataset, cfg.pretrain, cfg.seed, hyper=cfg.model)
    (run / "ckpt").mkdir(parents=True, exist_ok=True)
    (run / "reports").mkdir(parents=True, exist_ok=True)
    checkpoint_save(params, run / "ckpt" / "pretrain.ckpt")
    write_loss_curve(run / "reports" / "pretrain_loss.csv", curve, "masked_mse")
    return [run / "ckpt" / "pretrain.ckpt", run / "reports" / "pretrain_loss.csv"]


def _stage_finetune(cfg: PipelineConfig, run: Path) -> list[Path]:
    dataset = load_dataset(run / "data")
    params = checkpoint_load(run / "ckpt" / "pretrain.ckpt", expect=cfg.model)
    tuned, curve = finetune(params, dataset, cfg.finetune, cfg.seed)
    (run / "reports").mkdir(parents=True, exist_ok=True)
    checkpoint_save(tuned, run / "ckpt" / "finetune.ckpt")
    write_loss_curve(run / "reports" / "finetune_loss.csv", curve, "seg_loss")
    return [run / "ckpt" / "finetune.ckpt", run / "reports" / "finetune_loss.csv"]


def _stage_extract(cfg: PipelineConfig, run: Path, ckpt_name: str) -> list[Path]:
    dataset = load_dataset(run / "data")
    params = checkpoint_load(run / "ckpt" / ckpt_name, expect=cfg.model)
    out = []
    for video in dataset.videos:
        timeline = extract_timeline(
            params, video, cfg.span, cfg.window_stride, cfg.concat_last_k
        )
        save_timeline(timeline, run / "timelines")
        out.append(run / "timelines" / f"{video.video_id}.features.bin")
        out.append(run / "timelines" / f"{video.video_id}.scores.bin")
    return out


def _stage_detect(cfg: PipelineConfig, run: Path) -> list[Path]:
    classes, annos = load_annotations(run / "data" / "ann.json")
    dets = []
    for a in annos:
        timeline = load_timeline(run / "timelines", a.video_id)
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
    (run / "dets").mkdir(parents=True, exist_ok=True)
    save_detections(run / "dets" / "detections.json", dets)
    return [run / "dets" / "detections.json"]


def _stage_eval(cfg: PipelineConfig, run: Path) -> list[Path]:
    classes, annos = load_annotations(run / "data" / "ann.json")
    gts = flatten_ground_truth(annos)
    dets = load_detections(run / "dets" / "detections.json")
    report = average_map(dets, gts, cfg.eval.thresholds)
    out_dir = run / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = [out_dir / "report.json", out_dir / "map_vs_threshold.csv"]
    if cfg.eval.recognition:
        scores = []
        labels = np.zeros((len(annos), len(classes)), dtype=np.int64)
        for i, a in enumerate(annos):
            timeline = load_timeline(run / "timelines", a.video_id)
            scores.append(recognize(timeline.scores))
            for seg in a.segments:
                labels[i, seg.class_id] = 1
        report.recognition_video_map = video_map(np.stack(scores), labels)
    if cfg.eval.fp_profile:
        report.fp_profile = fp_profile(dets, gts, cfg.eval.thresholds)
        write_fp_profile_csv(report.fp_profile, out_dir / "fp_profile.csv")
        outputs.append(out_dir / "fp_profile.csv")
    if cfg.eval.sensitivity:
        report.sensitivity = {
            name: sensitivity(dets, gts, name, thresholds=cfg.eval.thresholds)
            for name in cfg.eval.sensitivity
        }
        write_sensitivity_csv(report.sensitivity, out_dir / "sensitivity.csv")
        outputs.append(out_dir / "sensitivity.csv")
    save_report(report, out_dir / "report.json")
    write_map_csv(report, out_dir / "map_vs_threshold.csv")
    return outputs


def run_pipeline(
    cfg: PipelineConfig, run_dir: str | Path, *, skip_finetune: bool = False
) -> EvalReport:
    """Run gen -> pretrain -> finetune -> extract -> detect -> eval.

    Stages whose cache key and outputs are intact are skipped.  With
    ``skip_finetune`` the finetune stage is omitted and extraction reads the
    pretraining checkpoint (used by the frozen-features ablation).  Returns
    the final evaluation report; raises StageError naming the failing stage.
    """
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    full = config_to_dict(cfg)
    (run / "config.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    manifest = _Manifest(run)
    keys: dict[str, str] = {}

    def execute(stage: str, payload: dict, inputs: list[str], fn) -> None:
        key = _payload_hash(
            {"stage": stage, "payload": payload, "inputs": [keys[i] for i in inputs]}
        )
        keys[stage] = key
        if manifest.is_fresh(stage, key):
            return
        try:
            outputs = fn()
        except Exception as exc:
            raise StageError(stage, exc) from exc
        manifest.record(stage, key, outputs)

    execute("gen", {"gen": full["gen"], "seed": cfg.seed}, [], lambda: _stage_gen(cfg, run))
    execute(
        "pretrain",
        {
            "pretrain": full["pretrain"],
            "model": full["model"],
            "span": cfg.span,
            "seed": cfg.seed,
        },
        ["gen"],
        lambda: _stage_pretrain(cfg, run),
    )
    extract_input = "pretrain"
    ckpt_name = "pretrain.ckpt"
    if not skip_finetune:
        execute(
            "finetune",
            {
                "finetune": full["finetune"],
                "model": full["model"],
                "span": cfg.span,
                "seed": cfg.seed,
            },
            ["pretrain"],
            lambda: _stage_finetune(cfg, run),
        )
        extract_input = "finetune"
        ckpt_name = "finetune.ckpt"
    execute(
        "extract",
        {
            "span": cfg.span,
            "window_stride": cfg.window_stride,
            "concat_last_k": cfg.concat_last_k,
            "checkpoint": ckpt_name,
        },
        [extract_input],
        lambda: _stage_extract(cfg, run, ckpt_name),
    )
    execute(
        "detect",
        {"detector": full["detector"]},
        ["extract"],
        lambda: _stage_detect(cfg, run),
    )
    execute(
        "eval",
        {"eval": full["eval"]},
        ["detect", "gen"],
        lambda: _stage_eval(cfg, run),
    )
    return load_report(run / "reports" / "report.json")


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

def _with(cfg: PipelineConfig, **replace) -> PipelineConfig:
    from dataclasses import replace as dc_replace

    return dc_replace(cfg, **replace)


def ablation_variants(cfg: PipelineConfig, axis: str):
    """(name, variant config, skip_finetune) triples for one ablation axis."""
    from dataclasses import replace as dc_replace

    if axis == "pretrain_on_off":
        off = _with(cfg, pretrain=dc_replace(cfg.pretrain, epochs=0))
        return [("pretrain_on", cfg, False), ("pretrain_off", off, False)]
    if axis == "frozen_vs_finetuned":
        return [("finetuned", cfg, False), ("frozen", cfg, True)]
    if axis == "rebalance_mode":
        out = []
        for mode in REBALANCE_MODES:
            loss = dc_replace(cfg.finetune.loss, rebalance=mode)
            out.append(
                (mode, _with(cfg, finetune=dc_replace(cfg.finetune, loss=loss)), False)
            )
        return out
    if axis == "span_sweep":
        out = []
        for span in SPAN_SWEEP_SECONDS:
            variant = _with(
                cfg,
                span=span,
                window_stride=span / 2.0,
                pretrain=dc_replace(cfg.pretrain, span=span),
                finetune=dc_replace(cfg.finetune, span=span),
            )
            out.append((f"span_{span:g}s", variant, False))
        return out
    if axis == "data_fraction":
        out = []
        for frac in DATA_FRACTIONS:
            videos = max(1, int(round(cfg.gen.num_videos * frac)))
            variant = _with(cfg, gen=dc_replace(cfg.gen, num_videos=videos))
            out.append((f"videos_{int(frac * 100)}pct", variant, False))
        return out
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def run_ablation(
    cfg: PipelineConfig,
    axis: str,
    run_dir: str | Path,
    seeds: list[int] | None = None,
) -> list[tuple[str, int, float]]:
    """Run every variant of one axis (sharing seeds) and emit a CSV table.

    Returns (variant, seed, average mAP) rows; also writes ``ablation.csv``
    with those rows plus a per-variant median summary in
    ``ablation_summary.csv``.
    """
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    if seeds is None:
        seeds = [cfg.seed]
    rows: list[tuple[str, int, float]] = []
    for name, variant, skip_finetune in ablation_variants(cfg, axis):
        for seed in seeds:
            seeded = _with(variant, seed=seed)
            report = run_pipeline(
                seeded, run / name / f"seed_{seed}", skip_finetune=skip_finetune
            )
            rows.append((name, seed, report.average_map))
    with open(run / "ablation.csv", "w") as fh:
        fh.write("variant,seed,average_map\n")
        for name, seed, value in rows:
            fh.write(f"{name},{seed},{value:.10g}\n")
    with open(run / "ablation_summary.csv", "w") as fh:
        fh.write("variant,median_average_map\n")
        for name, _, _ in ablation_variants(cfg, axis):
            values = [v for n, _, v in rows if n == name]
            fh.write(f"{name},{float(np.median(values)):.10g}\n")
    return rows
