"""Per-frame temporal-segmentation finetuning with imbalance handling.

The segmentation head is trained as C independent binary problems per frame
(multi-label: overlapping actions coexist).  Rare positives are handled by a
combination of focal BCE, label smoothing, a background-prior bias init, and
one of four rebalancing modes:

    per_instance  each action instance's frames are weighted 1/length, so
                  every instance contributes the same total weight no matter
                  how long it is
    per_class     positives are weighted by inverse class frequency in the
                  clip (normalized to mean weight 1 over positives)
    resample      uniform weights, but training clips are drawn centered on
                  uniformly chosen instances instead of uniformly in time
    none          uniform weights, uniform clip sampling
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import Dataset, Interval, LabelMask
from .model import ModelParams, _backward_batch, _forward_batch
from .optim import Optimizer, OptimizerConfig
from .pretrain import TrainingDivergedError
from .rng import stream
from .synthgen import ClipSample, _cut_clip, sample_clip, span_frames, steps_per_epoch

log = logging.getLogger(__name__)

REBALANCE_MODES = ("per_instance", "per_class", "resample", "none")


@dataclass(frozen=True)
class SegLossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    label_smoothing: float = 1e-4
    background_prior: float = 0.01
    rebalance: str = "per_instance"

    def __post_init__(self) -> None:
        if self.focal_gamma < 0.0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if not 0.0 < self.background_prior < 1.0:
            raise ValueError("background_prior must lie in (0, 1)")
        if self.rebalance not in REBALANCE_MODES:
            raise ValueError(
                f"rebalance must be one of {REBALANCE_MODES}, got {self.rebalance!r}"
            )


def instance_weights(labels: LabelMask, mode: str) -> np.ndarray:
    """Per-cell loss weights for one clip, (T, C) float64.

    Background cells always get weight 1.  ``per_instance`` gives every
    positive cell 1/length of its instance (length counted in frames inside
    the clip), so each instance sums to exactly 1.  ``per_class`` weights
    positives by inverse class frequency, normalized so the mean weight over
    all positive cells is 1.  ``resample`` and ``none`` return all ones.
    """
    if mode not in REBALANCE_MODES:
        raise ValueError(f"rebalance must be one of {REBALANCE_MODES}, got {mode!r}")
    values = labels.values
    weights = np.ones(values.shape, dtype=np.float64)
    if mode in ("resample", "none"):
        return weights
    if mode == "per_instance":
        inst = labels.instance_id
        for c in range(labels.num_classes):
            col = inst[:, c]
            ids, counts = np.unique(col[col >= 0], return_counts=True)
            for instance, count in zip(ids, counts):
                weights[col == instance, c] = 1.0 / count
        return weights
    # per_class
    pos_per_class = values.sum(axis=0).astype(np.float64)
    present = pos_per_class > 0
    total = pos_per_class.sum()
    if total > 0:
        scale = total / present.sum()
        for c in np.flatnonzero(present):
            weights[values[:, c] == 1, c] = scale / pos_per_class[c]
    return weights


def seg_loss(
    logits: np.ndarray,
    labels: LabelMask,
    weights: np.ndarray,
    cfg: SegLossConfig,
) -> tuple[float, np.ndarray]:
    """Weighted focal BCE with label smoothing; mean over all T*C cells.

    Per cell, with y in {0, 1}, smoothed target y' = y(1-e) + e/2, p=sigmoid(z),
    p_t the probability assigned to the true label:

        loss = w * alpha_t * (1 - p_t)^gamma * BCE(y', z)
        alpha_t = alpha for positives, 1 - alpha for negatives

    Numerically stable for |z| up to at least 50 (softplus via logaddexp,
    focal factor through sigmoid of the signed logit).  Returns
    (loss, d_loss/d_logits); the gradient at cell (t, c) depends only on that
    cell's logit, label, and weight.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = labels.values.astype(np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if z.shape != y.shape or z.shape != w.shape:
        raise ValueError(
            f"shape mismatch: logits {z.shape}, labels {y.shape}, weights {w.shape}"
        )
    eps = cfg.label_smoothing
    y_smooth = y * (1.0 - eps) + 0.5 * eps
    sign = 2.0 * y - 1.0
    p = expit(z)
    p_t = expit(sign * z)
    one_minus_pt = expit(-sign * z)
    bce = y_smooth * np.logaddexp(0.0, -z) + (1.0 - y_smooth) * np.logaddexp(0.0, z)
    alpha_t = np.where(y == 1.0, cfg.focal_alpha, 1.0 - cfg.focal_alpha)
    if cfg.focal_gamma == 0.0:
        focal = np.ones_like(z)
        focal_term = 0.0
    else:
        focal = one_minus_pt ** cfg.focal_gamma
        focal_term = -cfg.focal_gamma * sign * p_t * bce
    cells = float(z.size)
    per_cell = w * alpha_t * focal * bce
    loss = float(per_cell.sum() / cells)
    grad = w * alpha_t * focal * ((p - y_smooth) + focal_term) / cells
    return loss, grad


def init_background_bias(prior: float) -> float:
    """Segmentation-head bias that makes sigmoid(bias) equal the prior.

    Equals -ln((1 - prior) / prior); e.g. prior 0.5 gives exactly 0.
    """
    if not 0.0 < prior < 1.0:
        raise ValueError("prior must lie in (0, 1)")
    return float(np.log(prior / (1.0 - prior)))


def apply_background_bias(params: ModelParams, prior: float) -> None:
    params.tensors["b_seg"][:] = init_background_bias(prior)


def resample_centers(
    dataset: Dataset, span: float, rng: np.random.Generator
) -> ClipSample:
    """Draw a clip centered on a uniformly chosen action instance.

    Every instance is equally likely regardless of its length or class.  The
    clip is centered on the instance midpoint, then shifted just enough to
    stay inside the video (the span is always preserved).  Requires every
    video to admit the span and at least one instance to exist.
    """
    instances = [
        (video, seg) for video in dataset.videos for seg in video.segments
    ]
    if not instances:
        raise ValueError("dataset contains no action instances to resample")
    for video in dataset.videos:
        if video.num_frames < span_frames(span, video.fps):
            raise ValueError(
                f"video {video.video_id!r} is shorter than the {span}s span"
            )
    video, seg = instances[int(rng.integers(len(instances)))]
    t_span = span_frames(span, video.fps)
    mid = 0.5 * (seg.interval.start + seg.interval.end)
    start = int(round(mid * video.fps - 0.5 * t_span))
    start = min(max(start, 0), video.num_frames - t_span)
    return _cut_clip(video, start, span, dataset.num_classes)


@dataclass(frozen=True)
class FinetuneConfig:
    span: float = 8.0
    epochs: int = 30
    batch: int = 32
    loss: SegLossConfig = field(default_factory=SegLossConfig)
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(kind="adam", lr=0.005)
    )

    def __post_init__(self) -> None:
        if self.span <= 0.0:
            raise ValueError("span must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def _batch_seg_loss(params: ModelParams, clips: list[ClipSample], cfg: SegLossConfig):
    frames = np.stack([np.asarray(c.frames, dtype=np.float64) for c in clips])
    _, logits, _, cache = _forward_batch(params, frames)
    batch = len(clips)
    losses = np.empty(batch)
    d_logits = np.zeros_like(logits)
    for b, clip in enumerate(clips):
        weights = instance_weights(clip.labels, cfg.rebalance)
        losses[b], grad = seg_loss(logits[b], clip.labels, weights, cfg)
        d_logits[b] = grad / batch
    return float(losses.mean()), d_logits, cache


def finetune(
    params: ModelParams,
    dataset: Dataset,
    cfg: FinetuneConfig,
    seed: int,
) -> tuple[ModelParams, list[tuple[int, float]]]:
    """Finetune a (typically pretrained) model for per-frame segmentation.

    The input parameters are not mutated.  Before any update the segmentation
    bias is set from the background prior; with epochs=0 that is the only
    change.  Returns (params, loss curve) with an epoch-0 evaluation row.
    """
    if params.hyper.num_classes != dataset.num_classes:
        raise ValueError("model num_classes does not match the dataset")
    params = params.copy()
    apply_background_bias(params, cfg.loss.background_prior)
    spe = steps_per_epoch(dataset.videos, cfg.span, cfg.batch)

    def draw(g):
        if cfg.loss.rebalance == "resample":
            return resample_centers(dataset, cfg.span, g)
        return sample_clip(dataset, cfg.span, g)

    g_eval = stream(seed, "finetune_eval")
    eval_losses = []
    for _ in range(spe):
        clips = [draw(g_eval) for _ in range(cfg.batch)]
        loss, _, _ = _batch_seg_loss(params, clips, cfg.loss)
        eval_losses.append(loss)
    curve = [(0, float(np.mean(eval_losses)))]

    if cfg.epochs == 0:
        return params, curve

    opt = Optimizer(cfg.optimizer, params.tensors, total_steps=cfg.epochs * spe)
    g_clips = stream(seed, "finetune_clips")
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(spe):
            clips = [draw(g_clips) for _ in range(cfg.batch)]
            loss, d_logits, cache = _batch_seg_loss(params, clips, cfg.loss)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite finetuning loss at step {opt.step_count}"
                )
            grads, _ = _backward_batch(params, cache, d_logits, None)
            losses.append(loss)
            opt.step(params.tensors, grads)
        curve.append((epoch, float(np.mean(losses))))
        log.debug("finetune epoch %d: seg loss %.6f", epoch, curve[-1][1])
    return params, curve
