"""Masked-reconstruction pretraining.

A large fraction of each clip's frames (default 90%) is hidden: the masked
rows are replaced by the learned mask token before the encoder, and the
reconstruction head is trained to regress the original rows.  Loss and
gradients live only on masked rows; visible rows contribute nothing, and the
encoder output at visible rows is bit-exactly independent of the target
values at masked rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset
from .model import (
    ModelHyper,
    ModelParams,
    _backward_batch,
    _forward_batch,
    init_params,
)
from .optim import Optimizer, OptimizerConfig
from .rng import stream
from .synthgen import sample_clip, span_frames, steps_per_epoch

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message names the global step."""


@dataclass(frozen=True)
class MaskSpec:
    """Which rows of a T-frame clip are masked.

    ``masked`` is sorted, unique, within range, and its size is exactly
    round(ratio * length).
    """

    length: int
    ratio: float
    masked: np.ndarray

    def __post_init__(self) -> None:
        masked = np.asarray(self.masked, dtype=np.int64)
        if masked.ndim != 1:
            raise ValueError("masked indices must be 1-D")
        if masked.size and (masked[0] < 0 or masked[-1] >= self.length):
            raise ValueError("masked indices out of range")
        if np.any(np.diff(masked) <= 0):
            raise ValueError("masked indices must be sorted and unique")
        if masked.size != int(round(self.ratio * self.length)):
            raise ValueError(
                f"mask size {masked.size} != round({self.ratio} * {self.length})"
            )
        object.__setattr__(self, "masked", masked)

    @property
    def visible(self) -> np.ndarray:
        out = np.setdiff1d(np.arange(self.length, dtype=np.int64), self.masked)
        return out


def mask_frames(length: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Sample a uniform random mask of exactly round(ratio * length) rows.

    Every frame index is equally likely to be masked.  Degenerate masks are
    rejected: the count must leave at least one masked and one visible row.
    """
    if length < 2:
        raise ValueError("clips must have at least 2 frames to mask")
    count = int(round(ratio * length))
    if count < 1 or count >= length:
        raise ValueError(
            f"mask ratio {ratio} on {length} frames gives {count} masked rows; "
            "need 1 <= masked < length"
        )
    masked = np.sort(rng.choice(length, size=count, replace=False))
    return MaskSpec(length=length, ratio=ratio, masked=masked)


def apply_mask_token(
    frames: np.ndarray, mask: MaskSpec, token: np.ndarray
) -> np.ndarray:
    """Return a float64 copy of ``frames`` with masked rows set to ``token``."""
    x = np.asarray(frames, dtype=np.float64).copy()
    x[mask.masked] = token
    return x


def mae_loss(
    recon: np.ndarray, target: np.ndarray, mask: MaskSpec
) -> tuple[float, np.ndarray]:
    """Mean squared error over masked rows only.

    Returns (loss, d_loss/d_recon); the gradient is exactly zero at every
    visible row.  The mean runs over masked_rows * feature_dim entries.
    """
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape or recon.ndim != 2:
        raise ValueError(f"shape mismatch: recon {recon.shape}, target {target.shape}")
    if recon.shape[0] != mask.length:
        raise ValueError("mask length does not match the clip")
    rows = mask.masked
    diff = recon[rows] - target[rows]
    denom = float(diff.size)
    loss = float(np.sum(diff * diff) / denom)
    grad = np.zeros_like(recon)
    grad[rows] = 2.0 * diff / denom
    return loss, grad


@dataclass(frozen=True)
class PretrainConfig:
    span: float = 8.0
    epochs: int = 20
    batch: int = 32
    mask_ratio: float = 0.9
    per_patch_norm: bool = False   # normalize each masked target row to zero mean/unit var
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=0.3))

    def __post_init__(self) -> None:
        if self.span <= 0.0:
            raise ValueError("span must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie strictly inside (0, 1)")


def _normalized_target(frames64: np.ndarray, rows: np.ndarray) -> np.ndarray:
    target = frames64.copy()
    sub = target[rows]
    mu = sub.mean(axis=1, keepdims=True)
    sd = np.sqrt(sub.var(axis=1, keepdims=True) + 1e-6)
    target[rows] = (sub - mu) / sd
    return target


def _masked_batch_loss(
    params: ModelParams,
    clips: list[np.ndarray],
    masks: list[MaskSpec],
    per_patch_norm: bool,
):
    """Forward a masked batch; returns (mean loss, d_recon batch, inputs)."""
    token = params.tensors["mask_token"]
    frames64 = np.stack([np.asarray(c, dtype=np.float64) for c in clips])
    x = frames64.copy()
    for b, mask in enumerate(masks):
        x[b, mask.masked] = token
    _, _, recon, cache = _forward_batch(params, x)
    batch = len(clips)
    losses = np.empty(batch)
    d_recon = np.zeros_like(recon)
    for b, mask in enumerate(masks):
        target = (
            _normalized_target(frames64[b], mask.masked)
            if per_patch_norm
            else frames64[b]
        )
        losses[b], grad = mae_loss(recon[b], target, mask)
        d_recon[b] = grad / batch
    return float(losses.mean()), d_recon, cache, masks


def pretrain(
    dataset: Dataset,
    cfg: PretrainConfig,
    seed: int,
    hyper: ModelHyper | None = None,
) -> tuple[ModelParams, list[tuple[int, float]]]:
    """Train from scratch; returns (params, loss curve).

    The curve has one (epoch, mean masked MSE) row per epoch, with row 0 a
    no-update evaluation pass at initialization.  Deterministic: identical
    (dataset, cfg, seed) produce bit-identical parameters.
    """
    if hyper is None:
        hyper = ModelHyper(
            feature_dim=dataset.videos[0].feature_dim, num_classes=dataset.num_classes
        )
    if hyper.feature_dim != dataset.videos[0].feature_dim:
        raise ValueError("model feature_dim does not match the dataset")
    t_span = span_frames(cfg.span, dataset.videos[0].fps)
    spe = steps_per_epoch(dataset.videos, cfg.span, cfg.batch)
    params = init_params(hyper, stream(seed, "param_init"))
    curve: list[tuple[int, float]] = []

    def draw_batch(g_clips, g_mask):
        clips = [sample_clip(dataset, cfg.span, g_clips) for _ in range(cfg.batch)]
        masks = [mask_frames(t_span, cfg.mask_ratio, g_mask) for _ in range(cfg.batch)]
        return [c.frames for c in clips], masks

    g_eval = stream(seed, "pretrain_eval")
    eval_losses = []
    for _ in range(spe):
        frames, masks = draw_batch(g_eval, g_eval)
        loss, _, _, _ = _masked_batch_loss(params, frames, masks, cfg.per_patch_norm)
        eval_losses.append(loss)
    curve.append((0, float(np.mean(eval_losses))))

    if cfg.epochs == 0:
        return params, curve

    opt = Optimizer(cfg.optimizer, params.tensors, total_steps=cfg.epochs * spe)
    g_clips = stream(seed, "pretrain_clips")
    g_mask = stream(seed, "pretrain_mask")
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(spe):
            frames, masks = draw_batch(g_clips, g_mask)
            loss, d_recon, cache, masks = _masked_batch_loss(
                params, frames, masks, cfg.per_patch_norm
            )
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite pretraining loss at step {opt.step_count}"
                )
            grads, d_input = _backward_batch(params, cache, None, d_recon)
            token_grad = np.zeros_like(params.tensors["mask_token"])
            for b, mask in enumerate(masks):
                token_grad += d_input[b, mask.masked].sum(axis=0)
            grads["mask_token"] = token_grad
            losses.append(loss)
            opt.step(params.tensors, grads)
        curve.append((epoch, float(np.mean(losses))))
        log.debug("pretrain epoch %d: masked mse %.6f", epoch, curve[-1][1])
    return params, curve


def write_loss_curve(path, curve: list[tuple[int, float]], column: str) -> None:
    """Persist a loss curve as a two-column CSV."""
    lines = ["epoch," + column]
    lines += [f"{epoch},{value:.10g}" for epoch, value in curve]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
