"""Sliding-window feature/score timeline extraction.

The finetuned model only sees fixed-length clips; long videos are covered by
sliding a window of ``span`` seconds with a stride of ``window_stride``
seconds (plus one final right-aligned window so the tail is always covered).
Every window's per-frame outputs are stamped onto the video's global frame
grid by frame index, and overlapping windows are averaged per frame:
features as raw hidden activations, class scores after the sigmoid.

The result is one row per video frame, so the output timeline stride is
exactly 1/fps seconds regardless of the window stride.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import AnnotatedVideo
from .model import ModelParams, forward_detailed
from .synthgen import FEATURE_MAGIC, KIND_FEATURES, KIND_SCORES, span_frames

TIMELINE_VERSION = 1


@dataclass(frozen=True)
class FeatureTimeline:
    """Per-frame pooled features and class scores for one whole video.

    ``stride`` is the spacing of consecutive rows in seconds (= 1/fps); row i
    covers [i * stride, (i+1) * stride) with its timestamp at the center.
    Scores are post-sigmoid, so every entry lies in [0, 1].
    """

    video_id: str
    stride: float
    features: np.ndarray   # (N, H * concat_last_k) float64
    scores: np.ndarray     # (N, C) float64

    def __post_init__(self) -> None:
        if self.stride <= 0.0:
            raise ValueError("stride must be positive")
        if self.features.ndim != 2 or self.scores.ndim != 2:
            raise ValueError("features and scores must be 2-D")
        if self.features.shape[0] != self.scores.shape[0]:
            raise ValueError("features and scores must cover the same frames")
        if np.any(self.scores < 0.0) or np.any(self.scores > 1.0):
            raise ValueError("scores must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return int(self.scores.shape[0])

    @property
    def duration(self) -> float:
        return self.num_frames * self.stride


def window_starts(num_frames: int, t_span: int, stride_frames: int) -> list[int]:
    """Window start frames: a regular grid plus a final right-aligned window.

    Guarantees every frame is covered by at least one window and the last
    window ends exactly at the final frame.
    """
    if t_span > num_frames:
        raise ValueError(f"video has {num_frames} frames, window needs {t_span}")
    starts = list(range(0, num_frames - t_span + 1, stride_frames))
    if starts[-1] != num_frames - t_span:
        starts.append(num_frames - t_span)
    return starts


def extract_timeline(
    params: ModelParams,
    video: AnnotatedVideo,
    span: float,
    window_stride: float,
    concat_last_k: int = 1,
) -> FeatureTimeline:
    """Extract the pooled per-frame timeline for one video.

    ``window_stride`` must be positive, at most ``span``, and divide the
    span's frame count exactly, so the regular window grid lands on frame
    boundaries.  ``concat_last_k`` concatenates the outputs of the last k
    blocks per frame (k=1 means the final hidden state only).
    """
    if window_stride <= 0.0 or window_stride > span:
        raise ValueError("window_stride must lie in (0, span]")
    t_span = span_frames(span, video.fps)
    stride_frames = int(round(window_stride * video.fps))
    if stride_frames < 1 or t_span % stride_frames != 0:
        raise ValueError(
            f"window_stride {window_stride}s ({stride_frames} frames) must divide "
            f"the span's {t_span} frames"
        )
    k = concat_last_k
    if not 1 <= k <= params.hyper.num_blocks:
        raise ValueError(
            f"concat_last_k must lie in [1, {params.hyper.num_blocks}], got {k}"
        )
    n = video.num_frames
    feat_dim = params.hyper.hidden_dim * k
    feat_sum = np.zeros((n, feat_dim))
    score_sum = np.zeros((n, params.hyper.num_classes))
    count = np.zeros(n)
    for start in window_starts(n, t_span, stride_frames):
        out = forward_detailed(params, video.frames[start : start + t_span])
        hidden = np.concatenate(out.block_hidden[-k:], axis=1)
        rows = slice(start, start + t_span)
        feat_sum[rows] += hidden
        score_sum[rows] += expit(out.logits)
        count[rows] += 1.0
    if np.any(count == 0):  # pragma: no cover - excluded by window_starts
        raise AssertionError("window grid left uncovered frames")
    return FeatureTimeline(
        video_id=video.video_id,
        stride=1.0 / video.fps,
        features=feat_sum / count[:, None],
        scores=score_sum / count[:, None],
    )


# ---------------------------------------------------------------------------
# Timeline file I/O: feature-file container plus a kind tag and the stride
# ---------------------------------------------------------------------------

def write_timeline_array(
    path: str | Path, values: np.ndarray, stride: float, kind: int
) -> None:
    """Write one timeline array.

    Layout: magic "EGOF", u32 version, u32 N, u32 D, u32 kind (0 features /
    1 scores), f64 stride seconds, float32 LE row-major data.
    """
    if kind not in (KIND_FEATURES, KIND_SCORES):
        raise ValueError(f"unknown timeline kind: {kind}")
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError("timeline values must be 2-D")
    n, d = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIIId", TIMELINE_VERSION, n, d, kind, stride))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_timeline_array(path: str | Path) -> tuple[np.ndarray, float, int]:
    """Read a timeline array; returns (values float32, stride, kind)."""
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"bad timeline magic: {raw[:4]!r}")
    version, n, d, kind = struct.unpack_from("<IIII", raw, 4)
    if version != TIMELINE_VERSION:
        raise ValueError(f"unsupported timeline version: {version}")
    (stride,) = struct.unpack_from("<d", raw, 20)
    expected = 28 + 4 * n * d
    if len(raw) != expected:
        raise ValueError(f"timeline file truncated: {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype="<f4", count=n * d, offset=28).reshape(n, d)
    return values.copy(), stride, kind


def save_timeline(timeline: FeatureTimeline, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_timeline_array(
        out / f"{timeline.video_id}.features.bin",
        timeline.features,
        timeline.stride,
        KIND_FEATURES,
    )
    write_timeline_array(
        out / f"{timeline.video_id}.scores.bin",
        timeline.scores,
        timeline.stride,
        KIND_SCORES,
    )


def load_timeline(timelines_dir: str | Path, video_id: str) -> FeatureTimeline:
    base = Path(timelines_dir)
    features, stride_f, kind_f = read_timeline_array(base / f"{video_id}.features.bin")
    scores, stride_s, kind_s = read_timeline_array(base / f"{video_id}.scores.bin")
    if kind_f != KIND_FEATURES or kind_s != KIND_SCORES:
        raise ValueError(f"timeline kind tags are swapped for {video_id!r}")
    if stride_f != stride_s:
        raise ValueError(f"feature/score strides differ for {video_id!r}")
    return FeatureTimeline(
        video_id=video_id,
        stride=stride_f,
        features=features.astype(np.float64),
        scores=np.clip(scores.astype(np.float64), 0.0, 1.0),
    )
