"""Synthetic long-form dataset generation and clip sampling.

Each class owns a fixed unit-norm signature vector.  A video is i.i.d.
Gaussian noise with the signatures of the active classes added on every frame
whose center falls inside one of their segments, so with zero noise the
per-frame labels are exactly linearly recoverable from the features.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    ActionSegment,
    AnnotatedVideo,
    Dataset,
    Interval,
    LabelMask,
    assign_frame_labels,
    load_annotations,
    save_annotations,
)
from .rng import stream

FEATURE_MAGIC = b"EGOF"
FEATURE_VERSION = 1

# Feature-file payload kinds (timeline files reuse the container, see featext).
KIND_FEATURES = 0
KIND_SCORES = 1


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic generator.

    The defaults are the benchmark configuration used across the package:
    ten classes with a mild long tail, well-separated segments, moderate
    noise.  ``signature_seed`` keys the class-signature draw separately from
    the per-dataset seed so that two datasets (e.g. train and held-out) can
    share classes while differing in videos.
    """

    num_videos: int = 10
    video_length_range: tuple[float, float] = (90.0, 120.0)
    fps: float = 4.0
    feature_dim: int = 16
    num_classes: int = 10
    class_frequency_exponent: float = 0.8
    segments_per_video: int = 8
    segment_length_range: tuple[float, float] = (3.0, 8.0)
    overlap_probability: float = 0.0
    min_gap: float = 6.0
    noise_sigma: float = 0.3
    signature_seed: int = 0

    def validate(self) -> None:
        if self.num_videos < 1:
            raise ValueError("num_videos must be >= 1")
        lo, hi = self.video_length_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"bad video_length_range: {self.video_length_range}")
        if self.fps <= 0.0:
            raise ValueError("fps must be positive")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.class_frequency_exponent < 0.0:
            raise ValueError("class_frequency_exponent must be >= 0")
        if self.segments_per_video < 0:
            raise ValueError("segments_per_video must be >= 0")
        slo, shi = self.segment_length_range
        if not (0.0 < slo <= shi):
            raise ValueError(f"bad segment_length_range: {self.segment_length_range}")
        if slo * self.fps < 2.0:
            raise ValueError(
                f"minimum segment length {slo}s is under 2 frames at fps={self.fps}; "
                "segments must span at least 2 frames"
            )
        if shi > lo:
            raise ValueError("segments longer than the shortest video are not placeable")
        if not (0.0 <= self.overlap_probability <= 1.0):
            raise ValueError("overlap_probability must lie in [0, 1]")
        if self.min_gap < 0.0:
            raise ValueError("min_gap must be >= 0")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class ClipSample:
    """A fixed-length training window cut from one video."""

    video_id: str
    clip: Interval
    frames: np.ndarray       # (T_span, D) float32 view into the video
    labels: LabelMask        # labels on the clip's frame grid


def class_signatures(feature_dim: int, num_classes: int, signature_seed: int) -> np.ndarray:
    """Unit-norm signature vectors, one row per class, (C, D) float64."""
    g = stream(signature_seed, "signatures")
    sigs = g.standard_normal((num_classes, feature_dim))
    norms = np.linalg.norm(sigs, axis=1, keepdims=True)
    return sigs / norms


def class_probabilities(num_classes: int, exponent: float) -> np.ndarray:
    """Power-law class frequencies: p(c) proportional to (c + 1) ** -exponent."""
    weights = (np.arange(num_classes, dtype=np.float64) + 1.0) ** (-exponent)
    return weights / weights.sum()


def _place_segment(
    g: np.random.Generator,
    length: float,
    duration: float,
    placed: list[Interval],
    overlap_probability: float,
    min_gap: float,
) -> Interval:
    """Draw one segment location.

    With probability ``overlap_probability`` (and at least one prior segment)
    the segment is forced to overlap an existing one; otherwise placement is
    rejection-sampled to keep at least ``min_gap`` seconds from every prior
    segment, falling back to the last candidate when the video is too crowded.
    """
    max_start = duration - length
    if max_start < 0.0:
        raise ValueError("segment longer than video")
    if placed and overlap_probability > 0.0 and g.random() < overlap_probability:
        other = placed[int(g.integers(len(placed)))]
        margin = 0.25 * min(length, other.duration)
        lo = max(0.0, other.start - length + margin)
        hi = min(max_start, other.end - margin)
        if hi > lo:
            start = g.uniform(lo, hi)
            return Interval(start, start + length)
        # no room to overlap this neighbour; fall through to free placement
    start = 0.0
    for _ in range(64):
        start = g.uniform(0.0, max_start) if max_start > 0.0 else 0.0
        ok = all(
            start >= p.end + min_gap or start + length + min_gap <= p.start
            for p in placed
        )
        if ok:
            break
    return Interval(start, start + length)


def generate_dataset(cfg: GenConfig, seed: int) -> Dataset:
    """Generate a fully annotated synthetic dataset, deterministically.

    The same (cfg, seed) always produces bit-identical features and identical
    annotations; each video consumes its own RNG streams, so the content of
    video v never depends on how many videos precede it.
    """
    cfg.validate()
    sigs = class_signatures(cfg.feature_dim, cfg.num_classes, cfg.signature_seed)
    probs = class_probabilities(cfg.num_classes, cfg.class_frequency_exponent)
    lo, hi = cfg.video_length_range
    slo, shi = cfg.segment_length_range
    videos = []
    for v in range(cfg.num_videos):
        layout = stream(seed, "video_layout", v)
        length = layout.uniform(lo, hi) if hi > lo else lo
        num_frames = int(round(length * cfg.fps))
        duration = num_frames / cfg.fps
        placed: list[Interval] = []
        segments: list[ActionSegment] = []
        for _ in range(cfg.segments_per_video):
            c = int(layout.choice(cfg.num_classes, p=probs))
            seg_len = layout.uniform(slo, shi) if shi > slo else slo
            seg_len = min(seg_len, duration)
            interval = _place_segment(
                layout, seg_len, duration, placed, cfg.overlap_probability, cfg.min_gap
            )
            placed.append(interval)
            segments.append(ActionSegment(class_id=c, interval=interval))
        labels = assign_frame_labels(segments, num_frames, Interval(0.0, duration), cfg.num_classes)
        noise = stream(seed, "video_noise", v).standard_normal((num_frames, cfg.feature_dim))
        frames64 = labels.values.astype(np.float64) @ sigs + cfg.noise_sigma * noise
        videos.append(
            AnnotatedVideo(
                video_id=f"video_{v:04d}",
                fps=cfg.fps,
                frames=frames64.astype(np.float32),
                segments=segments,
            )
        )
    classes = [f"class_{c:02d}" for c in range(cfg.num_classes)]
    return Dataset(classes=classes, videos=videos)


# ---------------------------------------------------------------------------
# Clip sampling
# ---------------------------------------------------------------------------

def span_frames(span: float, fps: float) -> int:
    """Frame count of a span at a given rate; must be at least one frame."""
    t = int(round(span * fps))
    if t < 1:
        raise ValueError(f"span {span}s is under one frame at fps={fps}")
    return t


def usable_positions(videos: list[AnnotatedVideo], span: float) -> list[int]:
    """Number of valid clip start frames per video (0 if too short)."""
    counts = []
    for v in videos:
        t_span = span_frames(span, v.fps)
        counts.append(max(v.num_frames - t_span + 1, 0))
    return counts


def steps_per_epoch(videos: list[AnnotatedVideo], span: float, batch: int) -> int:
    """One epoch covers every usable clip position once in expectation."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    total = sum(usable_positions(videos, span))
    if total == 0:
        raise ValueError(f"no video admits a {span}s clip")
    return math.ceil(total / batch)


def sample_clip(
    dataset: Dataset,
    span: float,
    rng: np.random.Generator,
) -> ClipSample:
    """Draw one training clip.

    The start position is uniform over the disjoint union of all valid
    (video, start frame) pairs, which makes the probability of picking a
    video exactly proportional to its usable length and the start uniform
    within the video.  Videos shorter than the span are never selected;
    a video exactly equal to the span contributes the single start 0.
    """
    counts = usable_positions(dataset.videos, span)
    total = sum(counts)
    if total == 0:
        raise ValueError(f"no video admits a {span}s clip")
    flat = int(rng.integers(total))
    for video, count in zip(dataset.videos, counts):
        if flat < count:
            start_frame = flat
            break
        flat -= count
    else:  # pragma: no cover - unreachable by construction
        raise AssertionError("flat index exceeded total")
    return _cut_clip(video, start_frame, span, dataset.num_classes)


def _cut_clip(
    video: AnnotatedVideo, start_frame: int, span: float, num_classes: int
) -> ClipSample:
    t_span = span_frames(span, video.fps)
    clip = Interval(start_frame / video.fps, (start_frame + t_span) / video.fps)
    frames = video.frames[start_frame : start_frame + t_span]
    labels = assign_frame_labels(video.segments, t_span, clip, num_classes)
    return ClipSample(video_id=video.video_id, clip=clip, frames=frames, labels=labels)


# ---------------------------------------------------------------------------
# Feature file I/O (binary, little-endian)
# ---------------------------------------------------------------------------

def write_features(path: str | Path, frames: np.ndarray) -> None:
    """Write a (T, D) float32 feature array to the binary feature format.

    Layout: magic "EGOF", u32 version, u32 T, u32 D, then T*D float32
    little-endian values in row-major order.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise ValueError(f"frames must be 2-D, got shape {frames.shape}")
    t, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, d))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    """Read a feature file back into a (T, D) float32 array."""
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"bad feature-file magic: {raw[:4]!r}")
    version, t, d = struct.unpack_from("<III", raw, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"unsupported feature-file version: {version}")
    expected = 16 + 4 * t * d
    if len(raw) != expected:
        raise ValueError(f"feature file truncated: {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", count=t * d, offset=16)
    return data.reshape(t, d).copy()


def save_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    """Persist a dataset as ann.json plus one feature file per video."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_annotations(out / "ann.json", dataset.classes, dataset.videos)
    for v in dataset.videos:
        write_features(out / f"{v.video_id}.egof", v.frames)


def load_dataset(data_dir: str | Path) -> Dataset:
    """Load a dataset saved by :func:`save_dataset`."""
    data = Path(data_dir)
    classes, annos = load_annotations(data / "ann.json")
    videos = []
    for a in annos:
        frames = read_features(data / f"{a.video_id}.egof")
        if frames.shape[0] != a.num_frames:
            raise ValueError(
                f"{a.video_id}: feature file has {frames.shape[0]} frames, "
                f"annotations say {a.num_frames}"
            )
        videos.append(
            AnnotatedVideo(
                video_id=a.video_id, fps=a.fps, frames=frames, segments=list(a.segments)
            )
        )
    return Dataset(classes=classes, videos=videos)
