"""Core domain types for long-form temporal action detection.

Time is measured in seconds throughout.  All temporal extents are half-open
intervals [start, end).  A video of T frames at ``fps`` frames per second
covers [0, T / fps); frame t occupies [t / fps, (t + 1) / fps) and its center
sits at (t + 0.5) / fps.  Per-frame score/logit matrices are plain float
ndarrays of shape (T, C), row t = frame t, column c = class c.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ANNOTATION_VERSION = 1


@dataclass(frozen=True)
class Interval:
    """Half-open time span [start, end) in seconds; end > start >= 0."""

    start: float
    end: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError("interval endpoints must be finite")
        if self.start < 0.0:
            raise ValueError(f"interval start must be >= 0, got {self.start}")
        if not self.end > self.start:
            raise ValueError(f"interval must satisfy end > start, got [{self.start}, {self.end})")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def contains(self, t: float) -> bool:
        """Membership of a time point under the half-open convention."""
        return self.start <= t < self.end

    def clipped(self, lo: float, hi: float) -> "Interval":
        """Intersection with [lo, hi]; raises if the result is empty."""
        return Interval(max(self.start, lo), min(self.end, hi))


def tiou(a: Interval, b: Interval) -> float:
    """Temporal intersection over union of two intervals.

    Symmetric, 1.0 iff identical, 0.0 iff disjoint (touching endpoints count
    as disjoint: intersection of half-open intervals has zero length).
    """
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0.0:
        return 0.0
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


@dataclass(frozen=True)
class ActionSegment:
    """One annotated action instance: a class id plus its temporal extent."""

    class_id: int
    interval: Interval

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")


@dataclass
class AnnotatedVideo:
    """A feature sequence with its action annotations.

    ``frames`` is a (num_frames, feature_dim) float32 array; every segment
    interval must lie inside [0, num_frames / fps).
    """

    video_id: str
    fps: float
    frames: np.ndarray
    segments: list[ActionSegment] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.fps <= 0.0 or not math.isfinite(self.fps):
            raise ValueError(f"fps must be positive and finite, got {self.fps}")
        frames = np.asarray(self.frames)
        if frames.ndim != 2:
            raise ValueError(f"frames must be 2-D (T, D), got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("video must contain at least one frame")
        self.frames = frames
        for seg in self.segments:
            if seg.interval.end > self.duration + 1e-9:
                raise ValueError(
                    f"segment [{seg.interval.start}, {seg.interval.end}) exceeds "
                    f"video duration {self.duration} in {self.video_id!r}"
                )

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.frames.shape[1])

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps


@dataclass(frozen=True)
class VideoAnnotation:
    """Annotation-only view of a video (no features), as stored on disk."""

    video_id: str
    fps: float
    num_frames: int
    segments: tuple[ActionSegment, ...]

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps


@dataclass
class LabelMask:
    """Per-frame multi-label targets.

    values:      (T, C) uint8, 1 where the frame center lies inside a segment
                 of that class.
    instance_id: (T, C) int32, -1 on background cells, otherwise the index of
                 the covering segment (earliest start, then lowest index).
    """

    values: np.ndarray
    instance_id: np.ndarray

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.uint8)
        inst = np.ascontiguousarray(self.instance_id, dtype=np.int32)
        if values.shape != inst.shape or values.ndim != 2:
            raise ValueError(
                f"values {values.shape} and instance_id {inst.shape} must share a 2-D shape"
            )
        if not np.all((values == 0) | (values == 1)):
            raise ValueError("label values must be binary")
        if not np.array_equal(values == 1, inst >= 0):
            raise ValueError("instance_id must be >= 0 exactly on positive cells")
        self.values = values
        self.instance_id = inst

    @classmethod
    def from_values(cls, values: np.ndarray) -> "LabelMask":
        """Build a mask from bare binary values, fabricating instance ids 0."""
        values = np.asarray(values, dtype=np.uint8)
        inst = np.where(values == 1, 0, -1).astype(np.int32)
        return cls(values=values, instance_id=inst)

    @property
    def num_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class Detection:
    """A scored temporal prediction for one class in one video."""

    video_id: str
    class_id: int
    interval: Interval
    score: float

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not (0.0 <= self.score <= 1.0) or not math.isfinite(self.score):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass
class Dataset:
    """A set of annotated videos plus the shared class-name table."""

    classes: list[str]
    videos: list[AnnotatedVideo]

    def __post_init__(self) -> None:
        c = self.num_classes
        for v in self.videos:
            for seg in v.segments:
                if seg.class_id >= c:
                    raise ValueError(
                        f"segment class {seg.class_id} out of range for {c} classes"
                    )

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def frame_centers(num_frames: int, clip: Interval) -> np.ndarray:
    """Centers (seconds) of ``num_frames`` equal frames tiling ``clip``."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    step = clip.duration / num_frames
    return clip.start + (np.arange(num_frames, dtype=np.float64) + 0.5) * step


def assign_frame_labels(
    segments: list[ActionSegment],
    num_frames: int,
    clip: Interval,
    num_classes: int,
) -> LabelMask:
    """Rasterize segment annotations onto a frame grid.

    A frame is positive for class c iff its center lies inside some class-c
    segment (half-open membership).  When several same-class segments cover a
    frame center, the instance id is the covering segment with the earliest
    start, ties broken by lowest list index.  The result does not depend on
    the order of ``segments`` beyond that tie-break.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    centers = frame_centers(num_frames, clip)
    values = np.zeros((num_frames, num_classes), dtype=np.uint8)
    inst = np.full((num_frames, num_classes), -1, dtype=np.int32)
    order = sorted(range(len(segments)), key=lambda i: (segments[i].interval.start, i))
    for idx in order:
        seg = segments[idx]
        if seg.class_id >= num_classes:
            raise ValueError(
                f"segment class {seg.class_id} out of range for {num_classes} classes"
            )
        hit = (centers >= seg.interval.start) & (centers < seg.interval.end)
        free = hit & (inst[:, seg.class_id] == -1)
        inst[free, seg.class_id] = idx
        values[free, seg.class_id] = 1
    return LabelMask(values=values, instance_id=inst)


# ---------------------------------------------------------------------------
# Annotation file I/O (versioned JSON)
# ---------------------------------------------------------------------------

def save_annotations(path: str | Path, classes: list[str], videos) -> None:
    """Write the annotation JSON for a list of (Annotated)videos."""
    payload = {
        "version": ANNOTATION_VERSION,
        "classes": list(classes),
        "videos": [
            {
                "id": v.video_id,
                "fps": v.fps,
                "num_frames": int(v.num_frames),
                "segments": [
                    {
                        "class": seg.class_id,
                        "start": seg.interval.start,
                        "end": seg.interval.end,
                    }
                    for seg in v.segments
                ],
            }
            for v in videos
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_annotations(path: str | Path) -> tuple[list[str], list[VideoAnnotation]]:
    """Read an annotation JSON file; rejects unknown versions."""
    payload = json.loads(Path(path).read_text())
    version = payload.get("version")
    if version != ANNOTATION_VERSION:
        raise ValueError(f"unsupported annotation version: {version!r}")
    classes = list(payload["classes"])
    videos = []
    for entry in payload["videos"]:
        segments = tuple(
            ActionSegment(class_id=int(s["class"]), interval=Interval(float(s["start"]), float(s["end"])))
            for s in entry["segments"]
        )
        videos.append(
            VideoAnnotation(
                video_id=str(entry["id"]),
                fps=float(entry["fps"]),
                num_frames=int(entry["num_frames"]),
                segments=segments,
            )
        )
    return classes, videos
