"""Detection evaluation and error diagnosis.

The retrieval protocol: detections of one class are ranked by descending
score and greedily matched against that class's ground-truth segments in the
same video; a detection is a true positive iff its tIoU with a not yet
matched ground truth reaches the threshold alpha.  Average precision uses the
monotone precision envelope; mAP averages AP over the classes that have at
least one ground-truth instance; the headline number averages mAP over a grid
of tIoU thresholds.

Diagnosis splits every false positive into exactly one of four categories
(by its highest-tIoU ground truth in the same video, T below):

    background    T <  1e-5
    confusion     1e-5 <= T < alpha, label wrong
    localization  1e-5 <= T < alpha, label correct; also label-correct
                  duplicates with T >= alpha (a second detection of an
                  already matched ground truth)
    wrong_label   T >= alpha, label wrong

and measures how mAP varies across ground-truth buckets (length or instance
count quantiles).
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Detection, Interval, tiou

DEFAULT_TIOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
BACKGROUND_TIOU = 1e-5
FP_CATEGORIES = ("background", "confusion", "localization", "wrong_label")
SENSITIVITY_CHARACTERISTICS = ("length", "num_instances")


@dataclass(frozen=True)
class GtSegment:
    """One ground-truth instance with a stable global index."""

    video_id: str
    class_id: int
    interval: Interval
    index: int


def flatten_ground_truth(videos) -> list[GtSegment]:
    """Collect GtSegments from objects bearing .video_id and .segments."""
    out = []
    for video in videos:
        for seg in video.segments:
            out.append(
                GtSegment(
                    video_id=video.video_id,
                    class_id=seg.class_id,
                    interval=seg.interval,
                    index=len(out),
                )
            )
    return out


def _det_sort_key(d: Detection):
    return (-d.score, d.interval.start, d.interval.end, d.video_id)


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching outcome for one class at one threshold.

    ``dets`` is the class's detections in rank order (descending score, ties
    by earlier start); ``is_tp[i]`` tells whether dets[i] matched;
    ``matched_gt[i]`` is the matched GtSegment.index or -1.
    """

    dets: tuple[Detection, ...]
    is_tp: np.ndarray
    matched_gt: np.ndarray


def match_detections(
    dets: list[Detection],
    gts: list[GtSegment],
    class_id: int,
    alpha: float,
) -> MatchResult:
    """Greedily match one class's detections against its ground truths.

    Each ground truth is matched at most once.  Every detection picks the
    unmatched same-video ground truth with the highest tIoU (ties: lowest
    ground-truth index) and is a TP iff that tIoU >= alpha.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    cdets = sorted((d for d in dets if d.class_id == class_id), key=_det_sort_key)
    cgts = [g for g in gts if g.class_id == class_id]
    by_video: dict[str, list[GtSegment]] = {}
    for g in cgts:
        by_video.setdefault(g.video_id, []).append(g)
    taken: set[int] = set()
    is_tp = np.zeros(len(cdets), dtype=bool)
    matched = np.full(len(cdets), -1, dtype=np.int64)
    for i, d in enumerate(cdets):
        best_tiou, best_gt = 0.0, None
        for g in by_video.get(d.video_id, ()):
            if g.index in taken:
                continue
            t = tiou(d.interval, g.interval)
            if t > best_tiou or (t == best_tiou and best_gt is not None and g.index < best_gt.index):
                best_tiou, best_gt = t, g
        if best_gt is not None and best_tiou >= alpha:
            is_tp[i] = True
            matched[i] = best_gt.index
            taken.add(best_gt.index)
    return MatchResult(dets=tuple(cdets), is_tp=is_tp, matched_gt=matched)


def average_precision(flags, num_gt: int) -> float | None:
    """AP of a ranked TP/FP sequence against ``num_gt`` ground truths.

    Precision is taken through its monotone envelope (each recall level gets
    the best precision achievable at that recall or beyond).  Returns None
    when there is nothing to rank and nothing to find (no detections, no
    ground truth); 0.0 when detections exist but no ground truth does, or
    ground truth exists and nothing was detected.
    """
    flags = np.asarray(flags, dtype=bool)
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0:
        return 0.0 if flags.size else None
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * envelope))


@dataclass
class EvalReport:
    """Detection metrics plus optional recognition and diagnosis blocks."""

    thresholds: tuple[float, ...]
    per_class_ap: dict[float, dict[int, float]]
    map_per_threshold: dict[float, float]
    average_map: float
    recognition_video_map: float | None = None
    fp_profile: dict[float, dict[str, int]] | None = None
    sensitivity: dict[str, "SensitivityResult"] | None = None

    def to_dict(self) -> dict:
        out = {
            "version": 1,
            "thresholds": list(self.thresholds),
            "per_class_ap": {
                _fkey(a): {str(c): ap for c, ap in sorted(row.items())}
                for a, row in sorted(self.per_class_ap.items())
            },
            "map_per_threshold": {
                _fkey(a): v for a, v in sorted(self.map_per_threshold.items())
            },
            "average_map": self.average_map,
            "recognition": (
                None
                if self.recognition_video_map is None
                else {"video_map": self.recognition_video_map}
            ),
            "fp_profile": (
                None
                if self.fp_profile is None
                else {
                    _fkey(a): {k: int(v) for k, v in sorted(row.items())}
                    for a, row in sorted(self.fp_profile.items())
                }
            ),
            "sensitivity": (
                None
                if self.sensitivity is None
                else {name: s.to_dict() for name, s in sorted(self.sensitivity.items())}
            ),
        }
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        if payload.get("version") != 1:
            raise ValueError(f"unsupported report version: {payload.get('version')!r}")
        sens = payload.get("sensitivity")
        return cls(
            thresholds=tuple(payload["thresholds"]),
            per_class_ap={
                float(a): {int(c): ap for c, ap in row.items()}
                for a, row in payload["per_class_ap"].items()
            },
            map_per_threshold={
                float(a): v for a, v in payload["map_per_threshold"].items()
            },
            average_map=payload["average_map"],
            recognition_video_map=(
                None
                if payload.get("recognition") is None
                else payload["recognition"]["video_map"]
            ),
            fp_profile=(
                None
                if payload.get("fp_profile") is None
                else {
                    float(a): dict(row) for a, row in payload["fp_profile"].items()
                }
            ),
            sensitivity=(
                None
                if sens is None
                else {name: SensitivityResult.from_dict(s) for name, s in sens.items()}
            ),
        )


def _fkey(a: float) -> str:
    return f"{a:g}"


def average_map(
    dets: list[Detection],
    gts: list[GtSegment],
    thresholds: tuple[float, ...] = DEFAULT_TIOU_THRESHOLDS,
) -> EvalReport:
    """Per-threshold mAP over classes with ground truth, plus their average."""
    if not gts:
        raise ValueError("cannot evaluate with an empty ground truth")
    if not thresholds:
        raise ValueError("need at least one tIoU threshold")
    classes = sorted({g.class_id for g in gts})
    num_gt = Counter(g.class_id for g in gts)
    per_class_ap: dict[float, dict[int, float]] = {}
    map_per_threshold: dict[float, float] = {}
    for alpha in thresholds:
        row: dict[int, float] = {}
        for c in classes:
            result = match_detections(dets, gts, c, alpha)
            ap = average_precision(result.is_tp, num_gt[c])
            row[c] = ap if ap is not None else 0.0
        per_class_ap[alpha] = row
        map_per_threshold[alpha] = float(np.mean([row[c] for c in classes]))
    return EvalReport(
        thresholds=tuple(thresholds),
        per_class_ap=per_class_ap,
        map_per_threshold=map_per_threshold,
        average_map=float(np.mean([map_per_threshold[a] for a in thresholds])),
    )


# ---------------------------------------------------------------------------
# Recognition metrics
# ---------------------------------------------------------------------------

def video_map(scores: np.ndarray, labels: np.ndarray) -> float:
    """Video-level retrieval mAP.

    ``scores`` is (V, C); ``labels`` is binary (V, C) marking which classes
    occur in each video.  Per class with at least one positive, videos are
    ranked by descending score (ties: lower video index) and AP is computed
    over the binary relevance sequence; the result is the mean over those
    classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError("scores and labels must share a (V, C) shape")
    aps = []
    for c in range(scores.shape[1]):
        pos = int(labels[:, c].sum())
        if pos == 0:
            continue
        order = np.lexsort((np.arange(scores.shape[0]), -scores[:, c]))
        flags = labels[order, c].astype(bool)
        aps.append(average_precision(flags, pos))
    if not aps:
        raise ValueError("no class has a positive video")
    return float(np.mean(aps))


def top1_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax score hits the integer label."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("scores must be a non-empty (M, C) matrix")
    if labels.shape != (scores.shape[0],):
        raise ValueError("labels must be (M,)")
    return float(np.mean(np.argmax(scores, axis=1) == labels))


# ---------------------------------------------------------------------------
# False-positive profiling
# ---------------------------------------------------------------------------

def fp_profile(
    dets: list[Detection],
    gts: list[GtSegment],
    thresholds: tuple[float, ...] = DEFAULT_TIOU_THRESHOLDS,
) -> dict[float, dict[str, int]]:
    """Categorize every false positive at every threshold.

    The four categories partition the FPs exactly: every false positive lands
    in exactly one, so TP + category counts = total detections.
    """
    by_video: dict[str, list[GtSegment]] = {}
    for g in gts:
        by_video.setdefault(g.video_id, []).append(g)
    det_classes = sorted({d.class_id for d in dets})
    out: dict[float, dict[str, int]] = {}
    for alpha in thresholds:
        counts = {cat: 0 for cat in FP_CATEGORIES}
        for c in det_classes:
            result = match_detections(dets, gts, c, alpha)
            for d, tp in zip(result.dets, result.is_tp):
                if tp:
                    continue
                counts[_fp_category(d, by_video.get(d.video_id, ()), alpha)] += 1
        out[alpha] = counts
    return out


def _fp_category(d: Detection, video_gts, alpha: float) -> str:
    best_t, best_g = 0.0, None
    for g in video_gts:
        t = tiou(d.interval, g.interval)
        if best_g is None or t > best_t or (t == best_t and g.index < best_g.index):
            best_t, best_g = t, g
    if best_g is None or best_t < BACKGROUND_TIOU:
        return "background"
    correct = best_g.class_id == d.class_id
    if best_t >= alpha:
        return "localization" if correct else "wrong_label"
    return "localization" if correct else "confusion"


# ---------------------------------------------------------------------------
# Sensitivity analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensitivityResult:
    """Per-bucket average mAP for one ground-truth characteristic."""

    characteristic: str
    boundaries: tuple[float, ...]     # inner quantile edges (num_buckets - 1)
    bucket_map: tuple[float, ...]     # average mAP per bucket
    bucket_gt_counts: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "characteristic": self.characteristic,
            "boundaries": list(self.boundaries),
            "bucket_map": list(self.bucket_map),
            "bucket_gt_counts": list(self.bucket_gt_counts),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SensitivityResult":
        return cls(
            characteristic=payload["characteristic"],
            boundaries=tuple(payload["boundaries"]),
            bucket_map=tuple(payload["bucket_map"]),
            bucket_gt_counts=tuple(payload["bucket_gt_counts"]),
        )


def gt_characteristic(gts: list[GtSegment], characteristic: str) -> np.ndarray:
    """Per-GT value of the bucketing characteristic."""
    if characteristic == "length":
        return np.array([g.interval.duration for g in gts], dtype=np.float64)
    if characteristic == "num_instances":
        group = Counter((g.video_id, g.class_id) for g in gts)
        return np.array(
            [group[(g.video_id, g.class_id)] for g in gts], dtype=np.float64
        )
    raise ValueError(
        f"characteristic must be one of {SENSITIVITY_CHARACTERISTICS}, got {characteristic!r}"
    )


def sensitivity(
    dets: list[Detection],
    gts: list[GtSegment],
    characteristic: str,
    num_buckets: int = 5,
    thresholds: tuple[float, ...] = DEFAULT_TIOU_THRESHOLDS,
) -> SensitivityResult:
    """Average mAP restricted to ground-truth quantile buckets.

    Ground truths are split into ``num_buckets`` equal-percentile buckets of
    the characteristic.  Bucket edges are closed on both sides, so a ground
    truth sitting exactly on a boundary belongs to both adjacent buckets (in
    the degenerate all-equal case every ground truth is in every bucket and
    all buckets report the same value).  For each bucket and threshold,
    detections matched to an out-of-bucket ground truth are removed and mAP is
    computed against the bucket's ground truths over the classes present in
    the bucket; the bucket's value averages over the thresholds.
    """
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    if len(gts) < num_buckets:
        raise ValueError(
            f"need at least {num_buckets} ground truths for {num_buckets} buckets, "
            f"got {len(gts)}"
        )
    values = gt_characteristic(gts, characteristic)
    quantiles = np.percentile(
        values, [100.0 * b / num_buckets for b in range(1, num_buckets)]
    )
    edges = np.concatenate(([-np.inf], quantiles, [np.inf]))
    buckets = [
        [g for g, v in zip(gts, values) if edges[b] <= v <= edges[b + 1]]
        for b in range(num_buckets)
    ]
    # global matching per threshold to find which GT each detection explains
    det_classes = sorted({d.class_id for d in dets})
    matched_at: dict[float, dict[int, int]] = {}
    for alpha in thresholds:
        assign: dict[int, int] = {}
        for c in det_classes:
            result = match_detections(dets, gts, c, alpha)
            for d, gi in zip(result.dets, result.matched_gt):
                if gi >= 0:
                    assign[id(d)] = int(gi)
        matched_at[alpha] = assign
    bucket_map = []
    for b in range(num_buckets):
        in_bucket = {g.index for g in buckets[b]}
        classes_b = sorted({g.class_id for g in buckets[b]})
        num_gt_b = Counter(g.class_id for g in buckets[b])
        per_alpha = []
        for alpha in thresholds:
            assign = matched_at[alpha]
            kept = [
                d
                for d in dets
                if assign.get(id(d), -1) < 0 or assign[id(d)] in in_bucket
            ]
            if classes_b:
                aps = []
                for c in classes_b:
                    result = match_detections(kept, buckets[b], c, alpha)
                    ap = average_precision(result.is_tp, num_gt_b[c])
                    aps.append(ap if ap is not None else 0.0)
                per_alpha.append(float(np.mean(aps)))
            else:
                per_alpha.append(0.0)
        bucket_map.append(float(np.mean(per_alpha)))
    return SensitivityResult(
        characteristic=characteristic,
        boundaries=tuple(float(q) for q in quantiles),
        bucket_map=tuple(bucket_map),
        bucket_gt_counts=tuple(len(b) for b in buckets),
    )


# ---------------------------------------------------------------------------
# Report artifacts
# ---------------------------------------------------------------------------

def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def write_map_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tiou_threshold", "map"])
        for a in report.thresholds:
            writer.writerow([f"{a:g}", f"{report.map_per_threshold[a]:.10g}"])
        writer.writerow(["average", f"{report.average_map:.10g}"])


def write_sensitivity_csv(results: dict[str, SensitivityResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["characteristic", "bucket", "average_map", "num_gt"])
        for name in sorted(results):
            res = results[name]
            for b, (m, n) in enumerate(zip(res.bucket_map, res.bucket_gt_counts)):
                writer.writerow([name, b, f"{m:.10g}", n])


def write_fp_profile_csv(profile: dict[float, dict[str, int]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tiou_threshold"] + list(FP_CATEGORIES))
        for alpha in sorted(profile):
            row = profile[alpha]
            writer.writerow([f"{alpha:g}"] + [row.get(cat, 0) for cat in FP_CATEGORIES])
