"""Detection metrics, FP diagnosis, and sensitivity bucketing."""

import csv

import numpy as np
import pytest

from longact.core import Detection, Interval, tiou
from longact.evaldiag import (
    DEFAULT_TIOU_THRESHOLDS,
    FP_CATEGORIES,
    EvalReport,
    GtSegment,
    average_map,
    average_precision,
    flatten_ground_truth,
    fp_profile,
    gt_characteristic,
    load_report,
    match_detections,
    save_report,
    sensitivity,
    top1_accuracy,
    video_map,
    write_fp_profile_csv,
    write_map_csv,
    write_sensitivity_csv,
)

from conftest import build_video


def det(score, start, end, cls=0, vid="v"):
    return Detection(video_id=vid, class_id=cls, interval=Interval(start, end), score=score)


def gt(start, end, cls=0, vid="v", index=0):
    return GtSegment(video_id=vid, class_id=cls, interval=Interval(start, end), index=index)


# ---------------------------------------------------------------------------
# Greedy matching
# ---------------------------------------------------------------------------

def test_match_greedy_rank_order_wins():
    # The higher-scored detection claims the ground truth even though the
    # lower-scored one localizes it better; the better one becomes a FP.
    gts = [gt(10.0, 20.0)]
    dets = [det(0.8, 10.0, 20.0), det(0.9, 12.0, 22.0)]
    result = match_detections(dets, gts, 0, 0.5)
    assert [d.score for d in result.dets] == [0.9, 0.8]
    np.testing.assert_array_equal(result.is_tp, [True, False])
    np.testing.assert_array_equal(result.matched_gt, [0, -1])


def test_match_each_gt_used_once():
    gts = [gt(0.0, 10.0, index=0), gt(20.0, 30.0, index=1)]
    dets = [det(0.9, 0.0, 10.0), det(0.8, 1.0, 11.0), det(0.7, 20.0, 30.0)]
    result = match_detections(dets, gts, 0, 0.5)
    np.testing.assert_array_equal(result.is_tp, [True, False, True])
    np.testing.assert_array_equal(result.matched_gt, [0, -1, 1])


def test_match_respects_video_and_class():
    gts = [gt(0.0, 10.0, cls=0, vid="a", index=0), gt(0.0, 10.0, cls=0, vid="b", index=1)]
    dets = [det(0.9, 0.0, 10.0, vid="a"), det(0.8, 0.0, 10.0, cls=1, vid="b")]
    result = match_detections(dets, gts, 0, 0.5)
    assert len(result.dets) == 1  # the class-1 detection is excluded
    np.testing.assert_array_equal(result.matched_gt, [0])
    # a detection in video "b" cannot claim video "a"'s ground truth
    result_b = match_detections([det(0.9, 0.0, 10.0, vid="b")], gts[:1], 0, 0.5)
    np.testing.assert_array_equal(result_b.is_tp, [False])


def test_match_alpha_validation():
    with pytest.raises(ValueError, match="alpha"):
        match_detections([], [], 0, 0.0)
    with pytest.raises(ValueError, match="alpha"):
        match_detections([], [], 0, 1.1)


def _brute_force_match(dets, gts, class_id, alpha):
    cdets = sorted(
        (d for d in dets if d.class_id == class_id),
        key=lambda d: (-d.score, d.interval.start, d.interval.end, d.video_id),
    )
    taken, flags, matched = set(), [], []
    for d in cdets:
        candidates = [
            (tiou(d.interval, g.interval), g.index)
            for g in gts
            if g.class_id == class_id and g.video_id == d.video_id and g.index not in taken
        ]
        best = max(candidates, key=lambda x: (x[0], -x[1]), default=(0.0, -1))
        if best[0] >= alpha and best[0] > 0.0:
            taken.add(best[1])
            flags.append(True)
            matched.append(best[1])
        else:
            flags.append(False)
            matched.append(-1)
    return flags, matched


def test_match_against_brute_force_random():
    rng = np.random.default_rng(0)
    for trial in range(200):
        gts = []
        for i in range(rng.integers(1, 5)):
            s = float(rng.uniform(0, 80))
            gts.append(
                gt(s, s + float(rng.uniform(1, 15)), vid=str(rng.integers(2)), index=i)
            )
        dets = []
        for _ in range(rng.integers(0, 9)):
            s = float(rng.uniform(0, 80))
            dets.append(
                det(
                    float(rng.integers(1, 1000)) / 1000.0,
                    s,
                    s + float(rng.uniform(1, 15)),
                    vid=str(rng.integers(2)),
                )
            )
        alpha = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
        result = match_detections(dets, gts, 0, alpha)
        flags, matched = _brute_force_match(dets, gts, 0, alpha)
        np.testing.assert_array_equal(result.is_tp, flags)
        np.testing.assert_array_equal(result.matched_gt, matched)


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------

def test_average_precision_hand_oracles():
    assert average_precision([True], 1) == 1.0
    assert average_precision([False, True], 1) == 0.5
    assert average_precision([True, False], 1) == 1.0
    assert average_precision([True, False, True], 2) == pytest.approx(5.0 / 6.0)
    assert average_precision([False, False], 3) == 0.0


def test_average_precision_edge_cases():
    assert average_precision([], 0) is None
    assert average_precision([True], 0) == 0.0
    assert average_precision([], 2) == 0.0
    with pytest.raises(ValueError):
        average_precision([True], -1)


def _ap_oracle(flags, num_gt):
    precs, tp, fp = [], 0, 0
    for f in flags:
        tp, fp = tp + bool(f), fp + (not f)
        precs.append(tp / (tp + fp))
    env = precs[:]
    for i in reversed(range(len(env) - 1)):
        env[i] = max(env[i], env[i + 1])
    ap, prev, tp = 0.0, 0.0, 0
    for i, f in enumerate(flags):
        if f:
            tp += 1
            recall = tp / num_gt
            ap += (recall - prev) * env[i]
            prev = recall
    return ap


def test_average_precision_against_envelope_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        flags = rng.random(n) < 0.5
        num_gt = int(rng.integers(max(1, flags.sum()), flags.sum() + 5))
        assert average_precision(flags, num_gt) == pytest.approx(
            _ap_oracle(list(flags), num_gt), abs=1e-12
        )


# ---------------------------------------------------------------------------
# Detection mAP
# ---------------------------------------------------------------------------

def test_average_map_small_instance():
    gts = [
        gt(10.0, 20.0, cls=0, index=0),
        gt(40.0, 50.0, cls=0, index=1),
        gt(60.0, 70.0, cls=1, index=2),
    ]
    dets = [
        det(0.9, 10.0, 20.0, cls=0),   # TP at any alpha
        det(0.8, 41.0, 51.0, cls=0),   # tIoU 9/11: TP at 0.5, 0.8
        det(0.7, 90.0, 95.0, cls=0),   # background FP
        det(0.6, 62.0, 68.0, cls=1),   # tIoU 6/10: TP at 0.5 only
    ]
    report = average_map(dets, gts, thresholds=(0.5, 0.9))
    # alpha 0.5: class0 flags [T,T,F] num_gt 2 -> AP 1; class1 [T] -> AP 1
    assert report.per_class_ap[0.5] == {0: 1.0, 1: 1.0}
    assert report.map_per_threshold[0.5] == 1.0
    # alpha 0.9: class0 flags [T,F,F] -> AP 0.5; class1 [F] -> AP 0
    assert report.per_class_ap[0.9] == {0: 0.5, 1: 0.0}
    assert report.map_per_threshold[0.9] == 0.25
    assert report.average_map == pytest.approx((1.0 + 0.25) / 2.0)


def test_average_map_ignores_classes_without_gt():
    gts = [gt(10.0, 20.0, cls=0, index=0)]
    dets = [det(0.9, 10.0, 20.0, cls=0), det(0.8, 10.0, 20.0, cls=7)]
    report = average_map(dets, gts, thresholds=(0.5,))
    assert set(report.per_class_ap[0.5]) == {0}
    assert report.average_map == 1.0


def test_average_map_validation():
    with pytest.raises(ValueError, match="ground truth"):
        average_map([], [], thresholds=(0.5,))
    with pytest.raises(ValueError, match="threshold"):
        average_map([], [gt(0.0, 1.0)], thresholds=())


def test_flatten_ground_truth_indexing():
    videos = [
        build_video("a", segments=[(0, 2.0, 6.0), (1, 10.0, 14.0)]),
        build_video("b", segments=[(2, 5.0, 9.0)]),
    ]
    gts = flatten_ground_truth(videos)
    assert [g.index for g in gts] == [0, 1, 2]
    assert [g.video_id for g in gts] == ["a", "a", "b"]
    assert gts[2].interval == Interval(5.0, 9.0)


# ---------------------------------------------------------------------------
# Recognition metrics
# ---------------------------------------------------------------------------

def test_video_map_hand_oracle():
    scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.3]])
    labels = np.array([[1, 1], [0, 0], [1, 0]])
    # class 0: rank v0(T), v2(T), v1(F) -> AP 1; class 1: rank v1(F), v2(F),
    # v0(T) -> AP 1/3
    assert video_map(scores, labels) == pytest.approx((1.0 + 1.0 / 3.0) / 2.0)


def test_video_map_tie_prefers_lower_video_index():
    scores = np.array([[0.5], [0.5]])
    assert video_map(scores, np.array([[0], [1]])) == 0.5
    assert video_map(scores, np.array([[1], [0]])) == 1.0


def test_video_map_validation():
    with pytest.raises(ValueError, match="shape"):
        video_map(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="positive"):
        video_map(np.zeros((2, 2)), np.zeros((2, 2)))


def test_top1_accuracy_oracle():
    scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    labels = np.array([0, 1, 1, 1])
    assert top1_accuracy(scores, labels) == 0.75
    with pytest.raises(ValueError):
        top1_accuracy(np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        top1_accuracy(scores, labels[:2])


# ---------------------------------------------------------------------------
# FP profiling
# ---------------------------------------------------------------------------

def _fp_fixture():
    gts = [gt(10.0, 20.0, cls=0, index=0), gt(30.0, 40.0, cls=1, index=1)]
    dets = [
        det(0.9, 10.0, 20.0, cls=0),  # TP
        det(0.8, 11.0, 21.0, cls=0),  # duplicate of gt0: localization
        det(0.7, 30.0, 40.0, cls=0),  # exact hit on a wrong class: wrong_label
        det(0.6, 38.0, 44.0, cls=0),  # weak overlap, wrong class: confusion
        det(0.5, 21.0, 27.0, cls=0),  # no overlap at all: background
        det(0.4, 36.0, 46.0, cls=1),  # weak overlap, right class: localization
    ]
    return dets, gts


def test_fp_profile_categories_hand_oracle():
    dets, gts = _fp_fixture()
    profile = fp_profile(dets, gts, thresholds=(0.5, 0.2))
    assert profile[0.5] == {
        "background": 1,
        "confusion": 1,
        "localization": 2,
        "wrong_label": 1,
    }
    # at alpha 0.2 the class-1 detection (tIoU 0.25) becomes a TP
    assert profile[0.2] == {
        "background": 1,
        "confusion": 1,
        "localization": 1,
        "wrong_label": 1,
    }


def test_fp_profile_partitions_all_detections():
    rng = np.random.default_rng(2)
    gts, dets = [], []
    for i in range(50):
        vid = str(rng.integers(4))
        s = float(rng.uniform(0, 100))
        gts.append(gt(s, s + float(rng.uniform(1, 12)), cls=int(rng.integers(3)), vid=vid, index=i))
    for _ in range(120):
        s = float(rng.uniform(0, 100))
        dets.append(
            det(
                float(rng.integers(1, 1000)) / 1000.0,
                s,
                s + float(rng.uniform(1, 12)),
                cls=int(rng.integers(3)),
                vid=str(rng.integers(4)),
            )
        )
    thresholds = (0.1, 0.2, 0.3, 0.4, 0.5)
    profile = fp_profile(dets, gts, thresholds=thresholds)
    for alpha in thresholds:
        tp_total = sum(
            int(match_detections(dets, gts, c, alpha).is_tp.sum())
            for c in {d.class_id for d in dets}
        )
        assert set(profile[alpha]) == set(FP_CATEGORIES)
        assert tp_total + sum(profile[alpha].values()) == len(dets)


# ---------------------------------------------------------------------------
# Sensitivity buckets
# ---------------------------------------------------------------------------

def test_gt_characteristic_values():
    gts = [
        gt(0.0, 2.0, cls=0, vid="a", index=0),
        gt(5.0, 10.0, cls=0, vid="a", index=1),
        gt(0.0, 3.0, cls=1, vid="a", index=2),
        gt(0.0, 4.0, cls=0, vid="b", index=3),
    ]
    np.testing.assert_array_equal(gt_characteristic(gts, "length"), [2.0, 5.0, 3.0, 4.0])
    np.testing.assert_array_equal(gt_characteristic(gts, "num_instances"), [2, 2, 1, 1])
    with pytest.raises(ValueError, match="characteristic"):
        gt_characteristic(gts, "size")


def test_sensitivity_degenerate_equal_lengths():
    # All ground truths identical in length: every bucket holds all of them
    # and perfect detections give every bucket exactly 1.0.
    gts = [gt(10.0 * i, 10.0 * i + 5.0, index=i) for i in range(6)]
    dets = [det(0.9 - 0.01 * i, g.interval.start, g.interval.end) for i, g in enumerate(gts)]
    res = sensitivity(dets, gts, "length", num_buckets=3)
    assert res.bucket_gt_counts == (6, 6, 6)
    assert res.bucket_map == (1.0, 1.0, 1.0)
    assert res.boundaries == (5.0, 5.0)


def test_sensitivity_separates_short_and_long():
    gts = []
    for i in range(3):  # short instances, missed
        gts.append(gt(30.0 * i, 30.0 * i + 1.0, index=i))
    for i in range(3):  # long instances, found
        gts.append(gt(30.0 * i + 10.0, 30.0 * i + 20.0, index=3 + i))
    dets = [det(0.9, g.interval.start, g.interval.end) for g in gts[3:]]
    res = sensitivity(dets, gts, "length", num_buckets=2)
    assert res.bucket_gt_counts == (3, 3)
    assert res.bucket_map == (0.0, 1.0)


def test_sensitivity_removes_out_of_bucket_matches():
    # A detection explaining a long instance must not pollute the short
    # bucket as a false positive there.
    gts = [gt(0.0, 1.0, index=0), gt(10.0, 20.0, index=1)]
    dets = [
        det(0.9, 10.0, 20.0),  # matches the long gt
        det(0.5, 0.0, 1.0),    # matches the short gt
    ]
    res = sensitivity(dets, gts, "length", num_buckets=2)
    # the short bucket sees only the short detection: AP 1 despite the
    # higher-ranked long detection existing globally
    assert res.bucket_map == (1.0, 1.0)


def test_sensitivity_validation():
    gts = [gt(0.0, 1.0, index=0)]
    with pytest.raises(ValueError, match="num_buckets"):
        sensitivity([], gts, "length", num_buckets=0)
    with pytest.raises(ValueError, match="at least"):
        sensitivity([], gts, "length", num_buckets=2)


# ---------------------------------------------------------------------------
# Report artifacts
# ---------------------------------------------------------------------------

def _full_report():
    dets, gts = _fp_fixture()
    report = average_map(dets, gts, thresholds=(0.2, 0.5))
    report.recognition_video_map = 0.75
    report.fp_profile = fp_profile(dets, gts, thresholds=(0.2, 0.5))
    report.sensitivity = {
        "length": sensitivity(dets, gts, "length", num_buckets=2, thresholds=(0.2, 0.5))
    }
    return report


def test_report_roundtrip(tmp_path):
    report = _full_report()
    path = tmp_path / "report.json"
    save_report(report, path)
    back = load_report(path)
    assert back.thresholds == report.thresholds
    assert back.per_class_ap == report.per_class_ap
    assert back.map_per_threshold == report.map_per_threshold
    assert back.average_map == report.average_map
    assert back.recognition_video_map == report.recognition_video_map
    assert back.fp_profile == report.fp_profile
    assert back.sensitivity == report.sensitivity


def test_report_version_check():
    with pytest.raises(ValueError, match="version"):
        EvalReport.from_dict({"version": 2})


def test_map_csv_contents(tmp_path):
    report = _full_report()
    path = tmp_path / "map.csv"
    write_map_csv(report, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["tiou_threshold", "map"]
    assert [r[0] for r in rows[1:]] == ["0.2", "0.5", "average"]
    assert float(rows[-1][1]) == pytest.approx(report.average_map)


def test_fp_profile_csv_contents(tmp_path):
    dets, gts = _fp_fixture()
    profile = fp_profile(dets, gts, thresholds=(0.5, 0.2))
    path = tmp_path / "fp.csv"
    write_fp_profile_csv(profile, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["tiou_threshold"] + list(FP_CATEGORIES)
    assert rows[1][0] == "0.2" and rows[2][0] == "0.5"
    assert [int(x) for x in rows[2][1:]] == [1, 1, 2, 1]


def test_sensitivity_csv_contents(tmp_path):
    gts = [gt(10.0 * i, 10.0 * i + 5.0, index=i) for i in range(6)]
    dets = [det(0.9, g.interval.start, g.interval.end) for g in gts]
    results = {"length": sensitivity(dets, gts, "length", num_buckets=2)}
    path = tmp_path / "sens.csv"
    write_sensitivity_csv(results, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["characteristic", "bucket", "average_map", "num_gt"]
    assert rows[1] == ["length", "0", "1", "6"]
    assert rows[2] == ["length", "1", "1", "6"]
