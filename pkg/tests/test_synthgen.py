"""Synthetic generator: signatures, placement, clip sampling, file formats."""

import numpy as np
import pytest
from scipy import stats

from longact.core import Interval, assign_frame_labels
from longact.rng import stream
from longact.synthgen import (
    FEATURE_MAGIC,
    GenConfig,
    class_probabilities,
    class_signatures,
    generate_dataset,
    load_dataset,
    read_features,
    sample_clip,
    save_dataset,
    span_frames,
    steps_per_epoch,
    usable_positions,
    write_features,
)

from conftest import build_video


SMALL = GenConfig(
    num_videos=4,
    video_length_range=(40.0, 60.0),
    segments_per_video=4,
    min_gap=4.0,
)


def test_class_signatures_unit_norm_and_keyed_by_signature_seed():
    sigs = class_signatures(16, 10, signature_seed=0)
    assert sigs.shape == (10, 16)
    np.testing.assert_allclose(np.linalg.norm(sigs, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(sigs, class_signatures(16, 10, signature_seed=0))
    assert not np.array_equal(sigs, class_signatures(16, 10, signature_seed=1))


def test_class_probabilities_power_law():
    probs = class_probabilities(10, 0.8)
    weights = (np.arange(10) + 1.0) ** -0.8
    np.testing.assert_allclose(probs, weights / weights.sum(), atol=1e-15)
    assert probs.sum() == pytest.approx(1.0)
    assert (np.diff(probs) < 0).all()


def test_generate_dataset_shapes_and_ranges():
    ds = generate_dataset(SMALL, 3)
    assert len(ds.videos) == 4
    assert ds.classes == [f"class_{c:02d}" for c in range(SMALL.num_classes)]
    for v in ds.videos:
        assert SMALL.video_length_range[0] <= v.duration <= SMALL.video_length_range[1]
        assert v.frames.dtype == np.float32
        assert v.feature_dim == SMALL.feature_dim
        assert len(v.segments) == SMALL.segments_per_video
        for seg in v.segments:
            lo, hi = SMALL.segment_length_range
            assert lo - 1e-9 <= seg.interval.duration <= hi + 1e-9
            assert 0.0 <= seg.interval.start
            assert seg.interval.end <= v.duration + 1e-9
    assert [v.video_id for v in ds.videos] == [f"video_{i:04d}" for i in range(4)]


def test_generate_dataset_deterministic_and_seed_sensitive():
    a = generate_dataset(SMALL, 5)
    b = generate_dataset(SMALL, 5)
    c = generate_dataset(SMALL, 6)
    for va, vb in zip(a.videos, b.videos):
        np.testing.assert_array_equal(va.frames, vb.frames)
        assert [(s.class_id, s.interval.start) for s in va.segments] == [
            (s.class_id, s.interval.start) for s in vb.segments
        ]
    assert any(
        not np.array_equal(va.frames, vc.frames) for va, vc in zip(a.videos, c.videos)
    )


def test_min_gap_is_respected_without_overlap():
    # Geometry chosen so rejection sampling always has room (worst case
    # 3*8 + 2*4 = 32 s in a >= 50 s video); the crowded-video fallback that
    # may relax the gap is deliberately out of reach here.
    cfg = GenConfig(
        num_videos=6,
        video_length_range=(50.0, 60.0),
        segments_per_video=3,
        min_gap=4.0,
    )
    ds = generate_dataset(cfg, 1)
    for v in ds.videos:
        ordered = sorted(v.segments, key=lambda s: s.interval.start)
        for prev, nxt in zip(ordered, ordered[1:]):
            gap = nxt.interval.start - prev.interval.end
            assert gap >= cfg.min_gap - 1e-9


def test_noiseless_features_are_signature_sums():
    cfg = GenConfig(
        num_videos=2,
        video_length_range=(30.0, 40.0),
        segments_per_video=3,
        noise_sigma=0.0,
        min_gap=2.0,
    )
    ds = generate_dataset(cfg, 2)
    sigs = class_signatures(cfg.feature_dim, cfg.num_classes, cfg.signature_seed)
    for v in ds.videos:
        labels = assign_frame_labels(
            v.segments, v.num_frames, Interval(0.0, v.duration), cfg.num_classes
        )
        expected = (labels.values.astype(np.float64) @ sigs).astype(np.float32)
        np.testing.assert_array_equal(v.frames, expected)


def test_class_frequency_follows_power_law():
    cfg = GenConfig(
        num_videos=40,
        video_length_range=(60.0, 80.0),
        segments_per_video=6,
        num_classes=5,
        min_gap=2.0,
    )
    ds = generate_dataset(cfg, 9)
    counts = np.zeros(5)
    for v in ds.videos:
        for s in v.segments:
            counts[s.class_id] += 1
    expected = class_probabilities(5, cfg.class_frequency_exponent) * counts.sum()
    result = stats.chisquare(counts, expected)
    assert result.pvalue > 1e-4


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(num_videos=0).validate()
    with pytest.raises(ValueError):
        GenConfig(video_length_range=(50.0, 40.0)).validate()
    with pytest.raises(ValueError):
        # longest segment exceeds the shortest video
        GenConfig(video_length_range=(5.0, 10.0), segment_length_range=(3.0, 8.0)).validate()
    with pytest.raises(ValueError):
        GenConfig(noise_sigma=-0.1).validate()


# ---------------------------------------------------------------------------
# Clip sampling
# ---------------------------------------------------------------------------

def test_span_frames_rounding():
    assert span_frames(8.0, 4.0) == 32
    assert span_frames(2.1, 4.0) == 8  # round(8.4)
    with pytest.raises(ValueError):
        span_frames(0.1, 4.0)  # under one frame


def test_usable_positions_and_steps_per_epoch_oracle():
    videos = [build_video(num_frames=80, fps=4.0), build_video("v2", num_frames=40, fps=4.0)]
    # span 8 s @ 4 fps = 32 frames -> 80-32+1=49 and 40-32+1=9 positions
    assert usable_positions(videos, 8.0) == [49, 9]
    assert steps_per_epoch(videos, 8.0, batch=32) == 2  # ceil(58/32)
    assert steps_per_epoch(videos, 8.0, batch=58) == 1
    with pytest.raises(ValueError):
        steps_per_epoch([build_video(num_frames=4)], 8.0, batch=32)


def test_sample_clip_uniform_over_positions():
    videos = [
        build_video("long", num_frames=12, fps=1.0, feature_dim=5),
        build_video("short", num_frames=4, fps=1.0, feature_dim=5),
    ]
    from longact.core import Dataset

    ds = Dataset(classes=["c0"], videos=videos)
    # span 4 s @ 1 fps = 4 frames -> 9 + 1 = 10 equally likely (video, start) pairs
    rng = np.random.default_rng(0)
    counts = np.zeros(10)
    for _ in range(5000):
        clip = sample_clip(ds, 4.0, rng)
        if clip.video_id == "long":
            counts[int(clip.clip.start)] += 1
        else:
            counts[9] += 1
    result = stats.chisquare(counts)
    assert result.pvalue > 1e-4


def test_sample_clip_fields_consistent():
    videos = [build_video("v", num_frames=20, fps=4.0, segments=[(0, 1.0, 3.0)])]
    from longact.core import Dataset

    ds = Dataset(classes=["c0"], videos=videos)
    rng = np.random.default_rng(1)
    clip = sample_clip(ds, 2.0, rng)
    assert clip.frames.shape == (8, 5)
    assert clip.labels.values.shape == (8, 1)
    assert clip.clip.duration == pytest.approx(2.0)
    labels = assign_frame_labels(videos[0].segments, 20, Interval(0.0, 5.0), 1)
    start_frame = int(round(clip.clip.start * 4.0))
    np.testing.assert_array_equal(
        clip.labels.values, labels.values[start_frame : start_frame + 8]
    )


# ---------------------------------------------------------------------------
# Feature files and dataset round trip
# ---------------------------------------------------------------------------

def test_feature_file_round_trip(tmp_path):
    frames = np.random.default_rng(0).standard_normal((17, 6)).astype(np.float32)
    path = tmp_path / "x.egof"
    write_features(path, frames)
    np.testing.assert_array_equal(read_features(path), frames)


def test_feature_file_error_paths(tmp_path):
    frames = np.zeros((4, 3), dtype=np.float32)
    path = tmp_path / "x.egof"
    write_features(path, frames)
    raw = path.read_bytes()

    bad_magic = tmp_path / "bad_magic.egof"
    bad_magic.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        read_features(bad_magic)

    bad_version = tmp_path / "bad_version.egof"
    bad_version.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ValueError, match="version"):
        read_features(bad_version)

    truncated = tmp_path / "trunc.egof"
    truncated.write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncat"):
        read_features(truncated)


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(SMALL, 7)
    save_dataset(ds, tmp_path / "data")
    loaded = load_dataset(tmp_path / "data")
    assert loaded.classes == ds.classes
    for a, b in zip(loaded.videos, ds.videos):
        assert a.video_id == b.video_id
        np.testing.assert_array_equal(a.frames, b.frames)
        assert len(a.segments) == len(b.segments)
        for sa, sb in zip(a.segments, b.segments):
            assert sa.class_id == sb.class_id
            assert sa.interval.start == sb.interval.start
            assert sa.interval.end == sb.interval.end
