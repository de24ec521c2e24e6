"""Shared fixtures.  The thread-pool caps must be set before numpy loads so
that the whole suite (including the end-to-end budget test) runs on at most
four threads."""

import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "4")

import numpy as np
import pytest

from longact.core import ActionSegment, AnnotatedVideo, Dataset, Interval
from longact.model import ModelHyper, init_params
from longact.rng import stream


def tiny_hyper(**overrides) -> ModelHyper:
    base = dict(feature_dim=5, hidden_dim=6, num_classes=3, num_blocks=2, kernel_width=3)
    base.update(overrides)
    return ModelHyper(**base)


@pytest.fixture
def tiny_params():
    hyper = tiny_hyper()
    return init_params(hyper, stream(0, "param_init"))


def build_video(video_id="vid", fps=4.0, num_frames=80, segments=(), feature_dim=5, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((num_frames, feature_dim)).astype(np.float32)
    segs = [ActionSegment(class_id=c, interval=Interval(s, e)) for c, s, e in segments]
    return AnnotatedVideo(video_id=video_id, fps=fps, frames=frames, segments=segs)


def build_dataset(num_classes=3, videos=None):
    if videos is None:
        videos = [
            build_video("vid_a", segments=[(0, 2.0, 6.0), (1, 10.0, 14.0)], seed=1),
            build_video("vid_b", segments=[(2, 5.0, 9.0)], seed=2),
        ]
    classes = [f"class_{c:02d}" for c in range(num_classes)]
    return Dataset(classes=classes, videos=list(videos))
