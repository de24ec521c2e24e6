"""Desk-scale temporal action detection on long-form feature sequences.

The package covers the full loop: synthetic long-video generation,
masked-autoencoder pretraining of a temporal convolutional encoder,
per-frame multi-label segmentation finetuning with imbalance handling,
timestamp-aligned sliding-window timeline extraction, lightweight temporal
detectors (scale-normalized blob detection and threshold merging), and a
tIoU-matched evaluation/diagnosis protocol with false-positive profiling
and sensitivity analysis.  Everything runs in numpy float64 with
counter-based RNG streams, so every stage is exactly reproducible.
"""

from .core import (
    ActionSegment,
    AnnotatedVideo,
    Dataset,
    Detection,
    Interval,
    LabelMask,
    VideoAnnotation,
    assign_frame_labels,
    frame_centers,
    load_annotations,
    save_annotations,
    tiou,
)
from .detect import (
    BlobConfig,
    blob_detect,
    load_detections,
    log_kernel,
    nms,
    recognize,
    save_detections,
    scale_space_responses,
    threshold_merge_detect,
)
from .evaldiag import (
    DEFAULT_TIOU_THRESHOLDS,
    EvalReport,
    SensitivityResult,
    average_map,
    average_precision,
    flatten_ground_truth,
    fp_profile,
    load_report,
    match_detections,
    save_report,
    sensitivity,
    top1_accuracy,
    video_map,
)
from .featext import (
    FeatureTimeline,
    extract_timeline,
    load_timeline,
    read_timeline_array,
    save_timeline,
    window_starts,
    write_timeline_array,
)
from .model import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ModelHyper,
    ModelParams,
    backward,
    checkpoint_load,
    checkpoint_save,
    finite_difference_gradients,
    forward,
    forward_detailed,
    gradient_max_rel_err,
    init_params,
)
from .optim import Optimizer, OptimizerConfig, lr_at
from .pipeline import (
    ABLATION_AXES,
    ConfigError,
    PipelineConfig,
    StageError,
    default_config,
    load_config,
    parse_config,
    run_ablation,
    run_pipeline,
)
from .pretrain import (
    MaskSpec,
    PretrainConfig,
    TrainingDivergedError,
    apply_mask_token,
    mae_loss,
    mask_frames,
    pretrain,
)
from .rng import PURPOSES, stream
from .segtrain import (
    REBALANCE_MODES,
    FinetuneConfig,
    SegLossConfig,
    finetune,
    init_background_bias,
    instance_weights,
    resample_centers,
    seg_loss,
)
from .synthgen import (
    ClipSample,
    GenConfig,
    class_signatures,
    generate_dataset,
    load_dataset,
    read_features,
    sample_clip,
    save_dataset,
    steps_per_epoch,
    write_features,
)

__version__ = "0.1.0"
