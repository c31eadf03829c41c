"""Streaming continual learning for object detection over feature maps.

Compressed-feature replay with a product quantizer, a fixed-capacity
replay buffer, streaming linear heads, and incremental-detection
evaluation, all driven from deterministic seeds.
"""

from .buffer import BufferEntry, Policy, ReplayBuffer, SampleResult, load_buffer, save_buffer
from .config import (
    BufferSettings,
    ConfigError,
    ExperimentConfig,
    HeadSettings,
    Learner,
    PqSettings,
    Seeds,
    config_from_dict,
    config_to_dict,
    load_config,
)
from .core import (
    BACKGROUND,
    BoundingBox,
    ClassSchedule,
    Detection,
    EmptyBoxError,
    FeatureMap,
    ImageAnnotation,
    LabeledBox,
    clip_box,
    iou,
    iou_matrix,
)
from .datagen import Dataset, SyntheticSpec, generate_dataset, load_dataset, write_dataset
from .driver import (
    ExperimentState,
    RunResult,
    StepRecord,
    StreamLog,
    audit_single_pass,
    base_initialize,
    evaluate_checkpoint,
    run_experiment,
    run_increment,
    stream_step,
)
from .evaluation import (
    EvalReport,
    average_precision,
    evaluate_detections,
    nms,
    omega_map,
    read_curve_alphas,
    write_curves,
)
from .fileio import (
    ParseError,
    read_annotations,
    read_feature,
    read_proposals,
    write_annotations,
    write_feature,
    write_proposals,
)
from .head import HeadParams, SgdState, add_class, forward, init_head, load_head, roi_pool, save_head
from .pq import (
    PQModel,
    PqCodeError,
    PqConfigError,
    QuantizedFeatureMap,
    decode,
    encode,
    load_pq,
    model_digest,
    quantization_mse,
    save_pq,
    subsample_locations,
    train_pq,
)
from .slda import (
    ModelEmptyError,
    SldaModel,
    StreamRegressModel,
    l2_normalize,
    load_slda_regress,
    regress_predict,
    regress_update,
    save_slda_regress,
    slda_detect,
    slda_fit,
    slda_predict,
    slda_scores,
)
from .targets import (
    DeltaOverflowError,
    ProposalSet,
    RoiTarget,
    decode_deltas,
    encode_deltas,
    label_proposals,
    sample_minibatch,
    sample_minibatch_indices,
)

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND",
    "BoundingBox",
    "BufferEntry",
    "BufferSettings",
    "ClassSchedule",
    "ConfigError",
    "Dataset",
    "DeltaOverflowError",
    "Detection",
    "EmptyBoxError",
    "EvalReport",
    "ExperimentConfig",
    "ExperimentState",
    "FeatureMap",
    "HeadParams",
    "HeadSettings",
    "ImageAnnotation",
    "LabeledBox",
    "Learner",
    "ModelEmptyError",
    "PQModel",
    "ParseError",
    "Policy",
    "PqCodeError",
    "PqConfigError",
    "PqSettings",
    "ProposalSet",
    "QuantizedFeatureMap",
    "ReplayBuffer",
    "RoiTarget",
    "RunResult",
    "SampleResult",
    "Seeds",
    "SgdState",
    "SldaModel",
    "StepRecord",
    "StreamLog",
    "StreamRegressModel",
    "SyntheticSpec",
    "add_class",
    "audit_single_pass",
    "average_precision",
    "base_initialize",
    "clip_box",
    "config_from_dict",
    "config_to_dict",
    "decode",
    "decode_deltas",
    "encode",
    "encode_deltas",
    "evaluate_checkpoint",
    "evaluate_detections",
    "forward",
    "generate_dataset",
    "init_head",
    "iou",
    "iou_matrix",
    "l2_normalize",
    "label_proposals",
    "load_buffer",
    "load_config",
    "load_dataset",
    "load_head",
    "load_pq",
    "load_slda_regress",
    "model_digest",
    "nms",
    "omega_map",
    "quantization_mse",
    "read_annotations",
    "read_curve_alphas",
    "read_feature",
    "read_proposals",
    "regress_predict",
    "regress_update",
    "roi_pool",
    "run_experiment",
    "run_increment",
    "sample_minibatch",
    "sample_minibatch_indices",
    "save_buffer",
    "save_head",
    "save_pq",
    "save_slda_regress",
    "slda_detect",
    "slda_fit",
    "slda_predict",
    "slda_scores",
    "stream_step",
    "subsample_locations",
    "train_pq",
    "write_annotations",
    "write_curves",
    "write_dataset",
    "write_feature",
    "write_proposals",
]
