"""Atlas-conditioned single-channel volumetric segmentation.

One 3D U-Net, two heads: a fixed multi-channel baseline and a conditioned
variant whose single output channel is selected at run time by a downsampled
atlas image/mask pair injected at the bottleneck. Includes a deterministic
synthetic phantom generator, training/inference engines, and an evaluation
harness with paired statistics.
"""

from .conditioning import (
    Atlas,
    AtlasConditioner,
    ConditioningInput,
    ConditionSample,
    conditioning_from_mask,
    make_conditioning,
    sample_condition,
)
from .grids import (
    BinaryMask,
    ConstantVolumeWarning,
    GridMismatchError,
    ImageVolume,
    LabelMap,
    ProbMap,
    VocabularyError,
    binarize,
    crop_to,
    downsample,
    normalize_intensity,
    pad_to_multiple,
)
from .inference import (
    MemoryLedger,
    SegmentationResult,
    assemble,
    checkpoint_atlas,
    segment_all,
    segment_all_baseline,
    segment_case,
    segment_novel,
    segment_one,
)
from .metrics import PairedTestResult, dice, paired_t_test
from .model import (
    Checkpoint,
    ModelConfig,
    SegUNet,
    build_model,
    count_parameters,
    estimate_activation_memory,
    forward_baseline,
    forward_lcs,
    layer_plan,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .reports import DiceReport, DiceRow, paired_vectors, write_run_json
from .synth import (
    Cohort,
    PhantomConfig,
    Split,
    build_cohort,
    generate_case,
    load_dataset,
    make_splits,
    verify_hierarchy_exactness,
    write_dataset,
)
from .training import TrainConfig, TrainingDivergedError, soft_dice_loss, train, train_step
from .volume_io import (
    VolumeFormatError,
    load_labelmap,
    load_mask,
    load_volume,
    save_labelmap,
    save_mask,
    save_volume,
)

__version__ = "0.1.0"

__all__ = [
    "Atlas",
    "AtlasConditioner",
    "BinaryMask",
    "Checkpoint",
    "Cohort",
    "ConditionSample",
    "ConditioningInput",
    "ConstantVolumeWarning",
    "DiceReport",
    "DiceRow",
    "GridMismatchError",
    "ImageVolume",
    "LabelMap",
    "MemoryLedger",
    "ModelConfig",
    "PairedTestResult",
    "PhantomConfig",
    "ProbMap",
    "SegUNet",
    "SegmentationResult",
    "Split",
    "TrainConfig",
    "TrainingDivergedError",
    "VocabularyError",
    "VolumeFormatError",
    "assemble",
    "binarize",
    "build_cohort",
    "build_model",
    "checkpoint_atlas",
    "conditioning_from_mask",
    "count_parameters",
    "crop_to",
    "dice",
    "downsample",
    "estimate_activation_memory",
    "forward_baseline",
    "forward_lcs",
    "generate_case",
    "verify_hierarchy_exactness",
    "layer_plan",
    "load_checkpoint",
    "load_dataset",
    "load_labelmap",
    "load_mask",
    "load_volume",
    "make_conditioning",
    "make_splits",
    "model_from_checkpoint",
    "normalize_intensity",
    "pad_to_multiple",
    "paired_t_test",
    "paired_vectors",
    "sample_condition",
    "save_checkpoint",
    "save_labelmap",
    "save_mask",
    "save_volume",
    "segment_all",
    "segment_all_baseline",
    "segment_case",
    "segment_novel",
    "segment_one",
    "soft_dice_loss",
    "train",
    "train_step",
    "write_dataset",
    "write_run_json",
]
