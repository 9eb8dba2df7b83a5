"""Desk-scale channel-adaptive hyperspectral backbone pre-training stack."""

from .cube import (
    HyperCube,
    LabelMap,
    RgbImage,
    SynthSpec,
    center_crop_to_patch,
    read_cube,
    read_labels,
    rgb_projection,
    sequence_partition,
    synth_scene,
    write_cube,
    write_labels,
)
from .masks import FormatError, InstanceMask, MaskSet, iou, read_masks, write_masks
from .numerics import AdamW, OptimState, Tensor, adam_step, backward, grad_check
from .objectives import (
    DistillBatch,
    LossReport,
    LossWeights,
    dice_loss,
    distill_loss,
    focal_loss,
    mse_loss,
    seg_loss,
    total_loss,
)
from .pipeline import (
    Checkpoint,
    MetricsReport,
    Model,
    TrainConfig,
    adapt_head,
    evaluate_seg,
    load_checkpoint,
    metrics_from_confusion,
    pretrain,
    save_checkpoint,
)
from .pseudolabel import (
    FusionConfig,
    PseudoTarget,
    SequenceMemory,
    decompose,
    generate_target,
    nms_fuse,
    oracle_segment_image,
    source_material,
    source_rgb,
    source_sequence,
)
from .spectral_embed import TokenGrid, WavelengthDictionary, embed, wavelength_index

__version__ = "0.1.0"
