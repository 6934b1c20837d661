"""Cascaded convolutional encoder-decoders with adversarial training for
binary organ segmentation of volumetric images, plus the matching evaluation
metrics, thresholded scoring, ranking, and best-variant selection."""

from .core import (
    LabelVolume,
    Modality,
    Organ,
    OrganModality,
    SliceSample,
    TrainingModality,
    ValidationError,
    Volume,
    validate_pair,
)
from .dataio import (
    AugmentParams,
    augment,
    build_samples,
    extract_slices,
    load_mask,
    load_volume,
    normalize_plane,
    replicate_channels,
    stack_predictions,
    write_mask,
    write_volume,
)
from .networks import NetworkSpec, SegGenerator, build_generator, forward_batch
from .cascade import (
    CascadeSpec,
    GeneratorCascade,
    build_cascade,
    cascade_forward,
    end_to_end_parameters,
    normalize_stage1,
    parameter_count,
)
from .adversarial import (
    AdversarialConfig,
    AdversarialTrainer,
    LossRecord,
    PatchDiscriminator,
    build_discriminator,
    dice_loss,
    discriminator_loss,
    generator_loss,
)
from .metrics import (
    EmptyMaskError,
    MetricReport,
    assd,
    border_voxels,
    dice_coeff,
    evaluate_case,
    largest_component,
    mssd,
    ravd,
)
from .scoring import (
    ScoreTable,
    aggregate,
    case_score,
    metric_score,
    rank,
    select_movpunet,
)
from .variants import VARIANTS, make_specs
from .weights import WeightArchive, load_pretrained_encoder

__version__ = "0.1.0"
