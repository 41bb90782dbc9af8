"""Masked multi-scale feature reconstruction for visual anomaly detection.

A trainable vision transformer encodes only the visible patches of an
image; a parallel feature-pyramid decoder reconstructs the multi-scale
features of a frozen pre-trained CNN teacher from that partial view.  At
test time the full image runs through both branches and per-position
cosine disagreement between the two feature pyramids becomes the anomaly
heatmap.
"""

from ._version import __version__
from .backbones import (
    FrozenEncoder,
    FrozenEncoderConfig,
    MultiScaleFeatures,
    TokenEncoder,
    TokenEncoderConfig,
    build_frozen_encoder,
    extract_frozen_features,
    parameter_digest,
)
from .config import RunConfig, load_run_config
from .core import (
    AnomalyMap,
    MaskedReconstructionModel,
    anomaly_map,
    build_model,
    evaluate_manifest,
    infer_heatmap,
    load_checkpoint,
    multiscale_cosine_loss,
    save_checkpoint,
    train,
)
from .data import (
    ImageTensor,
    SampleRecord,
    ToyConfig,
    generate_toy_dataset,
    load_manifest,
    preprocess_image,
)
from .errors import (
    ConfigError,
    ManifestError,
    ShapeError,
    TrainingDiverged,
    UndefinedMetric,
    WeightsUnavailable,
)
from .fpn import FpnConfig, SimpleFeaturePyramid, fpn_decode
from .masking import (
    MaskSpec,
    PatchSequence,
    apply_unit_mask,
    assemble_full_grid,
    patchify,
    sample_mask_indices,
    unpatchify,
)
from .metrics import EvalReport, pixel_auroc, pro_score, sample_auroc

__all__ = [
    "AnomalyMap",
    "ConfigError",
    "EvalReport",
    "FpnConfig",
    "FrozenEncoder",
    "FrozenEncoderConfig",
    "ImageTensor",
    "ManifestError",
    "MaskSpec",
    "MaskedReconstructionModel",
    "MultiScaleFeatures",
    "PatchSequence",
    "RunConfig",
    "SampleRecord",
    "ShapeError",
    "SimpleFeaturePyramid",
    "TokenEncoder",
    "TokenEncoderConfig",
    "ToyConfig",
    "TrainingDiverged",
    "UndefinedMetric",
    "WeightsUnavailable",
    "__version__",
    "anomaly_map",
    "apply_unit_mask",
    "assemble_full_grid",
    "build_frozen_encoder",
    "build_model",
    "evaluate_manifest",
    "extract_frozen_features",
    "fpn_decode",
    "generate_toy_dataset",
    "infer_heatmap",
    "load_checkpoint",
    "load_manifest",
    "load_run_config",
    "multiscale_cosine_loss",
    "parameter_digest",
    "patchify",
    "pixel_auroc",
    "preprocess_image",
    "pro_score",
    "sample_auroc",
    "sample_mask_indices",
    "save_checkpoint",
    "train",
    "unpatchify",
]
