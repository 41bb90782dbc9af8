from .manifest import (
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    SampleRecord,
    load_manifest,
    write_manifest,
)
from .preprocess import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    ImageTensor,
    load_image,
    load_mask,
    preprocess_image,
)
from .toy import ToyConfig, generate_toy_dataset, render_toy_sample

__all__ = [
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "ImageTensor",
    "LABEL_ANOMALOUS",
    "LABEL_NORMAL",
    "SampleRecord",
    "ToyConfig",
    "generate_toy_dataset",
    "load_image",
    "load_manifest",
    "load_mask",
    "preprocess_image",
    "render_toy_sample",
    "write_manifest",
]
