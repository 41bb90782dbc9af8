"""Image decoding, resizing/cropping, and channel normalization.

The default normalization statistics are those of the frozen teacher's
pre-training corpus; the teacher's features are only meaningful under its
own training-time normalization, so the same statistics are applied to both
branches and echoed into checkpoint metadata.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..errors import ConfigError, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ImageTensor:
    """Normalized (3, h, w) image plus the statistics used to normalize it."""

    data: torch.Tensor
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ShapeError(f"expected (3, h, w), got {tuple(self.data.shape)}")
        _, h, w = self.data.shape
        if h % 4 != 0 or w % 4 != 0:
            raise ShapeError(f"image sides must be divisible by 4, got {h}x{w}")
        if not torch.isfinite(self.data).all():
            raise ShapeError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def load_image(path: str | Path) -> Image.Image:
    return Image.open(path)


def _to_unit_array(raw) -> np.ndarray:
    """Coerce PIL/ndarray input to float32 (h, w, 3) in [0, 1]."""
    if isinstance(raw, Image.Image):
        if raw.mode in ("L", "I", "I;16", "F"):
            warnings.warn("grayscale input replicated to 3 channels", stacklevel=3)
        raw = np.asarray(raw.convert("RGB"))
    arr = np.asarray(raw)
    if arr.ndim == 2:
        warnings.warn("grayscale input replicated to 3 channels", stacklevel=3)
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (h, w, 3) pixels, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32)


def _resize_bilinear(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[1] == size and x.shape[2] == size:
        return x
    return F.interpolate(
        x.unsqueeze(0), size=(size, size), mode="bilinear",
        align_corners=False, antialias=True,
    ).squeeze(0)


def _center_crop(x: torch.Tensor, size: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    top, left = (h - size) // 2, (w - size) // 2
    return x[..., top : top + size, left : left + size]


def preprocess_image(
    raw,
    resize_to: int = 256,
    crop_to: int = 224,
    augment: bool = False,
    rng: np.random.Generator | int | None = None,
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
    crop_scale: tuple[float, float] = (0.8, 1.0),
) -> ImageTensor:
    """Resize, crop, and normalize one image.

    With ``augment`` a random square crop of the source (side fraction drawn
    from ``crop_scale``) precedes the resize; the subsequent crop to
    ``crop_to`` is always central.  Deterministic given a seeded ``rng``.
    """
    if crop_to % 16 != 0:
        raise ConfigError(f"crop size must be divisible by 16, got {crop_to}")
    if resize_to < crop_to:
        raise ConfigError(f"resize_to {resize_to} smaller than crop_to {crop_to}")
    arr = _to_unit_array(raw)
    x = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    if augment:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        h, w = x.shape[1], x.shape[2]
        side = int(round(float(rng.uniform(*crop_scale)) * min(h, w)))
        side = max(1, min(side, min(h, w)))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        x = x[:, top : top + side, left : left + side]
    x = _resize_bilinear(x, resize_to)
    x = _center_crop(x, crop_to)
    m = torch.tensor(mean, dtype=x.dtype).view(3, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(3, 1, 1)
    return ImageTensor(data=(x - m) / s, mean=tuple(mean), std=tuple(std))


def load_mask(path: str | Path, resize_to: int = 256, crop_to: int = 224) -> torch.Tensor:
    """Binary (crop_to, crop_to) ground-truth mask aligned with the image path.

    Nearest-neighbor resampling preserves binarity.
    """
    arr = np.asarray(Image.open(path).convert("L"))
    x = torch.from_numpy(arr.astype(np.float32)).unsqueeze(0)
    if x.shape[-2:] != (resize_to, resize_to):
        x = F.interpolate(x.unsqueeze(0), size=(resize_to, resize_to), mode="nearest").squeeze(0)
    x = _center_crop(x, crop_to)
    return (x.squeeze(0) > 127).to(torch.uint8)
