"""Procedural desk-scale corpus: textured blade on a controlled background.

Normal samples show a rounded, brushed-metal blade at mildly randomized
position, scale, and rotation.  Anomalous test samples carry exactly one
injected defect (scratch, hole, or blotch) with an exact binary mask taken
from the defect raster itself.  Test-only domain shifts emulate background,
illumination, and mirrored-viewpoint changes; training images are never
shifted.  Everything is reproducible from the corpus seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from ..errors import ConfigError
from .manifest import SampleRecord, load_manifest

DEFECT_KINDS = ("scratch", "hole", "blotch")
SHIFT_KINDS = ("none", "background", "illumination", "mirror_view")
DOMAIN_FOR_SHIFT = {
    "none": "same",
    "background": "background",
    "illumination": "illumination",
    "mirror_view": "view",
}


@dataclass(frozen=True)
class ToyConfig:
    n_train: int = 200
    n_test_normal: int = 50
    n_test_anomalous: int = 50
    image_size: int = 128
    defect_kinds: tuple[str, ...] = DEFECT_KINDS
    shift_kinds: tuple[str, ...] = SHIFT_KINDS
    illumination_factor: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_train", "n_test_normal", "n_test_anomalous"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"toy.{name} must be positive")
        if self.image_size % 16 != 0:
            raise ConfigError(f"toy.image_size must be divisible by 16, got {self.image_size}")
        for k in self.defect_kinds:
            if k not in DEFECT_KINDS:
                raise ConfigError(f"unknown defect kind {k!r}")
        for k in self.shift_kinds:
            if k not in SHIFT_KINDS:
                raise ConfigError(f"unknown shift kind {k!r}")
        if not self.shift_kinds:
            raise ConfigError("toy.shift_kinds must not be empty")
        if not self.defect_kinds and self.n_test_anomalous > 0:
            raise ConfigError("defect_kinds empty but anomalous test samples requested")
        if not 0.1 <= self.illumination_factor <= 2.0:
            raise ConfigError("illumination_factor outside the sane range [0.1, 2]")


def _smooth_noise(rng: np.random.Generator, size: int, cells: int, amp: float) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(cells, cells))
    return ndimage.zoom(coarse, size / cells, order=1, mode="nearest") * amp


# Training backgrounds rotate through three palettes so that the shifted
# test palette is a new combination rather than a wholly unseen regime.
_TRAIN_PALETTES = (
    (50.0, "y", (1.00, 1.00, 1.06)),
    (72.0, "y", (1.00, 1.00, 1.03)),
    (60.0, "x", (0.92, 0.98, 1.16)),
)
_SHIFT_PALETTE = (64.0, "x", (1.12, 1.00, 0.90))


def _background(rng: np.random.Generator, size: int, shifted: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    if shifted:
        level, axis, gains = _SHIFT_PALETTE
    else:
        level, axis, gains = _TRAIN_PALETTES[int(rng.integers(0, len(_TRAIN_PALETTES)))]
    base = level + 12.0 * ((yy if axis == "y" else xx) - 0.5)
    img = np.stack([base * g for g in gains], axis=-1)
    img += _smooth_noise(rng, size, 8, 2.5)[..., None]
    return img


def _blade(rng: np.random.Generator, size: int):
    """Render the blade intensity field, its footprint, and its frame."""
    cx = size * (0.5 + rng.uniform(-0.05, 0.05))
    cy = size * (0.5 + rng.uniform(-0.05, 0.05))
    half_len = size * rng.uniform(0.30, 0.40)
    half_w = size * rng.uniform(0.15, 0.20)
    angle = np.deg2rad(rng.uniform(-25.0, 25.0))
    bend = rng.uniform(-0.12, 0.12) / half_len

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy - bend * u**2
    rho = (np.abs(u) / half_len) ** 4 + (np.abs(v) / half_w) ** 2.4
    footprint = rho <= 1.0

    base = rng.uniform(150.0, 185.0)
    wavelength = rng.uniform(8.0, 14.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    stripes = 13.0 * np.sin(2 * np.pi * u / wavelength + phase)
    grain = _smooth_noise(rng, size, 16, 3.0)
    shading = -34.0 * np.clip(rho, 0.0, 1.0) ** 2
    value = base + stripes + grain + shading
    blade = np.stack([value * 0.96, value * 0.99, value * 1.04], axis=-1)
    frame = {
        "cx": cx, "cy": cy, "angle": angle, "bend": bend,
        "half_len": half_len, "half_w": half_w,
    }
    return blade, footprint, frame


_CARVE_FACTOR = 0.93  # fixed fill brightness so every hole looks alike


def _carve_disk(img, background, cy, cx, radius):
    """Replace a disk with background fill; rim feathered over one pixel.

    Returns the binary disk raster (dist <= radius) used as the mask.
    """
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dist = np.hypot(yy - cy, xx - cx)
    weight = np.clip(radius + 0.5 - dist, 0.0, 1.0)[..., None]
    img *= 1.0 - weight
    img += weight * background * _CARVE_FACTOR
    return dist <= radius


def _hole_radius(half_w: float) -> float:
    return max(4.0, 0.28 * half_w)


def _interior(footprint: np.ndarray, margin: int) -> np.ndarray:
    eroded = ndimage.binary_erosion(footprint, iterations=margin)
    return eroded if eroded.any() else footprint


def _pick_point(rng: np.random.Generator, region: np.ndarray) -> tuple[int, int]:
    ys, xs = np.nonzero(region)
    i = int(rng.integers(0, len(ys)))
    return int(ys[i]), int(xs[i])


def _defect_scratch(rng, img, footprint):
    size = img.shape[0]
    interior = _interior(footprint, 5)
    y0, x0 = _pick_point(rng, interior)
    theta = rng.uniform(0.0, 2 * np.pi)
    length = rng.uniform(0.18, 0.34) * size
    bend = rng.uniform(-0.6, 0.6)
    pts = [
        (x0 - 0.5 * length * np.cos(theta), y0 - 0.5 * length * np.sin(theta)),
        (x0, y0),
        (x0 + 0.5 * length * np.cos(theta + bend), y0 + 0.5 * length * np.sin(theta + bend)),
    ]
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    draw.line([(float(x), float(y)) for x, y in pts], fill=255, width=int(rng.integers(2, 4)))
    mask = (np.asarray(canvas) > 0) & _interior(footprint, 2)
    img[mask] -= rng.uniform(75.0, 105.0)
    return img, mask


def _defect_hole(rng, img, footprint, background, frame):
    """Cut a disk out of the blade, exposing the background fill."""
    radius = float(_hole_radius(frame["half_w"]) * rng.uniform(0.95, 1.15))
    interior = _interior(footprint, int(radius) + 2)
    cy, cx = _pick_point(rng, interior)
    mask = _carve_disk(img, background, cy, cx, radius)
    return img, mask


def _defect_blotch(rng, img, footprint):
    """Overwrite a ragged elliptical patch with high-frequency speckle."""
    size = img.shape[0]
    interior = _interior(footprint, 6)
    cy, cx = _pick_point(rng, interior)
    lo, hi = size * 0.05, size * 0.11
    ry, rx = rng.uniform(lo, hi), rng.uniform(lo, hi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    ellipse = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    ragged = _smooth_noise(rng, size, 24, 1.0) > -0.6
    mask = ellipse & ragged & _interior(footprint, 2)
    if not mask.any():
        mask = ellipse & _interior(footprint, 2)
    speckle = rng.normal(0.0, 46.0, size=(int(mask.sum()), 1))
    img[mask] = img[mask] * 0.55 + speckle + rng.uniform(-25.0, 25.0)
    return img, mask


def render_toy_sample(
    rng: np.random.Generator,
    size: int,
    shift: str = "none",
    defect: str | None = None,
    illumination_factor: float = 0.9,
):
    """Render one sample; returns (uint8 image, uint8 mask or None, info).

    ``info`` records the defect raster's own pixel count so corpus checks
    can verify that the written mask matches the rendered geometry exactly.
    """
    if shift not in SHIFT_KINDS:
        raise ConfigError(f"unknown shift kind {shift!r}")
    img = _background(rng, size, shifted=(shift == "background"))
    background = img.copy()
    blade, footprint, frame = _blade(rng, size)
    img[footprint] = blade[footprint]

    mask = None
    info: dict = {"shift": shift, "defect": defect}
    if defect is not None:
        if defect == "scratch":
            img, mask = _defect_scratch(rng, img, footprint)
        elif defect == "hole":
            img, mask = _defect_hole(rng, img, footprint, background, frame)
        elif defect == "blotch":
            img, mask = _defect_blotch(rng, img, footprint)
        else:
            raise ConfigError(f"unknown defect kind {defect!r}")
        info["defect_pixels"] = int(mask.sum())
        info["footprint_pixels"] = int(footprint.sum())
        info["mask_inside_footprint"] = bool((mask <= footprint).all())

    if shift == "illumination":
        img = img * illumination_factor
    elif shift == "mirror_view":
        img = img[:, ::-1]
        if mask is not None:
            mask = mask[:, ::-1]

    img8 = np.clip(img, 0.0, 255.0).round().astype(np.uint8)
    mask8 = mask.astype(np.uint8) if mask is not None else None
    return img8, mask8, info


def _save(img8: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img8).save(path)


def generate_toy_dataset(cfg: ToyConfig, out_root: str | Path) -> list[SampleRecord]:
    """Write a toy corpus under ``out_root`` and return its manifest.

    The directory layout matches the domain-tagged loader, so the result
    round-trips through ``load_manifest(out_root, "aebad")``.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    domains = [DOMAIN_FOR_SHIFT[s] for s in cfg.shift_kinds]
    total = cfg.n_train + cfg.n_test_normal + cfg.n_test_anomalous
    seeds = np.random.SeedSequence(cfg.seed).spawn(total)
    counters: dict[Path, int] = {}

    def next_index(directory: Path) -> int:
        counters[directory] = counters.get(directory, 0) + 1
        return counters[directory] - 1

    cursor = 0
    for _ in range(cfg.n_train):
        rng = np.random.default_rng(seeds[cursor]); cursor += 1
        img8, _, _ = render_toy_sample(rng, cfg.image_size, shift="none")
        d = out_root / "train" / "good"
        _save(img8, d / f"{next_index(d):04d}.png")

    for i in range(cfg.n_test_normal):
        rng = np.random.default_rng(seeds[cursor]); cursor += 1
        shift = cfg.shift_kinds[i % len(cfg.shift_kinds)]
        img8, _, _ = render_toy_sample(
            rng, cfg.image_size, shift=shift, illumination_factor=cfg.illumination_factor
        )
        d = out_root / "test" / DOMAIN_FOR_SHIFT[shift] / "good"
        _save(img8, d / f"{next_index(d):04d}.png")

    for i in range(cfg.n_test_anomalous):
        rng = np.random.default_rng(seeds[cursor]); cursor += 1
        shift = cfg.shift_kinds[i % len(cfg.shift_kinds)]
        defect = cfg.defect_kinds[i % len(cfg.defect_kinds)]
        img8, mask8, _ = render_toy_sample(
            rng, cfg.image_size, shift=shift, defect=defect,
            illumination_factor=cfg.illumination_factor,
        )
        domain = DOMAIN_FOR_SHIFT[shift]
        d = out_root / "test" / domain / defect
        idx = next_index(d)
        _save(img8, d / f"{idx:04d}.png")
        _save(mask8 * 255, out_root / "ground_truth" / domain / defect / f"{idx:04d}_mask.png")

    (out_root / "toy_config.json").write_text(
        json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n"
    )
    return load_manifest(out_root, "aebad")
