"""Patch grids, random unit masking, and mask-token grid assembly.

An image is cut into a row-major sequence of flattened square patches.  A
uniformly random subset of units is hidden; in ``token_drop`` mode the
hidden patches are removed from the encoder input entirely, while
``in_place_fill`` overwrites the hidden pixels but keeps the full image.
After encoding, :func:`assemble_full_grid` scatters the visible embeddings
back to their grid positions and fills the hidden positions with a shared
mask token plus its positional embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError

MODE_TOKEN_DROP = "token_drop"
MODE_IN_PLACE_FILL = "in_place_fill"
MASK_MODES = (MODE_TOKEN_DROP, MODE_IN_PLACE_FILL)


def visible_count(n_units: int, ratio: float) -> int:
    """Number of units kept visible: floor(n * (1 - ratio))."""
    return int(math.floor(n_units * (1.0 - ratio)))


@dataclass(frozen=True)
class PatchSequence:
    """Row-major sequence of flattened square patches from one image.

    Row ``k`` holds the patch at grid position ``(k // grid_side,
    k % grid_side)``, flattened pixel-major with channels last.
    """

    patches: torch.Tensor  # (n, patch_size**2 * channels)
    grid_side: int
    patch_size: int
    channels: int = 3

    def __post_init__(self) -> None:
        n, dim = self.patches.shape
        if n != self.grid_side**2:
            raise ShapeError(
                f"{n} patches do not form a {self.grid_side}x{self.grid_side} grid"
            )
        if dim != self.patch_size**2 * self.channels:
            raise ShapeError(
                f"patch rows have width {dim}, expected "
                f"{self.patch_size}**2 * {self.channels}"
            )

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def patchify(image: torch.Tensor, patch_size: int) -> PatchSequence:
    """Split a (c, h, w) image into a row-major PatchSequence.

    Raises ShapeError unless the image is square with sides divisible by
    ``patch_size``.
    """
    if image.ndim != 3:
        raise ShapeError(f"expected (c, h, w), got shape {tuple(image.shape)}")
    c, h, w = image.shape
    if h != w:
        raise ShapeError(f"patch grid requires a square image, got {h}x{w}")
    if h % patch_size != 0:
        raise ShapeError(f"image side {h} not divisible by patch size {patch_size}")
    side = h // patch_size
    x = image.reshape(c, side, patch_size, side, patch_size)
    x = x.permute(1, 3, 2, 4, 0)  # (gh, gw, p, p, c)
    patches = x.reshape(side * side, patch_size * patch_size * c)
    return PatchSequence(patches=patches, grid_side=side, patch_size=patch_size, channels=c)


def unpatchify(seq: PatchSequence) -> torch.Tensor:
    """Inverse of :func:`patchify`; exact round trip."""
    side, p, c = seq.grid_side, seq.patch_size, seq.channels
    x = seq.patches.reshape(side, side, p, p, c)
    x = x.permute(4, 0, 2, 1, 3)  # (c, gh, p, gw, p)
    return x.reshape(c, side * p, side * p)


def patchify_batch(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Batched patchify: (b, c, h, w) -> (b, n, p*p*c), same row order."""
    if images.ndim != 4:
        raise ShapeError(f"expected (b, c, h, w), got shape {tuple(images.shape)}")
    b, c, h, w = images.shape
    if h != w or h % patch_size != 0:
        raise ShapeError(f"invalid spatial size {h}x{w} for patch size {patch_size}")
    side = h // patch_size
    x = images.reshape(b, c, side, patch_size, side, patch_size)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, side * side, patch_size * patch_size * c)


@dataclass(frozen=True)
class MaskSpec:
    """Which units of one image are visible and which are hidden.

    ``ratio`` is the masking ratio, ``unit_size`` the pixel side of one
    maskable unit (equal to the patch size in token_drop mode).  The index
    sets partition ``range(n)`` and |visible| = floor(n * (1 - ratio)).
    """

    ratio: float
    unit_size: int
    visible_indices: tuple[int, ...]
    masked_indices: tuple[int, ...]
    mode: str = MODE_TOKEN_DROP
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"masking ratio must lie in [0, 1), got {self.ratio}")
        if self.mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {self.mode!r}")
        if self.unit_size < 1:
            raise ConfigError(f"unit size must be positive, got {self.unit_size}")
        vis, hid = set(self.visible_indices), set(self.masked_indices)
        n = len(self.visible_indices) + len(self.masked_indices)
        if len(vis) != len(self.visible_indices) or len(hid) != len(self.masked_indices):
            raise ConfigError("mask index sets contain duplicates")
        if vis & hid or (vis | hid) != set(range(n)):
            raise ConfigError("visible and masked indices must partition range(n)")
        if len(self.visible_indices) != visible_count(n, self.ratio):
            raise ConfigError(
                f"{len(self.visible_indices)} visible units inconsistent with "
                f"ratio {self.ratio} over {n} units"
            )

    @property
    def n_units(self) -> int:
        return len(self.visible_indices) + len(self.masked_indices)

    def to_json(self) -> str:
        return json.dumps(
            {
                "ratio": self.ratio,
                "unit_size": self.unit_size,
                "visible_indices": list(self.visible_indices),
                "masked_indices": list(self.masked_indices),
                "mode": self.mode,
                "seed": self.seed,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MaskSpec":
        d = json.loads(text)
        return cls(
            ratio=d["ratio"],
            unit_size=d["unit_size"],
            visible_indices=tuple(d["visible_indices"]),
            masked_indices=tuple(d["masked_indices"]),
            mode=d["mode"],
            seed=d["seed"],
        )


def sample_mask_indices(
    n_units: int,
    ratio: float,
    seed: int,
    unit_size: int = 16,
    mode: str = MODE_TOKEN_DROP,
) -> MaskSpec:
    """Draw a uniformly random visible subset of size floor(n * (1 - ratio)).

    Deterministic for a fixed seed.
    """
    if n_units < 1:
        raise ConfigError(f"need at least one unit, got {n_units}")
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"masking ratio must lie in [0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_units)
    k = visible_count(n_units, ratio)
    visible = tuple(sorted(int(i) for i in perm[:k]))
    masked = tuple(sorted(int(i) for i in perm[k:]))
    return MaskSpec(
        ratio=ratio,
        unit_size=unit_size,
        visible_indices=visible,
        masked_indices=masked,
        mode=mode,
        seed=seed,
    )


def apply_unit_mask(
    image: torch.Tensor, spec: MaskSpec, fill_value: float = 0.0
) -> torch.Tensor:
    """Overwrite every masked unit of a (c, h, w) image with ``fill_value``.

    Only valid for ``in_place_fill`` specs; visible units are returned
    bit-identical.  Idempotent for a fixed spec.
    """
    if spec.mode != MODE_IN_PLACE_FILL:
        raise ConfigError("apply_unit_mask requires an in_place_fill MaskSpec")
    if image.ndim != 3:
        raise ShapeError(f"expected (c, h, w), got shape {tuple(image.shape)}")
    _, h, w = image.shape
    q = spec.unit_size
    if h % q != 0 or w % q != 0:
        raise ShapeError(f"unit size {q} does not divide image size {h}x{w}")
    units_per_row = w // q
    n = (h // q) * units_per_row
    if n != spec.n_units:
        raise ShapeError(f"spec covers {spec.n_units} units but image has {n}")
    out = image.clone()
    for k in spec.masked_indices:
        r, c = divmod(k, units_per_row)
        out[:, r * q : (r + 1) * q, c * q : (c + 1) * q] = fill_value
    return out


def assemble_full_grid(
    visible_emb: torch.Tensor,
    spec: MaskSpec,
    mask_token: torch.Tensor,
    pos_emb: torch.Tensor,
) -> torch.Tensor:
    """Scatter visible embeddings back to a dense (side, side, d) grid.

    Grid position ``k`` receives the visible embedding for visible units and
    ``mask_token + pos_emb[k]`` for hidden ones, row-major.
    """
    n = spec.n_units
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeError(f"{n} units do not form a square grid")
    if visible_emb.ndim != 2 or visible_emb.shape[0] != len(spec.visible_indices):
        raise ShapeError(
            f"expected {len(spec.visible_indices)} visible embeddings, "
            f"got shape {tuple(visible_emb.shape)}"
        )
    d = visible_emb.shape[1]
    if mask_token.shape != (d,):
        raise ShapeError(f"mask token must have shape ({d},), got {tuple(mask_token.shape)}")
    if pos_emb.shape != (n, d):
        raise ShapeError(f"positional table must be ({n}, {d}), got {tuple(pos_emb.shape)}")
    flat = visible_emb.new_empty((n, d))
    if spec.visible_indices:
        vis = torch.as_tensor(spec.visible_indices, dtype=torch.long, device=visible_emb.device)
        flat[vis] = visible_emb
    if spec.masked_indices:
        hid = torch.as_tensor(spec.masked_indices, dtype=torch.long, device=visible_emb.device)
        flat[hid] = mask_token.unsqueeze(0) + pos_emb[hid]
    return flat.reshape(side, side, d)
