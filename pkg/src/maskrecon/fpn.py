"""Parallel feature-pyramid decoder over the assembled token grid.

Each branch maps the final token grid to one teacher stage independently
(no lateral connections): the x4 branch applies two stride-2 2x2
deconvolutions (LayerNorm + GELU after the first), the x2 branch one
deconvolution, and the x1 branch consumes the grid directly.  Every branch
then applies a 1x1 convolution with LayerNorm followed by a 3x3 convolution
with LayerNorm, projecting to the paired teacher stage's channel count.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbones import MultiScaleFeatures
from .errors import ConfigError, ShapeError

_VALID_SCALES = (1, 2, 4)


def scale_for_stage(stage: int) -> int:
    """Branch upsampling factor paired with a teacher stage (1->x4 .. 3->x1)."""
    if stage not in (1, 2, 3):
        raise ConfigError(f"no pyramid branch for stage {stage}")
    return 2 ** (3 - stage)


@dataclass(frozen=True)
class FpnConfig:
    """Branch layout: one (scale_factor, out_channels) pair per teacher stage."""

    in_width: int
    out_channels: tuple[int, ...]
    scale_factors: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.out_channels:
            raise ConfigError("pyramid needs at least one branch")
        if len(self.out_channels) != len(self.scale_factors):
            raise ConfigError("out_channels and scale_factors must align one-to-one")
        for s in self.scale_factors:
            if s not in _VALID_SCALES:
                raise ConfigError(f"scale factor must be one of {_VALID_SCALES}, got {s}")
        if len(set(self.scale_factors)) != len(self.scale_factors):
            raise ConfigError("duplicate scale factors")


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dimension of (b, c, h, w) maps."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def _branch(in_width: int, scale: int, out_ch: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    ch = in_width
    if scale == 4:
        layers += [
            nn.ConvTranspose2d(ch, ch // 2, kernel_size=2, stride=2),
            LayerNorm2d(ch // 2),
            nn.GELU(),
            nn.ConvTranspose2d(ch // 2, ch // 4, kernel_size=2, stride=2),
        ]
        ch //= 4
    elif scale == 2:
        layers += [nn.ConvTranspose2d(ch, ch // 2, kernel_size=2, stride=2)]
        ch //= 2
    layers += [
        nn.Conv2d(ch, out_ch, kernel_size=1),
        LayerNorm2d(out_ch),
        nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
        LayerNorm2d(out_ch),
    ]
    return nn.Sequential(*layers)


class SimpleFeaturePyramid(nn.Module):
    """Decode a (b, d, s, s) token grid into per-stage feature maps."""

    def __init__(self, cfg: FpnConfig):
        super().__init__()
        if cfg.in_width % 4 != 0:
            raise ConfigError(f"in_width must be divisible by 4, got {cfg.in_width}")
        self.cfg = cfg
        self.branches = nn.ModuleList(
            _branch(cfg.in_width, s, c) for s, c in zip(cfg.scale_factors, cfg.out_channels)
        )
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, grid: torch.Tensor) -> list[torch.Tensor]:
        if grid.ndim != 4 or grid.shape[1] != self.cfg.in_width:
            raise ShapeError(
                f"expected (b, {self.cfg.in_width}, s, s), got {tuple(grid.shape)}"
            )
        return [branch(grid) for branch in self.branches]


def fpn_decode(grid: torch.Tensor, pyramid: SimpleFeaturePyramid,
               scale_ids: tuple[int, ...] | None = None) -> MultiScaleFeatures:
    """Decode a single (side, side, d) grid into MultiScaleFeatures.

    ``scale_ids`` defaults to the teacher stages implied by the branch
    scale factors.
    """
    if grid.ndim != 3 or grid.shape[0] != grid.shape[1]:
        raise ShapeError(f"expected a square (side, side, d) grid, got {tuple(grid.shape)}")
    if scale_ids is None:
        stage_for_scale = {4: 1, 2: 2, 1: 3}
        scale_ids = tuple(stage_for_scale[s] for s in pyramid.cfg.scale_factors)
    batched = grid.permute(2, 0, 1).unsqueeze(0)
    maps = pyramid(batched)
    return MultiScaleFeatures(
        maps=tuple(m.squeeze(0) for m in maps),
        scale_ids=scale_ids,
    )
