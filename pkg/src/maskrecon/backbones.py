"""Trainable token encoder and frozen multi-scale teacher networks.

The token encoder is a standard pre-norm vision transformer that only ever
sees the visible patches; positional embeddings are indexed by the original
grid position of each patch, not by its position in the compacted visible
sequence.  The teacher is a frozen hierarchical CNN whose stage outputs at
several resolutions serve as reconstruction targets.
"""

from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, WeightsUnavailable

VARIANT_VIT_B_MAE = "vit_b_pretrained_mae"
VARIANT_VIT_TINY = "vit_tiny_scratch"
_VARIANTS = (VARIANT_VIT_B_MAE, VARIANT_VIT_TINY)

TEACHER_FAMILIES = ("wideresnet50", "resnet18", "toy_cnn")


@dataclass(frozen=True)
class TokenEncoderConfig:
    """Geometry and variant of the visible-token encoder."""

    width: int = 768
    depth: int = 12
    heads: int = 12
    patch_size: int = 16
    grid_side: int = 14
    mlp_ratio: float = 4.0
    include_class_token: bool = True
    variant: str = VARIANT_VIT_B_MAE

    def __post_init__(self) -> None:
        if self.variant not in _VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.variant == VARIANT_VIT_B_MAE and (self.width, self.depth, self.heads) != (768, 12, 12):
            raise ConfigError("vit_b_pretrained_mae fixes width=768, depth=12, heads=12")
        if self.depth < 1 or self.grid_side < 1:
            raise ConfigError("depth and grid_side must be positive")

    @classmethod
    def vit_b(cls, grid_side: int = 14, include_class_token: bool = True) -> "TokenEncoderConfig":
        return cls(grid_side=grid_side, include_class_token=include_class_token)

    @property
    def n_positions(self) -> int:
        return self.grid_side**2


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class TokenEncoder(nn.Module):
    """Pre-norm ViT over flattened patches, evaluated on visible tokens only.

    The class token (when configured) participates in attention but is
    dropped from the output; the final LayerNorm is always applied.
    """

    def __init__(self, cfg: TokenEncoderConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = cfg.patch_size**2 * 3
        self.patch_embed = nn.Linear(in_dim, cfg.width)
        n_extra = 1 if cfg.include_class_token else 0
        self.pos_embed = nn.Parameter(torch.zeros(cfg.n_positions + n_extra, cfg.width))
        if cfg.include_class_token:
            self.cls_token = nn.Parameter(torch.zeros(cfg.width))
        self.blocks = nn.ModuleList(
            [_Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.width)
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.cfg.include_class_token:
            nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def patch_pos_embed(self) -> torch.Tensor:
        """Positional table for patch positions only (class row excluded)."""
        if self.cfg.include_class_token:
            return self.pos_embed[1:]
        return self.pos_embed

    def encode_visible(self, patches: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
        """Embed visible patch rows given their original grid indices.

        Accepts a single image ``(v, p*p*3)`` with indices ``(v,)`` or a
        batch ``(b, v, p*p*3)`` with indices ``(b, v)``; returns embeddings
        of matching leading shape and width ``d``, in input order.
        """
        single = patches.ndim == 2
        if single:
            patches = patches.unsqueeze(0)
            indices = indices.unsqueeze(0)
        if patches.shape[1] == 0:
            raise ConfigError("no visible tokens; masking ratio too large for this grid")
        if indices.shape != patches.shape[:2]:
            raise ShapeError(
                f"indices shape {tuple(indices.shape)} does not match patches "
                f"{tuple(patches.shape[:2])}"
            )
        x = self.patch_embed(patches) + self.patch_pos_embed[indices]
        if self.cfg.include_class_token:
            cls = (self.cls_token + self.pos_embed[0]).expand(x.shape[0], 1, -1)
            x = torch.cat([cls, x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        if self.cfg.include_class_token:
            x = x[:, 1:]
        return x.squeeze(0) if single else x


def load_token_encoder_weights(encoder: TokenEncoder, path: str | Path | None) -> None:
    """Load a converted checkpoint into the encoder, or fail loudly.

    Raises WeightsUnavailable when no path is given or the file is missing;
    callers may fall back to a scratch-initialized encoder for tests.
    """
    if path is None:
        raise WeightsUnavailable(
            "pretrained token-encoder weights requested but no weights_path configured"
        )
    path = Path(path)
    if not path.exists():
        raise WeightsUnavailable(f"token-encoder weights not found at {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    encoder.load_state_dict(state)


def convert_published_vit_checkpoint(src: str | Path, dst: str | Path) -> None:
    """Convert a published masked-autoencoder ViT-B checkpoint to our format.

    The published form stores the patch embedding as a (d, 3, p, p)
    convolution and the positional table as (1, n+1, d).  Our encoder uses a
    linear patch embedding over pixel-major, channels-last flattened
    patches, so the kernel is permuted to (d, p, p, 3) before flattening.
    """
    blob = torch.load(src, map_location="cpu", weights_only=True)
    state = blob.get("model", blob)
    out: dict[str, torch.Tensor] = {}
    kernel = state["patch_embed.proj.weight"]  # (d, 3, p, p)
    out["patch_embed.weight"] = kernel.permute(0, 2, 3, 1).reshape(kernel.shape[0], -1)
    out["patch_embed.bias"] = state["patch_embed.proj.bias"]
    out["pos_embed"] = state["pos_embed"].squeeze(0)
    out["cls_token"] = state["cls_token"].reshape(-1)
    for key, value in state.items():
        if key.startswith("blocks.") or key in ("norm.weight", "norm.bias"):
            out[key] = value
    torch.save(out, dst)


@dataclass(frozen=True)
class FrozenEncoderConfig:
    """Identity of the frozen hierarchical teacher."""

    family: str = "wideresnet50"
    stages: tuple[int, ...] = (1, 2, 3)
    weights: str = "pretrained"  # "pretrained" | "random"
    seed: int = 0
    toy_channels: tuple[int, ...] = (32, 64, 128)

    def __post_init__(self) -> None:
        if self.family not in TEACHER_FAMILIES:
            raise ConfigError(f"unknown teacher family {self.family!r}")
        stages = tuple(self.stages)
        if not stages or any(s not in (1, 2, 3) for s in stages):
            raise ConfigError(f"stages must be a nonempty subset of (1, 2, 3), got {stages}")
        if tuple(sorted(set(stages))) != stages:
            raise ConfigError("stages must be sorted and unique")
        if self.weights not in ("pretrained", "random"):
            raise ConfigError(f"weights must be 'pretrained' or 'random', got {self.weights!r}")
        if len(self.toy_channels) != 3:
            raise ConfigError("toy_channels must list one width per stage")


@dataclass
class MultiScaleFeatures:
    """Ordered per-stage feature maps, finest (stage 1) first.

    Adjacent stages halve the spatial side: side(maps[j]) == 2 *
    side(maps[j+1]) whenever scale_ids[j+1] == scale_ids[j] + 1.
    """

    maps: tuple[torch.Tensor, ...]
    scale_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        self.maps = tuple(self.maps)
        self.scale_ids = tuple(self.scale_ids)
        if len(self.maps) != len(self.scale_ids):
            raise ShapeError("one scale id required per map")
        for m in self.maps:
            if m.ndim not in (3, 4):
                raise ShapeError(f"feature maps must be (c, h, w) or (b, c, h, w), got {m.ndim}d")
            if not torch.isfinite(m).all():
                raise ShapeError("feature map contains non-finite values")
        for j in range(len(self.maps) - 1):
            if self.scale_ids[j + 1] == self.scale_ids[j] + 1:
                if self.maps[j].shape[-1] != 2 * self.maps[j + 1].shape[-1]:
                    raise ShapeError(
                        f"stages {self.scale_ids[j]} and {self.scale_ids[j + 1]} do not halve: "
                        f"{self.maps[j].shape[-1]} vs {self.maps[j + 1].shape[-1]}"
                    )

    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(m.shape) for m in self.maps]


class _ResNetTeacher(nn.Module):
    """Stem plus the first three stages of a torchvision residual net."""

    def __init__(self, cfg: FrozenEncoderConfig):
        super().__init__()
        import torchvision.models as tvm

        if cfg.family == "wideresnet50":
            builder, weights_enum = tvm.wide_resnet50_2, tvm.Wide_ResNet50_2_Weights.IMAGENET1K_V1
        else:
            builder, weights_enum = tvm.resnet18, tvm.ResNet18_Weights.IMAGENET1K_V1
        weights = None
        if cfg.weights == "pretrained":
            _require_cached_weights(weights_enum)
            weights = weights_enum
        net = builder(weights=weights)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stage1, self.stage2, self.stage3 = net.layer1, net.layer2, net.layer3
        self.stages = cfg.stages

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        maps = []
        x = self.stem(x)
        for idx, stage in enumerate((self.stage1, self.stage2, self.stage3), start=1):
            x = stage(x)
            if idx in self.stages:
                maps.append(x)
            if idx >= max(self.stages):
                break
        return maps


def _require_cached_weights(weights_enum) -> None:
    """Refuse to trigger a network download; demand a local cache instead."""
    hub_dir = Path(torch.hub.get_dir()) / "checkpoints"
    filename = weights_enum.url.rsplit("/", 1)[-1]
    if not (hub_dir / filename).exists():
        raise WeightsUnavailable(
            f"pretrained weights {filename} not present in {hub_dir}; "
            "download them there or run with weights='random' / family='toy_cnn'"
        )


class ToyCnnTeacher(nn.Module):
    """Three-stage strided CNN with fixed random weights for desk-scale runs.

    Stage i emits a map of side input/2**(i+1), matching the residual
    teachers.  Weights are drawn deterministically from the config seed and
    never trained.
    """

    def __init__(self, cfg: FrozenEncoderConfig):
        super().__init__()
        c1, c2, c3 = cfg.toy_channels
        stem_ch = 24
        self.stem = nn.Conv2d(3, stem_ch, 3, stride=2, padding=1)
        self.conv1a = nn.Conv2d(stem_ch, c1, 3, stride=2, padding=1)
        self.conv1b = nn.Conv2d(c1, c1, 3, stride=1, padding=1)
        self.conv2a = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.conv2b = nn.Conv2d(c2, c2, 3, stride=1, padding=1)
        self.conv3a = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.conv3b = nn.Conv2d(c3, c3, 3, stride=1, padding=1)
        self.stages = cfg.stages
        self._init_from_seed(cfg.seed)

    def _init_from_seed(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters()):
            with torch.no_grad():
                if p.ndim > 1:
                    fan_in = p[0].numel()
                    std = math.sqrt(2.0 / fan_in)
                    p.copy_(torch.empty_like(p).normal_(0.0, std, generator=gen))
                else:
                    p.zero_()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        maps = []
        x = F.gelu(self.stem(x))
        pairs = (
            (self.conv1a, self.conv1b),
            (self.conv2a, self.conv2b),
            (self.conv3a, self.conv3b),
        )
        for idx, (a, b) in enumerate(pairs, start=1):
            x = F.gelu(a(x))
            x = b(x)
            if idx in self.stages:
                maps.append(x)
            if idx >= max(self.stages):
                break
            x = F.gelu(x)
        return maps

    def save(self, path: str | Path) -> None:
        torch.save(self.state_dict(), path)


class FrozenEncoder(nn.Module):
    """Frozen teacher facade: stage extraction with gradients disabled."""

    def __init__(self, cfg: FrozenEncoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.family == "toy_cnn":
            self.net: nn.Module = ToyCnnTeacher(cfg)
        else:
            self.net = _ResNetTeacher(cfg)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True) -> "FrozenEncoder":  # noqa: ARG002
        # The teacher never leaves eval mode, even inside a training loop.
        return super().train(False)

    @torch.no_grad()
    def extract(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Stage maps for a (b, 3, h, w) batch, in stage order."""
        if x.ndim != 4:
            raise ShapeError(f"expected (b, 3, h, w), got shape {tuple(x.shape)}")
        return [m.detach() for m in self.net(x)]

    def stage_channels(self, input_side: int = 64) -> tuple[int, ...]:
        probe = torch.zeros(1, 3, input_side, input_side)
        return tuple(m.shape[1] for m in self.extract(probe))

    def parameter_digest(self) -> str:
        return parameter_digest(self)


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@functools.lru_cache(maxsize=8)
def _cached_encoder(cfg: FrozenEncoderConfig) -> FrozenEncoder:
    return FrozenEncoder(cfg)


def build_frozen_encoder(cfg: FrozenEncoderConfig, shared: bool = True) -> FrozenEncoder:
    """Construct (or fetch the process-wide shared copy of) a frozen teacher."""
    return _cached_encoder(cfg) if shared else FrozenEncoder(cfg)


def extract_frozen_features(x, cfg: FrozenEncoderConfig) -> MultiScaleFeatures:
    """One feature map per configured stage for a single preprocessed image.

    Accepts an ImageTensor or a raw (3, h, w) tensor already normalized with
    the teacher's statistics.
    """
    data = getattr(x, "data", x)
    if data.ndim != 3:
        raise ShapeError(f"expected a single (3, h, w) image, got {tuple(data.shape)}")
    encoder = build_frozen_encoder(cfg)
    maps = encoder.extract(data.unsqueeze(0))
    return MultiScaleFeatures(
        maps=tuple(m.squeeze(0) for m in maps),
        scale_ids=tuple(cfg.stages),
    )
