"""Training objective, anomaly maps, the student model, and the pipelines.

The student (token encoder + pyramid decoder) reconstructs the frozen
teacher's multi-scale features from visible patches only.  The loss is the
sum over scales of the spatial mean of (1 - cosine similarity) between
student and teacher channel vectors.  At test time no masking is applied;
per-scale (1 - cosine) maps are bilinearly upsampled to the input
resolution and summed, and the image score is the maximum of that map.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._version import __version__
from .backbones import (
    FrozenEncoder,
    MultiScaleFeatures,
    TokenEncoder,
    build_frozen_encoder,
    load_token_encoder_weights,
    parameter_digest,
)
from .config import RunConfig
from .data.manifest import LABEL_NORMAL, SampleRecord
from .data.preprocess import load_image, load_mask, preprocess_image
from .errors import ConfigError, ShapeError, TrainingDiverged, UndefinedMetric
from .fpn import FpnConfig, SimpleFeaturePyramid, scale_for_stage
from .masking import MaskSpec, apply_unit_mask, patchify_batch, sample_mask_indices
from .metrics import DomainMetrics, EvalReport, pixel_auroc, pro_score, sample_auroc

EPS = 1e-8


def derive_seed(seed: int, *tags) -> int:
    """Stable child seed for a tagged subsystem (order, mask, augment, ...)."""
    text = ":".join([str(seed), *map(str, tags)])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def _map_list(features) -> list[torch.Tensor]:
    if isinstance(features, MultiScaleFeatures):
        return list(features.maps)
    return list(features)


def multiscale_cosine_loss(student, frozen, eps: float = EPS) -> torch.Tensor:
    """Sum over scales of mean_k (1 - cos(student_k, frozen_k)).

    Cosine runs over the channel dimension at every spatial position; maps
    may be (c, h, w) or batched (b, c, h, w).  Norm products are clamped to
    ``eps`` so zero vectors never produce NaN.
    """
    s_maps, f_maps = _map_list(student), _map_list(frozen)
    if len(s_maps) != len(f_maps):
        raise ShapeError(f"{len(s_maps)} student scales vs {len(f_maps)} frozen scales")
    total = None
    for a, b in zip(s_maps, f_maps):
        if a.shape != b.shape:
            raise ShapeError(f"scale shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        if a.ndim == 3:
            a, b = a.unsqueeze(0), b.unsqueeze(0)
        elif a.ndim != 4:
            raise ShapeError(f"feature maps must be 3-d or 4-d, got {a.ndim}-d")
        dot = (a * b).sum(dim=1)
        denom = (a.norm(dim=1) * b.norm(dim=1)).clamp_min(eps)
        cos = (dot / denom).clamp(-1.0, 1.0)
        term = (1.0 - cos).mean()
        total = term if total is None else total + term
    if total is None:
        raise ShapeError("no scales to compare")
    return total


@dataclass
class AnomalyMap:
    """Per-pixel anomaly intensity at input resolution plus its maximum."""

    map: torch.Tensor  # (h, w)
    score: float

    def __post_init__(self) -> None:
        if self.map.ndim != 2:
            raise ShapeError(f"anomaly map must be 2-d, got {tuple(self.map.shape)}")
        if not torch.isfinite(self.map).all():
            raise ShapeError("anomaly map contains non-finite values")


def anomaly_map(student, frozen, out_size, eps: float = EPS) -> AnomalyMap:
    """Summed upsampled (1 - cosine) maps over all scales, plus the max score.

    Per scale the channel vectors of both feature maps are L2-normalized
    row-wise, their per-position inner product is the cosine similarity,
    and the anomaly intensity is 1 - cosine reshaped to (h_i, w_i).  Each
    scale map is bilinearly upsampled to ``out_size`` and the results are
    summed; the score is the largest value of the summed map.
    """
    s_maps, f_maps = _map_list(student), _map_list(frozen)
    if len(s_maps) != len(f_maps):
        raise ShapeError(f"{len(s_maps)} student scales vs {len(f_maps)} frozen scales")
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    out_h, out_w = out_size
    total = None
    for a, b in zip(s_maps, f_maps):
        if a.shape != b.shape:
            raise ShapeError(f"scale shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        if a.ndim != 3:
            raise ShapeError("anomaly_map expects single-image (c, h, w) features")
        if a.shape[1] > out_h or a.shape[2] > out_w:
            raise ConfigError(
                f"output size {out_size} smaller than feature map {tuple(a.shape[1:])}"
            )
        a_n = a / a.norm(dim=0, keepdim=True).clamp_min(eps)
        b_n = b / b.norm(dim=0, keepdim=True).clamp_min(eps)
        am = (1.0 - (a_n * b_n).sum(dim=0)).clamp(0.0, 2.0)
        up = F.interpolate(
            am.unsqueeze(0).unsqueeze(0), size=(out_h, out_w),
            mode="bilinear", align_corners=False,
        ).squeeze(0).squeeze(0)
        total = up if total is None else total + up
    if total is None:
        raise ShapeError("no scales to aggregate")
    return AnomalyMap(map=total, score=float(total.max()))


class MaskedReconstructionModel(nn.Module):
    """Student: visible-token encoder, shared mask token, pyramid decoder."""

    def __init__(self, encoder: TokenEncoder, pyramid: SimpleFeaturePyramid,
                 stage_ids: tuple[int, ...]):
        super().__init__()
        self.encoder = encoder
        self.pyramid = pyramid
        self.stage_ids = tuple(stage_ids)
        self.mask_token = nn.Parameter(torch.zeros(encoder.cfg.width))
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    @property
    def grid_side(self) -> int:
        return self.encoder.cfg.grid_side

    def forward(self, images: torch.Tensor, specs: list[MaskSpec] | None = None
                ) -> list[torch.Tensor]:
        """Decode a (b, 3, h, w) batch into per-stage feature maps.

        ``specs`` gives one token-drop MaskSpec per image; None feeds every
        token (the test-time path).
        """
        p = self.encoder.cfg.patch_size
        patches = patchify_batch(images, p)
        b, n, patch_dim = patches.shape
        if n != self.encoder.cfg.n_positions:
            raise ShapeError(
                f"{n} patches do not match the encoder grid "
                f"({self.encoder.cfg.n_positions} positions)"
            )
        d = self.encoder.cfg.width
        if specs is None:
            idx = torch.arange(n, device=images.device).expand(b, n)
            grid_flat = self.encoder.encode_visible(patches, idx)
        else:
            if len(specs) != b:
                raise ShapeError(f"{len(specs)} mask specs for a batch of {b}")
            counts = {len(s.visible_indices) for s in specs}
            if len(counts) != 1:
                raise ShapeError("mask specs in one batch must share the visible count")
            if any(s.n_units != n for s in specs):
                raise ShapeError("mask spec unit count does not match the token grid")
            vis = torch.tensor([s.visible_indices for s in specs],
                               dtype=torch.long, device=images.device)
            sel = torch.gather(patches, 1, vis.unsqueeze(-1).expand(-1, -1, patch_dim))
            emb = self.encoder.encode_visible(sel, vis)
            grid_flat = emb.new_zeros((b, n, d))
            grid_flat.scatter_(1, vis.unsqueeze(-1).expand(-1, -1, d), emb)
            n_masked = n - len(specs[0].visible_indices)
            if n_masked:
                hid = torch.tensor([s.masked_indices for s in specs],
                                   dtype=torch.long, device=images.device)
                fill = self.mask_token.unsqueeze(0) + self.encoder.patch_pos_embed[hid]
                grid_flat.scatter_(1, hid.unsqueeze(-1).expand(-1, -1, d), fill)
        side = self.grid_side
        grid = grid_flat.reshape(b, side, side, d).permute(0, 3, 1, 2)
        return self.pyramid(grid)


def build_model(cfg: RunConfig, load_pretrained: bool = True
                ) -> tuple[MaskedReconstructionModel, FrozenEncoder]:
    """Construct the student and its frozen teacher from a run config.

    Raises ShapeError at construction when explicitly configured pyramid
    channels disagree with the teacher's stage widths.
    """
    teacher = build_frozen_encoder(cfg.frozen_encoder_config(), shared=False)
    teacher_channels = teacher.stage_channels(input_side=cfg.data.crop_to)
    if cfg.fpn.out_channels is not None:
        configured = tuple(cfg.fpn.out_channels)
        if configured != teacher_channels:
            raise ShapeError(
                f"pyramid channels {configured} do not match teacher stages "
                f"{teacher_channels}"
            )
    torch.manual_seed(derive_seed(cfg.seed, "model-init"))
    encoder = TokenEncoder(cfg.token_encoder_config())
    if load_pretrained and cfg.encoder.variant.endswith("pretrained_mae"):
        load_token_encoder_weights(encoder, cfg.encoder.weights_path)
    stages = tuple(cfg.teacher.stages)
    fpn_cfg = FpnConfig(
        in_width=cfg.encoder.width,
        out_channels=teacher_channels,
        scale_factors=tuple(scale_for_stage(s) for s in stages),
    )
    pyramid = SimpleFeaturePyramid(fpn_cfg)
    model = MaskedReconstructionModel(encoder, pyramid, stages)
    return model, teacher


# -- training ------------------------------------------------------------


def _decoded_sources(records: list[SampleRecord]) -> list[np.ndarray]:
    sources = []
    for rec in records:
        with load_image(rec.image_path) as img:
            sources.append(np.asarray(img.convert("RGB")))
    return sources


def _lr_at_epoch(base: float, schedule, epoch: int) -> float:
    lr = base
    for boundary, mult in schedule:
        if epoch >= boundary:
            lr *= mult
    return lr


def train(model: MaskedReconstructionModel, teacher: FrozenEncoder,
          records: list[SampleRecord], cfg: RunConfig, out_dir: str | Path) -> Path:
    """Optimize the student against the frozen teacher on normal samples.

    Each image gets a fresh mask every epoch; the teacher always encodes
    the same unmasked input the student reconstructs.  Emits ``losses.csv``
    (epoch, step, loss) plus a final checkpoint, and is fully reproducible
    from ``cfg.seed``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_records = [r for r in records if r.split == "train"]
    if not train_records:
        raise ConfigError("training manifest contains no train-split samples")
    if any(r.label != LABEL_NORMAL for r in train_records):
        raise ConfigError("one-class setting violated: anomalous sample in train split")

    tc, mc, dc = cfg.train, cfg.masking, cfg.data
    device = torch.device(cfg.device)
    model.to(device).train()
    teacher.to(device)
    sources = _decoded_sources(train_records)
    n_tokens = (dc.crop_to // cfg.encoder.patch_size) ** 2
    pixel_units = (dc.crop_to // mc.unit_size) ** 2
    schedule = tc.resolved_schedule()
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=tc.learning_rate, betas=tuple(tc.betas),
        weight_decay=tc.weight_decay,
    )

    rows: list[tuple[int, int, float]] = []
    step = 0
    for epoch in range(1, tc.epochs + 1):
        lr = _lr_at_epoch(tc.learning_rate, schedule, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng(derive_seed(cfg.seed, "order", epoch)) \
            .permutation(len(train_records))
        for start in range(0, len(order), tc.batch_size):
            chunk = order[start : start + tc.batch_size]
            images, specs = [], []
            for rec_idx in chunk:
                rec_idx = int(rec_idx)
                aug_rng = np.random.default_rng(derive_seed(cfg.seed, "aug", epoch, rec_idx))
                tensor = preprocess_image(
                    sources[rec_idx], resize_to=dc.resize_to, crop_to=dc.crop_to,
                    augment=dc.augment, rng=aug_rng, mean=dc.mean, std=dc.std,
                    crop_scale=dc.crop_scale,
                ).data
                mask_seed = derive_seed(cfg.seed, "mask", epoch, rec_idx)
                if mc.mode == "token_drop":
                    specs.append(sample_mask_indices(
                        n_tokens, mc.ratio, seed=mask_seed,
                        unit_size=cfg.encoder.patch_size,
                    ))
                else:
                    spec = sample_mask_indices(
                        pixel_units, mc.ratio, seed=mask_seed,
                        unit_size=mc.unit_size, mode="in_place_fill",
                    )
                    tensor = apply_unit_mask(tensor, spec, fill_value=mc.fill_value)
                images.append(tensor)
            batch = torch.stack(images).to(device)
            with torch.no_grad():
                # The reconstruction target is always the intact input.
                clean = batch if mc.mode == "token_drop" else torch.stack(
                    [preprocess_image(
                        sources[int(i)], resize_to=dc.resize_to, crop_to=dc.crop_to,
                        augment=dc.augment,
                        rng=np.random.default_rng(derive_seed(cfg.seed, "aug", epoch, int(i))),
                        mean=dc.mean, std=dc.std, crop_scale=dc.crop_scale,
                    ).data for i in chunk]
                ).to(device)
                targets = teacher.extract(clean)
            student = model(batch, specs if mc.mode == "token_drop" else None)
            loss = multiscale_cosine_loss(student, targets)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(batch start {start}, seed {cfg.seed})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            rows.append((epoch, step, loss.item()))
            step += 1
        if tc.checkpoint_every and epoch % tc.checkpoint_every == 0 and epoch < tc.epochs:
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch:04d}.pt", model, teacher, cfg)

    with open(out_dir / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        writer.writerows([(e, s, repr(v)) for e, s, v in rows])
    return save_checkpoint(out_dir / "checkpoint.pt", model, teacher, cfg)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str | Path, model: MaskedReconstructionModel,
                    teacher: FrozenEncoder, cfg: RunConfig) -> Path:
    """Weights blob plus a JSON sidecar with configs, stats, version, seed."""
    path = Path(path)
    payload = {
        "format": 1,
        "model": model.state_dict(),
        # Residual teachers are reconstructible from their published weights;
        # the toy teacher's random state is embedded to keep runs portable.
        "teacher": teacher.state_dict() if cfg.teacher.family == "toy_cnn" else None,
    }
    torch.save(payload, path)
    sidecar = {
        "run_config": cfg.to_dict(),
        "normalization": {"mean": list(cfg.data.mean), "std": list(cfg.data.std)},
        "code_version": __version__,
        "seed": cfg.seed,
        "teacher_digest": parameter_digest(teacher),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path
                    ) -> tuple[MaskedReconstructionModel, FrozenEncoder, RunConfig]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    cfg = RunConfig.from_dict(sidecar["run_config"])
    model, teacher = build_model(cfg, load_pretrained=False)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(payload["model"])
    if payload.get("teacher") is not None:
        teacher.load_state_dict(payload["teacher"])
    model.eval()
    return model, teacher, cfg


# -- inference -------------------------------------------------------------


def infer_heatmap(model: MaskedReconstructionModel, teacher: FrozenEncoder,
                  image) -> AnomalyMap:
    """Full unmasked pipeline on one image; map at input resolution."""
    x = getattr(image, "data", image)
    if x.ndim != 3:
        raise ShapeError(f"expected a single (3, h, w) image, got {tuple(x.shape)}")
    _, h, w = x.shape
    p = model.encoder.cfg.patch_size
    if h != w or h % p != 0:
        raise ShapeError(f"input {h}x{w} violates the patch grid (patch size {p})")
    model.eval()
    with torch.no_grad():
        batch = x.unsqueeze(0)
        student = [m.squeeze(0) for m in model(batch, None)]
        frozen = [m.squeeze(0) for m in teacher.extract(batch)]
    return anomaly_map(student, frozen, out_size=(h, w))


def evaluate_manifest(model: MaskedReconstructionModel, teacher: FrozenEncoder,
                      records: list[SampleRecord], cfg: RunConfig) -> EvalReport:
    """Score every test sample and assemble overall plus per-domain metrics."""
    test_records = [r for r in records if r.split == "test"]
    if not test_records:
        raise ConfigError("no test-split samples to evaluate")
    dc = cfg.data
    scores, labels, domains = [], [], []
    maps, masks = [], []
    annotated = any(r.mask_path is not None for r in test_records)
    for rec in test_records:
        with load_image(rec.image_path) as img:
            tensor = preprocess_image(
                img, resize_to=dc.resize_to, crop_to=dc.crop_to,
                augment=False, mean=dc.mean, std=dc.std,
            )
        am = infer_heatmap(model, teacher, tensor)
        scores.append(am.score)
        labels.append(0 if rec.label == LABEL_NORMAL else 1)
        domains.append(rec.domain_tag)
        if annotated:
            maps.append(am.map.numpy())
            if rec.mask_path is not None:
                masks.append(load_mask(rec.mask_path, dc.resize_to, dc.crop_to).numpy())
            else:
                masks.append(np.zeros((dc.crop_to, dc.crop_to), dtype=np.uint8))

    scores_arr = np.asarray(scores)
    labels_arr = np.asarray(labels)

    def triple(sel: np.ndarray) -> tuple:
        s_auroc = p_auroc = pro = None
        try:
            s_auroc = sample_auroc(scores_arr[sel], labels_arr[sel])
        except UndefinedMetric:
            pass
        if annotated:
            sub_maps = [m for m, keep in zip(maps, sel) if keep]
            sub_masks = [m for m, keep in zip(masks, sel) if keep]
            try:
                p_auroc = pixel_auroc(sub_maps, sub_masks)
            except UndefinedMetric:
                pass
            try:
                pro = pro_score(sub_maps, sub_masks, fpr_limit=cfg.eval.fpr_limit)
            except UndefinedMetric:
                pass
        return s_auroc, p_auroc, pro

    overall = triple(np.ones(len(test_records), dtype=bool))
    per_domain = {}
    for dom in sorted(set(domains)):
        sel = np.asarray([d == dom for d in domains])
        s_auroc, p_auroc, pro = triple(sel)
        per_domain[dom] = DomainMetrics(
            sample_auroc=s_auroc, pixel_auroc=p_auroc, pro=pro,
            n_normal=int((labels_arr[sel] == 0).sum()),
            n_anomalous=int((labels_arr[sel] == 1).sum()),
        )
    return EvalReport(
        sample_auroc=overall[0], pixel_auroc=overall[1], pro=overall[2],
        n_samples=len(test_records), per_domain=per_domain,
        fpr_limit=cfg.eval.fpr_limit,
    )


def benchmark_throughput(model: MaskedReconstructionModel, teacher: FrozenEncoder,
                         input_side: int, n_images: int = 32, warmup: int = 4) -> float:
    """Images per second for the unmasked inference pipeline."""
    torch.manual_seed(0)
    x = torch.randn(3, input_side, input_side)
    for _ in range(warmup):
        infer_heatmap(model, teacher, x)
    start = time.perf_counter()
    for _ in range(n_images):
        infer_heatmap(model, teacher, x)
    elapsed = time.perf_counter() - start
    return n_images / elapsed
