"""Dataset manifests and directory-layout loaders.

Two directory conventions are supported: the flat single-category layout
(``train/good``, ``test/<defect>``, ``ground_truth/<defect>``) and the
domain-tagged layout (``train/good``, ``test/<domain>/<defect-or-good>``
with a mirrored ``ground_truth`` tree).  A JSON-lines manifest file acts as
an escape hatch for trees that follow neither convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError, ManifestError

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"
DOMAIN_TAGS = ("same", "background", "illumination", "view", "train")
SPLITS = ("train", "test")
LAYOUTS = ("mvtec", "aebad", "manifest_file")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass(frozen=True)
class SampleRecord:
    """One dataset entry: image, label, optional pixel mask, domain, split."""

    image_path: Path
    label: str
    split: str
    domain_tag: str = "same"
    mask_path: Path | None = None

    def __post_init__(self) -> None:
        if self.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise ManifestError(f"bad label {self.label!r} for {self.image_path}")
        if self.split not in SPLITS:
            raise ManifestError(f"bad split {self.split!r} for {self.image_path}")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ManifestError(f"bad domain {self.domain_tag!r} for {self.image_path}")
        if self.split == "train" and self.label != LABEL_NORMAL:
            raise ManifestError(
                f"one-class setting: train sample {self.image_path} must be normal"
            )


def _image_files(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _find_mask(gt_dir: Path, stem: str) -> Path | None:
    if not gt_dir.is_dir():
        return None
    candidates = sorted(
        p for p in gt_dir.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS and p.stem.startswith(stem)
    )
    return candidates[0] if candidates else None


def _train_records(root: Path) -> list[SampleRecord]:
    good = root / "train" / "good"
    if not good.is_dir():
        return []
    return [
        SampleRecord(image_path=p, label=LABEL_NORMAL, split="train", domain_tag="train")
        for p in _image_files(good)
    ]


def _load_mvtec(root: Path) -> list[SampleRecord]:
    records = _train_records(root)
    test_dir = root / "test"
    if test_dir.is_dir():
        for kind_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            kind = kind_dir.name
            for img in _image_files(kind_dir):
                if kind == "good":
                    records.append(
                        SampleRecord(image_path=img, label=LABEL_NORMAL, split="test")
                    )
                    continue
                mask = _find_mask(root / "ground_truth" / kind, img.stem)
                if mask is None:
                    raise ManifestError(f"anomalous test image {img} has no ground-truth mask")
                records.append(
                    SampleRecord(
                        image_path=img, label=LABEL_ANOMALOUS, split="test", mask_path=mask
                    )
                )
    if not records:
        raise ManifestError(f"no train/ or test/ entries under {root}")
    return records


def _load_aebad(root: Path) -> list[SampleRecord]:
    records = _train_records(root)
    test_dir = root / "test"
    if test_dir.is_dir():
        for domain_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            domain = domain_dir.name
            if domain not in ("same", "background", "illumination", "view"):
                raise ManifestError(f"unexpected test domain directory {domain_dir}")
            for kind_dir in sorted(d for d in domain_dir.iterdir() if d.is_dir()):
                kind = kind_dir.name
                for img in _image_files(kind_dir):
                    if kind == "good":
                        records.append(
                            SampleRecord(
                                image_path=img, label=LABEL_NORMAL,
                                split="test", domain_tag=domain,
                            )
                        )
                        continue
                    mask = _find_mask(root / "ground_truth" / domain / kind, img.stem)
                    if mask is None:
                        raise ManifestError(
                            f"anomalous test image {img} has no ground-truth mask"
                        )
                    records.append(
                        SampleRecord(
                            image_path=img, label=LABEL_ANOMALOUS,
                            split="test", domain_tag=domain, mask_path=mask,
                        )
                    )
    if not records:
        raise ManifestError(f"no train/ or test/ entries under {root}")
    return records


def _load_manifest_file(path: Path) -> list[SampleRecord]:
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"manifest file not found: {path}")
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        try:
            records.append(
                SampleRecord(
                    image_path=base / entry["image"],
                    label=entry["label"],
                    split=entry["split"],
                    domain_tag=entry.get("domain", "same"),
                    mask_path=(base / entry["mask"]) if entry.get("mask") else None,
                )
            )
        except KeyError as exc:
            raise ManifestError(f"{path}:{lineno}: missing field {exc}") from exc
    return records


def load_manifest(root: str | Path, layout: str) -> list[SampleRecord]:
    """Enumerate every sample under ``root`` for the given layout.

    Ordering is deterministic (lexicographic by path, or file order for a
    manifest file), so the result is a pure function of the tree.
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise ConfigError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if layout == "manifest_file":
        return _load_manifest_file(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    return _load_mvtec(root) if layout == "mvtec" else _load_aebad(root)


def write_manifest(records: list[SampleRecord], path: str | Path) -> None:
    """Write records as one JSON object per line, paths relative to the file."""
    path = Path(path)
    base = path.parent
    lines = []
    for rec in records:
        lines.append(
            json.dumps(
                {
                    "image": str(rec.image_path.relative_to(base)),
                    "label": rec.label,
                    "mask": str(rec.mask_path.relative_to(base)) if rec.mask_path else None,
                    "domain": rec.domain_tag,
                    "split": rec.split,
                }
            )
        )
    path.write_text("\n".join(lines) + "\n")
