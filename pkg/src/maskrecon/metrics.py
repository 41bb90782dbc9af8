"""Sample AUROC, pixel AUROC, and the per-region-overlap score.

All three are rank statistics: invariant under strictly increasing
transforms of the scores.  The per-region-overlap score treats every
8-connected ground-truth component equally regardless of size, sweeps a
descending threshold over the anomaly maps, and integrates the mean
per-region recall against the global false-positive rate on normal pixels
over [0, fpr_limit], normalized by fpr_limit.  The curve is anchored at
(fpr=0, overlap=0) and integrated piecewise-linearly, interpolating at the
integration limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ShapeError, UndefinedMetric

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _as_array(x) -> np.ndarray:
    x = getattr(x, "map", x)  # accepts AnomalyMap
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def sample_auroc(scores, labels) -> float:
    """Area under the ROC curve for scalar scores against binary labels.

    Equals the Mann-Whitney statistic P(score_anom > score_norm) + half the
    tie probability.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} must be equal 1-d arrays")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pixel_auroc(maps, masks) -> float:
    """Sample AUROC over the pooled, flattened pixels of all map/mask pairs."""
    flat_scores, flat_labels = [], []
    for m, g in zip(maps, masks, strict=True):
        a, b = _as_array(m), _as_array(g)
        if a.shape != b.shape:
            raise ShapeError(f"map {a.shape} and mask {b.shape} differ")
        flat_scores.append(a.ravel())
        flat_labels.append((b.ravel() > 0).astype(int))
    return sample_auroc(np.concatenate(flat_scores), np.concatenate(flat_labels))


def _region_value_lists(masks, maps) -> tuple[list[np.ndarray], np.ndarray]:
    """Sorted map values per 8-connected anomaly region, plus normal values."""
    regions: list[np.ndarray] = []
    normal_chunks: list[np.ndarray] = []
    for m, g in zip(maps, masks, strict=True):
        a, b = _as_array(m), _as_array(g) > 0
        if a.shape != b.shape:
            raise ShapeError(f"map {a.shape} and mask {b.shape} differ")
        labeled, n_regions = ndimage.label(b, structure=EIGHT_CONNECTED)
        for rid in range(1, n_regions + 1):
            regions.append(np.sort(a[labeled == rid]))
        normal_chunks.append(a[~b])
    return regions, np.sort(np.concatenate(normal_chunks))


def pro_score(maps, masks, fpr_limit: float = 0.3, max_exact_thresholds: int = 100_000) -> float:
    """Per-region-overlap score integrated over FPR in [0, fpr_limit].

    Thresholds sweep every distinct map value when there are at most
    ``max_exact_thresholds`` of them, otherwise 200 quantile-spaced values.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise UndefinedMetric(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    regions, normal_vals = _region_value_lists(masks, maps)
    if not regions:
        raise UndefinedMetric("no anomalous region in the ground truth")
    if normal_vals.size == 0:
        raise UndefinedMetric("no normal pixel in the ground truth")

    all_vals = np.concatenate([_as_array(m).ravel() for m in maps])
    uniq = np.unique(all_vals)
    if uniq.size > max_exact_thresholds:
        qs = np.linspace(0.0, 1.0, 200)
        uniq = np.unique(np.quantile(all_vals, qs))
    thresholds = uniq[::-1]  # descending

    overlaps = np.zeros(thresholds.size, dtype=np.float64)
    for rv in regions:
        overlaps += (rv.size - np.searchsorted(rv, thresholds, side="left")) / rv.size
    overlaps /= len(regions)
    fprs = (
        normal_vals.size - np.searchsorted(normal_vals, thresholds, side="left")
    ) / normal_vals.size

    fprs = np.concatenate([[0.0], fprs])
    overlaps = np.concatenate([[0.0], overlaps])
    return _integrate_to_limit(fprs, overlaps, fpr_limit) / fpr_limit


def _integrate_to_limit(fprs: np.ndarray, overlaps: np.ndarray, limit: float) -> float:
    """Trapezoidal area under the piecewise-linear curve, clipped to [0, limit]."""
    area = 0.0
    for j in range(len(fprs) - 1):
        f0, f1 = fprs[j], fprs[j + 1]
        o0, o1 = overlaps[j], overlaps[j + 1]
        if f0 >= limit:
            break
        if f1 > limit:
            o1 = o0 + (o1 - o0) * (limit - f0) / (f1 - f0)
            f1 = limit
        area += (f1 - f0) * (o0 + o1) / 2.0
    return area


@dataclass
class DomainMetrics:
    """Metric triple for one test domain; None marks an undefined metric."""

    sample_auroc: float | None = None
    pixel_auroc: float | None = None
    pro: float | None = None
    n_normal: int = 0
    n_anomalous: int = 0

    def to_dict(self) -> dict:
        return {
            "sample_auroc": self.sample_auroc,
            "pixel_auroc": self.pixel_auroc,
            "pro": self.pro,
            "n_normal": self.n_normal,
            "n_anomalous": self.n_anomalous,
        }


@dataclass
class EvalReport:
    """Overall and per-domain metric bundle for one evaluation run."""

    sample_auroc: float | None
    pixel_auroc: float | None
    pro: float | None
    n_samples: int
    per_domain: dict[str, DomainMetrics] = field(default_factory=dict)
    fpr_limit: float = 0.3

    def to_dict(self) -> dict:
        return {
            "sample_auroc": self.sample_auroc,
            "pixel_auroc": self.pixel_auroc,
            "pro": self.pro,
            "n_samples": self.n_samples,
            "fpr_limit": self.fpr_limit,
            "per_domain": {k: v.to_dict() for k, v in sorted(self.per_domain.items())},
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for name, dm in sorted(self.per_domain.items()):
            rows.append({"domain": name, **dm.to_dict()})
        rows.append(
            {
                "domain": "mean",
                "sample_auroc": self.sample_auroc,
                "pixel_auroc": self.pixel_auroc,
                "pro": self.pro,
                "n_normal": None,
                "n_anomalous": None,
            }
        )
        return rows
