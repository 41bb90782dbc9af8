import numpy as np
import pytest
from scipy import ndimage

from maskrecon.errors import ShapeError, UndefinedMetric
from maskrecon.metrics import pixel_auroc, pro_score, sample_auroc


def auroc_pairwise_oracle(scores, labels):
    """O(n^2) concordance count: P(pos > neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def pro_exhaustive_oracle(maps, masks, fpr_limit):
    """Dense sweep over every distinct map value, straight-line evaluation.

    Implements the documented rule from scratch: 8-connected regions, mean
    per-region recall and global FPR per threshold, curve anchored at
    (0, 0), trapezoidal integration clipped at fpr_limit, normalized.
    """
    regions = []
    normal_sel = []
    for m, g in zip(maps, masks):
        labeled, n = ndimage.label(g > 0, structure=np.ones((3, 3)))
        for rid in range(1, n + 1):
            regions.append((m, labeled == rid))
        normal_sel.append((m, g == 0))
    n_normal = sum(sel.sum() for _, sel in normal_sel)
    thresholds = sorted({float(v) for m in maps for v in m.ravel()}, reverse=True)
    points = [(0.0, 0.0)]
    for t in thresholds:
        overlap = float(np.mean([(m[sel] >= t).mean() for m, sel in regions]))
        fp = sum((m[sel] >= t).sum() for m, sel in normal_sel) / n_normal
        points.append((fp, overlap))
    area = 0.0
    for (f0, o0), (f1, o1) in zip(points[:-1], points[1:]):
        if f0 >= fpr_limit:
            break
        if f1 > fpr_limit:
            o1 = o0 + (o1 - o0) * (fpr_limit - f0) / (f1 - f0)
            f1 = fpr_limit
        area += (f1 - f0) * (o0 + o1) / 2.0
    return area / fpr_limit


def random_pro_instance(rng, size=16, n_maps=2):
    maps, masks = [], []
    for _ in range(n_maps):
        maps.append(rng.random((size, size)))
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            r, c = rng.integers(0, size - 4, size=2)
            h, w = rng.integers(2, 5, size=2)
            mask[r : r + h, c : c + w] = 1
        masks.append(mask)
    return maps, masks


class TestSampleAuroc:
    def test_perfect_separation(self):
        scores = [0.1, 0.2, 0.3, 0.9, 1.1]
        labels = [0, 0, 0, 1, 1]
        assert sample_auroc(scores, labels) == 1.0

    def test_all_ties(self):
        assert sample_auroc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            n = 50
            scores = rng.integers(0, 10, size=n).astype(float)  # many ties
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            assert abs(sample_auroc(scores, labels) - auroc_pairwise_oracle(scores, labels)) < 1e-12

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetric):
            sample_auroc([1.0, 2.0], [1, 1])

    def test_complement_identity_without_ties(self):
        rng = np.random.default_rng(7)
        scores = rng.normal(size=40)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        total = sample_auroc(scores, labels) + sample_auroc(-scores, labels)
        assert abs(total - 1.0) < 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(8)
        scores = rng.normal(size=30)
        labels = np.r_[np.zeros(15, int), np.ones(15, int)]
        base = sample_auroc(scores, labels)
        assert abs(sample_auroc(np.exp(scores), labels) - base) < 1e-12
        assert abs(sample_auroc(3 * scores + 5, labels) - base) < 1e-12


class TestPixelAuroc:
    def test_map_equals_mask(self):
        mask = np.zeros((8, 8)); mask[2:4, 2:4] = 1
        assert pixel_auroc([mask.astype(float)], [mask]) == 1.0

    def test_flattening_equivalence(self):
        rng = np.random.default_rng(3)
        maps = [rng.random((6, 6)) for _ in range(3)]
        masks = [(rng.random((6, 6)) > 0.7).astype(int) for _ in range(3)]
        masks[0][0, 0] = 1  # ensure a positive
        pooled_scores = np.concatenate([m.ravel() for m in maps])
        pooled_labels = np.concatenate([g.ravel() for g in masks])
        assert pixel_auroc(maps, masks) == sample_auroc(pooled_scores, pooled_labels)

    def test_matches_pairwise_oracle_on_small_maps(self):
        rng = np.random.default_rng(4)
        maps = [rng.integers(0, 5, size=(4, 4)).astype(float) for _ in range(2)]
        masks = [(rng.random((4, 4)) > 0.6).astype(int) for _ in range(2)]
        masks[0][1, 1] = 1
        expected = auroc_pairwise_oracle(
            np.concatenate([m.ravel() for m in maps]),
            np.concatenate([g.ravel() for g in masks]),
        )
        assert abs(pixel_auroc(maps, masks) - expected) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            pixel_auroc([np.zeros((4, 4))], [np.zeros((5, 5))])


class TestProScore:
    def test_map_equals_mask_single_region(self):
        mask = np.zeros((10, 10), dtype=np.uint8); mask[3:6, 3:6] = 1
        assert abs(pro_score([mask.astype(float)], [mask]) - 1.0) < 1e-12

    def test_two_region_hand_computed_sweep(self):
        # Two equal-size regions, one scored 1.0 and one 0.0: mean overlap
        # is 0.5 wherever FPR = 0, and the normalized integral to 0.3 of
        # the (0,0.5)->(1,1) segment is 0.575.
        amap = np.zeros((8, 8)); amap[0:2, 0:2] = 1.0
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[0:2, 0:2] = 1
        mask[5:7, 5:7] = 1
        assert abs(pro_score([amap], [mask], fpr_limit=0.3) - 0.575) < 1e-9

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            maps, masks = random_pro_instance(rng)
            got = pro_score(maps, masks, fpr_limit=0.3)
            want = pro_exhaustive_oracle(maps, masks, 0.3)
            assert abs(got - want) < 1e-6

    def test_monotone_in_fpr_limit(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            maps, masks = random_pro_instance(rng)
            values = [pro_score(maps, masks, fpr_limit=lim) for lim in (0.1, 0.3, 1.0)]
            assert values[0] <= values[1] + 1e-12 <= values[2] + 2e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(13)
        maps, masks = random_pro_instance(rng)
        base = pro_score(maps, masks)
        warped = [np.exp(2.0 * m) for m in maps]
        assert abs(pro_score(warped, masks) - base) < 1e-12

    def test_no_region_undefined(self):
        with pytest.raises(UndefinedMetric):
            pro_score([np.zeros((4, 4))], [np.zeros((4, 4), dtype=np.uint8)])

    def test_disconnected_region_weighting(self):
        # A missed small region halves the mean overlap no matter its size.
        amap = np.zeros((12, 12))
        mask = np.zeros((12, 12), dtype=np.uint8)
        mask[0:6, 0:6] = 1   # large region, fully detected
        mask[10, 10] = 1     # single-pixel region, missed
        amap[0:6, 0:6] = 1.0
        pro = pro_score([amap], [mask], fpr_limit=0.3)
        assert abs(pro - 0.575) < 1e-9  # same curve as the two-region case
