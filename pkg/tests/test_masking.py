import json
import math

import numpy as np
import pytest
import torch

from maskrecon.errors import ConfigError, ShapeError
from maskrecon.masking import (
    MaskSpec,
    apply_unit_mask,
    assemble_full_grid,
    patchify,
    patchify_batch,
    sample_mask_indices,
    unpatchify,
    visible_count,
)


class TestPatchify:
    def test_standard_grid(self):
        x = torch.randn(3, 224, 224)
        seq = patchify(x, 16)
        assert seq.patches.shape == (196, 768)
        assert seq.grid_side == 14

    def test_single_patch(self):
        x = torch.randn(3, 16, 16)
        seq = patchify(x, 16)
        assert seq.patches.shape == (1, 768)

    def test_round_trip(self):
        x = torch.randn(3, 64, 64)
        assert torch.equal(unpatchify(patchify(x, 16)), x)

    def test_row_major_block_placement(self):
        # Patch k must be the block at grid position (k // side, k % side).
        x = torch.randn(3, 32, 32)
        seq = patchify(x, 16)
        k = 3  # row 1, col 1
        block = x[:, 16:32, 16:32].permute(1, 2, 0).reshape(-1)
        assert torch.equal(seq.patches[k], block)

    def test_non_divisible_raises(self):
        with pytest.raises(ShapeError):
            patchify(torch.randn(3, 30, 30), 16)

    def test_non_square_raises(self):
        with pytest.raises(ShapeError):
            patchify(torch.randn(3, 32, 64), 16)

    def test_batched_matches_single(self):
        x = torch.randn(4, 3, 48, 48)
        batched = patchify_batch(x, 16)
        for i in range(4):
            assert torch.equal(batched[i], patchify(x[i], 16).patches)


class TestSampleMaskIndices:
    def test_floor_counts_at_default_ratio(self):
        spec = sample_mask_indices(196, 0.4, seed=0)
        assert len(spec.visible_indices) == 117
        assert len(spec.masked_indices) == 79

    def test_zero_ratio_keeps_everything(self):
        spec = sample_mask_indices(8, 0.0, seed=1)
        assert spec.visible_indices == tuple(range(8))
        assert spec.masked_indices == ()

    def test_floor_arithmetic(self):
        spec = sample_mask_indices(16, 0.4, seed=2)
        assert len(spec.visible_indices) == 9  # floor(16 * 0.6)

    def test_deterministic_per_seed(self):
        assert sample_mask_indices(64, 0.5, seed=3) == sample_mask_indices(64, 0.5, seed=3)
        assert sample_mask_indices(64, 0.5, seed=3) != sample_mask_indices(64, 0.5, seed=4)

    def test_ratio_out_of_range(self):
        with pytest.raises(ConfigError):
            sample_mask_indices(16, 1.0, seed=0)
        with pytest.raises(ConfigError):
            sample_mask_indices(16, -0.1, seed=0)

    def test_partition_over_many_seeds(self):
        n = 24
        for seed in range(300):
            spec = sample_mask_indices(n, 0.3, seed=seed)
            assert sorted(spec.visible_indices + spec.masked_indices) == list(range(n))

    def test_uniform_visibility_frequency(self):
        # Each index should be visible with frequency k/n within 3 sigma
        # of the binomial over a fixed block of seeds.
        n, ratio, trials = 16, 0.4, 10_000
        k = visible_count(n, ratio)
        hits = np.zeros(n)
        for seed in range(trials):
            for i in sample_mask_indices(n, ratio, seed=seed).visible_indices:
                hits[i] += 1
        p = k / n
        sigma = math.sqrt(p * (1 - p) / trials)
        assert np.all(np.abs(hits / trials - p) < 3 * sigma + 1e-12)

    def test_json_round_trip(self):
        spec = sample_mask_indices(32, 0.25, seed=9, unit_size=8, mode="in_place_fill")
        assert MaskSpec.from_json(spec.to_json()) == spec


class TestMaskSpecValidation:
    def test_rejects_bad_partition(self):
        with pytest.raises(ConfigError):
            MaskSpec(ratio=0.5, unit_size=16, visible_indices=(0, 1), masked_indices=(1, 2))

    def test_rejects_count_mismatch(self):
        # floor(4 * 0.5) = 2 visible required
        with pytest.raises(ConfigError):
            MaskSpec(ratio=0.5, unit_size=16, visible_indices=(0,), masked_indices=(1, 2, 3))


class TestApplyUnitMask:
    def _spec(self, n, ratio, seed, q):
        return sample_mask_indices(n, ratio, seed=seed, unit_size=q, mode="in_place_fill")

    def test_coarse_unit_counts(self):
        # q=112 on a 224 image gives 4 units, 2 of them masked at ratio 0.4.
        spec = self._spec(4, 0.4, seed=0, q=112)
        assert len(spec.masked_indices) == 2
        x = torch.randn(3, 224, 224)
        out = apply_unit_mask(x, spec, fill_value=0.0)
        changed = (out != x).any(dim=0)
        assert changed.sum() == 2 * 112 * 112

    def test_zero_ratio_is_identity(self):
        spec = self._spec(16, 0.0, seed=1, q=8)
        x = torch.randn(3, 32, 32)
        assert torch.equal(apply_unit_mask(x, spec), x)

    def test_fill_and_visible_semantics(self):
        spec = self._spec(16, 0.5, seed=2, q=8)
        x = torch.randn(3, 32, 32)
        out = apply_unit_mask(x, spec, fill_value=0.25)
        units_per_row = 32 // 8
        for k in range(16):
            r, c = divmod(k, units_per_row)
            block = out[:, r * 8 : (r + 1) * 8, c * 8 : (c + 1) * 8]
            source = x[:, r * 8 : (r + 1) * 8, c * 8 : (c + 1) * 8]
            if k in spec.masked_indices:
                assert torch.all(block == 0.25)
            else:
                assert torch.equal(block, source)

    def test_idempotent(self):
        spec = self._spec(16, 0.5, seed=3, q=8)
        x = torch.randn(3, 32, 32)
        once = apply_unit_mask(x, spec)
        assert torch.equal(apply_unit_mask(once, spec), once)

    def test_unit_not_dividing_side_raises(self):
        spec = self._spec(16, 0.5, seed=4, q=7)
        with pytest.raises(ShapeError):
            apply_unit_mask(torch.randn(3, 32, 32), spec)

    def test_token_drop_spec_rejected(self):
        spec = sample_mask_indices(16, 0.5, seed=5, unit_size=8)
        with pytest.raises(ConfigError):
            apply_unit_mask(torch.randn(3, 32, 32), spec)


class TestAssembleFullGrid:
    def test_zero_ratio_is_plain_reshape(self):
        d = 8
        spec = sample_mask_indices(16, 0.0, seed=0)
        emb = torch.randn(16, d)
        grid = assemble_full_grid(emb, spec, torch.full((d,), 9.0), torch.zeros(16, d))
        assert torch.equal(grid, emb.reshape(4, 4, d))

    def test_mask_token_positions(self):
        d = 4
        spec = sample_mask_indices(16, 0.5, seed=1)
        emb = torch.randn(8, d)
        token = torch.randn(d)
        pos = torch.randn(16, d)
        grid = assemble_full_grid(emb, spec, token, pos).reshape(16, d)
        for k in spec.masked_indices:
            assert torch.equal(grid[k], token + pos[k])
        for row, k in enumerate(spec.visible_indices):
            assert torch.equal(grid[k], emb[row])

    def test_masked_cell_count_at_paper_scale(self):
        d = 16
        spec = sample_mask_indices(196, 0.4, seed=2)
        emb = torch.randn(117, d)
        token = torch.full((d,), 5.0)
        grid = assemble_full_grid(emb, spec, token, torch.zeros(196, d)).reshape(196, d)
        n_token_cells = sum(1 for k in range(196) if torch.equal(grid[k], token))
        assert n_token_cells == 79

    def test_size_mismatch_raises(self):
        spec = sample_mask_indices(16, 0.5, seed=3)
        with pytest.raises(ShapeError):
            assemble_full_grid(torch.randn(7, 4), spec, torch.zeros(4), torch.zeros(16, 4))
        with pytest.raises(ShapeError):
            assemble_full_grid(torch.randn(8, 4), spec, torch.zeros(5), torch.zeros(16, 4))
