import numpy as np
import pytest
import torch
from pydantic import ValidationError

from mrdd.services.data import MultiViewBatch
from mrdd.services.masking import (
    MaskSpec, apply_mask, default_patch_size, generate_mask, generate_masks, mask_batch,
    masked_patch_count, patch_grid,
)


def _batch(n=4, size=32, channels=(1, 3)):
    views = [torch.rand(n, c, size, size) + 0.5 for c in channels]
    return MultiViewBatch(views=views, sample_ids=torch.arange(n))


class TestPatchCount:
    @pytest.mark.parametrize("ratio,expected", [(0.0, 0), (0.5, 32), (0.7, 45), (0.9, 58), (1.0, 64)])
    def test_rounding(self, ratio, expected):
        assert masked_patch_count(ratio, 64) == expected

    def test_half_rounds_up(self):
        assert masked_patch_count(0.5, 5) == 3

    def test_default_patch_sizes(self):
        assert default_patch_size(32) == 4
        assert default_patch_size(64) == 8
        assert patch_grid(32, 32, 4) == (8, 8)

    def test_patch_must_divide_image(self):
        with pytest.raises(ValueError):
            patch_grid(32, 32, 5)

    def test_ratio_out_of_range(self):
        with pytest.raises(ValidationError):
            MaskSpec(ratio=1.2)


class TestStrategies:
    @pytest.mark.parametrize("strategy", ["random", "block", "grid"])
    @pytest.mark.parametrize("ratio", [0.0, 0.3, 0.7, 1.0])
    def test_exact_masked_count(self, strategy, ratio):
        mask = generate_mask(MaskSpec(strategy=strategy, ratio=ratio), 8, 8, np.random.default_rng(0))
        assert mask.shape == (8, 8)
        assert mask.sum() == masked_patch_count(ratio, 64)

    def test_random_is_seeded(self):
        spec = MaskSpec(strategy="random", ratio=0.5)
        a = generate_mask(spec, 8, 8, np.random.default_rng(3))
        b = generate_mask(spec, 8, 8, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_block_is_contiguous(self):
        mask = generate_mask(MaskSpec(strategy="block", ratio=0.25), 8, 8, np.random.default_rng(1))
        rows, cols = np.nonzero(mask)
        # 16 patches form a 4x4 square
        assert rows.max() - rows.min() == 3
        assert cols.max() - cols.min() == 3

    def test_block_partial_row(self):
        mask = generate_mask(MaskSpec(strategy="block", ratio=0.3), 8, 8, np.random.default_rng(2))
        assert mask.sum() == 19
        per_row = mask.sum(axis=1)
        filled = per_row[per_row > 0]
        assert (filled[:-1] == filled[0]).all()
        assert filled[-1] <= filled[0]

    def test_grid_is_fixed_and_spread(self):
        spec = MaskSpec(strategy="grid", ratio=0.5)
        a = generate_mask(spec, 8, 8, np.random.default_rng(0))
        b = generate_mask(spec, 8, 8, np.random.default_rng(99))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a.sum(axis=0), 4)
        np.testing.assert_array_equal(a.sum(axis=1), 4)

    def test_masks_independent_across_views(self):
        masks = generate_masks(MaskSpec(ratio=0.5), 6, 2, 8, 8, np.random.default_rng(0))
        assert masks.shape == (6, 2, 8, 8)
        np.testing.assert_array_equal(masks.sum(axis=(2, 3)), 32)
        assert not np.array_equal(masks[:, 0], masks[:, 1])

    def test_exact_count_over_random_specs(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            strategy = ["random", "block", "grid"][rng.integers(3)]
            ratio = float(rng.random())
            grid_h, grid_w = (int(g) for g in rng.integers(1, 17, size=2))
            mask = generate_mask(MaskSpec(strategy=strategy, ratio=ratio), grid_h, grid_w, rng)
            assert mask.shape == (grid_h, grid_w)
            assert mask.sum() == np.floor(ratio * grid_h * grid_w + 0.5), (strategy, ratio, grid_h, grid_w)

    def test_views_uncorrelated(self):
        masks = generate_masks(MaskSpec(ratio=0.5), 10_000, 2, 8, 8, np.random.default_rng(0))
        first = masks[:, 0].reshape(10_000, -1).astype(float)
        second = masks[:, 1].reshape(10_000, -1).astype(float)
        corr = [np.corrcoef(first[:, p], second[:, p])[0, 1] for p in range(64)]
        assert np.max(np.abs(corr)) < 0.05

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            generate_mask(MaskSpec(), 0, 8)


class TestApplyMask:
    def test_masked_pixels_take_fill_value(self):
        batch = _batch()
        masks = generate_masks(MaskSpec(ratio=0.5), 4, 2, 8, 8, np.random.default_rng(0))
        out = apply_mask(batch, masks, patch_size=4, fill=0.0)
        for i, (x, y) in enumerate(zip(batch.views, out.views)):
            pixels = torch.from_numpy(np.ascontiguousarray(masks[:, i]))
            pixels = pixels.repeat_interleave(4, 1).repeat_interleave(4, 2)
            pixels = pixels.unsqueeze(1).expand_as(x)
            assert (y[pixels] == 0.0).all()
            torch.testing.assert_close(y[~pixels], x[~pixels])

    def test_ratio_zero_returns_same_batch(self):
        batch = _batch()
        assert mask_batch(batch, MaskSpec(ratio=0.0), np.random.default_rng(0)) is batch

    def test_ratio_one_blanks_everything(self):
        out = mask_batch(_batch(), MaskSpec(ratio=1.0, fill=0.25), np.random.default_rng(0))
        for view in out.views:
            assert (view == 0.25).all()

    def test_original_untouched(self):
        batch = _batch()
        before = [v.clone() for v in batch.views]
        mask_batch(batch, MaskSpec(ratio=0.7), np.random.default_rng(0))
        for a, b in zip(before, batch.views):
            torch.testing.assert_close(a, b)

    def test_wrong_view_count(self):
        masks = np.zeros((4, 1, 8, 8), dtype=bool)
        with pytest.raises(ValueError, match="view masks"):
            apply_mask(_batch(), masks, patch_size=4)

    def test_wrong_grid(self):
        masks = np.zeros((4, 2, 4, 4), dtype=bool)
        with pytest.raises(ValueError, match="patch grid"):
            apply_mask(_batch(), masks, patch_size=4)
