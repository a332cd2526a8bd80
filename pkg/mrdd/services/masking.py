"""
Patch-level masking for masked cross-view prediction.

Three strategies are supported: random (exact masked count), block (one
contiguous region) and grid (a fixed periodic lattice). Masks are boolean
arrays over the patch grid, True meaning the patch is hidden.
"""

import math
import logging
from typing import Literal, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)


class MaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategy: Literal["random", "block", "grid"] = "random"
    ratio: float = Field(0.7, ge=0.0, le=1.0)
    # None picks the default for the image size (4 on 32px, 8 on 64px)
    patch_size: Optional[int] = Field(None, ge=1)
    fill: float = 0.0
    seed: int = 0


def default_patch_size(image_size: int) -> int:
    return {32: 4, 64: 8}.get(image_size, max(1, image_size // 8))


def patch_grid(height: int, width: int, patch_size: int):
    """Return (grid_h, grid_w) for an image, checking the patch divides it."""
    if patch_size < 1 or height % patch_size or width % patch_size:
        raise ValueError(f"patch_size {patch_size} must divide image size {height}x{width}")
    return height // patch_size, width // patch_size


def masked_patch_count(ratio: float, n_patches: int) -> int:
    """Round-half-up of ratio * n_patches, clipped to [0, n_patches]."""
    m = math.floor(ratio * n_patches + 0.5)
    return int(min(max(m, 0), n_patches))


def _random_mask(m: int, grid_h: int, grid_w: int, rng: np.random.Generator) -> np.ndarray:
    n_patches = grid_h * grid_w
    mask = np.zeros(n_patches, dtype=bool)
    mask[rng.permutation(n_patches)[:m]] = True
    return mask.reshape(grid_h, grid_w)


def _block_shape(m: int, grid_h: int, grid_w: int):
    # full rows of `width` patches plus one partial row holding the remainder
    width = min(grid_w, max(math.ceil(math.sqrt(m)), math.ceil(m / grid_h)))
    rows = math.ceil(m / width)
    return rows, width


def _block_mask(m: int, grid_h: int, grid_w: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    if m == 0:
        return mask
    rows, width = _block_shape(m, grid_h, grid_w)
    top = int(rng.integers(0, grid_h - rows + 1))
    left = int(rng.integers(0, grid_w - width + 1))
    full_rows, remainder = divmod(m, width)
    mask[top:top + full_rows, left:left + width] = True
    if remainder:
        mask[top + full_rows, left:left + remainder] = True
    return mask


def _grid_mask(m: int, grid_h: int, grid_w: int) -> np.ndarray:
    n_patches = grid_h * grid_w
    # evenly spaced hits along the raster order; for m = P/k this is every k-th patch
    p = np.arange(n_patches)
    hits = ((p + 1) * m) // n_patches - (p * m) // n_patches == 1
    hits = hits.reshape(grid_h, grid_w)
    # shift each row by its index so the lattice does not collapse into stripes
    rows = np.arange(grid_h)[:, None]
    cols = (np.arange(grid_w)[None, :] + rows) % grid_w
    return hits[rows, cols]


def generate_mask(spec: MaskSpec, grid_h: int, grid_w: int,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Generate one (grid_h, grid_w) boolean mask following `spec`."""
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"patch grid must be non-empty, got {grid_h}x{grid_w}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    m = masked_patch_count(spec.ratio, grid_h * grid_w)
    if spec.strategy == "random":
        return _random_mask(m, grid_h, grid_w, rng)
    if spec.strategy == "block":
        return _block_mask(m, grid_h, grid_w, rng)
    return _grid_mask(m, grid_h, grid_w)


def generate_masks(spec: MaskSpec, n_samples: int, n_views: int, grid_h: int, grid_w: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Independent masks for every sample and view, shape (n_samples, n_views, grid_h, grid_w)."""
    n_patches = grid_h * grid_w
    m = masked_patch_count(spec.ratio, n_patches)
    if spec.strategy == "random":
        order = np.argsort(rng.random((n_samples * n_views, n_patches)), axis=1)
        masks = np.zeros((n_samples * n_views, n_patches), dtype=bool)
        np.put_along_axis(masks, order[:, :m], True, axis=1)
        return masks.reshape(n_samples, n_views, grid_h, grid_w)
    masks = np.empty((n_samples, n_views, grid_h, grid_w), dtype=bool)
    for k in range(n_samples):
        for i in range(n_views):
            masks[k, i] = generate_mask(spec, grid_h, grid_w, rng)
    return masks


def _pixel_mask(mask: torch.Tensor, patch_size: int) -> torch.Tensor:
    return mask.repeat_interleave(patch_size, dim=-2).repeat_interleave(patch_size, dim=-1)


def apply_mask(batch, masks: Union[np.ndarray, torch.Tensor, Sequence], patch_size: int,
               fill: float = 0.0):
    """Replace masked patches by `fill`, returning a new batch.

    `masks` holds one (batch, grid_h, grid_w) mask per view, either as a sequence
    or as an array of shape (batch, n_views, grid_h, grid_w).
    """
    views = batch.views
    if isinstance(masks, (np.ndarray, torch.Tensor)) and masks.ndim == 4:
        masks = [masks[:, i] for i in range(masks.shape[1])]
    if len(masks) != len(views):
        raise ValueError(f"expected {len(views)} view masks, got {len(masks)}")

    masked_views = []
    for i, (x, mask) in enumerate(zip(views, masks)):
        mask = torch.as_tensor(mask, dtype=torch.bool, device=x.device)
        if mask.ndim != 3 or mask.shape[0] != x.shape[0]:
            raise ValueError(f"view {i}: mask shape {tuple(mask.shape)} does not match batch of {x.shape[0]}")
        grid = patch_grid(x.shape[-2], x.shape[-1], patch_size)
        if tuple(mask.shape[1:]) != grid:
            raise ValueError(f"view {i}: mask grid {tuple(mask.shape[1:])} != patch grid {grid}")
        pixels = _pixel_mask(mask, patch_size).unsqueeze(1)
        masked_views.append(x.masked_fill(pixels, fill))
    return batch.replace(views=masked_views)


def mask_batch(batch, spec: MaskSpec, rng: np.random.Generator):
    """Draw fresh independent masks for a batch and apply them."""
    height, width = batch.views[0].shape[-2:]
    patch_size = spec.patch_size or default_patch_size(height)
    grid_h, grid_w = patch_grid(height, width, patch_size)
    if masked_patch_count(spec.ratio, grid_h * grid_w) == 0:
        return batch
    masks = generate_masks(spec, batch.size, batch.n_views, grid_h, grid_w, rng)
    return apply_mask(batch, masks, patch_size, spec.fill)
