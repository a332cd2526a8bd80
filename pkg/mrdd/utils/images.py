import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

ROW_KINDS = ("original", "from_c", "from_cs")


def _to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().clamp(0.0, 1.0).numpy()
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    # C x H x W -> H x W x 3
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return arr.transpose(1, 2, 0)


def tile_rows(rows: Sequence[Sequence[torch.Tensor]], pad: int = 2) -> Image.Image:
    """Tile equally sized C x H x W tensors into one RGB image, one list per row."""
    if not rows or not rows[0]:
        raise ValueError("nothing to tile")
    h, w = rows[0][0].shape[-2:]
    n_cols = max(len(r) for r in rows)
    canvas = np.full((len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for r, row in enumerate(rows):
        for c, image in enumerate(row):
            top, left = pad + r * (h + pad), pad + c * (w + pad)
            canvas[top:top + h, left:left + w] = _to_uint8(image)
    return Image.fromarray(canvas)


def save_reconstruction_grid(result: Dict[str, List[torch.Tensor]], path: Union[str, Path],
                             n_samples: int = 8) -> str:
    """Write original / from-c / from-[c, s] rows for every view as a PNG.

    `result` is the output of reconstruct_samples: per kind, one
    (N, C, H, W) tensor per view.
    """
    rows = []
    for view in range(len(result["original"])):
        for kind in ROW_KINDS:
            images = result[kind][view][:n_samples]
            rows.append([images[k] for k in range(images.shape[0])])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tile_rows(rows).save(path)
    logger.info(f"Wrote reconstruction grid {path} ({len(rows)} rows)")
    return str(path)
