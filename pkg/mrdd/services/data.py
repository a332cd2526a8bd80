"""
Multi-view dataset construction, persistence, splitting and batch iteration.

A dataset on disk is a directory holding `manifest.json`, one `view_<i>.npy`
array per view (float32, N x C x H x W, values in [0, 1]) and `labels.npy`.
"""

import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

logger = logging.getLogger(__name__)

RECIPES = ("emnist-edge", "efmnist-edge", "coil-group", "jitter3", "synthetic")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
SPLITS = ("train", "test", "all")


class ViewSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    view_index: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    channels: Literal[1, 3]
    synthesis: Literal["identity", "edge", "jitter", "grouped"] = "identity"


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    recipe: Optional[str] = None
    n_samples: int = Field(..., ge=1)
    n_classes: int = Field(..., ge=0)
    class_names: List[str] = Field(default_factory=list)
    views: List[ViewSpec]
    split_seed: int = 0
    train_indices: List[int] = Field(default_factory=list)
    test_indices: List[int] = Field(default_factory=list)
    view_files: List[str] = Field(default_factory=list)
    labels_file: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if not self.views:
            raise ValueError("a dataset needs at least one view")
        sizes = {(v.height, v.width) for v in self.views}
        if len(sizes) != 1:
            raise ValueError(f"all views must share height and width, got {sorted(sizes)}")
        if self.train_indices or self.test_indices:
            train, test = set(self.train_indices), set(self.test_indices)
            if train & test:
                raise ValueError("train and test indices overlap")
            if train | test != set(range(self.n_samples)):
                raise ValueError("train and test indices must cover every sample")
        return self

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def image_size(self) -> int:
        return self.views[0].height


class JitterConfig(BaseModel):
    """Photometric jitter ranges, either a half-width around identity or explicit (low, high)."""

    model_config = ConfigDict(extra="forbid")

    brightness: Union[float, Tuple[float, float]] = 0.4
    contrast: Union[float, Tuple[float, float]] = 0.4
    saturation: Union[float, Tuple[float, float]] = 0.4
    hue: Union[float, Tuple[float, float]] = 0.1

    def factor_range(self, name: str) -> Tuple[float, float]:
        value = getattr(self, name)
        if isinstance(value, tuple):
            return float(value[0]), float(value[1])
        if value < 0:
            raise ValueError(f"jitter {name} must be non-negative, got {value}")
        if name == "hue":
            return -float(value), float(value)
        return max(0.0, 1.0 - value), 1.0 + value

    def is_identity(self, name: str) -> bool:
        identity = 0.0 if name == "hue" else 1.0
        return self.factor_range(name) == (identity, identity)


@dataclass
class MultiViewBatch:
    views: List[torch.Tensor]
    sample_ids: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        sizes = {int(v.shape[0]) for v in self.views}
        if len(sizes) != 1 or int(self.sample_ids.shape[0]) not in sizes:
            raise ValueError(f"all views and ids must share the batch length, got {sorted(sizes)}")

    @property
    def size(self) -> int:
        return int(self.sample_ids.shape[0])

    @property
    def n_views(self) -> int:
        return len(self.views)

    def replace(self, **changes) -> "MultiViewBatch":
        return replace(self, **changes)

    def to(self, device) -> "MultiViewBatch":
        return self.replace(
            views=[v.to(device) for v in self.views],
            labels=self.labels.to(device) if self.labels is not None else None,
        )


@dataclass
class MultiViewDataset:
    manifest: DatasetManifest
    views: List[np.ndarray]
    labels: Optional[np.ndarray] = None
    path: Optional[Path] = field(default=None, compare=False)

    def __len__(self) -> int:
        return self.manifest.n_samples

    @property
    def n_views(self) -> int:
        return len(self.views)

    def indices(self, split: str) -> np.ndarray:
        if split == "train":
            return np.asarray(self.manifest.train_indices, dtype=np.int64)
        if split == "test":
            return np.asarray(self.manifest.test_indices, dtype=np.int64)
        if split == "all":
            return np.arange(self.manifest.n_samples, dtype=np.int64)
        raise ValueError(f"Unknown split '{split}', expected one of {SPLITS}")

    def save(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        view_files = []
        for i, arr in enumerate(self.views, start=1):
            name = f"view_{i}.npy"
            np.save(out_dir / name, np.ascontiguousarray(arr, dtype=np.float32))
            view_files.append(name)
        labels_file = None
        if self.labels is not None:
            labels_file = "labels.npy"
            np.save(out_dir / labels_file, np.asarray(self.labels, dtype=np.int64))
        self.manifest = self.manifest.model_copy(update={"view_files": view_files, "labels_file": labels_file})
        with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(self.manifest.model_dump(mode="json"), f, indent=2)
        self.path = out_dir
        logger.info(f"Saved dataset '{self.manifest.name}' ({self.manifest.n_samples} samples, "
                    f"{self.n_views} views) to {out_dir}")
        return out_dir

    @classmethod
    def load(cls, path: Union[str, Path], mmap: bool = False) -> "MultiViewDataset":
        path = Path(path)
        manifest_path = path / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"Dataset manifest not found: {manifest_path}")
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = DatasetManifest.model_validate(json.load(f))
        mode = "r" if mmap else None
        views = [np.load(path / name, mmap_mode=mode) for name in manifest.view_files]
        for name, arr in zip(manifest.view_files, views):
            if arr.shape[0] != manifest.n_samples:
                raise ValueError(f"{name} has {arr.shape[0]} rows, manifest says {manifest.n_samples}")
        labels = np.load(path / manifest.labels_file) if manifest.labels_file else None
        return cls(manifest=manifest, views=views, labels=labels, path=path)


def _as_nchw(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None, None]
    elif images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise ValueError(f"expected images as N x C x H x W, got shape {images.shape}")
    return images


def _to_gray(images: np.ndarray) -> np.ndarray:
    if images.shape[1] == 1:
        return images[:, 0]
    if images.shape[1] == 3:
        weights = np.array([0.299, 0.587, 0.114])
        return np.tensordot(weights, images, axes=([0], [1]))
    raise ValueError(f"images must have 1 or 3 channels, got {images.shape[1]}")


def synth_edge_view(images: np.ndarray) -> np.ndarray:
    """Sobel gradient-magnitude edge view, min-max normalised per image.

    Accepts N x H x W or N x C x H x W (C in {1, 3}); returns N x 1 x H x W.
    """
    images = _as_nchw(images)
    if images.size == 0:
        raise ValueError("cannot synthesise an edge view from an empty array")
    if np.isnan(images).any():
        raise ValueError("images contain NaN pixels")

    gray = _to_gray(images.astype(np.float64))
    edges = np.empty_like(gray)
    for k, img in enumerate(gray):
        gx = ndimage.sobel(img, axis=1, mode="nearest")
        gy = ndimage.sobel(img, axis=0, mode="nearest")
        magnitude = np.hypot(gx, gy)
        lo, hi = magnitude.min(), magnitude.max()
        edges[k] = (magnitude - lo) / (hi - lo) if hi > lo else 0.0
    return edges[:, None].astype(np.float32)


def synth_jitter_views(images: np.ndarray, n_views: int, rng_seed: int,
                       jitter: Optional[JitterConfig] = None) -> List[np.ndarray]:
    """View 1 is the input; views 2..n_views get independent per-image colour jitter."""
    if n_views < 2:
        raise ValueError(f"n_views must be at least 2, got {n_views}")
    jitter = jitter or JitterConfig()
    images = _as_nchw(images).astype(np.float32)
    if images.shape[1] != 3 and not (jitter.is_identity("hue") and jitter.is_identity("saturation")):
        raise ValueError("hue/saturation jitter requires RGB images")

    rng = np.random.default_rng(rng_seed)
    ops = [
        ("brightness", TF.adjust_brightness),
        ("contrast", TF.adjust_contrast),
        ("saturation", TF.adjust_saturation),
        ("hue", TF.adjust_hue),
    ]
    views = [images.copy()]
    for _ in range(1, n_views):
        # draw every factor for every image up front so the stream is independent of skips
        factors = {name: rng.uniform(*jitter.factor_range(name), size=len(images)) for name, _ in ops}
        out = torch.from_numpy(images.copy())
        for k in range(len(images)):
            img = out[k]
            for name, fn in ops:
                if not jitter.is_identity(name):
                    img = fn(img, float(factors[name][k]))
            out[k] = img
        views.append(out.numpy())
    return views


def group_into_views(images_per_object: Mapping[str, Sequence[np.ndarray]], n_views: int = 3,
                     rng_seed: int = 0):
    """Randomly partition each object's images into tuples of `n_views`.

    Leftover images (count mod n_views) are dropped. Returns (views, labels, object_names)
    where label k refers to object_names[k].
    """
    if n_views < 1:
        raise ValueError(f"n_views must be positive, got {n_views}")
    names = sorted(images_per_object, key=str)
    for name in names:
        if len(images_per_object[name]) < n_views:
            raise ValueError(f"Object '{name}' has {len(images_per_object[name])} images, "
                             f"needs at least {n_views}")

    rng = np.random.default_rng(rng_seed)
    per_view: List[List[np.ndarray]] = [[] for _ in range(n_views)]
    labels = []
    for label, name in enumerate(names):
        imgs = images_per_object[name]
        n_groups = len(imgs) // n_views
        order = rng.permutation(len(imgs))[: n_groups * n_views].reshape(n_groups, n_views)
        for group in order:
            for i, idx in enumerate(group):
                per_view[i].append(np.asarray(imgs[idx]))
            labels.append(label)
    views = [_as_nchw(np.stack(v)).astype(np.float32) for v in per_view]
    return views, np.asarray(labels, dtype=np.int64), [str(n) for n in names]


def _class_quotas(counts: np.ndarray, n_train: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Per-class train counts summing to n_train, each as close to ratio * n_c as the total allows.

    Every class keeps at least one train and one test sample unless the total
    makes that impossible.
    """
    lo, hi = np.ones_like(counts), counts - 1
    if not lo.sum() <= n_train <= hi.sum():
        lo, hi = np.zeros_like(counts), counts
    quota = ratio * counts
    take = np.clip(np.floor(quota).astype(np.int64), lo, hi)
    # ties between equal remainders are broken at random
    tiebreak = rng.random(len(counts))
    while take.sum() != n_train:
        remainder = quota - take
        if take.sum() < n_train:
            open_ = np.flatnonzero(take < hi)
            pick = open_[np.lexsort((tiebreak[open_], -remainder[open_]))[0]]
            take[pick] += 1
        else:
            open_ = np.flatnonzero(take > lo)
            pick = open_[np.lexsort((tiebreak[open_], remainder[open_]))[0]]
            take[pick] -= 1
    return take


def split_dataset(data: Union["MultiViewDataset", np.ndarray, int], ratio: float = 0.8, seed: int = 0,
                  stratify: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic train/test split with |train| = round(ratio * n), stratified when labels exist."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if isinstance(data, MultiViewDataset):
        labels, n = data.labels, len(data)
    elif isinstance(data, (int, np.integer)):
        labels, n = None, int(data)
    else:
        labels = np.asarray(data)
        n = len(labels)
    n_train = int(round(ratio * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"cannot split {n} samples at ratio {ratio}")

    rng = np.random.default_rng(seed)
    if labels is not None and stratify:
        classes, counts = np.unique(labels, return_counts=True)
        if (counts < 2).any():
            raise ValueError(f"classes {classes[counts < 2].tolist()} have fewer than 2 samples; "
                             f"cannot stratify")
        take = _class_quotas(counts, n_train, ratio, rng)
        train = np.concatenate([
            rng.permutation(np.flatnonzero(labels == label))[:k] for label, k in zip(classes, take)
        ])
    else:
        train = rng.permutation(n)[:n_train]
    test = np.setdiff1d(np.arange(n), train)
    return np.sort(train).astype(np.int64), test.astype(np.int64)


def iterate_batches(dataset: MultiViewDataset, split: str = "train", batch_size: int = 512,
                    shuffle: bool = True, seed: int = 0, epoch: int = 0, device=None,
                    prefetch: int = 0) -> Iterator[MultiViewBatch]:
    """Yield MultiViewBatches covering every index of `split` exactly once.

    The shuffle order depends on (seed, epoch). With prefetch > 0 batches are
    assembled on a background thread; delivery order is unchanged.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    indices = dataset.indices(split)
    if shuffle:
        rng = np.random.default_rng([seed, epoch])
        indices = indices[rng.permutation(len(indices))]
    chunks = [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]

    def make_batch(idx: np.ndarray) -> MultiViewBatch:
        views = [torch.from_numpy(np.ascontiguousarray(v[idx], dtype=np.float32)) for v in dataset.views]
        labels = torch.from_numpy(np.asarray(dataset.labels[idx])) if dataset.labels is not None else None
        batch = MultiViewBatch(views=views, sample_ids=torch.from_numpy(idx.copy()), labels=labels)
        return batch.to(device) if device is not None else batch

    if prefetch <= 0:
        for idx in chunks:
            yield make_batch(idx)
        return

    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = deque()
        for idx in chunks:
            pending.append(pool.submit(make_batch, idx))
            if len(pending) > prefetch:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _fit_to_size(images: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad (e.g. 28 -> 32) or resample N x C x H x W images to size x size."""
    h, w = images.shape[-2:]
    if (h, w) == (size, size):
        return images
    if h <= size and w <= size and (size - h) % 2 == 0 and (size - w) % 2 == 0:
        ph, pw = (size - h) // 2, (size - w) // 2
        return np.pad(images, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    resized = np.empty(images.shape[:2] + (size, size), dtype=np.float32)
    for k, img in enumerate(images):
        for ch in range(img.shape[0]):
            pil = Image.fromarray(img[ch].astype(np.float32))
            resized[k, ch] = np.asarray(pil.resize((size, size), Image.BILINEAR))
    return np.clip(resized, 0.0, 1.0)


def _load_image(path: Path, size: int, mode: str) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert(mode).resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def load_source(src: Union[str, Path], image_size: int):
    """Load source images as (images N x C x H x W in [0, 1], labels, class_names).

    `src` holds either `images.npy` (+ optional `labels.npy`) or one
    sub-directory per object/class with image files.
    """
    src = Path(src)
    if not src.exists():
        raise FileNotFoundError(f"Source directory not found: {src}")
    if (src / "images.npy").exists():
        images = _as_nchw(np.load(src / "images.npy")).astype(np.float32)
        if images.max() > 1.0:
            images = images / 255.0
        labels_path = src / "labels.npy"
        labels = np.load(labels_path).astype(np.int64) if labels_path.exists() else np.zeros(len(images), np.int64)
        names = [str(k) for k in range(int(labels.max()) + 1)]
        return _fit_to_size(images, image_size), labels, names

    objects = sorted(p for p in src.iterdir() if p.is_dir())
    if not objects:
        raise ValueError(f"No images.npy and no object sub-directories in {src}")
    files = {o.name: sorted(f for f in o.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES) for o in objects}
    first = next((f[0] for f in files.values() if f), None)
    if first is None:
        raise ValueError(f"No image files found under {src}")
    with Image.open(first) as sample:
        mode = "RGB" if sample.mode not in ("L", "1", "I", "I;16", "F") else "L"

    images, labels = [], []
    for label, obj in enumerate(objects):
        for f in files[obj.name]:
            images.append(_load_image(f, image_size, mode))
            labels.append(label)
    logger.info(f"Loaded {len(images)} images of {len(objects)} objects from {src}")
    return np.stack(images), np.asarray(labels, dtype=np.int64), [o.name for o in objects]


def make_synthetic_dataset(n_samples: int = 1000, n_classes: int = 10, image_size: int = 32,
                           seed: int = 0, glyph_scale: int = 3):
    """Two-view toy benchmark: a class glyph shared by both views, per-view shift and contrast.

    View 1 is the glyph image, view 2 the Sobel edge map of an independently
    shifted copy. Classes are balanced. Returns (views, labels, class_names).
    """
    rng = np.random.default_rng(seed)
    glyph_rng = np.random.default_rng(10_000 + n_classes)
    glyphs = glyph_rng.random((n_classes, 5, 5)) > 0.5
    glyphs = np.stack([np.kron(g, np.ones((glyph_scale, glyph_scale))) for g in glyphs])
    g = glyphs.shape[-1]
    if g > image_size:
        raise ValueError(f"glyph of {g}px does not fit a {image_size}px image")

    labels = rng.permutation(np.arange(n_samples) % n_classes)
    canvases = np.zeros((2, n_samples, image_size, image_size), dtype=np.float64)
    for view in range(2):
        offsets = rng.integers(0, image_size - g + 1, size=(n_samples, 2))
        contrast = rng.uniform(0.5, 1.0, size=n_samples)
        for k in range(n_samples):
            top, left = offsets[k]
            canvases[view, k, top:top + g, left:left + g] = glyphs[labels[k]] * contrast[k]
        canvases[view] += rng.normal(0.0, 0.03, size=canvases[view].shape)
    canvases = np.clip(canvases, 0.0, 1.0)
    views = [canvases[0][:, None].astype(np.float32), synth_edge_view(canvases[1])]
    return views, labels.astype(np.int64), [str(k) for k in range(n_classes)]


def build_dataset(name: str, views: List[np.ndarray], labels: Optional[np.ndarray], class_names: List[str],
                  synthesis: Sequence[str], recipe: Optional[str] = None, split_seed: int = 0,
                  ratio: float = 0.8) -> MultiViewDataset:
    """Wrap view arrays into a MultiViewDataset with manifest and split."""
    n = views[0].shape[0]
    for i, v in enumerate(views):
        if v.shape[0] != n:
            raise ValueError(f"view {i + 1} has {v.shape[0]} rows, expected {n}")
    specs = [ViewSpec(view_index=i + 1, height=v.shape[2], width=v.shape[3], channels=v.shape[1],
                      synthesis=s) for i, (v, s) in enumerate(zip(views, synthesis))]
    train, test = split_dataset(labels if labels is not None else n, ratio=ratio, seed=split_seed)
    manifest = DatasetManifest(
        name=name, recipe=recipe, n_samples=n,
        n_classes=len(np.unique(labels)) if labels is not None else 0,
        class_names=class_names, views=specs, split_seed=split_seed,
        train_indices=train.tolist(), test_indices=test.tolist(),
    )
    return MultiViewDataset(manifest=manifest, views=views, labels=labels)


def synthesize(recipe: str, out: Union[str, Path], src: Optional[Union[str, Path]] = None, seed: int = 0,
               image_size: Optional[int] = None, n_views: int = 3, n_samples: int = 1000,
               jitter: Optional[JitterConfig] = None, progress_callback=None) -> MultiViewDataset:
    """Build one of the dataset families and persist it under `out`."""
    if recipe not in RECIPES:
        raise ValueError(f"Unknown recipe '{recipe}', expected one of {RECIPES}")
    if progress_callback:
        progress_callback(0, f"Synthesising {recipe} dataset...")

    if recipe == "synthetic":
        views, labels, names = make_synthetic_dataset(n_samples, image_size=image_size or 32, seed=seed)
        synthesis = ["identity", "edge"]
    else:
        if src is None:
            raise ValueError(f"recipe '{recipe}' needs a --src directory")
        size = image_size or (32 if recipe.endswith("edge") else 64)
        images, labels, names = load_source(src, size)
        if recipe in ("emnist-edge", "efmnist-edge"):
            views = [images, synth_edge_view(images)]
            synthesis = ["identity", "edge"]
        elif recipe == "coil-group":
            per_object = {name: [images[j] for j in np.flatnonzero(labels == k)] for k, name in enumerate(names)}
            views, labels, names = group_into_views(per_object, n_views=n_views, rng_seed=seed)
            synthesis = ["grouped"] * n_views
        else:
            views = synth_jitter_views(images, n_views=n_views, rng_seed=seed, jitter=jitter)
            synthesis = ["identity"] + ["jitter"] * (n_views - 1)

    if progress_callback:
        progress_callback(80, "Splitting and writing arrays...")
    dataset = build_dataset(Path(out).name, views, labels, names, synthesis, recipe=recipe, split_seed=seed)
    dataset.save(out)
    if progress_callback:
        progress_callback(100, "Dataset ready")
    return dataset
