"""
Latents file: posterior-mean codes for every sample, stored as a directory
with a JSON header (dims, view count, checkpoint hashes, split rows) and one
.npy array per representation type.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import numpy as np
import torch

from mrdd.services.data import MultiViewDataset, iterate_batches
from mrdd.services.disentangle import SpecificModel, encode_specific
from mrdd.services.consistency import encode_consistent
from mrdd.services.evaluation import RepresentationSelector

logger = logging.getLogger(__name__)

LATENTS_FORMAT = "mrdd-latents"
HEADER_FILE = "latents.json"


@dataclass
class LatentBundle:
    sample_id: int
    c: np.ndarray
    s: List[np.ndarray]
    label: Optional[int] = None


@dataclass
class LatentSet:
    c: np.ndarray
    s: np.ndarray
    sample_ids: np.ndarray
    labels: Optional[np.ndarray] = None
    train_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = self.c.shape[0]
        if self.s.ndim != 3 or self.s.shape[0] != n or self.sample_ids.shape[0] != n:
            raise ValueError(f"latent arrays disagree: c {self.c.shape}, s {self.s.shape}, "
                             f"ids {self.sample_ids.shape}")
        if not (np.isfinite(self.c).all() and np.isfinite(self.s).all()):
            raise ValueError("latents contain non-finite values")

    def __len__(self) -> int:
        return int(self.c.shape[0])

    @property
    def d_c(self) -> int:
        return int(self.c.shape[1])

    @property
    def d_s(self) -> int:
        return int(self.s.shape[2])

    @property
    def n_views(self) -> int:
        return int(self.s.shape[1])

    @property
    def n_classes(self) -> int:
        return int(len(np.unique(self.labels))) if self.labels is not None else 0

    def bundles(self) -> Iterator[LatentBundle]:
        for row in range(len(self)):
            yield LatentBundle(
                sample_id=int(self.sample_ids[row]),
                c=self.c[row],
                s=[self.s[row, i] for i in range(self.n_views)],
                label=int(self.labels[row]) if self.labels is not None else None,
            )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / "c.npy", self.c.astype(np.float32))
        np.save(path / "s.npy", self.s.astype(np.float32))
        np.save(path / "sample_ids.npy", self.sample_ids.astype(np.int64))
        if self.labels is not None:
            np.save(path / "labels.npy", self.labels.astype(np.int64))
        header = {
            "format": LATENTS_FORMAT,
            "n_samples": len(self),
            "d_c": self.d_c,
            "d_s": self.d_s,
            "n_views": self.n_views,
            "has_labels": self.labels is not None,
            "train_rows": self.train_rows.tolist(),
            "test_rows": self.test_rows.tolist(),
            **self.meta,
        }
        with open(path / HEADER_FILE, "w", encoding="utf-8") as f:
            json.dump(header, f, indent=2)
        logger.info(f"Saved {len(self)} latent bundles to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LatentSet":
        path = Path(path)
        header_path = path / HEADER_FILE
        if not header_path.exists():
            raise FileNotFoundError(f"Latents header not found: {header_path}")
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
        if header.get("format") != LATENTS_FORMAT:
            raise ValueError(f"{path} is not an {LATENTS_FORMAT} directory")
        labels = np.load(path / "labels.npy") if header.get("has_labels") else None
        reserved = {"format", "n_samples", "d_c", "d_s", "n_views", "has_labels", "train_rows", "test_rows"}
        latents = cls(
            c=np.load(path / "c.npy"),
            s=np.load(path / "s.npy"),
            sample_ids=np.load(path / "sample_ids.npy"),
            labels=labels,
            train_rows=np.asarray(header["train_rows"], dtype=np.int64),
            test_rows=np.asarray(header["test_rows"], dtype=np.int64),
            meta={k: v for k, v in header.items() if k not in reserved},
        )
        if (latents.d_c, latents.d_s, latents.n_views) != (header["d_c"], header["d_s"], header["n_views"]):
            raise ValueError(f"{path}: arrays do not match the header dims")
        return latents


def extract_latents(model: SpecificModel, dataset: MultiViewDataset, split: str = "all", batch_size: int = 512,
                    device: str = "cpu", meta: Optional[Dict[str, Any]] = None) -> LatentSet:
    """Posterior means of c and every s^i; no sampling, so repeated calls agree bit for bit."""
    model.to(device)
    was_training = model.training
    model.eval()
    cs, ss, ids, labels = [], [], [], []
    try:
        with torch.no_grad():
            for batch in iterate_batches(dataset, split, batch_size, shuffle=False, device=device):
                cs.append(encode_consistent(model.consistent, batch.views).mean.cpu().numpy())
                posts = encode_specific(model, batch.views)
                ss.append(np.stack([p.mean.cpu().numpy() for p in posts], axis=1))
                ids.append(batch.sample_ids.cpu().numpy())
                if batch.labels is not None:
                    labels.append(batch.labels.cpu().numpy())
    finally:
        model.train(was_training)

    sample_ids = np.concatenate(ids).astype(np.int64)
    row_of = {int(sid): row for row, sid in enumerate(sample_ids)}
    train_rows = [row_of[i] for i in dataset.manifest.train_indices if i in row_of]
    test_rows = [row_of[i] for i in dataset.manifest.test_indices if i in row_of]
    header = {
        "dataset": dataset.manifest.name,
        "encoder_hash": model.consistent.encoder_hash(),
        **(meta or {}),
    }
    return LatentSet(
        c=np.concatenate(cs), s=np.concatenate(ss), sample_ids=sample_ids,
        labels=np.concatenate(labels).astype(np.int64) if labels else None,
        train_rows=np.asarray(train_rows, dtype=np.int64), test_rows=np.asarray(test_rows, dtype=np.int64),
        meta=header,
    )


def export_embeddings(latents: LatentSet, selector: Union[str, RepresentationSelector],
                      path: Union[str, Path]) -> str:
    """CSV rows (sample_id, label, f0..fD) for projection with external tools."""
    if isinstance(selector, str):
        selector = RepresentationSelector.parse(selector)
    features = selector.select(latents.c, latents.s)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "label"] + [f"f{j}" for j in range(features.shape[1])])
        for row in range(len(latents)):
            label = int(latents.labels[row]) if latents.labels is not None else ""
            writer.writerow([int(latents.sample_ids[row]), label] + [f"{v:.6g}" for v in features[row]])
    logger.info(f"Exported {len(latents)} '{selector.name}' embeddings to {path}")
    return str(path)
