"""Optimiser, schedule and bookkeeping shared by both training stages."""

import logging
from collections import defaultdict
from typing import Dict, Iterable, Optional

import torch
from torch.optim import Adam
from torch.optim.lr_scheduler import CosineAnnealingLR

logger = logging.getLogger(__name__)


def build_optimizer(params: Iterable[torch.nn.Parameter], stage):
    """Adam with an optional per-epoch cosine annealing schedule."""
    optimizer = Adam([p for p in params if p.requires_grad], lr=stage.lr)
    scheduler = CosineAnnealingLR(optimizer, T_max=stage.epochs) if stage.scheduler == "cosine" else None
    return optimizer, scheduler


class EpochMeter:
    """Sample-weighted running means of loss components over one epoch."""

    def __init__(self):
        self.sums: Dict[str, float] = defaultdict(float)
        self.count = 0

    def update(self, values: Dict[str, float], n: int):
        for key, value in values.items():
            self.sums[key] += float(value) * n
        self.count += n

    def means(self) -> Dict[str, float]:
        return {k: v / max(self.count, 1) for k, v in self.sums.items()}


def is_finite(loss: torch.Tensor) -> bool:
    return bool(torch.isfinite(loss.detach()).all())


def current_lr(optimizer) -> float:
    return float(optimizer.param_groups[0]["lr"])


def report_progress(progress_callback, epoch: int, epochs: int, message: str,
                    offset: float = 0.0, span: float = 100.0):
    if progress_callback:
        progress_callback(offset + span * epoch / epochs, message)


def log_epoch(stage: str, record: Dict[str, float]):
    parts = ", ".join(f"{k}={v:.4f}" for k, v in record.items() if k not in ("epoch",))
    logger.info(f"{stage} epoch {int(record['epoch'])}: {parts}")


def seed_everything(seed: int, generator: Optional[torch.Generator] = None) -> torch.Generator:
    torch.manual_seed(seed)
    return generator or torch.Generator().manual_seed(seed)
