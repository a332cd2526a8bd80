"""
Stage I: masked cross-view prediction (MCP).

Masked views pass through a consistent encoder E_c that emits one Gaussian
posterior over c per sample; per-view decoders reconstruct every full view
from a sample of c. After training E_c is frozen.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from mrdd.errors import TrainingDivergedError
from mrdd.services.checkpoints import load_checkpoint, save_checkpoint
from mrdd.services.data import MultiViewBatch, MultiViewDataset, iterate_batches
from mrdd.services.masking import mask_batch
from mrdd.services.nets import (
    ConvTrunk, Decoder, EncoderSpec, GaussianHead, GaussianPosterior,
    kl_diag_gaussian, parameter_hash, reparameterize,
)
from mrdd.services.training import (
    EpochMeter, build_optimizer, current_lr, is_finite, log_epoch, report_progress, seed_everything,
)

logger = logging.getLogger(__name__)


class ConsistentEncoder(nn.Module):
    """Weight-shared conv trunk over all views, fused into one posterior over c.

    Views whose channel count differs from the widest view get a 1x1 stem.
    """

    def __init__(self, view_channels: Sequence[int], image_size: int, d_c: int = 10,
                 base_channels: int = 16, dropout: float = 0.1, fusion: str = "concat"):
        super().__init__()
        if fusion not in ("concat", "poe"):
            raise ValueError(f"Unknown fusion '{fusion}'")
        common = max(view_channels)
        self.n_views = len(view_channels)
        self.fusion = fusion
        self.stems = nn.ModuleList([
            nn.Identity() if c == common else nn.Conv2d(c, common, kernel_size=1) for c in view_channels
        ])
        spec = EncoderSpec(height=image_size, width=image_size, channels=common,
                           base_channels=base_channels, dropout=dropout, latent_dim=d_c)
        self.trunk = ConvTrunk(spec)
        if fusion == "concat":
            self.head = GaussianHead(self.n_views * spec.feature_dim, d_c)
        else:
            self.heads = nn.ModuleList([GaussianHead(spec.feature_dim, d_c) for _ in view_channels])

    def forward(self, views: Sequence[torch.Tensor]) -> GaussianPosterior:
        features = [self.trunk(stem(x)) for stem, x in zip(self.stems, views)]
        if self.fusion == "concat":
            return self.head(torch.cat(features, dim=-1))
        # product of the per-view experts and the N(0, I) prior expert
        experts = [head(h) for head, h in zip(self.heads, features)]
        precision = 1.0 + sum(torch.exp(-e.logvar) for e in experts)
        mean = sum(e.mean * torch.exp(-e.logvar) for e in experts) / precision
        return GaussianPosterior(mean, -torch.log(precision))


class ConsistentModel(nn.Module):
    def __init__(self, view_channels: Sequence[int], image_size: int, d_c: int = 10,
                 base_channels: int = 16, dropout: float = 0.1, fusion: str = "concat"):
        super().__init__()
        self.hparams = dict(view_channels=list(view_channels), image_size=image_size, d_c=d_c,
                            base_channels=base_channels, dropout=dropout, fusion=fusion)
        self.d_c = d_c
        self.encoder = ConsistentEncoder(view_channels, image_size, d_c, base_channels, dropout, fusion)
        self.decoders = nn.ModuleList([
            Decoder(EncoderSpec(height=image_size, width=image_size, channels=c,
                                base_channels=base_channels, dropout=dropout, latent_dim=d_c))
            for c in view_channels
        ])
        self.frozen = False

    @classmethod
    def from_dataset(cls, dataset: MultiViewDataset, config) -> "ConsistentModel":
        m = dataset.manifest
        return cls([v.channels for v in m.views], m.image_size, d_c=config.d_c,
                   base_channels=config.nets.base_channels, dropout=config.nets.dropout,
                   fusion=config.nets.fusion)

    @property
    def n_views(self) -> int:
        return self.encoder.n_views

    def freeze(self) -> "ConsistentModel":
        """Make E_c immutable: no gradients, batch-norm statistics fixed."""
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.encoder.eval()
        self.frozen = True
        return self

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            self.encoder.eval()
        return self

    def encoder_hash(self) -> str:
        return parameter_hash(self.encoder)


def views_of(batch: Union[MultiViewBatch, Sequence[torch.Tensor]]) -> List[torch.Tensor]:
    return list(batch.views) if isinstance(batch, MultiViewBatch) else list(batch)


def encode_consistent(model: ConsistentModel,
                      batch: Union[MultiViewBatch, Sequence[torch.Tensor]]) -> GaussianPosterior:
    """Posterior over c from all views (masked or not); never touches the MCP decoders."""
    views = views_of(batch)
    if len(views) != model.n_views:
        raise ValueError(f"consistent encoder needs all {model.n_views} views, got {len(views)}")
    return model.encoder(views)


def reconstruction_error(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Squared error summed over pixels, averaged over the batch (unit-variance Gaussian likelihood)."""
    if x_hat.shape != x.shape:
        raise ValueError(f"reconstruction shape {tuple(x_hat.shape)} != target {tuple(x.shape)}")
    return (x_hat - x).pow(2).flatten(1).sum(dim=1).mean()


def mcp_loss(model: ConsistentModel, masked: Union[MultiViewBatch, Sequence[torch.Tensor]],
             original: Union[MultiViewBatch, Sequence[torch.Tensor]], beta_c: float = 1.0,
             eps: Optional[torch.Tensor] = None,
             generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, Dict]:
    """Negative ELBO of masked cross-view prediction.

    loss = sum_i recon(x^i, D^i(c)) + beta_c * KL(q(c | masked) || N(0, I)),
    with c reparameterised and every full original view as target.
    """
    masked_views, views = views_of(masked), views_of(original)
    if len(masked_views) != len(views):
        raise ValueError(f"{len(masked_views)} masked views vs {len(views)} original views")
    for i, (a, b) in enumerate(zip(masked_views, views)):
        if a.shape != b.shape:
            raise ValueError(f"view {i + 1}: masked shape {tuple(a.shape)} != original {tuple(b.shape)}")

    post = encode_consistent(model, masked_views)
    c = reparameterize(post, eps=eps, generator=generator)
    recon = [reconstruction_error(decoder(c), x) for decoder, x in zip(model.decoders, views)]
    kl = kl_diag_gaussian(post)
    total = sum(recon) + beta_c * kl
    return total, {"recon": recon, "kl": kl, "total": total}


def save_stage1(model: ConsistentModel, path: Union[str, Path], meta: Optional[Dict] = None) -> str:
    return save_checkpoint(
        path, "stage1",
        state={"model": model.state_dict()},
        specs={"consistent": model.hparams},
        meta={"frozen": model.frozen, "encoder_hash": model.encoder_hash(), **(meta or {})},
    )


def load_stage1(path: Union[str, Path]) -> ConsistentModel:
    payload = load_checkpoint(path, kind="stage1")
    model = ConsistentModel(**payload["specs"]["consistent"])
    model.load_state_dict(payload["state"]["model"])
    if payload["meta"].get("frozen", True):
        model.freeze()
    return model


def train_stage1(model: ConsistentModel, dataset: MultiViewDataset, config, device: str = "cpu",
                 checkpoint_dir: Optional[Union[str, Path]] = None,
                 progress_callback: Optional[Callable] = None,
                 epoch_callback: Optional[Callable[[Dict], None]] = None):
    """Train E_c and the MCP decoders, then freeze E_c.

    Returns (model, loss_curve) where each curve row holds epoch, total,
    recon_<i> per view, kl and lr.
    """
    stage = config.stage1
    generator = seed_everything(config.seed)
    mask_rng = np.random.default_rng([config.seed, 1])
    model.to(device)
    optimizer, scheduler = build_optimizer(model.parameters(), stage)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    curve = []

    for epoch in range(stage.epochs):
        model.train()
        meter = EpochMeter()
        for batch in iterate_batches(dataset, config.train_split, stage.batch_size, shuffle=True,
                                     seed=config.seed, epoch=epoch, device=device):
            masked = mask_batch(batch, config.mask, mask_rng)
            loss, parts = mcp_loss(model, masked, batch, beta_c=config.weights.beta_c, generator=generator)
            if not is_finite(loss):
                diag = None
                if checkpoint_dir:
                    diag = save_stage1(model, checkpoint_dir / "stage1_diverged.pt", meta={"epoch": epoch + 1})
                logger.error(f"Stage I diverged at epoch {epoch + 1}")
                raise TrainingDivergedError("stage1", epoch + 1, diag)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            values = {"total": loss.item(), "kl": parts["kl"].item()}
            values.update({f"recon_{i + 1}": r.item() for i, r in enumerate(parts["recon"])})
            meter.update(values, batch.size)

        record = {"epoch": epoch + 1, **meter.means(), "lr": current_lr(optimizer)}
        if scheduler:
            scheduler.step()
        curve.append(record)
        log_epoch("Stage I", record)
        if epoch_callback:
            epoch_callback(record)
        report_progress(progress_callback, epoch + 1, stage.epochs, f"Stage I epoch {epoch + 1}/{stage.epochs}")
        if checkpoint_dir and stage.checkpoint_every and (epoch + 1) % stage.checkpoint_every == 0:
            save_stage1(model, checkpoint_dir / f"stage1_epoch{epoch + 1}.pt", meta={"epoch": epoch + 1})

    model.freeze()
    logger.info(f"Stage I complete; consistent encoder frozen (hash {model.encoder_hash()[:12]})")
    if checkpoint_dir:
        save_stage1(model, checkpoint_dir / "stage1.pt", meta={"epoch": stage.epochs})
    return model, curve
