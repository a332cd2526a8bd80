"""
Stage II: distilled disentangling.

The frozen consistent encoder supplies c as prior knowledge. Each view gets
its own encoder for s^i and a decoder over z^i = [c, s^i]; a conditional
Gaussian q(s^i | c) per view turns the CLUB upper bound on I(s^i; c) into a
differentiable penalty.
"""

import math
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
from torch.optim import Adam

from mrdd.errors import TrainingDivergedError
from mrdd.services.checkpoints import load_checkpoint, save_checkpoint
from mrdd.services.consistency import (
    ConsistentModel, encode_consistent, reconstruction_error, views_of,
)
from mrdd.services.data import MultiViewBatch, MultiViewDataset, iterate_batches
from mrdd.services.nets import (
    LOG_2PI, Decoder, Encoder, EncoderSpec, GaussianMLP, GaussianPosterior,
    gaussian_log_density, kl_diag_gaussian, reparameterize,
)
from mrdd.services.training import (
    EpochMeter, build_optimizer, current_lr, is_finite, log_epoch, report_progress, seed_everything,
)

logger = logging.getLogger(__name__)


class SpecificModel(nn.Module):
    """Per-view specific encoders, [c, s^i] decoders and CLUB networks around a frozen E_c."""

    def __init__(self, consistent: ConsistentModel, d_s: int = 10, base_channels: int = 16,
                 dropout: float = 0.1, club_hidden: Sequence[int] = (256, 256), sample_c: bool = False):
        super().__init__()
        if not consistent.frozen:
            raise ValueError("stage II needs a frozen consistent model; run stage I or call freeze()")
        self.hparams = dict(d_s=d_s, base_channels=base_channels, dropout=dropout,
                            club_hidden=list(club_hidden), sample_c=sample_c)
        self.consistent = consistent
        self.d_c = consistent.d_c
        self.d_s = d_s
        self.sample_c = sample_c
        size = consistent.hparams["image_size"]
        specs = [EncoderSpec(height=size, width=size, channels=c, base_channels=base_channels,
                             dropout=dropout, latent_dim=d_s)
                 for c in consistent.hparams["view_channels"]]
        self.encoders = nn.ModuleList([Encoder(spec) for spec in specs])
        self.decoders = nn.ModuleList([Decoder(spec, latent_dim=self.d_c + d_s) for spec in specs])
        self.qnets = nn.ModuleList([GaussianMLP(self.d_c, d_s, club_hidden) for _ in specs])

    @classmethod
    def from_config(cls, consistent: ConsistentModel, config) -> "SpecificModel":
        return cls(consistent, d_s=config.d_s, base_channels=config.nets.base_channels,
                   dropout=config.nets.dropout, club_hidden=config.nets.club_hidden,
                   sample_c=config.nets.sample_c)

    @property
    def n_views(self) -> int:
        return len(self.encoders)

    def main_parameters(self) -> List[nn.Parameter]:
        return list(self.encoders.parameters()) + list(self.decoders.parameters())

    def qnet_parameters(self) -> List[nn.Parameter]:
        return list(self.qnets.parameters())

    def train(self, mode: bool = True):
        super().train(mode)
        self.consistent.eval()
        return self


def club_loss(s: torch.Tensor, c: torch.Tensor, qnet: nn.Module) -> torch.Tensor:
    """CLUB estimate (1/N) sum_k log q(s_k|c_k) - (1/N^2) sum_k sum_l log q(s_l|c_k).

    The N^2 marginal term is evaluated through the first two moments of s,
    so memory stays linear in the batch.
    """
    if s.shape[0] == 0:
        raise ValueError("CLUB needs at least one joint sample")
    if s.shape[0] != c.shape[0]:
        raise ValueError(f"s has {s.shape[0]} rows but c has {c.shape[0]}")
    post = qnet(c)
    positive = gaussian_log_density(s, post).mean()
    # mean_l (s_l - mu_k)^2 = var(s) + (mean(s) - mu_k)^2
    s_mean = s.mean(dim=0, keepdim=True)
    spread = (s - s_mean).pow(2).mean(dim=0, keepdim=True) + (s_mean - post.mean).pow(2)
    negative = (-0.5 * (spread / post.variance + post.logvar + LOG_2PI)).sum(dim=-1).mean()
    return positive - negative


def club_learning_loss(s: torch.Tensor, c: torch.Tensor, qnet: nn.Module) -> torch.Tensor:
    """Negative log-likelihood of joint (s, c) pairs under q(s | c)."""
    return -gaussian_log_density(s, qnet(c)).mean()


def consistent_code(model: SpecificModel, views: Sequence[torch.Tensor],
                    generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """c from the frozen encoder: the posterior mean unless the model samples c."""
    with torch.no_grad():
        post = encode_consistent(model.consistent, views)
        c = reparameterize(post, generator=generator) if model.sample_c else post.mean
    return c.detach()


def encode_specific(model: SpecificModel, views: Sequence[torch.Tensor]) -> List[GaussianPosterior]:
    if len(views) != model.n_views:
        raise ValueError(f"model has {model.n_views} specific encoders, got {len(views)} views")
    return [encoder(x) for encoder, x in zip(model.encoders, views)]


def recon_loss(model: SpecificModel, views: Sequence[torch.Tensor], c: torch.Tensor,
               s_samples: Sequence[torch.Tensor], s_posts: Sequence[GaussianPosterior],
               beta_s: float = 1.0) -> Tuple[torch.Tensor, Dict]:
    """sum_i [ recon(x^i, D_s^i([c, s^i])) + beta_s * KL(q(s^i | x^i) || N(0, I)) ]."""
    mse, kl, per_view = [], [], []
    for i, (decoder, x, s, post) in enumerate(zip(model.decoders, views, s_samples, s_posts)):
        if c.shape[-1] + s.shape[-1] != decoder.latent_dim:
            raise ValueError(f"view {i + 1}: z has dim {c.shape[-1] + s.shape[-1]}, "
                             f"decoder expects {decoder.latent_dim}")
        mse.append(reconstruction_error(decoder(torch.cat([c, s], dim=-1)), x))
        kl.append(kl_diag_gaussian(post))
        per_view.append(mse[-1] + beta_s * kl[-1])
    total = sum(per_view)
    return total, {"mse": mse, "kl": kl, "recon": per_view, "total": total}


def stage2_loss(model: SpecificModel, batch: Union[MultiViewBatch, Sequence[torch.Tensor]],
                weights=None, eps: Optional[Sequence[torch.Tensor]] = None,
                generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, Dict]:
    """L_s = (1/v) sum_i (lambda_d * club_i + lambda_r * recon_i).

    With lambda_d = 0 the CLUB terms are still reported but computed
    outside the autograd graph.
    """
    beta_s = weights.beta_s if weights else 1.0
    lambda_d = weights.lambda_d if weights else 1.0
    lambda_r = weights.lambda_r if weights else 1.0
    views = views_of(batch)
    c = consistent_code(model, views, generator)
    posts = encode_specific(model, views)
    if eps is not None and len(eps) != len(posts):
        raise ValueError(f"{len(eps)} noise tensors for {len(posts)} views")
    s_samples = [reparameterize(p, eps=eps[i] if eps is not None else None, generator=generator)
                 for i, p in enumerate(posts)]
    _, recon = recon_loss(model, views, c, s_samples, posts, beta_s=beta_s)

    club = []
    for s, qnet in zip(s_samples, model.qnets):
        if lambda_d == 0:
            with torch.no_grad():
                club.append(club_loss(s.detach(), c, qnet))
        else:
            club.append(club_loss(s, c, qnet))

    view_losses = []
    for d, r in zip(club, recon["recon"]):
        view_losses.append(lambda_r * r if lambda_d == 0 else lambda_d * d + lambda_r * r)
    total = sum(view_losses) / len(view_losses)
    parts = {"club": club, "recon": recon["recon"], "mse": recon["mse"], "kl": recon["kl"],
             "view": view_losses, "total": total, "c": c, "s": s_samples}
    return total, parts


def qnet_step(model: SpecificModel, optimizer, c: torch.Tensor, s_samples: Sequence[torch.Tensor]) -> float:
    """Fit each q(s^i | c) on detached joint samples; encoders are untouched."""
    loss = sum(club_learning_loss(s.detach(), c, qnet) for s, qnet in zip(s_samples, model.qnets))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item() / model.n_views


def save_stage2(model: SpecificModel, path: Union[str, Path], meta: Optional[Dict] = None) -> str:
    return save_checkpoint(
        path, "stage2",
        state={"model": model.state_dict()},
        specs={"consistent": model.consistent.hparams, "specific": model.hparams},
        meta={"encoder_hash": model.consistent.encoder_hash(), **(meta or {})},
    )


def load_stage2(path: Union[str, Path]) -> SpecificModel:
    payload = load_checkpoint(path, kind="stage2")
    consistent = ConsistentModel(**payload["specs"]["consistent"]).freeze()
    model = SpecificModel(consistent, **payload["specs"]["specific"])
    model.load_state_dict(payload["state"]["model"])
    return model


def train_stage2(model: SpecificModel, dataset: MultiViewDataset, config, device: str = "cpu",
                 checkpoint_dir: Optional[Union[str, Path]] = None,
                 progress_callback: Optional[Callable] = None,
                 epoch_callback: Optional[Callable[[Dict], None]] = None):
    """Per batch, one encoder/decoder step then one q-network step on the same draws.

    Returns (model, loss_curve). Raises RuntimeError if the consistent encoder
    changed while training.
    """
    if not model.consistent.frozen:
        raise ValueError("consistent encoder must be frozen before stage II")
    stage = config.stage2
    generator = seed_everything(config.seed + 1)
    model.to(device)
    hash_before = model.consistent.encoder_hash()
    optimizer, scheduler = build_optimizer(model.main_parameters(), stage)
    qnet_optimizer = Adam(model.qnet_parameters(), lr=stage.lr)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    curve = []

    for epoch in range(stage.epochs):
        model.train()
        meter = EpochMeter()
        for batch in iterate_batches(dataset, config.train_split, stage.batch_size, shuffle=True,
                                     seed=config.seed + 1, epoch=epoch, device=device):
            loss, parts = stage2_loss(model, batch, config.weights, generator=generator)
            if is_finite(loss):
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                # the q-networks see the same (c, s) draws the encoders were scored on
                q_loss = qnet_step(model, qnet_optimizer, parts["c"], parts["s"])
            if not is_finite(loss) or not math.isfinite(q_loss):
                diag = None
                if checkpoint_dir:
                    diag = save_stage2(model, checkpoint_dir / "stage2_diverged.pt", meta={"epoch": epoch + 1})
                logger.error(f"Stage II diverged at epoch {epoch + 1}")
                raise TrainingDivergedError("stage2", epoch + 1, diag)

            values = {"total": loss.item(), "qnet_nll": q_loss}
            for i in range(model.n_views):
                values[f"club_{i + 1}"] = parts["club"][i].item()
                values[f"recon_{i + 1}"] = parts["recon"][i].item()
            meter.update(values, batch.size)

        record = {"epoch": epoch + 1, **meter.means(), "lr": current_lr(optimizer)}
        if scheduler:
            scheduler.step()
        curve.append(record)
        log_epoch("Stage II", record)
        if epoch_callback:
            epoch_callback(record)
        report_progress(progress_callback, epoch + 1, stage.epochs, f"Stage II epoch {epoch + 1}/{stage.epochs}")
        if checkpoint_dir and stage.checkpoint_every and (epoch + 1) % stage.checkpoint_every == 0:
            save_stage2(model, checkpoint_dir / f"stage2_epoch{epoch + 1}.pt", meta={"epoch": epoch + 1})

    hash_after = model.consistent.encoder_hash()
    if hash_after != hash_before:
        logger.error(f"Consistent encoder changed during stage II: {hash_before[:12]} -> {hash_after[:12]}")
        raise RuntimeError("consistent encoder parameters changed during stage II")
    if checkpoint_dir:
        save_stage2(model, checkpoint_dir / "stage2.pt", meta={"epoch": stage.epochs})
    return model, curve


def reconstruct_samples(model: SpecificModel, batch: Union[MultiViewBatch, Sequence[torch.Tensor]]) -> Dict:
    """Reconstructions from c alone (s at the prior mean) and from [c, s^i], in eval mode."""
    views = views_of(batch)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            c = encode_consistent(model.consistent, views).mean
            posts = encode_specific(model, views)
            from_c, from_cs = [], []
            for decoder, post in zip(model.decoders, posts):
                from_c.append(decoder(torch.cat([c, torch.zeros_like(post.mean)], dim=-1)))
                from_cs.append(decoder(torch.cat([c, post.mean], dim=-1)))
    finally:
        model.train(was_training)
    return {"original": [v.detach() for v in views], "from_c": from_c, "from_cs": from_cs}
