"""
Network building blocks: convolutional encoders/decoders, Gaussian heads,
small MLPs, and gradient-checking helpers.

Encoders stack blocks of (conv, BN, ReLU, conv, BN, ReLU, dropout). Every
block but the last halves the resolution, so both supported input sizes end
on an 8x8 feature plane (3 blocks for 32px inputs, 4 for 64px).
"""

import math
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Literal, Optional

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
LOG_2PI = math.log(2.0 * math.pi)
FEATURE_PLANE = 8
SUPPORTED_SIZES = (32, 64)


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian given by mean and log-variance tensors of equal shape."""

    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ValueError(f"mean {tuple(self.mean.shape)} and logvar {tuple(self.logvar.shape)} differ")

    @property
    def variance(self) -> torch.Tensor:
        return self.logvar.exp()

    @property
    def std(self) -> torch.Tensor:
        return (0.5 * self.logvar).exp()

    @property
    def dim(self) -> int:
        return int(self.mean.shape[-1])

    def detach(self) -> "GaussianPosterior":
        return GaussianPosterior(self.mean.detach(), self.logvar.detach())


class EncoderSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    height: int
    width: int
    channels: int = Field(..., ge=1)
    base_channels: int = Field(16, ge=1)
    dropout: float = Field(0.1, ge=0, lt=1)
    latent_dim: int = Field(..., ge=1)

    @model_validator(mode="after")
    def _check_size(self):
        if self.height != self.width or self.height not in SUPPORTED_SIZES:
            raise ValueError(f"unsupported input size {self.height}x{self.width}; "
                             f"expected square {SUPPORTED_SIZES}")
        return self

    @property
    def n_blocks(self) -> int:
        return 3 if self.height == 32 else 4

    @property
    def block_channels(self) -> List[int]:
        return [self.base_channels * 2 ** i for i in range(self.n_blocks)]

    @property
    def strides(self) -> List[int]:
        return [2] * (self.n_blocks - 1) + [1]

    @property
    def feature_dim(self) -> int:
        return self.block_channels[-1] * FEATURE_PLANE * FEATURE_PLANE


class MLPSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    widths: List[int]
    activation: Literal["relu", "elu", "tanh"] = "relu"

    @field_validator("widths")
    @classmethod
    def _at_least_one_hidden(cls, v):
        if len(v) < 3 or min(v) < 1:
            raise ValueError(f"an MLP needs input, >= 1 hidden and output widths, got {v}")
        return v


_ACTIVATIONS = {"relu": nn.ReLU, "elu": nn.ELU, "tanh": nn.Tanh}


def build_mlp(spec: MLPSpec) -> nn.Sequential:
    layers: List[nn.Module] = []
    widths = spec.widths
    for i in range(len(widths) - 1):
        layers.append(nn.Linear(widths[i], widths[i + 1]))
        if i < len(widths) - 2:
            layers.append(_ACTIVATIONS[spec.activation]())
    return nn.Sequential(*layers)


class EncoderBlock(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, stride: int, dropout: float):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
        )


class DecoderBlock(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, stride: int, dropout: float):
        super().__init__(
            nn.ConvTranspose2d(in_channels, out_channels, 3, stride=stride, padding=1,
                               output_padding=stride - 1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(out_channels, out_channels, 3, stride=1, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
        )


class ConvTrunk(nn.Module):
    """Encoder blocks followed by a flatten; output is (batch, spec.feature_dim)."""

    def __init__(self, spec: EncoderSpec, in_channels: Optional[int] = None):
        super().__init__()
        channels = [in_channels or spec.channels] + spec.block_channels
        self.blocks = nn.Sequential(*[
            EncoderBlock(channels[i], channels[i + 1], spec.strides[i], spec.dropout)
            for i in range(spec.n_blocks)
        ])
        self.feature_dim = spec.feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).flatten(1)


class GaussianHead(nn.Module):
    """Affine map to (mean, clamped log-variance)."""

    def __init__(self, in_features: int, latent_dim: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.linear = nn.Linear(in_features, 2 * latent_dim)

    def forward(self, h: torch.Tensor) -> GaussianPosterior:
        mean, logvar = self.linear(h).chunk(2, dim=-1)
        return GaussianPosterior(mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.trunk = ConvTrunk(spec)
        self.head = GaussianHead(spec.feature_dim, spec.latent_dim)

    def forward(self, x: torch.Tensor) -> GaussianPosterior:
        expected = (self.spec.channels, self.spec.height, self.spec.width)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"encoder expects images of shape {expected}, got {tuple(x.shape[1:])}")
        return self.head(self.trunk(x))


class Decoder(nn.Module):
    """Mirror of the encoder: latent -> 8x8 plane -> transposed blocks -> sigmoid image."""

    def __init__(self, spec: EncoderSpec, latent_dim: Optional[int] = None):
        super().__init__()
        self.spec = spec
        self.latent_dim = latent_dim or spec.latent_dim
        channels = spec.block_channels
        n = spec.n_blocks
        self.fc = nn.Sequential(nn.Linear(self.latent_dim, spec.feature_dim), nn.ReLU(inplace=True))
        strides = list(reversed(spec.strides))
        self.blocks = nn.Sequential(*[
            DecoderBlock(channels[n - 1 - j], channels[max(n - 2 - j, 0)], strides[j], spec.dropout)
            for j in range(n)
        ])
        self.out = nn.Sequential(nn.Conv2d(channels[0], spec.channels, 3, padding=1), nn.Sigmoid())

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"decoder expects latent dim {self.latent_dim}, got {z.shape[-1]}")
        h = self.fc(z).view(-1, self.spec.block_channels[-1], FEATURE_PLANE, FEATURE_PLANE)
        return self.out(self.blocks(h))


class GaussianMLP(nn.Module):
    """Conditional diagonal Gaussian q(y | x) with a shared MLP trunk and two heads."""

    def __init__(self, in_dim: int, out_dim: int, hidden: Iterable[int] = (256, 256)):
        super().__init__()
        dims = [in_dim] + list(hidden)
        if len(dims) < 2:
            raise ValueError("conditional Gaussian MLP needs at least one hidden layer")
        self.trunk = nn.Sequential(*[
            layer for a, b in zip(dims[:-1], dims[1:]) for layer in (nn.Linear(a, b), nn.ReLU())
        ])
        self.head = GaussianHead(dims[-1], out_dim)

    def forward(self, x: torch.Tensor) -> GaussianPosterior:
        return self.head(self.trunk(x))


def build_encoder(spec: EncoderSpec) -> Encoder:
    return Encoder(spec)


def build_decoder(spec: EncoderSpec, latent_dim: Optional[int] = None) -> Decoder:
    return Decoder(spec, latent_dim)


def reparameterize(post: GaussianPosterior, eps: Optional[torch.Tensor] = None,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Return mean + std * eps, drawing eps ~ N(0, I) when not given."""
    if eps is None:
        eps = torch.randn(post.mean.shape, generator=generator, dtype=post.mean.dtype,
                          device="cpu").to(post.mean.device)
    elif eps.shape != post.mean.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match posterior {tuple(post.mean.shape)}")
    return post.mean + post.std * eps


def kl_diag_gaussian(post: GaussianPosterior, reduction: str = "mean") -> torch.Tensor:
    """KL(N(mean, var) || N(0, I)) in nats, summed over latent dims.

    reduction applies across the batch: "mean", "sum" or "none".
    """
    if torch.isnan(post.mean).any() or torch.isnan(post.logvar).any():
        raise ValueError("posterior parameters contain NaN")
    kl = 0.5 * (post.mean.pow(2) + post.logvar.exp() - 1.0 - post.logvar).sum(dim=-1)
    if reduction == "none" or kl.ndim == 0:
        return kl
    if reduction == "sum":
        return kl.sum()
    if reduction == "mean":
        return kl.mean()
    raise ValueError(f"Unknown reduction '{reduction}'")


def gaussian_log_density(x: torch.Tensor, post: GaussianPosterior) -> torch.Tensor:
    """log N(x; mean, var) summed over the last dimension."""
    return -0.5 * ((x - post.mean).pow(2) / post.variance + post.logvar + LOG_2PI).sum(dim=-1)


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over parameter and buffer bytes in name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst: List[tuple] = field(default_factory=list)
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tol


def _central_difference(fn: Callable[[], torch.Tensor], flat: torch.Tensor, coord: int, f0: float, eps: float,
                        tol: float, min_scale: float, refinements: int) -> Optional[float]:
    """Central difference at one coordinate, or None when a kink sits inside every tried step.

    A kink (ReLU, clamp) shows up as forward and backward one-sided
    differences that disagree by more than `tol`; the step is then shrunk
    tenfold, at most `refinements` times.
    """
    original = flat[coord].item()
    step = eps
    for _ in range(refinements + 1):
        flat[coord] = original + step
        f_plus = fn().item()
        flat[coord] = original - step
        f_minus = fn().item()
        flat[coord] = original
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError("non-finite loss during finite differences")
        forward, backward = (f_plus - f0) / step, (f0 - f_minus) / step
        if abs(forward - backward) <= tol * max(abs(forward), abs(backward), min_scale):
            return (f_plus - f_minus) / (2 * step)
        step /= 10
    return None


def finite_diff_check(fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor], tol: float = 1e-4,
                      n_coords: int = 16, eps: float = 1e-6, seed: int = 0, min_scale: float = 1e-3,
                      refinements: int = 1) -> GradCheckReport:
    """Compare autograd gradients of a scalar `fn()` with central differences.

    Up to `n_coords` coordinates are sampled per parameter tensor. The relative
    error is |analytic - numeric| / max(|analytic|, |numeric|, min_scale).
    Coordinates whose step straddles a kink are skipped and replaced by the
    next sampled coordinate; the report counts them in `n_skipped`.
    Call with double-precision parameters and stochastic layers disabled.
    """
    params = [p for p in params if p.requires_grad]
    loss = fn()
    if loss.ndim != 0 or not torch.isfinite(loss):
        raise ValueError(f"gradient check needs a finite scalar loss, got {loss}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    f0 = loss.item()

    gen = torch.Generator().manual_seed(seed)
    max_err, checked, skipped, worst = 0.0, 0, 0, []
    with torch.no_grad():
        for p_idx, (p, g) in enumerate(zip(params, grads)):
            flat = p.view(-1)
            accepted = 0
            for c in torch.randperm(flat.numel(), generator=gen).tolist():
                if accepted == n_coords:
                    break
                numeric = _central_difference(fn, flat, c, f0, eps, tol, min_scale, refinements)
                if numeric is None:
                    skipped += 1
                    continue
                analytic = g.view(-1)[c].item() if g is not None else 0.0
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), min_scale)
                accepted += 1
                if err > max_err:
                    max_err = err
                    worst = [(p_idx, c, analytic, numeric)]
            checked += accepted
    if skipped:
        logger.debug(f"Gradient check skipped {skipped} kinked coordinates")
    return GradCheckReport(max_rel_error=max_err, n_checked=checked, tol=tol, worst=worst, n_skipped=skipped)
