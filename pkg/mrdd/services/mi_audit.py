"""
Residual-redundancy audit: MINE estimates of I(c; s^i) on extracted latents.

The statistics network T(c, s) is trained on the Donsker-Varadhan bound
E_joint[T] - log E_marginal[exp T], with marginal pairs built by deranging s
inside each batch. The bound is tracked every epoch on held-out validation and
test rows; the reported value is the test bound over the best validation
window. The audit reports the mean and spread across repeats.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel
from torch.optim import Adam

from mrdd.config import MineConfig
from mrdd.errors import EstimationError
from mrdd.services.nets import MLPSpec, build_mlp

logger = logging.getLogger(__name__)


class StatisticsNetwork(nn.Module):
    def __init__(self, d_c: int, d_s: int, hidden: List[int]):
        super().__init__()
        self.net = build_mlp(MLPSpec(widths=[d_c + d_s] + list(hidden) + [1]))

    def forward(self, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([c, s], dim=-1)).squeeze(-1)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation without fixed points (a single random cycle)."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    order = rng.permutation(n)
    perm = np.empty(n, dtype=np.int64)
    perm[order] = np.roll(order, -1)
    return perm


def donsker_varadhan(t_joint: torch.Tensor, t_marginal: torch.Tensor) -> torch.Tensor:
    """E[T_joint] - log E[exp T_marginal], evaluated with logsumexp."""
    log_mean_exp = torch.logsumexp(t_marginal, dim=0) - math.log(t_marginal.shape[0])
    return t_joint.mean() - log_mean_exp


def evaluate_dv(net: StatisticsNetwork, c: torch.Tensor, s: torch.Tensor, perm: np.ndarray) -> float:
    with torch.no_grad():
        return float(donsker_varadhan(net(c, s), net(c, s[torch.from_numpy(perm)])))


@dataclass
class MineResult:
    estimate: float
    repeats: List[float]
    curves: List[List[float]] = field(default_factory=list)
    held_out: List[List[float]] = field(default_factory=list)
    best_epochs: List[int] = field(default_factory=list)
    restarts: int = 0

    @property
    def std(self) -> float:
        return float(np.std(self.repeats))


def holdout_sizes(n: int, config: MineConfig) -> Tuple[int, int]:
    """(rows per held-out part, training rows) for n samples."""
    n_hold = max(2, int(round(config.holdout * n / 2)))
    return n_hold, n - 2 * n_hold


def _train_repeat(c: torch.Tensor, s: torch.Tensor, config: MineConfig,
                  rng: np.random.Generator) -> Tuple[List[float], List[float], int]:
    """Train one statistics network; returns (validation curve, test curve, selected epoch)."""
    n = c.shape[0]
    n_hold, n_train = holdout_sizes(n, config)
    order = rng.permutation(n)
    val, test, train = (torch.from_numpy(order[:n_hold]), torch.from_numpy(order[n_hold:2 * n_hold]),
                        order[2 * n_hold:])
    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(2 ** 31 - 1)))
        net = StatisticsNetwork(c.shape[1], s.shape[1], config.hidden).to(c.dtype)
    optimizer = Adam(net.parameters(), lr=config.lr)
    ema = None
    val_curve, test_curve = [], []
    best, best_epoch = -math.inf, 0
    for epoch in range(config.epochs):
        shuffled = rng.permutation(train)
        # the last short batch is dropped so every marginal has >= 2 pairs
        for start in range(0, n_train - config.batch_size + 1, config.batch_size):
            idx = torch.from_numpy(shuffled[start:start + config.batch_size])
            cb, sb = c[idx], s[idx]
            sm = sb[torch.from_numpy(derangement(len(idx), rng))]
            t_joint, t_marginal = net(cb, sb), net(cb, sm)
            if config.ema:
                denominator = torch.exp(t_marginal).mean()
                ema = denominator.detach() if ema is None else (
                    config.ema_decay * ema + (1.0 - config.ema_decay) * denominator.detach())
                loss = -(t_joint.mean() - denominator / ema)
            else:
                loss = -donsker_varadhan(t_joint, t_marginal)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite MINE objective at epoch {epoch + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        # fresh marginal pairs every epoch on rows the network never trains on
        v = evaluate_dv(net, c[val], s[val], derangement(n_hold, rng))
        t = evaluate_dv(net, c[test], s[test], derangement(n_hold, rng))
        if not (math.isfinite(v) and math.isfinite(t)):
            raise FloatingPointError(f"non-finite MINE estimate at epoch {epoch + 1}")
        val_curve.append(v)
        test_curve.append(t)
        window = float(np.mean(val_curve[-config.tail_epochs:]))
        if window > best:
            best, best_epoch = window, epoch
        elif epoch - best_epoch >= config.patience:
            logger.debug(f"MINE stopped at epoch {epoch + 1}, best window ends at {best_epoch + 1}")
            break
    return val_curve, test_curve, best_epoch


def mine_estimate(c_samples, s_samples, config: Optional[MineConfig] = None, seed: int = 0,
                  progress_callback: Optional[Callable] = None) -> MineResult:
    """MI estimate in nats, averaged over `config.repeats` independently seeded repeats.

    Each repeat splits the rows into training, validation and test parts. The
    epoch window with the best validation bound is selected and the repeat
    reports the mean test bound over that window.

    A repeat whose objective turns non-finite is retried with a fresh seed up
    to `config.max_restarts` times before EstimationError is raised.
    """
    config = config or MineConfig()
    c = torch.as_tensor(np.asarray(c_samples), dtype=torch.float32)
    s = torch.as_tensor(np.asarray(s_samples), dtype=torch.float32)
    if c.ndim == 1:
        c = c[:, None]
    if s.ndim == 1:
        s = s[:, None]
    if c.shape[0] != s.shape[0]:
        raise ValueError(f"c has {c.shape[0]} rows but s has {s.shape[0]}")
    if c.shape[0] < 2 * config.batch_size:
        raise ValueError(f"MINE needs at least {2 * config.batch_size} samples, got {c.shape[0]}")
    if holdout_sizes(c.shape[0], config)[1] < config.batch_size:
        raise ValueError(f"holdout {config.holdout} leaves fewer than {config.batch_size} training rows")

    result = MineResult(estimate=0.0, repeats=[])
    for repeat in range(config.repeats):
        for attempt in range(config.max_restarts + 1):
            rng = np.random.default_rng([seed, repeat, attempt])
            try:
                val_curve, test_curve, best_epoch = _train_repeat(c, s, config, rng)
                break
            except FloatingPointError as e:
                result.restarts += 1
                logger.warning(f"MINE repeat {repeat + 1} attempt {attempt + 1} failed: {e}")
        else:
            raise EstimationError(f"MINE repeat {repeat + 1} diverged after {config.max_restarts} restarts")
        window = test_curve[max(0, best_epoch - config.tail_epochs + 1):best_epoch + 1]
        result.repeats.append(float(np.mean(window)))
        result.curves.append(val_curve)
        result.held_out.append(test_curve)
        result.best_epochs.append(best_epoch + 1)
        logger.info(f"MINE repeat {repeat + 1}/{config.repeats}: {result.repeats[-1]:.4f} nats "
                    f"(epoch {best_epoch + 1}/{len(val_curve)})")
        if progress_callback:
            progress_callback(100.0 * (repeat + 1) / config.repeats, f"MINE repeat {repeat + 1}/{config.repeats}")

    result.estimate = float(np.mean(result.repeats))
    return result


class AuditRow(BaseModel):
    view: int
    mi_nats: float
    std: float
    repeats: List[float]


def audit_redundancy(latents, config: Optional[MineConfig] = None, seed: int = 0,
                     progress_callback: Optional[Callable] = None) -> List[AuditRow]:
    """One MINE estimate of I(c; s^i) per view."""
    config = config or MineConfig()
    if len(latents) < 2 * config.batch_size:
        raise ValueError(f"MI audit needs at least {2 * config.batch_size} samples, got {len(latents)}")
    rows = []
    for i in range(latents.n_views):
        def view_progress(pct, msg, i=i):
            if progress_callback:
                progress_callback((i + pct / 100.0) * 100.0 / latents.n_views, f"view {i + 1}: {msg}")

        result = mine_estimate(latents.c, latents.s[:, i], config, seed=seed + i, progress_callback=view_progress)
        rows.append(AuditRow(view=i + 1, mi_nats=result.estimate, std=result.std, repeats=result.repeats))
        logger.info(f"MI(c; s{i + 1}) = {result.estimate:.4f} +/- {result.std:.4f} nats")
    return rows
