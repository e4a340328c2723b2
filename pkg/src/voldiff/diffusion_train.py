"""Training loop for the dual-flow noise estimator on standardized latents."""

from __future__ import annotations

import numpy as np
import torch

from .biflownet import BiFlowNet
from .config import BiFlowNetConfig, DiffusionConfig
from .diffusion import (
    LatentStats,
    NoiseSchedule,
    compute_latent_stats,
    cosine_schedule,
    diffusion_loss,
)
from .errors import TrainingDivergedError, VolumeError


def train_estimator(latents, class_ids, diff_cfg: DiffusionConfig,
                    net_cfg: BiFlowNetConfig, seed: int = 0,
                    steps: int | None = None, model: BiFlowNet | None = None,
                    stats: LatentStats | None = None,
                    sched: NoiseSchedule | None = None,
                    loss_log: list | None = None):
    """Train a noise estimator on a list of (C, h, w, d) latent grids.

    Latents are standardized per channel; the statistics travel with the
    returned model so sampling and condition encoding stay consistent.
    Returns (model, stats, sched, last_loss).
    """
    if not latents:
        raise VolumeError("no latents to train on")
    if len(latents) != len(class_ids):
        raise VolumeError("latents and class_ids length mismatch")
    if max(class_ids) >= net_cfg.num_classes:
        raise VolumeError(
            f"class id {max(class_ids)} exceeds configured "
            f"num_classes={net_cfg.num_classes}"
        )
    torch.manual_seed(seed)
    if stats is None:
        stats = compute_latent_stats(latents)
    z0_pool = torch.stack([stats.standardize(f) for f in latents])
    c_pool = torch.tensor(class_ids, dtype=torch.long)
    if model is None:
        model = BiFlowNet(net_cfg, in_channels=z0_pool.shape[1])
    if sched is None:
        sched = cosine_schedule(diff_cfg.timesteps, diff_cfg.cosine_offset)
    gen = torch.Generator().manual_seed(seed + 1)
    rng = np.random.default_rng(seed + 2)
    opt = torch.optim.Adam(model.parameters(), lr=diff_cfg.lr)
    n_steps = steps if steps is not None else diff_cfg.steps
    last = float("nan")
    for step in range(1, n_steps + 1):
        idx = rng.integers(0, len(z0_pool),
                           size=min(diff_cfg.batch_size, len(z0_pool)))
        loss = diffusion_loss(model, z0_pool[idx], c_pool[idx], sched, gen)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite diffusion loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss.detach())
        if loss_log is not None:
            loss_log.append(last)
    return model, stats, sched, last
