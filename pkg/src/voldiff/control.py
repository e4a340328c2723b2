"""Conditional fine-tuning adapter: a trainable clone of the noise
estimator's encoder halves (both flows), wired into the frozen base through
zero-initialized connector convolutions. At initialization every connector
outputs exactly zero, so the adapter is element-exact identical to the base
model.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn

from .biflownet import BiFlowNet, patchify_latent
from .checkpoint import Checkpoint, module_param_hash, save_checkpoint
from .diffusion import LatentStats, NoiseSchedule, q_sample, sample
from .errors import CheckpointError, VolumeError
from .pvae.models import LatentVolume, PvaeModel
from .volume import Volume


def _zero_conv(ch_in, ch_out):
    conv = nn.Conv3d(ch_in, ch_out, 3, padding=1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlAdapter(nn.Module):
    """Trainable encoder clone + zero connectors around a frozen base."""

    def __init__(self, base: BiFlowNet):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.base_hash = module_param_hash(base)
        c1, c2 = base.cfg.unet_channels
        C = base.in_channels
        E = base.cfg.embed_dim
        # The condition is projected into the clone's first feature map
        # rather than summed with the noisy latent at the input: adding
        # c_task to zt would make the two inseparable downstream, while a
        # feature-space injection keeps a linear path from the condition to
        # every connector. The overall adapter still starts as an exact
        # identity because every injection-site connector below is
        # zero-initialized.
        self.cond_in = nn.Conv3d(C, c1, kernel_size=3, padding=1)
        # U-Net encoder-half clone.
        u = base.unet
        self.clone_conv_in = copy.deepcopy(u.conv_in)
        self.clone_enc0 = copy.deepcopy(u.enc0)
        self.clone_down1 = copy.deepcopy(u.down1)
        self.clone_enc1 = copy.deepcopy(u.enc1)
        self.clone_down2 = copy.deepcopy(u.down2)
        self.clone_mid = copy.deepcopy(u.mid)
        self.connect_full = _zero_conv(c1, c1)
        self.connect_half = _zero_conv(c2, c2)
        self.connect_mid = _zero_conv(c2, c2)
        # Transformer-flow encoder-half clone (when the base has one).
        if base.intra is not None:
            n_half = max(1, base.cfg.depth // 2)
            self.clone_tokenizer = copy.deepcopy(base.intra.tokenizer)
            self.clone_pos_embed = nn.Parameter(
                base.intra.pos_embed.detach().clone())
            self.clone_blocks = nn.ModuleList(
                copy.deepcopy(base.intra.blocks[i]) for i in range(n_half))
            self.cond_in_tokens = copy.deepcopy(base.intra.tokenizer)
            self.connect_tap = nn.Linear(E, E)
            nn.init.zeros_(self.connect_tap.weight)
            nn.init.zeros_(self.connect_tap.bias)
        else:
            self.clone_tokenizer = None

    def trainable_parameters(self):
        return [p for name, p in self.named_parameters()
                if not name.startswith("base.")]

    def trainable_state(self) -> dict:
        return {name: p for name, p in self.named_parameters()
                if not name.startswith("base.")}

    def connectors_all_zero(self) -> bool:
        mods = [self.connect_full, self.connect_half, self.connect_mid]
        if self.clone_tokenizer is not None:
            mods.append(self.connect_tap)
        return all(float(p.detach().abs().max()) == 0.0
                   for m in mods for p in m.parameters())

    def _control_signals(self, zt, cond, c_task):
        h0 = self.clone_enc0(self.clone_conv_in(zt) + self.cond_in(c_task),
                             cond)
        h1 = self.clone_enc1(self.clone_down1(h0), cond)
        hm = self.clone_mid(self.clone_down2(h1), cond)
        control = {
            "dec_full": self.connect_full(h0),
            "dec_half": self.connect_half(h1),
            "bottleneck": self.connect_mid(hm),
        }
        if self.clone_tokenizer is not None:
            p = self.base.cfg.patch_extent
            patches = patchify_latent(zt, p)
            B, N, C = patches.shape[:3]
            tok = self.clone_tokenizer(patches.reshape(B * N, C, p, p, p))
            ctok = self.cond_in_tokens(
                patchify_latent(c_task, p).reshape(B * N, C, p, p, p))
            tok = (tok + ctok).flatten(2).transpose(1, 2) + self.clone_pos_embed
            cond_rep = cond.repeat_interleave(N, dim=0)
            for block in self.clone_blocks:
                tok = block(tok, cond_rep)
            control["dit_tap"] = self.connect_tap(tok).reshape(
                B, N, -1, tok.shape[-1])
        return control

    def forward(self, zt, t, c, c_task):
        if c_task.shape != zt.shape:
            raise VolumeError(
                f"condition latent {tuple(c_task.shape)} must match input "
                f"{tuple(zt.shape)}"
            )
        B = zt.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        c = torch.as_tensor(c, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        if c.numel() == 1:
            c = c.expand(B)
        cond = self.base.cond_embed(t, c)
        control = self._control_signals(zt, cond, c_task)
        return self.base(zt, t, c, control=control)

    def verify_base_unchanged(self) -> bool:
        return module_param_hash(self.base) == self.base_hash


def init_adapter(base: BiFlowNet) -> ControlAdapter:
    """Clone the base's encoder halves with zero-initialized connectors."""
    return ControlAdapter(base)


def encode_condition(cond_vol: Volume, pvae: PvaeModel,
                     stats: LatentStats) -> torch.Tensor:
    """Frozen patch-wise encode + quantize of the condition volume,
    standardized with the diffusion latent statistics."""
    latent = pvae.encode_volume_patchwise(cond_vol)
    return stats.standardize(latent.features)


def conditional_diffusion_loss(adapter: ControlAdapter, z0: torch.Tensor,
                               c, c_task: torch.Tensor, sched: NoiseSchedule,
                               generator: torch.Generator | None = None):
    """Noise-prediction MSE with the task condition supplied to the adapter."""
    B = z0.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    zt = q_sample(z0, t, eps, sched)
    eps_hat = adapter(zt, t, c, c_task)
    return torch.mean((eps - eps_hat) ** 2)


def finetune(adapter: ControlAdapter, pairs, sched: NoiseSchedule, steps: int,
             lr: float = 1e-4, batch_size: int = 4, seed: int = 0,
             log_interval: int = 0) -> ControlAdapter:
    """Fine-tune the adapter on (target latent, condition latent, class) pairs.

    Only adapter and connector parameters are updated; the base is verified
    bit-identical afterwards.
    """
    if not pairs:
        raise VolumeError("empty fine-tuning dataset")
    torch.manual_seed(seed + 11)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(adapter.trainable_parameters(), lr=lr)
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
        z0 = torch.stack([pairs[i][0] for i in idx])
        c_task = torch.stack([pairs[i][1] for i in idx])
        c = torch.tensor([pairs[i][2] for i in idx], dtype=torch.long)
        loss = conditional_diffusion_loss(adapter, z0, c, c_task, sched, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_interval and step % log_interval == 0:
            print(f"controlnet step {step}: loss {float(loss):.4f}")
    if not adapter.verify_base_unchanged():
        raise CheckpointError("base estimator changed during fine-tuning")
    return adapter


def conditional_sample(adapter: ControlAdapter, cond_vol: Volume, class_id: int,
                       sched: NoiseSchedule, pvae: PvaeModel,
                       stats: LatentStats,
                       generator: torch.Generator | None = None) -> Volume:
    """Ancestral sampling conditioned on a task volume, decoded to image space."""
    c_task = encode_condition(cond_vol, pvae, stats)
    cond_latent = pvae.encode_volume_patchwise(cond_vol)

    def estimator(zt, t, c):
        return adapter(zt[None], t, c, c_task[None])[0]

    z = sample(estimator, c_task.shape, class_id, sched, generator)
    features = stats.destandardize(z)
    latent = LatentVolume(features=features, indices=cond_latent.indices,
                          layout=cond_latent.layout, spacing=cond_vol.spacing,
                          class_tag=cond_vol.class_tag)
    return pvae.decode_volume_joint(latent)


def save_adapter(path, adapter: ControlAdapter, config: dict,
                 step: int = 0, extras: dict | None = None) -> str:
    state = {k: v.detach() for k, v in adapter.trainable_state().items()}
    ckpt = Checkpoint(tensors=state, config=config, step=step, stage=None,
                      extras={"base_hash": adapter.base_hash,
                              **(extras or {})})
    return save_checkpoint(path, ckpt)


def load_adapter(ckpt, base: BiFlowNet) -> ControlAdapter:
    """Rebuild an adapter from its checkpoint, verifying the base's hash."""
    if module_param_hash(base) != ckpt.extras.get("base_hash"):
        raise CheckpointError(
            "base checkpoint hash does not match the one this adapter was "
            "fine-tuned against"
        )
    adapter = ControlAdapter(base)
    state = adapter.trainable_state()
    for name, tensor in ckpt.tensors.items():
        if name not in state:
            raise CheckpointError(f"unexpected adapter tensor '{name}'")
        with torch.no_grad():
            state[name].copy_(tensor)
    return adapter
