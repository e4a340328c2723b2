"""Dual-flow noise estimator: a per-patch transformer flow for local detail
and a whole-volume 3D U-Net flow for global structure.

The transformer flow processes latent patches independently with shared
weights and exposes token features after its first two and last two blocks;
those taps are depatchified, linearly projected, and added into the matching
U-Net stages. The two flows' outputs are fused by element-wise addition (the
transformer head is zero-initialized, so an untrained model reduces to the
U-Net alone).
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .config import BiFlowNetConfig
from .errors import VolumeError


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32)
                      / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConditionEmbedding(nn.Module):
    """Timestep sinusoid -> MLP, plus a class embedding table."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(),
                                 nn.Linear(dim, dim))
        self.class_table = nn.Embedding(num_classes, dim)

    def forward(self, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if torch.any(c < 0) or torch.any(c >= self.num_classes):
            raise VolumeError(
                f"class id out of range [0, {self.num_classes}): {c.tolist()}"
            )
        emb = sinusoidal_embedding(t, self.dim)
        emb = emb.to(self.class_table.weight.dtype)
        return self.mlp(emb) + self.class_table(c)


def patchify_latent(z: torch.Tensor, patch_extent: int) -> torch.Tensor:
    """(B, C, H, W, D) -> (B, N, C, p, p, p) in row-major grid order."""
    B, C, H, W, D = z.shape
    p = patch_extent
    if H % p or W % p or D % p:
        raise VolumeError(
            f"latent extent {(H, W, D)} not divisible by patch extent {p}"
        )
    nh, nw, nd = H // p, W // p, D // p
    z = z.reshape(B, C, nh, p, nw, p, nd, p)
    z = z.permute(0, 2, 4, 6, 1, 3, 5, 7)
    return z.reshape(B, nh * nw * nd, C, p, p, p)


def depatchify_latent(patches: torch.Tensor, grid_counts) -> torch.Tensor:
    """Inverse of :func:`patchify_latent`."""
    B, N, C, p, _, _ = patches.shape
    nh, nw, nd = grid_counts
    if N != nh * nw * nd:
        raise VolumeError(f"{N} patches cannot fill grid {grid_counts}")
    z = patches.reshape(B, nh, nw, nd, C, p, p, p)
    z = z.permute(0, 4, 1, 5, 2, 6, 3, 7)
    return z.reshape(B, C, nh * p, nw * p, nd * p)


class DiTBlock(nn.Module):
    """Transformer block with adaptive layer-norm conditioning; the modulation
    head is zero-initialized so the block starts as (near) identity."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(),
                                 nn.Linear(4 * dim, dim))
        self.modulation = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = \
            self.modulation(cond)[:, None, :].chunk(6, dim=-1)
        h = self.norm1(x) * (1 + scale1) + shift1
        h, _ = self.attn(h, h, h, need_weights=False)
        x = x + gate1 * h
        h = self.norm2(x) * (1 + scale2) + shift2
        x = x + gate2 * self.mlp(h)
        return x


class IntraPatchFlow(nn.Module):
    """Shared-weight transformer over tokens inside each latent patch.

    Patches never attend to each other, so the cross-patch Jacobian is
    exactly zero.
    """

    TAP_OFFSETS = (0, 1, -2, -1)

    def __init__(self, cfg: BiFlowNetConfig, in_channels: int):
        super().__init__()
        p, ts = cfg.patch_extent, cfg.token_size
        self.patch_extent = p
        self.token_size = ts
        self.token_grid = p // ts
        n_tokens = self.token_grid ** 3
        self.tokenizer = nn.Conv3d(in_channels, cfg.embed_dim, ts, stride=ts)
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, cfg.embed_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            DiTBlock(cfg.embed_dim, cfg.num_heads) for _ in range(cfg.depth)
        )
        self.tap_indices = tuple(i % cfg.depth for i in self.TAP_OFFSETS)
        self.head_norm = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, in_channels * ts ** 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.in_channels = in_channels

    def forward(self, patches: torch.Tensor, cond: torch.Tensor,
                tap_extra: torch.Tensor | None = None):
        """patches: (B, N, C, p, p, p); cond: (B, E).

        Returns (taps, out_patches): taps is a list of four (B, N, n_tok, E)
        token features; out_patches matches the input patch shape.
        ``tap_extra`` is added to the final tap (the conditional-adapter
        injection point).
        """
        B, N, C, p, _, _ = patches.shape
        if p != self.patch_extent:
            raise VolumeError(
                f"patch extent {p} != configured {self.patch_extent}"
            )
        x = self.tokenizer(patches.reshape(B * N, C, p, p, p))
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        cond_rep = cond.repeat_interleave(N, dim=0)
        taps = {}
        for i, block in enumerate(self.blocks):
            x = block(x, cond_rep)
            if i in self.tap_indices:
                taps[i] = x
        ordered = [taps[i] for i in self.tap_indices]
        if tap_extra is not None:
            ordered[-1] = ordered[-1] + tap_extra.reshape(ordered[-1].shape)
        out = self.head(self.head_norm(x))
        g, ts = self.token_grid, self.token_size
        out = out.reshape(B * N, g, g, g, C, ts, ts, ts)
        out = out.permute(0, 4, 1, 5, 2, 6, 3, 7).reshape(B * N, C, p, p, p)
        return [tap.reshape(B, N, -1, tap.shape[-1]) for tap in ordered], \
            out.reshape(B, N, C, p, p, p)


class CondResBlock3d(nn.Module):
    def __init__(self, ch: int, cond_dim: int):
        super().__init__()
        groups = min(8, ch)
        while ch % groups:
            groups -= 1
        self.norm1 = nn.GroupNorm(groups, ch)
        self.conv1 = nn.Conv3d(ch, ch, 3, padding=1)
        self.cond_proj = nn.Linear(cond_dim, ch)
        self.norm2 = nn.GroupNorm(groups, ch)
        self.conv2 = nn.Conv3d(ch, ch, 3, padding=1)

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.cond_proj(cond)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class UNet3D(nn.Module):
    """Two-stage volumetric U-Net with additive timestep/class conditioning
    and four feature-injection sites (enc_full, enc_half, dec_half, dec_full)
    plus adapter control points (bottleneck, dec_half, dec_full)."""

    SITES = ("enc_full", "enc_half", "dec_half", "dec_full")

    def __init__(self, cfg: BiFlowNetConfig, in_channels: int):
        super().__init__()
        c1, c2 = cfg.unet_channels
        E = cfg.embed_dim
        self.conv_in = nn.Conv3d(in_channels, c1, 3, padding=1)
        self.enc0 = CondResBlock3d(c1, E)
        self.down1 = nn.Conv3d(c1, c2, 4, stride=2, padding=1)
        self.enc1 = CondResBlock3d(c2, E)
        self.down2 = nn.Conv3d(c2, c2, 4, stride=2, padding=1)
        self.mid = CondResBlock3d(c2, E)
        self.up1 = nn.Conv3d(c2, c2, 3, padding=1)
        self.dec1 = CondResBlock3d(c2, E)
        self.up2 = nn.Conv3d(c2, c1, 3, padding=1)
        self.dec0 = CondResBlock3d(c1, E)
        self.conv_out = nn.Conv3d(c1, in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        self.site_channels = {"enc_full": c1, "enc_half": c2,
                              "dec_half": c2, "dec_full": c1}

    @staticmethod
    def _add(x, extra):
        if extra is None:
            return x
        if extra.shape != x.shape:
            raise VolumeError(
                f"injected feature shape {tuple(extra.shape)} does not match "
                f"stage shape {tuple(x.shape)}"
            )
        return x + extra

    def forward(self, z, cond, injected: dict | None = None,
                control: dict | None = None):
        injected = injected or {}
        control = control or {}
        h0 = self.enc0(self.conv_in(z), cond)
        h0 = self._add(h0, injected.get("enc_full"))
        h1 = self.enc1(self.down1(h0), cond)
        h1 = self._add(h1, injected.get("enc_half"))
        hm = self.mid(self.down2(h1), cond)
        hm = self._add(hm, control.get("bottleneck"))
        u1 = self.up1(F.interpolate(hm, scale_factor=2, mode="nearest"))
        u1 = self.dec1(u1 + h1, cond)
        u1 = self._add(u1, injected.get("dec_half"))
        u1 = self._add(u1, control.get("dec_half"))
        u0 = self.up2(F.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.dec0(u0 + h0, cond)
        u0 = self._add(u0, injected.get("dec_full"))
        u0 = self._add(u0, control.get("dec_full"))
        return self.conv_out(u0)


def fuse(dit_features: torch.Tensor, unet_features: torch.Tensor,
         projection=None) -> torch.Tensor:
    """Element-wise additive fusion after an optional channel projection."""
    if projection is not None:
        dit_features = projection(dit_features)
    if dit_features.shape != unet_features.shape:
        raise VolumeError(
            f"fusion shape mismatch {tuple(dit_features.shape)} vs "
            f"{tuple(unet_features.shape)}"
        )
    return dit_features + unet_features


class BiFlowNet(nn.Module):
    """Noise estimator combining the per-patch transformer flow and the
    whole-volume U-Net flow."""

    def __init__(self, cfg: BiFlowNetConfig, in_channels: int = 8):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        self.cond_embed = ConditionEmbedding(cfg.embed_dim, cfg.num_classes)
        self.unet = UNet3D(cfg, in_channels)
        self.intra = IntraPatchFlow(cfg, in_channels) if cfg.intra_enabled else None
        if self.intra is not None:
            self.tap_proj = nn.ModuleDict({
                site: nn.Conv3d(cfg.embed_dim, ch, 1)
                for site, ch in self.unet.site_channels.items()
            })

    def _taps_to_sites(self, taps, grid_counts, site_shapes):
        injected = {}
        g = self.intra.token_grid
        for site, tap in zip(UNet3D.SITES, taps):
            B, N = tap.shape[0], tap.shape[1]
            vol = tap.transpose(2, 3).reshape(B, N, -1, g, g, g)
            vol = depatchify_latent(vol, grid_counts)
            vol = self.tap_proj[site](vol)
            target = site_shapes[site]
            if vol.shape[2:] != target:
                vol = F.interpolate(vol, size=target, mode="nearest")
            injected[site] = vol
        return injected

    def forward(self, zt: torch.Tensor, t, c, control: dict | None = None):
        if zt.ndim != 5:
            raise VolumeError(f"expected (B, C, H, W, D) latent, got {tuple(zt.shape)}")
        B = zt.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        c = torch.as_tensor(c, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        if c.numel() == 1:
            c = c.expand(B)
        cond = self.cond_embed(t, c)
        H, W, D = zt.shape[2:]
        site_shapes = {
            "enc_full": (H, W, D),
            "enc_half": (H // 2, W // 2, D // 2),
            "dec_half": (H // 2, W // 2, D // 2),
            "dec_full": (H, W, D),
        }
        control = control or {}
        if self.intra is not None:
            p = self.cfg.patch_extent
            grid_counts = (H // p, W // p, D // p)
            patches = patchify_latent(zt, p)
            taps, intra_out = self.intra(patches, cond,
                                         tap_extra=control.get("dit_tap"))
            injected = self._taps_to_sites(taps, grid_counts, site_shapes)
            unet_out = self.unet(zt, cond, injected, control)
            return unet_out + depatchify_latent(intra_out, grid_counts)
        return self.unet(zt, cond, None, control)

    def as_estimator(self, control: dict | None = None):
        """Adapt to the sampler's (zt, t, c) -> eps_hat callable interface,
        accepting unbatched latents and scalar t/c."""

        def estimator(zt, t, c):
            batched = zt.ndim == 5
            x = zt if batched else zt[None]
            out = self.forward(x, t, c, control=control)
            return out if batched else out[0]

        return estimator

    def arch_config(self) -> dict:
        d = self.cfg.__dict__.copy()
        d["unet_channels"] = list(d["unet_channels"])
        d["in_channels"] = self.in_channels
        return d
