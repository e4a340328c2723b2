"""Patch-volume autoencoder networks: patch encoder, vector quantizer with a
learnable codebook, patch/joint decoders, slice discriminator, and the fixed
feature net used by the tri-plane perceptual term.

The encoder reduces each spatial axis 4x (two stride-2 stages), so a patch of
shape (h, w, d) maps to an (h/4, w/4, d/4) grid of code vectors.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..errors import VolumeError
from ..volume import PatchLayout, Volume, partition

SPATIAL_REDUCTION = 4


def _norm(ch):
    groups = min(8, ch)
    while ch % groups != 0:
        groups -= 1
    return nn.GroupNorm(groups, ch)


class ResBlock3d(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.block = nn.Sequential(
            _norm(ch), nn.SiLU(),
            nn.Conv3d(ch, ch, 3, padding=1),
            _norm(ch), nn.SiLU(),
            nn.Conv3d(ch, ch, 3, padding=1),
        )

    def forward(self, x):
        return x + self.block(x)


class PatchEncoder(nn.Module):
    """Strided 3D conv stack mapping a patch to a pre-quantization feature grid."""

    def __init__(self, code_dim=8, channels=(32, 64, 128)):
        super().__init__()
        if len(channels) != 3:
            raise VolumeError("encoder needs three channel widths (stem + 2 downs)")
        w0, w1, w2 = channels
        self.net = nn.Sequential(
            nn.Conv3d(1, w0, 3, padding=1),
            ResBlock3d(w0),
            nn.Conv3d(w0, w1, 4, stride=2, padding=1),
            ResBlock3d(w1),
            nn.Conv3d(w1, w2, 4, stride=2, padding=1),
            ResBlock3d(w2),
            _norm(w2), nn.SiLU(),
            nn.Conv3d(w2, code_dim, 1),
        )
        self.code_dim = code_dim

    def forward(self, x):
        # x: (B, 1, h, w, d) -> (B, C, h/4, w/4, d/4)
        if x.ndim != 5 or x.shape[1] != 1:
            raise VolumeError(f"expected (B, 1, h, w, d) input, got {tuple(x.shape)}")
        if any(s % SPATIAL_REDUCTION for s in x.shape[2:]):
            raise VolumeError(
                f"patch extent {tuple(x.shape[2:])} not divisible by "
                f"{SPATIAL_REDUCTION}"
            )
        return self.net(x)


class PatchDecoder(nn.Module):
    """Mirror of the encoder; fully convolutional, so the same architecture
    decodes single patches or whole concatenated latent volumes."""

    def __init__(self, code_dim=8, channels=(32, 64, 128)):
        super().__init__()
        w0, w1, w2 = channels
        self.net = nn.Sequential(
            nn.Conv3d(code_dim, w2, 1),
            ResBlock3d(w2),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv3d(w2, w1, 3, padding=1),
            ResBlock3d(w1),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv3d(w1, w0, 3, padding=1),
            ResBlock3d(w0),
            _norm(w0), nn.SiLU(),
            nn.Conv3d(w0, 1, 3, padding=1),
        )

    def forward(self, z):
        if z.ndim != 5:
            raise VolumeError(f"expected (B, C, lh, lw, ld) latent, got {tuple(z.shape)}")
        return self.net(z)


class VectorQuantizer(nn.Module):
    """Nearest-code lookup with a straight-through gradient path.

    The codebook is trained through the alignment/commitment terms of the VQ
    loss; dead codes can be re-seeded from recent encoder outputs.
    """

    def __init__(self, num_codes=8192, code_dim=8):
        super().__init__()
        if num_codes < 2:
            raise VolumeError("codebook needs at least 2 codes")
        self.num_codes = num_codes
        self.code_dim = code_dim
        self.codes = nn.Parameter(torch.randn(num_codes, code_dim) * 0.5)
        self.register_buffer("usage_counts", torch.zeros(num_codes, dtype=torch.long))

    def lookup_indices(self, z_flat: torch.Tensor) -> torch.Tensor:
        # z_flat: (M, C) -> (M,) nearest-code indices by Euclidean distance.
        d = torch.cdist(z_flat, self.codes)
        return d.argmin(dim=1)

    def forward(self, z: torch.Tensor, update_usage: bool = False):
        """Quantize a (B, C, *spatial) feature grid.

        Returns (z_q_st, indices, z_q) where z_q_st carries the
        straight-through gradient (d loss / d z_q_st flows into z unchanged)
        and z_q is the raw embedded codes.
        """
        if self.codes.shape[0] == 0:
            raise VolumeError("empty codebook")
        if z.shape[1] != self.code_dim:
            raise VolumeError(
                f"feature channel dim {z.shape[1]} != code dim {self.code_dim}"
            )
        B, C = z.shape[0], z.shape[1]
        spatial = z.shape[2:]
        z_flat = z.movedim(1, -1).reshape(-1, C)
        idx = self.lookup_indices(z_flat)
        z_q = self.codes[idx].reshape(B, *spatial, C).movedim(-1, 1)
        z_q_st = z + (z_q - z).detach()
        if update_usage:
            with torch.no_grad():
                self.usage_counts += torch.bincount(idx, minlength=self.num_codes)
        return z_q_st, idx.reshape(B, *spatial), z_q

    @torch.no_grad()
    def reseed_dead_codes(self, encoder_outputs: torch.Tensor,
                          rng: torch.Generator | None = None) -> int:
        """Re-seed zero-usage codes from random recent encoder outputs."""
        dead = (self.usage_counts == 0).nonzero(as_tuple=True)[0]
        if dead.numel() == 0:
            return 0
        z_flat = encoder_outputs.movedim(1, -1).reshape(-1, self.code_dim)
        pick = torch.randint(0, z_flat.shape[0], (dead.numel(),), generator=rng)
        self.codes.data[dead] = z_flat[pick]
        return int(dead.numel())

    @torch.no_grad()
    def reset_usage(self):
        self.usage_counts.zero_()


class SliceDiscriminator(nn.Module):
    """2D patch discriminator with a sigmoid head, applied to orthogonal
    slices; keeps adversarial-training memory flat at desk scale."""

    def __init__(self, channels=(32, 64)):
        super().__init__()
        layers = []
        in_ch = 1
        for w in channels:
            layers += [nn.Conv2d(in_ch, w, 4, stride=2, padding=1),
                       nn.LeakyReLU(0.2)]
            in_ch = w
        layers.append(nn.Conv2d(in_ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        # x: (B, 1, H, W) -> per-location probabilities in (0, 1)
        return torch.sigmoid(self.net(x))


class TriplaneFeatureNet(nn.Module):
    """Fixed, seeded, untrained 2D feature stack for the tri-plane loss.

    Deterministic given its seed; a pretrained 2D backbone can be plugged in
    anywhere a callable from (B, 1, H, W) to feature maps is accepted.
    """

    def __init__(self, seed=0, channels=(16, 32, 64, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        in_ch = 1
        for w in channels:
            conv = nn.Conv2d(in_ch, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  / (in_ch * 9) ** 0.5)
                conv.bias.zero_()
            layers += [conv, nn.LeakyReLU(0.2)]
            in_ch = w
        self.net = nn.Sequential(*layers)
        self.seed = seed
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        return self.net(x)


@dataclass
class LatentVolume:
    """Concatenated per-patch quantized latents in patch-layout order."""

    features: torch.Tensor   # (C, lH, lW, lD)
    indices: torch.Tensor    # (lH, lW, lD) long
    layout: PatchLayout      # image-space layout
    spacing: tuple = (1.0, 1.0, 1.0)
    class_tag: str = "unknown"

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return tuple(self.features.shape[1:])


class PvaeModel(nn.Module):
    """Patch encoder + codebook + patch decoder, with a joint decoder and
    discriminator added for volume-wise fine-tuning."""

    def __init__(self, patch_shape=(64, 64, 64), codebook_size=8192, code_dim=8,
                 channels=(32, 64, 128), lambda_adv=2.0, lambda_tp=4.0):
        super().__init__()
        self.patch_shape = tuple(int(p) for p in patch_shape)
        if any(p % SPATIAL_REDUCTION for p in self.patch_shape):
            raise VolumeError(
                f"patch shape {self.patch_shape} must be divisible by "
                f"{SPATIAL_REDUCTION}"
            )
        self.encoder = PatchEncoder(code_dim, channels)
        self.quantizer = VectorQuantizer(codebook_size, code_dim)
        self.patch_decoder = PatchDecoder(code_dim, channels)
        self.joint_decoder: PatchDecoder | None = None
        self.discriminator = SliceDiscriminator()
        self.lambda_adv = lambda_adv
        self.lambda_tp = lambda_tp
        self.stage = 1

    # ------------------------------------------------------------------ ops
    def encode_patch(self, patch: torch.Tensor) -> torch.Tensor:
        if tuple(patch.shape[-3:]) != self.patch_shape:
            raise VolumeError(
                f"patch shape {tuple(patch.shape[-3:])} != configured "
                f"{self.patch_shape}"
            )
        if patch.ndim == 3:
            patch = patch[None, None]
        elif patch.ndim == 4:
            patch = patch[:, None]
        return self.encoder(patch)

    def decode_patch(self, latent: torch.Tensor) -> torch.Tensor:
        expected = tuple(p // SPATIAL_REDUCTION for p in self.patch_shape)
        if tuple(latent.shape[-3:]) != expected:
            raise VolumeError(
                f"latent shape {tuple(latent.shape[-3:])} != expected {expected}"
            )
        if latent.ndim == 4:
            latent = latent[None]
        return self.patch_decoder(latent)

    @torch.no_grad()
    def encode_volume_patchwise(self, vol: Volume,
                                update_usage: bool = False) -> LatentVolume:
        """partition -> encode -> quantize -> concatenate in layout order."""
        patches, layout = partition(vol, self.patch_shape)
        r = SPATIAL_REDUCTION
        lshape = tuple(s // r for s in layout.padded_shape)
        pl = tuple(p // r for p in self.patch_shape)
        features = torch.empty(self.quantizer.code_dim, *lshape)
        indices = torch.empty(lshape, dtype=torch.long)
        idx = 0
        for i in range(layout.grid_counts[0]):
            for j in range(layout.grid_counts[1]):
                for k in range(layout.grid_counts[2]):
                    x = torch.from_numpy(np.asarray(patches[idx], dtype=np.float32))
                    z = self.encode_patch(x)
                    _, code_idx, z_q = self.quantizer(z, update_usage=update_usage)
                    sl = (slice(i * pl[0], (i + 1) * pl[0]),
                          slice(j * pl[1], (j + 1) * pl[1]),
                          slice(k * pl[2], (k + 1) * pl[2]))
                    features[(slice(None),) + sl] = z_q[0]
                    indices[sl] = code_idx[0]
                    idx += 1
        return LatentVolume(features=features, indices=indices, layout=layout,
                            spacing=vol.spacing, class_tag=vol.class_tag)

    def decode_volume_joint(self, latent: LatentVolume) -> Volume:
        """Single full-volume pass through the joint decoder, cropped back to
        the original extent."""
        decoder = self.joint_decoder if self.joint_decoder is not None \
            else self.patch_decoder
        r = SPATIAL_REDUCTION
        expected = tuple(s // r for s in latent.layout.padded_shape)
        if latent.latent_shape != expected:
            raise VolumeError(
                f"latent extent {latent.latent_shape} inconsistent with layout "
                f"(expected {expected})"
            )
        with torch.no_grad():
            out = decoder(latent.features[None])[0, 0]
        oh, ow, od = latent.layout.original_shape
        return Volume(data=out[:oh, :ow, :od].numpy(), spacing=latent.spacing,
                      class_tag=latent.class_tag)

    def decode_volume_patch_concat(self, latent: LatentVolume) -> Volume:
        """Naive baseline: decode each patch latent separately and concatenate."""
        r = SPATIAL_REDUCTION
        layout = latent.layout
        pl = tuple(p // r for p in self.patch_shape)
        out = torch.empty(layout.padded_shape)
        with torch.no_grad():
            for i in range(layout.grid_counts[0]):
                for j in range(layout.grid_counts[1]):
                    for k in range(layout.grid_counts[2]):
                        sl = (slice(i * pl[0], (i + 1) * pl[0]),
                              slice(j * pl[1], (j + 1) * pl[1]),
                              slice(k * pl[2], (k + 1) * pl[2]))
                        block = latent.features[(slice(None),) + sl]
                        rec = self.decode_patch(block)[0, 0]
                        osl = (slice(i * self.patch_shape[0], (i + 1) * self.patch_shape[0]),
                               slice(j * self.patch_shape[1], (j + 1) * self.patch_shape[1]),
                               slice(k * self.patch_shape[2], (k + 1) * self.patch_shape[2]))
                        out[osl] = rec
        oh, ow, od = layout.original_shape
        return Volume(data=out[:oh, :ow, :od].numpy(), spacing=latent.spacing,
                      class_tag=latent.class_tag)

    # --------------------------------------------------------------- staging
    def begin_stage2(self):
        """Clone the patch decoder into the joint decoder and freeze the
        encoder and codebook."""
        if self.stage != 1:
            raise VolumeError("stage 2 can only start from a stage-1 model")
        self.joint_decoder = copy.deepcopy(self.patch_decoder)
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.quantizer.codes.requires_grad_(False)
        self.stage = 2

    def arch_config(self) -> dict:
        return {
            "patch_shape": list(self.patch_shape),
            "codebook_size": self.quantizer.num_codes,
            "code_dim": self.quantizer.code_dim,
            "channels": [m.out_channels for m in self.encoder.net
                         if isinstance(m, nn.Conv3d)][:3],
            "lambda_adv": self.lambda_adv,
            "lambda_tp": self.lambda_tp,
        }
