"""Composite autoencoder loss: VQ reconstruction/alignment terms, adversarial
terms with a sigmoid discriminator, and the tri-plane perceptual term.

All three VQ terms are Euclidean norms (not mean squares); stop-gradients make
the alignment term update only the codebook and the commitment term only the
encoder.
"""

from __future__ import annotations

import torch

from ..errors import VolumeError

PROB_EPS = 1e-6


def _l2(x: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(x.reshape(-1))


def vq_loss(x: torch.Tensor, x_rec: torch.Tensor, z_e: torch.Tensor,
            z_q: torch.Tensor):
    """||x - x_rec|| + ||sg[z_e] - z_q|| + ||sg[z_q] - z_e||.

    Returns (total, parts) with parts = (recon, align, commit).
    """
    for t in (x, x_rec, z_e, z_q):
        if not torch.isfinite(t).all():
            raise VolumeError("non-finite input to vq_loss")
    if x.shape != x_rec.shape or z_e.shape != z_q.shape:
        raise VolumeError("vq_loss shape mismatch")
    recon = _l2(x - x_rec)
    align = _l2(z_e.detach() - z_q)
    commit = _l2(z_q.detach() - z_e)
    return recon + align + commit, (recon, align, commit)


def adv_loss(disc, x: torch.Tensor, x_rec: torch.Tensor,
             eps: float = PROB_EPS):
    """Adversarial terms for a probability-output discriminator.

    Returns (gen_term, disc_term): disc_term = mean[log D(x) + log(1 - D(x_rec))]
    (the discriminator maximizes it); gen_term is the non-saturating
    -mean[log D(x_rec)]. Probabilities are clamped away from {0, 1}.
    """
    p_real = torch.clamp(disc(x), eps, 1.0 - eps)
    p_fake = torch.clamp(disc(x_rec), eps, 1.0 - eps)
    disc_term = (torch.log(p_real) + torch.log(1.0 - p_fake)).mean()
    gen_term = -torch.log(torch.clamp(disc(x_rec), eps, 1.0 - eps)).mean()
    return gen_term, disc_term


def triplane_loss(x: torch.Tensor, x_rec: torch.Tensor, phi,
                  index_triple) -> torch.Tensor:
    """Sum over the three orthogonal planes of ||phi(p) - phi(p_rec)||.

    The same index triple must be used on both volumes; x is (h, w, d) or
    (B, 1, h, w, d) with B == 1.
    """
    if x.shape != x_rec.shape:
        raise VolumeError("triplane_loss shape mismatch")
    if x.ndim == 5:
        x, x_rec = x[0, 0], x_rec[0, 0]
    i, j, k = index_triple
    h, w, d = x.shape
    if not (0 <= i < h and 0 <= j < w and 0 <= k < d):
        raise VolumeError(f"plane index {(i, j, k)} out of bounds for {x.shape}")
    total = x.new_zeros(())
    for plane, plane_rec in (
        (x[:, :, k], x_rec[:, :, k]),
        (x[i, :, :], x_rec[i, :, :]),
        (x[:, j, :], x_rec[:, j, :]),
    ):
        total = total + _l2(phi(plane[None, None]) - phi(plane_rec[None, None]))
    return total


def total_ae_loss(vq: torch.Tensor, adv_gen: torch.Tensor, tp: torch.Tensor,
                  lambda_adv: float = 2.0, lambda_tp: float = 4.0) -> torch.Tensor:
    return vq + lambda_adv * adv_gen + lambda_tp * tp
