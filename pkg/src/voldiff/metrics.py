"""Quantitative evaluation: PSNR, SSIM/MS-SSIM, MMD, Fréchet feature distance,
codebook statistics, and a seam-discontinuity measure for patch-border
artifacts.

Feature-based distances (MMD, Fréchet) operate on embeddings from a pluggable
extractor; the default is a fixed-seed untrained 3D conv net so comparisons
need no pretrained weights. Embedding sets carry the extractor's identity hash
and can only be compared when the hashes match.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from torch import nn

from .errors import VolumeError
from .volume import PatchLayout, Volume

# Standard 5-scale weights, renormalized when fewer scales fit the extent.
_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_SSIM_WINDOW = 11


@dataclass(frozen=True)
class FeatureEmbeddingSet:
    """Per-volume feature vectors plus the identity hash of their extractor."""

    features: np.ndarray  # (N, feature_dim)
    extractor_hash: str

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise VolumeError("features must be a (N, dim) matrix")
        object.__setattr__(self, "features", feats)


class VolumeFeatureExtractor(nn.Module):
    """Fixed-seed untrained 3D conv net with global average pooling.

    Deterministic given its seed; the identity hash covers architecture and
    weights so mismatched embedding sets are rejected.
    """

    def __init__(self, feature_dim: int = 128, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = (16, 32, 64, feature_dim)
        layers = []
        in_ch = 1
        for w in widths:
            conv = nn.Conv3d(in_ch, w, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (1.0 / math.sqrt(in_ch * 27)))
                conv.bias.zero_()
            layers += [conv, nn.LeakyReLU(0.2)]
            in_ch = w
        self.net = nn.Sequential(*layers)
        self.feature_dim = feature_dim
        self.seed = seed
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def identity_hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"conv3d-gap:{self.feature_dim}:{self.seed}".encode())
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 1, H, W, D) -> (B, feature_dim)
        return self.net(x).mean(dim=(2, 3, 4))


def embed_volumes(volumes, extractor: VolumeFeatureExtractor) -> FeatureEmbeddingSet:
    feats = []
    for vol in volumes:
        x = torch.from_numpy(np.asarray(vol.data, dtype=np.float32))
        feats.append(extractor(x[None, None])[0].numpy())
    return FeatureEmbeddingSet(features=np.stack(feats),
                               extractor_hash=extractor.identity_hash)


def _as_array(v):
    return v.data if isinstance(v, Volume) else np.asarray(v)


def psnr(a, b, data_range: float = 2.0) -> float:
    """10 log10(range^2 / MSE), with +inf for identical inputs."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise VolumeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def _ssim_maps(a, b, data_range, sigma=1.5, k1=0.01, k2=0.03):
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    truncate = 3.5
    pad = int(truncate * sigma + 0.5)

    def filt(im):
        return gaussian_filter(im, sigma=sigma, truncate=truncate, mode="nearest")

    ux, uy = filt(a), filt(b)
    uxx, uyy, uxy = filt(a * a), filt(b * b), filt(a * b)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    cs_map = (2 * vxy + c2) / (vx + vy + c2)
    s_map = ((2 * ux * uy + c1) / (ux * ux + uy * uy + c1)) * cs_map
    crop = tuple(slice(pad, s - pad) for s in a.shape)
    return s_map[crop], cs_map[crop]


def ssim(a, b, data_range: float = 2.0) -> float:
    """Mean SSIM with a Gaussian window (sigma 1.5, k1 0.01, k2 0.03)."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise VolumeError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < _SSIM_WINDOW:
        raise VolumeError(
            f"extent {a.shape} too small for the {_SSIM_WINDOW}-voxel SSIM window"
        )
    s_map, _ = _ssim_maps(a, b, data_range)
    return float(s_map.mean())


def _downsample2(x):
    # 2x average pooling with edge-crop to even extents.
    sl = tuple(slice(0, s - s % 2) for s in x.shape)
    x = x[sl]
    for axis in range(x.ndim):
        shape = list(x.shape)
        shape[axis] //= 2
        shape.insert(axis + 1, 2)
        x = x.reshape(shape).mean(axis=axis + 1)
    return x


def ms_ssim(a, b, data_range: float = 2.0, max_scales: int = 5) -> float:
    """Multi-scale SSIM over up to 5 dyadic scales, weights renormalized when
    the extent supports fewer scales."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise VolumeError(f"shape mismatch {a.shape} vs {b.shape}")
    n_scales = 0
    extent = min(a.shape)
    while n_scales < max_scales and extent >= _SSIM_WINDOW:
        n_scales += 1
        extent //= 2
    if n_scales == 0:
        raise VolumeError(
            f"extent {a.shape} too small for even one {_SSIM_WINDOW}-voxel scale"
        )
    weights = np.asarray(_MSSSIM_WEIGHTS[:n_scales])
    weights = weights / weights.sum()
    vals = []
    xa, xb = a, b
    for scale in range(n_scales):
        s_map, cs_map = _ssim_maps(xa, xb, data_range)
        vals.append(float(s_map.mean()) if scale == n_scales - 1
                    else float(cs_map.mean()))
        if scale != n_scales - 1:
            xa, xb = _downsample2(xa), _downsample2(xb)
    # Geometric combination; negative terms are clamped to keep the product
    # real (matches common MS-SSIM practice).
    vals = np.clip(vals, 1e-6, None)
    return float(np.prod(vals ** weights))


def diversity_msssim(volumes, data_range: float = 2.0, max_pairs: int = 500,
                     seed: int = 0) -> float:
    """Mean pairwise MS-SSIM over a sample set (lower = more diverse)."""
    if len(volumes) < 2:
        raise VolumeError("diversity needs at least 2 samples")
    pairs = [(i, j) for i in range(len(volumes)) for j in range(i + 1, len(volumes))]
    if len(pairs) > max_pairs:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[i] for i in idx]
    vals = [ms_ssim(volumes[i], volumes[j], data_range) for i, j in pairs]
    return float(np.mean(vals))


def mmd(set_a: FeatureEmbeddingSet, set_b: FeatureEmbeddingSet) -> float:
    """Biased squared MMD with an RBF kernel (median-heuristic bandwidth)."""
    if set_a.extractor_hash != set_b.extractor_hash:
        raise VolumeError("embedding sets come from different extractors")
    X, Y = set_a.features, set_b.features
    if len(X) < 2 or len(Y) < 2:
        raise VolumeError("each set needs at least 2 samples")
    Z = np.vstack([X, Y])
    d2 = np.sum((Z[:, None, :] - Z[None, :, :]) ** 2, axis=-1)
    gamma = float(np.median(d2))
    if gamma == 0.0:
        return 0.0
    k = np.exp(-d2 / (2.0 * gamma))
    n, m = len(X), len(Y)
    kxx = k[:n, :n].mean()
    kyy = k[n:, n:].mean()
    kxy = k[:n, n:].mean()
    return float(max(kxx + kyy - 2 * kxy, 0.0))


def rbf_mmd_closed_form(d: float, gamma: float) -> float:
    """MMD^2 between two single-point masses at distance d (test oracle)."""
    return 2.0 * (1.0 - math.exp(-d ** 2 / (2.0 * gamma)))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(set_a: FeatureEmbeddingSet, set_b: FeatureEmbeddingSet,
                     eps: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)).

    The matrix square root is taken via eigendecomposition of the symmetrized
    product sqrt(Sa) Sb sqrt(Sa), clamping tiny negative eigenvalues.
    """
    if set_a.extractor_hash != set_b.extractor_hash:
        raise VolumeError("embedding sets come from different extractors")
    X, Y = set_a.features, set_b.features
    if len(X) < 2 or len(Y) < 2:
        raise VolumeError("each set needs at least 2 samples")
    mu_a, mu_b = X.mean(axis=0), Y.mean(axis=0)
    dim = X.shape[1]
    cov_a = np.cov(X, rowvar=False) + eps * np.eye(dim)
    cov_b = np.cov(Y, rowvar=False) + eps * np.eye(dim)
    sa_sqrt = _psd_sqrt(cov_a)
    mid = _psd_sqrt(sa_sqrt @ cov_b @ sa_sqrt)
    val = float(np.sum((mu_a - mu_b) ** 2)
                + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(mid))
    return max(val, 0.0)


def seam_discontinuity(vol, layout: PatchLayout) -> float:
    """Boundary-minus-interior mean absolute finite difference.

    Measures how much larger adjacent-voxel jumps are across patch borders
    than inside patches; approximately zero for seamless volumes.
    """
    data = _as_array(vol).astype(np.float64)
    if any(s > ps for s, ps in zip(data.shape, layout.padded_shape)):
        raise VolumeError(
            f"volume {data.shape} larger than layout's padded extent "
            f"{layout.padded_shape}"
        )
    boundary_vals = []
    interior_vals = []
    for axis in range(3):
        patch = layout.patch_shape[axis]
        size = data.shape[axis]
        diffs = np.abs(np.diff(data, axis=axis))
        boundary_pos = [b - 1 for b in range(patch, size, patch)]
        if not boundary_pos:
            continue
        sel = np.zeros(size - 1, dtype=bool)
        sel[boundary_pos] = True
        idx_b = [slice(None)] * 3
        idx_b[axis] = sel
        idx_i = [slice(None)] * 3
        idx_i[axis] = ~sel
        boundary_vals.append(diffs[tuple(idx_b)].ravel())
        interior_vals.append(diffs[tuple(idx_i)].ravel())
    if not boundary_vals:
        return 0.0
    boundary = float(np.concatenate(boundary_vals).mean())
    interior = float(np.concatenate(interior_vals).mean()) if interior_vals else 0.0
    return boundary - interior


def codebook_stats(usage_counts) -> dict:
    """Summary statistics over codebook usage counts."""
    counts = np.asarray(usage_counts, dtype=np.int64)
    total = int(counts.sum())
    used = int(np.count_nonzero(counts))
    probs = counts / total if total > 0 else counts.astype(np.float64)
    nonzero = probs[probs > 0]
    entropy = float(-(nonzero * np.log2(nonzero)).sum()) if total > 0 else 0.0
    return {
        "codes_total": int(counts.size),
        "codes_used": used,
        "usage_entropy_bits": entropy,
    }
