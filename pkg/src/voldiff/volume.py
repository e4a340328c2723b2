"""Volume data model: normalization, patch partition/reassembly, tri-plane
extraction, and raw+sidecar file I/O.

A volume is a 3D scalar grid indexed as ``data[i, j, k]`` with shape
``(H, W, D)``. The axial plane fixes the third index, the coronal plane the
first, and the sagittal plane the second.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateVolumeError,
    NonFiniteError,
    ShapeMismatchError,
    SidecarError,
    VolumeError,
)

SIDECAR_SUFFIX = ".json"
RAW_SUFFIX = ".raw"


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with voxel spacing and a class tag.

    ``value_range`` records the pre-normalization (min, max) so a normalized
    volume can be mapped back to its original intensity scale.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    class_tag: str = "unknown"
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise VolumeError(f"expected a 3D grid, got {data.ndim} dims")
        if any(s < 1 for s in data.shape):
            raise VolumeError(f"shape components must be >= 1, got {data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing components must be > 0, got {self.spacing}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("volume contains NaN or Inf values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class PatchLayout:
    """How a (possibly padded) volume decomposes into a patch grid.

    Patch ordering is row-major over ``grid_counts = (nH, nW, nD)`` and fixed
    globally; encoder, decoders, and diffusion latents all rely on it.
    """

    patch_shape: tuple[int, int, int]
    grid_counts: tuple[int, int, int]
    padded_shape: tuple[int, int, int]
    original_shape: tuple[int, int, int]

    @property
    def patch_count(self) -> int:
        n = self.grid_counts
        return n[0] * n[1] * n[2]

    def __post_init__(self):
        for p, g, s in zip(self.patch_shape, self.grid_counts, self.padded_shape):
            if p * g != s:
                raise VolumeError(
                    f"layout inconsistent: patch {self.patch_shape} x grid "
                    f"{self.grid_counts} != padded {self.padded_shape}"
                )


@dataclass(frozen=True)
class TriPlaneSlices:
    """Three orthogonal 2D planes extracted at a shared index triple."""

    axial: np.ndarray      # data[:, :, k], shape (H, W)
    coronal: np.ndarray    # data[i, :, :], shape (W, D)
    sagittal: np.ndarray   # data[:, j, :], shape (H, D)
    index: tuple[int, int, int]


def normalize_minmax(vol: Volume) -> Volume:
    """Affinely rescale so min -> -1 and max -> +1, recording the original range.

    Raises :class:`DegenerateVolumeError` for constant volumes; downstream
    losses are undefined on zero-variance input.
    """
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi == lo:
        raise DegenerateVolumeError(f"constant volume (all values == {lo})")
    scaled = (vol.data.astype(np.float64) - lo) * (2.0 / (hi - lo)) - 1.0
    return replace(vol, data=scaled.astype(np.float32), value_range=(lo, hi))


def denormalize(vol: Volume) -> Volume:
    """Invert :func:`normalize_minmax` using the recorded value range."""
    if vol.value_range is None:
        raise VolumeError("volume has no recorded value_range to invert")
    lo, hi = vol.value_range
    data = (vol.data.astype(np.float64) + 1.0) * ((hi - lo) / 2.0) + lo
    return replace(vol, data=data.astype(np.float32), value_range=None)


def _padded_extent(size: int, patch: int) -> int:
    return ((size + patch - 1) // patch) * patch


def pad_to_patch_grid(data: np.ndarray, patch_shape) -> np.ndarray:
    """Reflect-pad a grid up to the next multiple of the patch shape."""
    pads = []
    for size, patch in zip(data.shape, patch_shape):
        target = _padded_extent(size, patch)
        if target - size >= size:
            raise VolumeError(
                f"patch extent {patch} too large to reflect-pad a {size}-voxel axis"
            )
        pads.append((0, target - size))
    if any(p[1] for p in pads):
        data = np.pad(data, pads, mode="reflect")
    return data


def partition(vol: Volume, patch_shape) -> tuple[list[np.ndarray], PatchLayout]:
    """Split a volume into disjoint patches covering the reflect-padded grid.

    Returns the patches in row-major (nH, nW, nD) order together with the
    layout needed to reassemble and crop back to the original extent.
    """
    patch_shape = tuple(int(p) for p in patch_shape)
    if len(patch_shape) != 3 or any(p < 1 for p in patch_shape):
        raise VolumeError(f"invalid patch shape {patch_shape}")
    padded = pad_to_patch_grid(vol.data, patch_shape)
    grid = tuple(s // p for s, p in zip(padded.shape, patch_shape))
    layout = PatchLayout(
        patch_shape=patch_shape,
        grid_counts=grid,
        padded_shape=tuple(padded.shape),
        original_shape=vol.shape,
    )
    h, w, d = patch_shape
    patches = []
    for i in range(grid[0]):
        for j in range(grid[1]):
            for k in range(grid[2]):
                patches.append(
                    padded[i * h:(i + 1) * h, j * w:(j + 1) * w, k * d:(k + 1) * d].copy()
                )
    return patches, layout


def reassemble(patches, layout: PatchLayout, *, crop: bool = True,
               spacing=(1.0, 1.0, 1.0), class_tag: str = "unknown") -> Volume:
    """Inverse of :func:`partition`: stitch patches back into a volume.

    With ``crop=True`` the result is trimmed to the layout's original extent.
    """
    if len(patches) != layout.patch_count:
        raise VolumeError(
            f"expected {layout.patch_count} patches, got {len(patches)}"
        )
    h, w, d = layout.patch_shape
    out = np.empty(layout.padded_shape, dtype=np.float32)
    idx = 0
    for i in range(layout.grid_counts[0]):
        for j in range(layout.grid_counts[1]):
            for k in range(layout.grid_counts[2]):
                patch = np.asarray(patches[idx], dtype=np.float32)
                if patch.shape != layout.patch_shape:
                    raise VolumeError(
                        f"patch {idx} has shape {patch.shape}, "
                        f"expected {layout.patch_shape}"
                    )
                out[i * h:(i + 1) * h, j * w:(j + 1) * w, k * d:(k + 1) * d] = patch
                idx += 1
    if crop:
        oh, ow, od = layout.original_shape
        out = out[:oh, :ow, :od]
    return Volume(data=out, spacing=spacing, class_tag=class_tag)


def extract_triplanes(vol: Volume, index_triple) -> TriPlaneSlices:
    """Extract the axial/coronal/sagittal planes through (i, j, k)."""
    i, j, k = (int(v) for v in index_triple)
    H, W, D = vol.shape
    if not (0 <= i < H and 0 <= j < W and 0 <= k < D):
        raise VolumeError(
            f"plane index {(i, j, k)} out of bounds for shape {vol.shape}"
        )
    return TriPlaneSlices(
        axial=vol.data[:, :, k].copy(),
        coronal=vol.data[i, :, :].copy(),
        sagittal=vol.data[:, j, :].copy(),
        index=(i, j, k),
    )


def random_triplane_index(shape, rng: np.random.Generator) -> tuple[int, int, int]:
    """Uniform index triple for training-time tri-plane selection."""
    return tuple(int(rng.integers(0, s)) for s in shape)


def save_volume(vol: Volume, path) -> None:
    """Write the canonical raw+sidecar pair.

    Payload is little-endian float32 in x-fastest (Fortran) order; the sidecar
    shares the basename with a ``.json`` suffix.
    """
    path = Path(path)
    if path.suffix == RAW_SUFFIX:
        base = path.with_suffix("")
    else:
        base = path
    raw_path = base.with_suffix(RAW_SUFFIX)
    sidecar_path = base.with_suffix(SIDECAR_SUFFIX)
    payload = np.asarray(vol.data, dtype="<f4").flatten(order="F")
    raw_path.write_bytes(payload.tobytes())
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    meta = {
        "shape": list(vol.shape),
        "spacing": list(vol.spacing),
        "class_tag": vol.class_tag,
        "value_range": list(vol.value_range) if vol.value_range is not None else [lo, hi],
    }
    sidecar_path.write_text(json.dumps(meta, indent=2))


def load_volume(path) -> Volume:
    """Read a raw+sidecar volume, validating schema, size, and finiteness."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (RAW_SUFFIX, SIDECAR_SUFFIX) else path
    raw_path = base.with_suffix(RAW_SUFFIX)
    sidecar_path = base.with_suffix(SIDECAR_SUFFIX)
    if not sidecar_path.exists():
        raise SidecarError(f"missing sidecar {sidecar_path}")
    if not raw_path.exists():
        raise VolumeError(f"missing raw payload {raw_path}")
    try:
        meta = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise SidecarError(f"unparseable sidecar {sidecar_path}: {exc}") from exc
    for key in ("shape", "spacing", "class_tag", "value_range"):
        if key not in meta:
            raise SidecarError(f"sidecar {sidecar_path} missing key '{key}'")
    shape = tuple(int(s) for s in meta["shape"])
    raw = raw_path.read_bytes()
    expected_bytes = 4 * shape[0] * shape[1] * shape[2]
    if len(raw) != expected_bytes:
        raise ShapeMismatchError(
            f"{raw_path}: sidecar declares shape {shape} "
            f"({expected_bytes} bytes) but payload has {len(raw)} bytes"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(shape, order="F")
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{raw_path}: payload contains non-finite values")
    return Volume(
        data=np.ascontiguousarray(data),
        spacing=tuple(float(s) for s in meta["spacing"]),
        class_tag=str(meta["class_tag"]),
        value_range=tuple(float(v) for v in meta["value_range"]),
    )
