"""Procedural 3D phantom generation and downstream-condition synthesis.

Phantoms stand in for clinical datasets at desk scale; every generator is a
pure function of (spec, seed). Condition synthesis covers frequency-domain
undersampling (1D Gaussian line masks and Poisson point masks with a
fully-sampled center cube) producing zero-filled reconstructions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import VolumeError
from .volume import Volume, load_volume, save_volume

PHANTOM_FAMILIES = (
    "ellipsoid-organ",
    "tube-vessel",
    "shell-skull",
    "lattice-bone",
)

MASK_KINDS = ("gaussian-1d", "poisson")


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one procedural phantom draw."""

    family: str
    extent: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    count_range: tuple[int, int] = (3, 6)
    radius_range: tuple[float, float] = (3.0, 9.0)
    intensity_range: tuple[float, float] = (0.3, 1.0)

    def __post_init__(self):
        if self.family not in PHANTOM_FAMILIES:
            raise VolumeError(
                f"unknown phantom family '{self.family}'; "
                f"valid families: {', '.join(PHANTOM_FAMILIES)}"
            )
        if self.count_range[0] < 1:
            raise VolumeError("count_range must request at least one primitive")


@dataclass(frozen=True)
class UndersamplingMask:
    """Binary retention mask over a centered frequency grid."""

    kind: str
    acceleration: float
    mask: np.ndarray  # bool, centered (DC at the middle)
    seed: int

    @property
    def retained_fraction(self) -> float:
        return float(self.mask.mean())


def _coord_grids(extent):
    return np.meshgrid(*[np.arange(s, dtype=np.float64) for s in extent], indexing="ij")


def _ellipsoid_mask(extent, center, semiaxes):
    gi, gj, gk = _coord_grids(extent)
    q = ((gi - center[0]) / semiaxes[0]) ** 2 \
        + ((gj - center[1]) / semiaxes[1]) ** 2 \
        + ((gk - center[2]) / semiaxes[2]) ** 2
    return q <= 1.0


def _tube_mask(extent, p0, p1, radius):
    gi, gj, gk = _coord_grids(extent)
    p0 = np.asarray(p0, dtype=np.float64)
    d = np.asarray(p1, dtype=np.float64) - p0
    denom = float(d @ d)
    if denom == 0:
        return _ellipsoid_mask(extent, p0, (radius,) * 3)
    t = ((gi - p0[0]) * d[0] + (gj - p0[1]) * d[1] + (gk - p0[2]) * d[2]) / denom
    t = np.clip(t, 0.0, 1.0)
    dist2 = (gi - (p0[0] + t * d[0])) ** 2 \
        + (gj - (p0[1] + t * d[1])) ** 2 \
        + (gk - (p0[2] + t * d[2])) ** 2
    return dist2 <= radius ** 2


def gen_phantom(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Generate a phantom volume in [-1, 1] plus an integer label-mask volume.

    The label mask assigns 0 to background and 1..n to the drawn primitives
    (later primitives overwrite earlier ones where they overlap).
    """
    rng = np.random.default_rng(spec.seed)
    extent = tuple(int(e) for e in spec.extent)
    canvas = np.full(extent, -1.0, dtype=np.float64)
    labels = np.zeros(extent, dtype=np.float32)
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    margin = max(2.0, spec.radius_range[0])

    def rand_center():
        return [rng.uniform(margin, e - 1 - margin) for e in extent]

    if spec.family == "ellipsoid-organ":
        for idx in range(n):
            semi = rng.uniform(spec.radius_range[0], spec.radius_range[1], size=3)
            mask = _ellipsoid_mask(extent, rand_center(), semi)
            canvas[mask] = rng.uniform(*spec.intensity_range)
            labels[mask] = idx + 1
    elif spec.family == "tube-vessel":
        for idx in range(n):
            radius = rng.uniform(1.5, max(2.5, spec.radius_range[0]))
            mask = _tube_mask(extent, rand_center(), rand_center(), radius)
            canvas[mask] = rng.uniform(*spec.intensity_range)
            labels[mask] = idx + 1
    elif spec.family == "shell-skull":
        for idx in range(n):
            center = rand_center()
            outer = rng.uniform(spec.radius_range[0], spec.radius_range[1], size=3)
            thickness = rng.uniform(1.0, 2.5)
            inner = np.maximum(outer - thickness, 1.0)
            shell = _ellipsoid_mask(extent, center, outer) \
                & ~_ellipsoid_mask(extent, center, inner)
            canvas[shell] = rng.uniform(*spec.intensity_range)
            labels[shell] = idx + 1
    elif spec.family == "lattice-bone":
        gi, gj, gk = _coord_grids(extent)
        period = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        lattice = (
            np.sin(2 * np.pi * gi / period + phase[0])
            * np.sin(2 * np.pi * gj / period + phase[1])
            * np.sin(2 * np.pi * gk / period + phase[2])
        )
        for idx in range(n):
            semi = rng.uniform(spec.radius_range[0], spec.radius_range[1], size=3)
            env = _ellipsoid_mask(extent, rand_center(), semi)
            struts = env & (lattice > rng.uniform(-0.2, 0.2))
            canvas[struts] = rng.uniform(*spec.intensity_range)
            labels[struts] = idx + 1
    # Smooth slightly so phantoms are not purely piecewise constant, then
    # rescale exactly into [-1, 1].
    from scipy.ndimage import gaussian_filter

    canvas = gaussian_filter(canvas, sigma=0.6)
    lo, hi = canvas.min(), canvas.max()
    if hi == lo:  # all primitives missed the grid; force a visible voxel
        canvas[tuple(e // 2 for e in extent)] = 1.0
        lo, hi = canvas.min(), canvas.max()
    canvas = (canvas - lo) * (2.0 / (hi - lo)) - 1.0
    vol = Volume(data=canvas.astype(np.float32), class_tag=spec.family)
    mask_vol = Volume(data=labels, class_tag=spec.family + "-labels")
    return vol, mask_vol


def ellipsoid_phantom_voxels(extent, semiaxes, seed=0) -> int:
    """Voxel count of a single random-centered ellipsoid; analytic-check helper."""
    spec = PhantomSpec(
        family="ellipsoid-organ",
        extent=extent,
        seed=seed,
        count_range=(1, 1),
        radius_range=(semiaxes, semiaxes),
    )
    _, labels = gen_phantom(spec)
    return int(np.count_nonzero(labels.data))


def undersampling_mask(kind: str, shape, acceleration: float = 8.0,
                       seed: int = 0) -> UndersamplingMask:
    """Build a retention mask of the requested kind over a centered k-space grid.

    gaussian-1d keeps full lines perpendicular to the first axis, with line
    offsets drawn from a centered normal (sigma = extent/6). poisson keeps
    scattered points plus a fully-sampled center cube of 1/16 the extent.
    """
    if kind not in MASK_KINDS:
        raise VolumeError(f"unknown mask kind '{kind}'; valid kinds: {MASK_KINDS}")
    if acceleration < 1:
        raise VolumeError("acceleration must be >= 1")
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    mask = np.zeros(shape, dtype=bool)
    if kind == "gaussian-1d":
        H = shape[0]
        n_lines = max(1, round(H / acceleration))
        sigma = H / 6.0
        chosen: set[int] = set()
        while len(chosen) < n_lines:
            off = int(round(rng.normal(H / 2.0, sigma)))
            if 0 <= off < H:
                chosen.add(off)
        mask[sorted(chosen), :, :] = True
    else:
        total = int(np.prod(shape))
        n_keep = max(1, round(total / acceleration))
        center = tuple(max(1, s // 16) for s in shape)
        slices = tuple(
            slice(s // 2 - c // 2, s // 2 - c // 2 + c) for s, c in zip(shape, center)
        )
        mask[slices] = True
        flat = mask.reshape(-1)
        remaining = n_keep - int(flat.sum())
        if remaining > 0:
            candidates = np.flatnonzero(~flat)
            picks = rng.choice(candidates, size=min(remaining, candidates.size),
                               replace=False)
            flat[picks] = True
    return UndersamplingMask(kind=kind, acceleration=float(acceleration),
                             mask=mask, seed=seed)


def kspace_undersample(vol: Volume, mask: UndersamplingMask) -> Volume:
    """Zero-filled reconstruction: FFT, apply the mask, inverse FFT, real part."""
    if mask.mask.shape != vol.shape:
        raise VolumeError(
            f"mask extent {mask.mask.shape} does not match volume {vol.shape}"
        )
    spectrum = np.fft.fftshift(np.fft.fftn(vol.data.astype(np.float64)))
    spectrum[~mask.mask] = 0.0
    recon = np.fft.ifftn(np.fft.ifftshift(spectrum)).real
    return Volume(data=recon.astype(np.float32), spacing=vol.spacing,
                  class_tag=vol.class_tag)


def build_pairs(volume_paths, out_dir, mask_kind: str = "gaussian-1d",
                acceleration: float = 8.0, master_seed: int = 0) -> Path:
    """Create (condition, target) pairs for every readable volume.

    Writes a JSONL manifest with one record per pair; each record stores the
    per-item mask seed so the condition can be regenerated bit-exactly from
    the target.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "pairs.jsonl"
    rng = np.random.default_rng(master_seed)
    rows = []
    skipped = 0
    for path in volume_paths:
        mask_seed = int(rng.integers(0, 2 ** 31 - 1))
        try:
            vol = load_volume(path)
        except Exception as exc:  # noqa: BLE001 - skip-and-warn per item
            skipped += 1
            print(f"warning: skipping unreadable volume {path}: {exc}")
            continue
        mask = undersampling_mask(mask_kind, vol.shape, acceleration, mask_seed)
        cond = kspace_undersample(vol, mask)
        cond_path = out_dir / (Path(path).stem + "_cond.raw")
        save_volume(cond, cond_path)
        rows.append({
            "target": str(Path(path).with_suffix(".raw")),
            "condition": str(cond_path),
            "mask_kind": mask_kind,
            "mask_seed": mask_seed,
            "acceleration": acceleration,
            "class_tag": vol.class_tag,
        })
    if not rows:
        raise VolumeError(f"all {skipped} input volumes were unreadable")
    with manifest_path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return manifest_path


def load_pairs_manifest(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
