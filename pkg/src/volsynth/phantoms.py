"""Procedural liver-like phantoms: paired (volume, label) generation and datasets.

Each phantom is built label-first: a smoothed ellipsoidal liver, tubular
vessels grown from random polylines seeded inside the liver, and spherical
tumors placed fully inside it. The volume is rendered from the label map via
per-class mean intensities, Gaussian smoothing, additive noise, and min-max
normalization, which preserves the hyperintense-liver contrast the label
classes imply.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, distance_transform_edt, gaussian_filter

from . import N_CLASSES
from .storage import Manifest, ManifestEntry, write_array

BACKGROUND, LIVER, PORTAL_VEIN, HEPATIC_VEIN, TUMOR = range(N_CLASSES)


@dataclass
class PhantomSpec:
    grid_shape: tuple[int, int, int] = (32, 32, 16)
    liver_axes_range: tuple[float, float] = (0.26, 0.40)  # semi-axes, fraction of each dim
    n_vessels_range: tuple[int, int] = (1, 2)  # per vessel class
    vessel_radius_range: tuple[float, float] = (1.0, 1.8)  # voxels
    n_tumors_range: tuple[int, int] = (1, 2)
    tumor_radius_range: tuple[float, float] = (1.5, 3.0)  # voxels
    intensity_means: dict[int, float] = field(
        default_factory=lambda: {
            BACKGROUND: 0.10,
            LIVER: 0.70,
            PORTAL_VEIN: 0.40,
            HEPATIC_VEIN: 0.45,
            TUMOR: 0.28,
        }
    )
    noise_sigma: float = 0.03
    blur_sigma: float = 0.7
    center_jitter: float = 0.06  # liver center offset, fraction of each dim
    containment_dilation: int = 2  # classes {2,3,4} stay inside liver dilated this much

    def validate(self) -> None:
        if len(self.grid_shape) != 3 or any(int(d) < 4 for d in self.grid_shape):
            raise ValueError(f"grid_shape must be 3 dims >= 4, got {self.grid_shape}")
        for name in ("liver_axes_range", "n_vessels_range", "vessel_radius_range",
                     "n_tumors_range", "tumor_radius_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must satisfy min <= max, got ({lo}, {hi})")
        if not (0.0 < self.liver_axes_range[0] and self.liver_axes_range[1] <= 0.5):
            raise ValueError("liver_axes_range fractions must lie in (0, 0.5]")
        if self.n_vessels_range[0] < 0 or self.n_tumors_range[0] < 0:
            raise ValueError("structure counts must be nonnegative")
        for cls, mean in self.intensity_means.items():
            if not (0.0 <= mean <= 1.0):
                raise ValueError(f"intensity mean for class {cls} outside [0, 1]: {mean}")
        if self.intensity_means[LIVER] <= self.intensity_means[BACKGROUND]:
            raise ValueError("liver intensity mean must exceed background (hyperintense liver)")
        max_radius = max(self.vessel_radius_range[1], self.tumor_radius_range[1])
        if 2.0 * max_radius >= min(self.grid_shape):
            raise ValueError(
                f"structure radius {max_radius} does not fit grid {self.grid_shape}"
            )
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be nonnegative")


def normalize_volume(v: np.ndarray) -> np.ndarray:
    """Min-max rescale a finite array to [0, 1] (float32).

    Raises ``ValueError`` on non-finite or constant input (zero dynamic range).
    Idempotent: input already spanning [0, 1] comes back unchanged.
    """
    v = np.asarray(v)
    if not np.all(np.isfinite(v)):
        raise ValueError("normalize_volume: input contains non-finite values")
    lo = float(v.min())
    hi = float(v.max())
    if hi == lo:
        raise ValueError("normalize_volume: constant input has zero dynamic range")
    out = (v.astype(np.float64) - lo) / (hi - lo)
    return out.astype(np.float32)


def crop_roi(arr: np.ndarray, size: tuple[int, int, int],
             center: tuple[int, int, int]) -> np.ndarray:
    """Crop a ``size`` sub-grid centered on ``center`` (voxel coordinate).

    Pure slicing: label values pass through untouched, no interpolation and
    no implicit padding. A window falling outside the array is an error.
    """
    if arr.ndim != 3:
        raise ValueError("crop_roi expects a 3D array")
    starts, ends = [], []
    for dim, (sz, c, n) in enumerate(zip(size, center, arr.shape)):
        if sz > n:
            raise ValueError(f"crop size {sz} exceeds input extent {n} on axis {dim}")
        start = int(c) - sz // 2
        end = start + sz
        if start < 0 or end > n:
            raise ValueError(
                f"crop window [{start}, {end}) outside bounds [0, {n}) on axis {dim}"
            )
        starts.append(start)
        ends.append(end)
    return arr[starts[0]:ends[0], starts[1]:ends[1], starts[2]:ends[2]].copy()


def liver_centroid(label: np.ndarray) -> tuple[int, int, int]:
    """Rounded centroid of the liver-support voxels (classes >= 1).

    ROI crops center here; falls back to the grid center for empty maps.
    """
    idx = np.argwhere(label > 0)
    if idx.size == 0:
        return tuple(int(n // 2) for n in label.shape)
    return tuple(int(round(float(c))) for c in idx.mean(axis=0))


def _paint_ball(mask: np.ndarray, center: np.ndarray, radius: float) -> None:
    lo = np.maximum(np.floor(center - radius).astype(int), 0)
    hi = np.minimum(np.ceil(center + radius).astype(int) + 1, mask.shape)
    if np.any(lo >= hi):
        return
    zz, yy, xx = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    d2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= d2 <= radius**2


def _vessel_mask(rng: np.random.Generator, liver: np.ndarray, allowed: np.ndarray,
                 radius: float, n_segments: int = 3) -> np.ndarray:
    mask = np.zeros_like(liver, dtype=bool)
    inside = np.argwhere(liver)
    point = inside[rng.integers(len(inside))].astype(float)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction) + 1e-12
    seg_len = 0.22 * max(liver.shape)
    for _ in range(n_segments):
        steps = max(int(seg_len * 2), 2)
        for s in range(steps):
            _paint_ball(mask, point + direction * (s * 0.5), radius)
        point = point + direction * (steps * 0.5)
        direction = direction + 0.6 * rng.normal(size=3)
        direction /= np.linalg.norm(direction) + 1e-12
    return mask & allowed


def generate_phantom(seed: int, spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Generate one (volume, label) pair, deterministic in ``(seed, spec)``.

    Returns a float32 volume in [0, 1] and a uint8 label map over the five
    classes. Vessel and tumor voxels are confined to the liver support
    dilated by ``spec.containment_dilation``; tumors additionally sit fully
    inside the liver (best effort on very thin livers).
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    shape = tuple(int(d) for d in spec.grid_shape)
    label = np.zeros(shape, dtype=np.uint8)

    # liver: jittered, axis-aligned ellipsoid, smoothed by blur + re-threshold
    dims = np.asarray(shape, dtype=float)
    axes = rng.uniform(*spec.liver_axes_range, size=3) * dims
    center = dims / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter, size=3) * dims
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    q = (
        ((zz - center[0]) / axes[0]) ** 2
        + ((yy - center[1]) / axes[1]) ** 2
        + ((xx - center[2]) / axes[2]) ** 2
    )
    liver = gaussian_filter((q <= 1.0).astype(np.float32), sigma=1.0) > 0.5
    label[liver] = LIVER

    allowed = binary_dilation(liver, iterations=spec.containment_dilation) if liver.any() else liver

    for vessel_class in (PORTAL_VEIN, HEPATIC_VEIN):
        n = int(rng.integers(spec.n_vessels_range[0], spec.n_vessels_range[1] + 1))
        for _ in range(n):
            if not liver.any():
                break
            radius = rng.uniform(*spec.vessel_radius_range)
            label[_vessel_mask(rng, liver, allowed, radius)] = vessel_class

    n_tumors = int(rng.integers(spec.n_tumors_range[0], spec.n_tumors_range[1] + 1))
    if n_tumors > 0 and liver.any():
        depth = distance_transform_edt(liver)
        for _ in range(n_tumors):
            radius = rng.uniform(*spec.tumor_radius_range)
            candidates = np.argwhere(depth > radius)
            if len(candidates) == 0:
                radius = max(float(depth.max()) - 1.0, 1.0)
                candidates = np.argwhere(depth > radius)
                if len(candidates) == 0:
                    continue
            c = candidates[rng.integers(len(candidates))].astype(float)
            tumor = np.zeros_like(liver)
            _paint_ball(tumor, c, radius)
            label[tumor & allowed] = TUMOR

    intensity = np.zeros(shape, dtype=np.float32)
    for cls in range(N_CLASSES):
        intensity[label == cls] = spec.intensity_means.get(cls, 0.0)
    if spec.blur_sigma > 0:
        intensity = gaussian_filter(intensity, sigma=spec.blur_sigma)
    intensity = intensity + rng.normal(0.0, spec.noise_sigma, size=shape).astype(np.float32)
    volume = normalize_volume(intensity)
    return volume, label


def split_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """(train, val, test) sizes: floor for val/test, remainder to train."""
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n_val = int(np.floor(n * ratios[1]))
    n_test = int(np.floor(n * ratios[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("negative split size")
    return n_train, n_val, n_test


def build_dataset(
    n: int,
    seed: int,
    spec: PhantomSpec,
    out_dir: Path,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> Manifest:
    """Generate ``n`` phantoms, persist them under ``out_dir``, return the manifest.

    Item ``i`` uses seed ``seed + i`` so items are independent of ``n``; split
    assignment is a seeded permutation, deterministic in ``seed``.
    """
    if n < 3:
        raise ValueError("need n >= 3 (one item per split)")
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_train, n_val, n_test = split_sizes(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    split_of = {}
    for pos, item in enumerate(order):
        if pos < n_train:
            split_of[int(item)] = "train"
        elif pos < n_train + n_val:
            split_of[int(item)] = "val"
        else:
            split_of[int(item)] = "test"

    entries = []
    for i in range(n):
        item_seed = seed + i
        volume, label = generate_phantom(item_seed, spec)
        stem = f"phantom_{i:04d}"
        write_array(out_dir / f"{stem}_vol", volume)
        write_array(out_dir / f"{stem}_lab", label)
        entries.append(
            ManifestEntry(
                id=stem,
                volume=f"{stem}_vol.bin",
                label=f"{stem}_lab.bin",
                split=split_of[i],
                provenance="phantom",
                seed=item_seed,
            )
        )
    manifest = Manifest(entries=entries, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
