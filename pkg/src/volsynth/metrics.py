"""Distribution and overlap metrics: Fréchet feature distance and Dice.

The feature extractor is a frozen, fixed-seed random convolutional network
(3D for whole volumes, 2D for per-view slices). Any callable mapping an item
to a feature vector can be swapped in; the Fréchet machinery only sees
feature matrices.

Axis convention for per-view slicing: axial slices run along the depth axis
(last), sagittal along the height axis (first), coronal along the width axis
(middle).
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

VIEW_AXES = {"axial": 2, "sagittal": 0, "coronal": 1}


@dataclass
class FeatureExtractor:
    net: nn.Module
    dim: int
    kind: str  # "3d" or "2d"
    seed: int


def make_extractor(kind: str = "3d", dim: int = 64, seed: int = 0) -> FeatureExtractor:
    """Frozen random conv net mapping an item to a ``dim``-vector; same seed, same weights.

    A random linear head sets the output dimensionality, so the full-scale
    2048-d contract costs the same trunk as the 64-d desk default.
    """
    if kind not in ("3d", "2d"):
        raise ValueError(f"extractor kind must be '3d' or '2d', got {kind!r}")
    torch.manual_seed(seed)
    conv = nn.Conv3d if kind == "3d" else nn.Conv2d
    pool = nn.AdaptiveAvgPool3d(1) if kind == "3d" else nn.AdaptiveAvgPool2d(1)
    net = nn.Sequential(
        conv(1, 16, 3, stride=2, padding=1), nn.Tanh(),
        conv(16, 32, 3, stride=2, padding=1), nn.Tanh(),
        conv(32, 64, 3, stride=1, padding=1), nn.Tanh(),
        pool, nn.Flatten(),
        nn.Linear(64, dim),
    )
    net.eval()
    net.requires_grad_(False)
    return FeatureExtractor(net=net, dim=dim, kind=kind, seed=seed)


def extract_features(items: list[np.ndarray], extractor: FeatureExtractor) -> np.ndarray:
    """(n, d) feature matrix; row i is a pure function of item i alone."""
    n_spatial = 3 if extractor.kind == "3d" else 2
    rows = []
    with torch.no_grad():
        for item in items:
            arr = np.asarray(item, dtype=np.float32)
            if arr.ndim != n_spatial:
                raise ValueError(
                    f"{extractor.kind} extractor expects {n_spatial}D items, got shape {arr.shape}"
                )
            x = torch.from_numpy(arr)[None, None]
            rows.append(extractor.net(x)[0].numpy().astype(np.float64))
    return np.stack(rows)


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def compute_stats(features: np.ndarray) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need an (n >= 2, d) feature matrix")
    return FeatureStats(
        mean=features.mean(axis=0),
        cov=np.cov(features, rowvar=False).reshape(features.shape[1], features.shape[1]),
        n=features.shape[0],
    )


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats, clamp_tol: float = 1e-6) -> float:
    """Fréchet distance between the Gaussians (mu_a, S_a) and (mu_b, S_b).

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
    square root taken by eigendecomposition of the symmetrized product
    sqrt(S_a) S_b sqrt(S_a). Negative eigenvalues are clamped at zero; a
    warning fires if any falls below ``-clamp_tol``. Covariances of
    undersampled stats (n < d) get a 1e-6 I ridge before the square root.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    for stats in (a, b):
        if not (np.all(np.isfinite(stats.mean)) and np.all(np.isfinite(stats.cov))):
            raise ValueError("non-finite feature statistics")
    d = a.mean.shape[0]
    cov_a, cov_b = a.cov.copy(), b.cov.copy()
    if a.n < d or b.n < d:
        cov_a += 1e-6 * np.eye(d)
        cov_b += 1e-6 * np.eye(d)

    root_a = _sym_sqrt(cov_a)
    product = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((product + product.T) / 2.0)
    if vals.min() < -clamp_tol:
        warnings.warn(
            f"clamping negative eigenvalue {vals.min():.3e} in Fréchet square root",
            RuntimeWarning,
        )
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    fid = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(fid, 0.0)


def fid_3d(set_a: list[np.ndarray], set_b: list[np.ndarray], extractor: FeatureExtractor) -> float:
    """Fréchet distance between two volume sets under a 3D feature extractor."""
    if not set_a or not set_b:
        raise ValueError("both volume sets must be nonempty")
    stats_a = compute_stats(extract_features(set_a, extractor))
    stats_b = compute_stats(extract_features(set_b, extractor))
    return frechet_distance(stats_a, stats_b)


def slice_volume(volume: np.ndarray, view: str) -> list[np.ndarray]:
    """All 2D slices of a volume along the named view axis."""
    if view not in VIEW_AXES:
        raise ValueError(f"view must be one of {sorted(VIEW_AXES)}, got {view!r}")
    axis = VIEW_AXES[view]
    return [np.take(volume, k, axis=axis) for k in range(volume.shape[axis])]


def fid_per_view(
    set_a: list[np.ndarray],
    set_b: list[np.ndarray],
    view: str,
    extractor: FeatureExtractor,
) -> float:
    """Slice-pooled 2D Fréchet distance along one anatomical view."""
    if not set_a or not set_b:
        raise ValueError("both volume sets must be nonempty")
    slices_a = [s for v in set_a for s in slice_volume(v, view)]
    slices_b = [s for v in set_b for s in slice_volume(v, view)]
    stats_a = compute_stats(extract_features(slices_a, extractor))
    stats_b = compute_stats(extract_features(slices_b, extractor))
    return frechet_distance(stats_a, stats_b)


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int | None = None) -> float:
    """Dice overlap 2|A n B| / (|A| + |B|); both-empty masks score 1.0.

    With ``class_id`` the inputs are label maps and the masks are the voxels
    of that class; without it the inputs are treated as binary masks.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if class_id is None:
        a = pred.astype(bool)
        b = gt.astype(bool)
    else:
        a = pred == class_id
        b = gt == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def save_montage(
    volumes: list[np.ndarray], path, view: str = "axial", columns: int = 8
) -> None:
    """Write a PNG grid of middle slices for qualitative inspection."""
    axis = VIEW_AXES[view]
    tiles = []
    for vol in volumes:
        sl = np.take(vol, vol.shape[axis] // 2, axis=axis)
        tiles.append(np.clip(np.asarray(sl, dtype=np.float32), 0.0, 1.0))
    h = max(t.shape[0] for t in tiles)
    w = max(t.shape[1] for t in tiles)
    cols = min(columns, len(tiles))
    n_rows = (len(tiles) + cols - 1) // cols
    canvas = np.zeros((n_rows * h, cols * w), dtype=np.float32)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        canvas[r * h : r * h + tile.shape[0], c * w : c * w + tile.shape[1]] = tile
    Image.fromarray((canvas * 255).astype(np.uint8), mode="L").save(path)
