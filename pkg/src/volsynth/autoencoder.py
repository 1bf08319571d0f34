"""3D variational autoencoders for volumes (1 channel) and one-hot labels (5).

Both encoder/decoder pairs share one conv architecture; the volume decoder
squashes to [0, 1] with a sigmoid while the label decoder emits per-class
logits trained with voxelwise cross-entropy.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import N_CLASSES


@dataclass
class AutoencoderConfig:
    in_channels: int = 1
    latent_channels: int = 4
    downsample_levels: int = 2
    base_width: int = 16
    kl_weight: float = 1e-6
    lr: float = 2e-3
    batch_size: int = 4
    steps: int = 500
    seed: int = 0

    def validate(self, grid_shape: tuple[int, int, int]) -> None:
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        factor = 2**self.downsample_levels
        for dim in grid_shape:
            if dim % factor != 0:
                raise ValueError(
                    f"grid dim {dim} not divisible by 2^{self.downsample_levels}"
                )

    def latent_shape(self, grid_shape: tuple[int, int, int]) -> tuple[int, int, int, int]:
        factor = 2**self.downsample_levels
        return (self.latent_channels, *(d // factor for d in grid_shape))


def label_to_continuous(label: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """One-hot encode a label map to a float32 (n_classes, H, W, D) array."""
    label = np.asarray(label)
    if label.min() < 0 or label.max() >= n_classes:
        raise ValueError(f"label values outside [0, {n_classes}); got max {label.max()}")
    one_hot = np.zeros((n_classes, *label.shape), dtype=np.float32)
    for c in range(n_classes):
        one_hot[c] = label == c
    return one_hot


def continuous_to_label(encoding: np.ndarray) -> np.ndarray:
    """Voxelwise argmax over channel 0; ties resolve to the lowest class index."""
    encoding = np.asarray(encoding)
    if not np.all(np.isfinite(encoding)):
        raise ValueError("continuous_to_label: non-finite input")
    return np.argmax(encoding, axis=0).astype(np.uint8)


def gaussian_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Elementwise-mean KL(q(z) || N(0, 1)): 0.5 * (mu^2 + e^logvar - logvar - 1)."""
    return 0.5 * (mean.pow(2) + logvar.exp() - logvar - 1.0).mean()


class VAE3D(nn.Module):
    """Conv 3D VAE; spatial factor 2^downsample_levels, stride-2 down / transpose up."""

    def __init__(self, cfg: AutoencoderConfig, squash_output: bool | None = None):
        super().__init__()
        self.cfg = cfg
        # volumes squash to [0,1]; multi-channel (label) decoders emit logits
        self.squash_output = (cfg.in_channels == 1) if squash_output is None else squash_output
        w = cfg.base_width
        enc = [nn.Conv3d(cfg.in_channels, w, 3, padding=1), nn.SiLU()]
        for _ in range(cfg.downsample_levels):
            enc += [nn.Conv3d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU()]
            w *= 2
        enc += [nn.Conv3d(w, 2 * cfg.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv3d(cfg.latent_channels, w, 3, padding=1), nn.SiLU()]
        for _ in range(cfg.downsample_levels):
            dec += [nn.ConvTranspose3d(w, w // 2, 4, stride=2, padding=1), nn.SiLU()]
            w //= 2
        dec += [nn.Conv3d(w, cfg.in_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        factor = 2**self.cfg.downsample_levels
        if any(d % factor for d in x.shape[2:]):
            raise ValueError(f"spatial shape {tuple(x.shape[2:])} not divisible by {factor}")
        h = self.encoder(x)
        mean, logvar = torch.chunk(h, 2, dim=1)
        return mean, logvar.clamp(-20.0, 10.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected {self.cfg.latent_channels} latent channels, got {z.shape[1]}")
        out = self.decoder(z)
        return torch.sigmoid(out) if self.squash_output else out


def make_vae(cfg: AutoencoderConfig) -> VAE3D:
    torch.manual_seed(cfg.seed)
    return VAE3D(cfg)


def _to_batch(arrays: list[np.ndarray]) -> torch.Tensor:
    stacked = np.stack([a if a.ndim == 4 else a[None] for a in arrays]).astype(np.float32)
    return torch.from_numpy(stacked)


def encode_array(model: VAE3D, arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior (mean, logvar) of one item as numpy (C, h, w, d) arrays."""
    model.eval()
    with torch.no_grad():
        mean, logvar = model.encode(_to_batch([arr]))
    return mean[0].numpy(), logvar[0].numpy()


def decode_array(model: VAE3D, z: np.ndarray) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        out = model.decode(torch.from_numpy(np.asarray(z, dtype=np.float32))[None])
    return out[0].numpy()


def _recon_loss(model: VAE3D, recon: torch.Tensor, batch: torch.Tensor,
                targets: torch.Tensor | None) -> torch.Tensor:
    if targets is None:
        return F.mse_loss(recon, batch)
    return F.cross_entropy(recon, targets)


def train_autoencoder(
    items: list[np.ndarray],
    cfg: AutoencoderConfig,
    label_targets: list[np.ndarray] | None = None,
) -> tuple[VAE3D, list[list]]:
    """Train a VAE on ``items``; returns the model and a per-step loss log.

    ``items`` are (C, H, W, D) float arrays (one-hot encodings for label
    autoencoders, with the integer maps passed as ``label_targets`` for the
    cross-entropy term). Loss = reconstruction + kl_weight * KL, with
    reparameterized sampling. Deterministic for a fixed config seed.
    """
    if not items:
        raise ValueError("empty training set")
    cfg.validate(tuple(items[0].shape[-3:]))
    model = make_vae(cfg)
    if label_targets is not None:
        model.squash_output = False
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    data = _to_batch(items)
    targets = (
        torch.from_numpy(np.stack(label_targets).astype(np.int64))
        if label_targets is not None
        else None
    )

    log = []
    model.train()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(items), size=min(cfg.batch_size, len(items)))
        batch = data[idx]
        tgt = targets[idx] if targets is not None else None
        mean, logvar = model.encode(batch)
        eps = torch.from_numpy(
            rng.standard_normal(size=tuple(mean.shape), dtype=np.float32)
        )
        z = mean + torch.exp(0.5 * logvar) * eps
        recon = model.decode(z)
        recon_term = _recon_loss(model, recon, batch, tgt)
        kl_term = gaussian_kl(mean, logvar)
        loss = recon_term + cfg.kl_weight * kl_term
        if not math.isfinite(loss.item()):
            raise RuntimeError(
                f"autoencoder training diverged at step {step}: loss={loss.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append([step, float(loss.item()), float(recon_term.item()), float(kl_term.item())])
    model.eval()
    return model, log


def reconstruction_mse(model: VAE3D, items: list[np.ndarray]) -> float:
    """Mean squared error of posterior-mean reconstructions over ``items``."""
    model.eval()
    total = 0.0
    with torch.no_grad():
        for arr in items:
            batch = _to_batch([arr])
            mean, _ = model.encode(batch)
            recon = model.decode(mean)
            total += float(F.mse_loss(recon, batch).item())
    return total / len(items)
