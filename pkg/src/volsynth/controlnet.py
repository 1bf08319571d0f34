"""Conditional noise prediction: frozen base denoiser + zero-initialized branch.

The trainable branch is a copy of the base encoder half fed with the noisy
latent plus an embedded condition; its features enter through zero-initialized
1x1x1 convolutions at each fusion point (every decoder skip, the mid block,
and a direct output correction), so the untrained conditional model
reproduces the base prediction exactly.
"""

import copy
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import VAE3D, encode_array, label_to_continuous
from .diffusion import (
    LatentDenoiser,
    NoiseSchedule,
    TrainParams,
    q_sample,
    sample,
    sinusoidal_embedding,
    step_lr,
)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def identity_conv(channels: int) -> nn.Conv3d:
    conv = nn.Conv3d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    with torch.no_grad():
        for c in range(channels):
            conv.weight[c, c, 0, 0, 0] = 1.0
    return conv


class ControlNet3D(nn.Module):
    """Base denoiser (frozen) plus condition branch fused via zero convolutions."""

    def __init__(self, base: LatentDenoiser):
        super().__init__()
        cfg = base.cfg
        self.base = base
        self.base.requires_grad_(False)

        # fixed learned projection aligning condition channels to the latent space
        self.cond_align = identity_conv(cfg.latent_channels)
        widths = [cfg.base_width * 2**i for i in range(cfg.depth + 1)]
        self.cond_embed = nn.Conv3d(cfg.latent_channels, widths[0], 3, padding=1)

        self.branch_time = copy.deepcopy(base.time_mlp)
        self.branch_conv_in = copy.deepcopy(base.conv_in)
        self.branch_down_res = copy.deepcopy(base.down_res)
        self.branch_down_samp = copy.deepcopy(base.down_samp)
        self.branch_mid = copy.deepcopy(base.mid)

        self.fuse_skips = nn.ModuleList(
            [zero_module(nn.Conv3d(widths[i], widths[i], 1)) for i in range(cfg.depth)]
        )
        self.fuse_mid = zero_module(nn.Conv3d(widths[-1], widths[-1], 1))
        # direct output correction from the branch's full-resolution features
        self.fuse_out = zero_module(nn.Conv3d(widths[0], cfg.latent_channels, 1))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[1] != self.base.cfg.latent_channels:
            raise ValueError(
                f"condition has {cond.shape[1]} channels, expected {self.base.cfg.latent_channels}"
            )
        if cond.shape[2:] != z_t.shape[2:]:
            raise ValueError(f"condition grid {tuple(cond.shape[2:])} != latent {tuple(z_t.shape[2:])}")

        temb_base = self.base.time_embedding(t)
        with torch.no_grad():
            base_skips, base_mid = self.base.encode_features(z_t, temb_base)
        base_skips = [s.detach() for s in base_skips]
        base_mid = base_mid.detach()

        temb = self.branch_time(sinusoidal_embedding(t, self.base.cfg.time_embed_dim))
        h = self.branch_conv_in(z_t) + self.cond_embed(self.cond_align(cond))
        skips = []
        for res, samp in zip(self.branch_down_res, self.branch_down_samp):
            h = res(h, temb)
            skips.append(h)
            h = samp(h)
        h = self.branch_mid(h, temb)

        fused_skips = [b + fuse(c) for b, c, fuse in zip(base_skips, skips, self.fuse_skips)]
        fused_mid = base_mid + self.fuse_mid(h)
        out = self.base.decode_features(fused_mid, fused_skips, temb_base)
        full_res = skips[0] if skips else h
        return out + self.fuse_out(full_res)


def make_controlnet(base: LatentDenoiser, seed: int = 0) -> ControlNet3D:
    torch.manual_seed(seed)
    return ControlNet3D(base)


def predict_noise_conditional(
    model: ControlNet3D, z_t: np.ndarray, t: int, cond: np.ndarray
) -> np.ndarray:
    model.eval()
    zt = torch.from_numpy(np.asarray(z_t, dtype=np.float32))[None]
    ct = torch.from_numpy(np.asarray(cond, dtype=np.float32))[None]
    with torch.no_grad():
        out = model(zt, torch.tensor([float(t)]), ct)
    return out[0].numpy()


def render_label_field(field: np.ndarray) -> np.ndarray:
    """Collapse a per-class field (C, H, W, D) to one channel in [0, 1].

    Uses the expected class index under the per-voxel class weights, so both
    soft decoder outputs and exact one-hot encodings map consistently.
    """
    field = np.asarray(field, dtype=np.float32)
    n_classes = field.shape[0]
    weights = field / np.clip(field.sum(axis=0, keepdims=True), 1e-8, None)
    idx = np.arange(n_classes, dtype=np.float32)[:, None, None, None]
    rendered = (weights * idx).sum(axis=0) / (n_classes - 1)
    return rendered[None].astype(np.float32)


def encode_condition_from_real(label: np.ndarray, label_vae: VAE3D) -> np.ndarray:
    """Latent condition for a real label: posterior mean of the label encoder."""
    mean, _ = encode_array(label_vae, label_to_continuous(label))
    return mean


def sample_label_field(
    label_model: nn.Module,
    label_vae: VAE3D,
    schedule: NoiseSchedule,
    latent_shape: tuple[int, ...],
    seed: int | np.random.Generator,
    sampler: str = "ancestral",
    latent_scale: float = 1.0,
) -> np.ndarray:
    """Reverse-diffuse a label latent from noise and decode to class scores (C, H, W, D).

    ``latent_scale`` is the standardization the denoiser was trained under;
    samples are unscaled before decoding.
    """
    z_l = sample(label_model, schedule, latent_shape, seed, sampler=sampler)
    with torch.no_grad():
        logits = label_vae.decode(torch.from_numpy(z_l / np.float32(latent_scale))[None])[0]
        probs = torch.softmax(logits, dim=0)
    return probs.numpy()


def encode_condition_from_synthetic(
    seed: int | np.random.Generator,
    label_model: nn.Module,
    label_vae: VAE3D,
    vol_vae: VAE3D,
    schedule: NoiseSchedule,
    latent_shape: tuple[int, ...],
    sampler: str = "ancestral",
    mode: str = "continuous",
    latent_scale: float = 1.0,
) -> np.ndarray:
    """Condition from a synthetic label: denoise in label space, decode, re-encode.

    ``mode`` picks the decoder's continuous class scores ("continuous") or
    their argmax-discretized one-hot field ("argmax") before re-encoding with
    the volume encoder.
    """
    probs = sample_label_field(
        label_model, label_vae, schedule, latent_shape, seed, sampler, latent_scale
    )
    return condition_from_label_field(probs, vol_vae, mode)


def condition_from_label_field(field: np.ndarray, vol_vae: VAE3D, mode: str = "continuous") -> np.ndarray:
    if mode == "argmax":
        hard = np.zeros_like(field)
        arg = np.argmax(field, axis=0)
        for c in range(field.shape[0]):
            hard[c] = arg == c
        field = hard
    elif mode != "continuous":
        raise ValueError(f"unknown condition mode {mode!r}")
    rendered = render_label_field(field)
    if rendered.shape[0] != vol_vae.cfg.in_channels:
        raise ValueError(
            f"rendered label has {rendered.shape[0]} channels, volume encoder wants "
            f"{vol_vae.cfg.in_channels}"
        )
    mean, _ = encode_array(vol_vae, rendered)
    return mean


def train_controlnet(
    vol_latents: np.ndarray,
    conditions: np.ndarray,
    base: LatentDenoiser,
    schedule: NoiseSchedule,
    params: TrainParams,
) -> tuple[ControlNet3D, list[list]]:
    """Train the conditioning branch on paired (volume latent, condition) data.

    Only branch parameters receive updates; the base weights stay bit-identical.
    """
    vol_latents = np.asarray(vol_latents, dtype=np.float32)
    conditions = np.asarray(conditions, dtype=np.float32)
    if len(vol_latents) != len(conditions):
        raise ValueError(
            f"unpaired data: {len(vol_latents)} latents vs {len(conditions)} conditions"
        )
    if len(vol_latents) == 0:
        raise ValueError("empty training set")
    model = make_controlnet(base, seed=params.seed)
    opt = torch.optim.AdamW(model.trainable_parameters(), lr=params.lr)
    rng = np.random.default_rng(params.seed)

    log = []
    model.train()
    for step in range(params.steps):
        for group in opt.param_groups:
            group["lr"] = step_lr(params, step)
        idx = rng.integers(0, len(vol_latents), size=min(params.batch_size, len(vol_latents)))
        ts = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.standard_normal(size=(len(idx), *vol_latents.shape[1:]), dtype=np.float32)
        z_t = np.stack(
            [q_sample(vol_latents[i], int(t), e, schedule) for i, t, e in zip(idx, ts, eps)]
        )
        pred = model(
            torch.from_numpy(z_t),
            torch.from_numpy(ts.astype(np.float32)),
            torch.from_numpy(conditions[idx]),
        )
        loss = F.mse_loss(pred, torch.from_numpy(eps))
        if not math.isfinite(loss.item()):
            raise RuntimeError(f"controlnet training diverged at step {step}: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append([step, float(loss.item())])
    model.eval()
    return model, log
