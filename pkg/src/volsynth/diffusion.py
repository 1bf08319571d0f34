"""DDPM core in latent space: schedule, forward noising, training, sampling."""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class NoiseSchedule:
    betas: np.ndarray  # beta_1..beta_T, float64
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def validate(self) -> None:
        if np.any(~np.isfinite(self.betas)) or np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must be finite and in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")


def make_schedule(
    T: int, kind: str = "linear", beta_min: float = 1e-4, beta_max: float = 2e-2
) -> NoiseSchedule:
    """Build a noise schedule. ``kind`` is "linear" or "cosine"."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((steps / T) + s) / (1 + s) * np.pi / 2) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    schedule = NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))
    schedule.validate()
    return schedule


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward noising z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, t in [1, T]."""
    if not (1 <= t <= schedule.T):
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    abar = schedule.alpha_bars[t - 1]
    out = np.sqrt(abar) * z0.astype(np.float64) + np.sqrt(1.0 - abar) * eps.astype(np.float64)
    return out.astype(np.float32)


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    base_width: int = 48
    depth: int = 1
    time_embed_dim: int = 64
    seed: int = 0

    def validate(self) -> None:
        for name in ("latent_channels", "base_width", "depth", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")


@dataclass
class TrainParams:
    lr: float = 2e-3
    batch_size: int = 8
    steps: int = 800
    seed: int = 0
    lr_schedule: str = "constant"  # or "cosine" (anneals to zero)


def step_lr(params: TrainParams, step: int) -> float:
    if params.lr_schedule == "constant":
        return params.lr
    if params.lr_schedule == "cosine":
        return params.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(params.steps, 1)))
    raise ValueError(f"unknown lr_schedule {params.lr_schedule!r}")


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock3D(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.SiLU(), nn.Linear(time_dim, out_ch))
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_mlp(temb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class LatentDenoiser(nn.Module):
    """Small 3D U-Net noise predictor with sinusoidal time conditioning.

    The final conv is zero-initialized, so an untrained model predicts zero
    noise. ``encode_features``/``decode_features`` expose the two halves so a
    conditioning branch can inject residuals at the skip/mid fusion points.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        tdim = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        widths = [cfg.base_width * 2**i for i in range(cfg.depth + 1)]
        self.conv_in = nn.Conv3d(cfg.latent_channels, widths[0], 3, padding=1)
        self.down_res = nn.ModuleList(
            [ResBlock3D(widths[i], widths[i], tdim) for i in range(cfg.depth)]
        )
        self.down_samp = nn.ModuleList(
            [nn.Conv3d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(cfg.depth)]
        )
        self.mid = ResBlock3D(widths[-1], widths[-1], tdim)
        self.up_samp = nn.ModuleList(
            [nn.ConvTranspose3d(widths[i + 1], widths[i], 2, stride=2) for i in range(cfg.depth)]
        )
        self.up_res = nn.ModuleList(
            [ResBlock3D(2 * widths[i], widths[i], tdim) for i in range(cfg.depth)]
        )
        self.out_norm = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.out_conv = nn.Conv3d(widths[0], cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(sinusoidal_embedding(t, self.cfg.time_embed_dim))

    def encode_features(
        self, x: torch.Tensor, temb: torch.Tensor
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        if x.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected {self.cfg.latent_channels} channels, got {x.shape[1]}")
        h = self.conv_in(x)
        skips = []
        for res, samp in zip(self.down_res, self.down_samp):
            h = res(h, temb)
            skips.append(h)
            h = samp(h)
        return skips, self.mid(h, temb)

    def decode_features(
        self, h: torch.Tensor, skips: list[torch.Tensor], temb: torch.Tensor
    ) -> torch.Tensor:
        for i in reversed(range(self.cfg.depth)):
            h = self.up_samp[i](h)
            h = self.up_res[i](torch.cat([h, skips[i]], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))

    def forward(self, z_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_embedding(t)
        skips, h = self.encode_features(z_t, temb)
        return self.decode_features(h, skips, temb)


def make_denoiser(cfg: DenoiserConfig) -> LatentDenoiser:
    torch.manual_seed(cfg.seed)
    return LatentDenoiser(cfg)


def predict_noise(model: nn.Module, z_t: np.ndarray, t: int,
                  cond: np.ndarray | None = None) -> np.ndarray:
    """Noise prediction for a single latent; pure function of (weights, inputs)."""
    model.eval()
    zt = torch.from_numpy(np.asarray(z_t, dtype=np.float32))[None]
    tt = torch.tensor([float(t)])
    with torch.no_grad():
        if cond is None:
            out = model(zt, tt)
        else:
            ct = torch.from_numpy(np.asarray(cond, dtype=np.float32))[None]
            out = model(zt, tt, ct)
    return out[0].numpy()


def train_denoiser(
    latents: np.ndarray,
    cfg: DenoiserConfig,
    schedule: NoiseSchedule,
    params: TrainParams,
) -> tuple[LatentDenoiser, list[list]]:
    """Train a noise predictor on (N, C, h, w, d) latents; returns model + log.

    Every step draws uniform timesteps and standard-normal noise, forms z_t
    with :func:`q_sample`, and minimizes elementwise-mean squared error
    between the drawn and predicted noise.
    """
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 5 or len(latents) == 0:
        raise ValueError("latents must be a nonempty (N, C, h, w, d) array")
    model = make_denoiser(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=params.lr)
    rng = np.random.default_rng(params.seed)

    log = []
    model.train()
    for step in range(params.steps):
        for group in opt.param_groups:
            group["lr"] = step_lr(params, step)
        idx = rng.integers(0, len(latents), size=min(params.batch_size, len(latents)))
        ts = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.standard_normal(size=(len(idx), *latents.shape[1:]), dtype=np.float32)
        z_t = np.stack(
            [q_sample(latents[i], int(t), e, schedule) for i, t, e in zip(idx, ts, eps)]
        )
        pred = model(torch.from_numpy(z_t), torch.from_numpy(ts.astype(np.float32)))
        loss = F.mse_loss(pred, torch.from_numpy(eps))
        if not math.isfinite(loss.item()):
            raise RuntimeError(f"denoiser training diverged at step {step}: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append([step, float(loss.item())])
    model.eval()
    return model, log


def evaluate_denoise_loss(
    model: nn.Module,
    latents: np.ndarray,
    schedule: NoiseSchedule,
    seed: int = 99,
    n: int = 256,
    conditions: np.ndarray | None = None,
) -> float:
    """Noise-prediction MSE on a fixed probe batch (uniform t, fresh noise).

    Deterministic in ``seed``; a low-variance readout of the training
    objective for before/after comparisons.
    """
    latents = np.asarray(latents, dtype=np.float32)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(latents), size=n)
    ts = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(size=(n, *latents.shape[1:]), dtype=np.float32)
    z_t = np.stack([q_sample(latents[i], int(t), e, schedule) for i, t, e in zip(idx, ts, eps)])
    model.eval()
    total = 0.0
    with torch.no_grad():
        for lo in range(0, n, 32):
            hi = min(lo + 32, n)
            zt = torch.from_numpy(z_t[lo:hi])
            tt = torch.from_numpy(ts[lo:hi].astype(np.float32))
            if conditions is None:
                pred = model(zt, tt)
            else:
                pred = model(zt, tt, torch.from_numpy(conditions[idx[lo:hi]]))
            total += float(((pred.numpy() - eps[lo:hi]) ** 2).sum())
    return total / eps.size


def sample(
    model: nn.Module,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    seed: int | np.random.Generator,
    cond: np.ndarray | None = None,
    sampler: str = "ancestral",
) -> np.ndarray:
    """Reverse-diffuse from pure noise down to a z_0 estimate.

    Ancestral sampling injects posterior noise at every step except the last;
    the deterministic sampler follows the posterior mean only. Identical
    (weights, seed, sampler) give bitwise-identical output.
    """
    if sampler not in ("ancestral", "deterministic"):
        raise ValueError(f"unknown sampler {sampler!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    model.eval()
    z = rng.standard_normal(size=shape, dtype=np.float32)
    cond_t = None
    if cond is not None:
        cond_t = torch.from_numpy(np.asarray(cond, dtype=np.float32))[None]
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            zt = torch.from_numpy(z)[None]
            tt = torch.tensor([float(t)])
            eps_hat = (model(zt, tt) if cond_t is None else model(zt, tt, cond_t))[0].numpy()
            beta = schedule.betas[t - 1]
            alpha = schedule.alphas[t - 1]
            abar = schedule.alpha_bars[t - 1]
            mean = (z - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
            if sampler == "ancestral" and t > 1:
                abar_prev = schedule.alpha_bars[t - 2]
                post_var = beta * (1.0 - abar_prev) / (1.0 - abar)
                noise = rng.standard_normal(size=shape, dtype=np.float32)
                z = (mean + np.sqrt(post_var) * noise).astype(np.float32)
            else:
                z = mean.astype(np.float32)
    return z
