"""Downstream 3D segmentation: task remapping, Dice+CE training, R vs R+S harness."""

import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import N_CLASSES
from .metrics import dice
from .storage import Manifest, write_csv_log


@dataclass(frozen=True)
class SegTask:
    name: str
    mapping: tuple[int, ...]  # total map over label classes 0..4
    target_names: tuple[str, ...]

    @property
    def n_targets(self) -> int:
        return len(self.target_names)


TASKS = {
    "liver_only": SegTask(
        "liver_only", (0, 1, 1, 1, 1), ("background", "liver")
    ),
    "vein_only": SegTask(
        "vein_only", (0, 0, 1, 1, 0), ("background", "vein")
    ),
    "hcc_only": SegTask(
        "hcc_only", (0, 0, 0, 0, 1), ("background", "tumor")
    ),
    "multi_class": SegTask(
        # liver merges into background; vessels and tumor stay separate classes
        "multi_class", (0, 0, 1, 2, 3), ("background", "portal_vein", "hepatic_vein", "tumor")
    ),
}


def build_task_labels(label: np.ndarray, task: SegTask) -> np.ndarray:
    """Apply the task's total class mapping voxelwise."""
    label = np.asarray(label)
    if label.max() >= N_CLASSES:
        raise ValueError(f"label class {label.max()} outside 0..{N_CLASSES - 1}")
    lut = np.asarray(task.mapping, dtype=np.uint8)
    return lut[label]


@dataclass
class SegTrainConfig:
    arch: str = "unet"
    lr: float = 1e-4
    momentum: float = 0.95  # Adam first-moment decay
    batch_size: int = 2
    max_steps: int = 200
    val_interval: int = 20
    patience: int = 4  # validation rounds without improvement
    seed: int = 0
    dice_weight: float = 1.0
    ce_weight: float = 1.0


class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, residual=False):
        super().__init__()
        self.residual = residual
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if residual and in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = F.silu(self.conv1(x))
        h = self.conv2(h)
        if self.residual:
            h = h + self.skip(x)
        return F.silu(h)


class SegUNet3D(nn.Module):
    """Small two-level 3D U-Net (``residual=True`` gives the ResUNet variant)."""

    def __init__(self, n_targets: int, base_width: int = 8, residual: bool = False):
        super().__init__()
        w = base_width
        self.enc1 = _ConvBlock(1, w, residual)
        self.down1 = nn.Conv3d(w, 2 * w, 3, stride=2, padding=1)
        self.enc2 = _ConvBlock(2 * w, 2 * w, residual)
        self.down2 = nn.Conv3d(2 * w, 4 * w, 3, stride=2, padding=1)
        self.mid = _ConvBlock(4 * w, 4 * w, residual)
        self.up2 = nn.ConvTranspose3d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _ConvBlock(4 * w, 2 * w, residual)
        self.up1 = nn.ConvTranspose3d(2 * w, w, 2, stride=2)
        self.dec1 = _ConvBlock(2 * w, w, residual)
        self.head = nn.Conv3d(w, n_targets, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.down1(e1))
        m = self.mid(self.down2(e2))
        d2 = self.dec2(torch.cat([self.up2(m), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


ARCHITECTURES = {
    "unet": lambda n: SegUNet3D(n, residual=False),
    "resunet": lambda n: SegUNet3D(n, residual=True),
}


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, n_targets: int) -> torch.Tensor:
    probs = torch.softmax(logits, dim=1)
    one_hot = F.one_hot(target, n_targets).permute(0, 4, 1, 2, 3).float()
    dims = (0, 2, 3, 4)
    intersect = (probs * one_hot).sum(dims)
    denom = probs.sum(dims) + one_hot.sum(dims)
    smooth = 1e-5
    return 1.0 - ((2.0 * intersect + smooth) / (denom + smooth)).mean()


def dice_ce_loss(logits, target, n_targets, cfg: SegTrainConfig) -> torch.Tensor:
    return cfg.dice_weight * soft_dice_loss(logits, target, n_targets) + cfg.ce_weight * F.cross_entropy(
        logits, target
    )


def _load_split(manifest: Manifest, split: str, task: SegTask):
    vols, labs = [], []
    for entry in manifest.by_split(split):
        vols.append(manifest.load_volume(entry).astype(np.float32))
        labs.append(build_task_labels(manifest.load_label(entry), task))
    return vols, labs


def collect_training_items(manifests: list[Manifest], task: SegTask):
    """Train-split items pooled over manifests with equal weighting (R+S protocol)."""
    vols, labs = [], []
    for m in manifests:
        v, l = _load_split(m, "train", task)
        vols += v
        labs += l
    return vols, labs


def train_segmenter(
    manifests: list[Manifest] | Manifest,
    task: SegTask,
    cfg: SegTrainConfig,
) -> tuple[SegUNet3D, list[list]]:
    """Train one segmenter on the train splits of one or more manifests.

    Several manifests concatenate with equal weighting (the R+S protocol).
    Optimized with Adam(lr, beta1=momentum) on Dice+CE until ``max_steps``
    or until the validation loss stops improving for ``patience`` rounds.
    """
    if isinstance(manifests, Manifest):
        manifests = [manifests]
    if cfg.arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {cfg.arch!r}; have {sorted(ARCHITECTURES)}")

    train_v, train_l = collect_training_items(manifests, task)
    val_v, val_l = [], []
    for m in manifests:
        v, l = _load_split(m, "val", task)
        val_v += v
        val_l += l
    if not train_v:
        raise ValueError("no training items in the given manifests")

    present = set(np.unique(np.stack(train_l)))
    missing = [c for c in range(task.n_targets) if c not in present]
    if missing:
        warnings.warn(
            f"task {task.name}: target classes {missing} absent from every training item",
            RuntimeWarning,
        )

    torch.manual_seed(cfg.seed)
    model = ARCHITECTURES[cfg.arch](task.n_targets)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.momentum, 0.999))
    rng = np.random.default_rng(cfg.seed)

    data = torch.from_numpy(np.stack(train_v)[:, None])
    target = torch.from_numpy(np.stack(train_l).astype(np.int64))
    val_data = torch.from_numpy(np.stack(val_v)[:, None]) if val_v else None
    val_target = torch.from_numpy(np.stack(val_l).astype(np.int64)) if val_l else None

    def val_loss() -> float:
        model.eval()
        with torch.no_grad():
            loss = dice_ce_loss(model(val_data), val_target, task.n_targets, cfg)
        model.train()
        return float(loss.item())

    log = []
    best_val = math.inf
    stale_rounds = 0
    model.train()
    for step in range(cfg.max_steps):
        idx = rng.integers(0, len(train_v), size=min(cfg.batch_size, len(train_v)))
        logits = model(data[idx])
        loss = dice_ce_loss(logits, target[idx], task.n_targets, cfg)
        if not math.isfinite(loss.item()):
            raise RuntimeError(f"segmenter training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        row = [step, float(loss.item()), ""]
        if val_data is not None and (step + 1) % cfg.val_interval == 0:
            v = val_loss()
            row[2] = v
            if v < best_val - 1e-6:
                best_val = v
                stale_rounds = 0
            else:
                stale_rounds += 1
            log.append(row)
            if stale_rounds >= cfg.patience:
                break
        else:
            log.append(row)
    model.eval()
    return model, log


def predict_labels(model: SegUNet3D, volume: np.ndarray) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        logits = model(torch.from_numpy(volume.astype(np.float32))[None, None])
    return logits[0].argmax(dim=0).numpy().astype(np.uint8)


def evaluate_segmenter(model: SegUNet3D, manifest: Manifest, task: SegTask) -> dict:
    """Per-foreground-class Dice averaged over test items, then over classes."""
    vols, labs = _load_split(manifest, "test", task)
    if not vols:
        raise ValueError("empty test split")
    per_class = {name: [] for name in task.target_names[1:]}
    for vol, lab in zip(vols, labs):
        pred = predict_labels(model, vol)
        for cls, name in enumerate(task.target_names):
            if cls == 0:
                continue
            per_class[name].append(dice(pred, lab, class_id=cls))
    class_means = {name: float(np.mean(scores)) for name, scores in per_class.items()}
    return {"per_class": class_means, "mean": float(np.mean(list(class_means.values())))}


def improvement_percent(dice_r: float, dice_rs: float) -> float:
    """Relative Dice improvement of R+S over R, in percent: 100 (rs - r) / r.

    Undefined (NaN) when the reference Dice is zero.
    """
    if dice_r == 0:
        return math.nan
    return 100.0 * (dice_rs - dice_r) / dice_r


def run_augmentation_experiment(
    real_manifest: Manifest,
    synth_manifest: Manifest,
    tasks: list[str],
    architectures: list[str],
    cfg: SegTrainConfig,
    n_seeds: int = 3,
    log_dir=None,
) -> dict:
    """Train R and R+S arms per (architecture, task, seed); evaluate on real test only.

    A failed (architecture, task, seed) cell is recorded and the experiment
    continues; rows aggregate the surviving seeds as mean +/- std. With
    ``log_dir`` each cell's training curves are persisted as CSV.
    """
    if not real_manifest.entries or not synth_manifest.entries:
        raise ValueError("both manifests must be nonempty")

    def persist(name: str, log: list[list]) -> None:
        if log_dir is not None:
            write_csv_log(Path(log_dir) / f"{name}.csv", ["step", "loss", "val_loss"], log)

    rows = []
    for arch in architectures:
        for task_name in tasks:
            task = TASKS[task_name]
            cells = []
            failures = []
            for s in range(n_seeds):
                run_cfg = replace(cfg, arch=arch, seed=cfg.seed + s)
                cell_name = f"{arch}_{task_name}_seed{run_cfg.seed}"
                try:
                    model_r, log_r = train_segmenter(real_manifest, task, run_cfg)
                    dice_r = evaluate_segmenter(model_r, real_manifest, task)["mean"]
                    persist(f"{cell_name}_r", log_r)
                    model_rs, log_rs = train_segmenter([real_manifest, synth_manifest], task, run_cfg)
                    dice_rs = evaluate_segmenter(model_rs, real_manifest, task)["mean"]
                    persist(f"{cell_name}_rs", log_rs)
                    cells.append({"seed": run_cfg.seed, "dice_r": dice_r, "dice_rs": dice_rs})
                except Exception as exc:  # cell failure must not kill the sweep
                    failures.append({"seed": run_cfg.seed, "error": f"{type(exc).__name__}: {exc}"})
            row = {
                "architecture": arch,
                "task": task_name,
                "cells": cells,
                "failures": failures,
                "status": "ok" if cells else "failed",
            }
            if cells:
                r_vals = np.array([c["dice_r"] for c in cells])
                rs_vals = np.array([c["dice_rs"] for c in cells])
                improvement = improvement_percent(float(r_vals.mean()), float(rs_vals.mean()))
                row.update(
                    dice_r_mean=float(r_vals.mean()),
                    dice_r_std=float(r_vals.std(ddof=0)),
                    dice_rs_mean=float(rs_vals.mean()),
                    dice_rs_std=float(rs_vals.std(ddof=0)),
                    improvement_pct=None if math.isnan(improvement) else improvement,
                )
            rows.append(row)
    ok_rows = [r for r in rows if r["status"] == "ok"]
    report = {
        "rows": rows,
        "n_seeds": n_seeds,
        "aggregate": {
            "mean_dice_r": float(np.mean([r["dice_r_mean"] for r in ok_rows])) if ok_rows else math.nan,
            "mean_dice_rs": float(np.mean([r["dice_rs_mean"] for r in ok_rows])) if ok_rows else math.nan,
        },
    }
    return report


def format_report_table(report: dict) -> str:
    """Render the augmentation report as an R / R+S / Improvement text table."""
    lines = [
        f"{'CNN Model':<12} {'Segmentation':<14} {'R':>8} {'R + S':>8} {'Improvement':>12}",
        "-" * 58,
    ]
    for row in report["rows"]:
        if row["status"] != "ok":
            lines.append(
                f"{row['architecture']:<12} {row['task']:<14} {'--':>8} {'--':>8} {'failed':>12}"
            )
            continue
        imp = row["improvement_pct"]
        imp_str = f"{imp:+.3f}%" if imp is not None else "undefined"
        lines.append(
            f"{row['architecture']:<12} {row['task']:<14} "
            f"{row['dice_r_mean']:>8.4f} {row['dice_rs_mean']:>8.4f} {imp_str:>12}"
        )
    return "\n".join(lines)
