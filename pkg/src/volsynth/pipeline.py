"""Staged training and two-stage inference for paired label/volume synthesis.

Training runs four resumable stages in order: volume autoencoder, label
autoencoder, label-space denoiser, then the conditional volume denoiser
(an unconditional volume denoiser is fitted inside that last stage and
frozen as the ControlNet base). Inference samples a label latent from
noise, decodes it, re-encodes it as the spatial condition, and runs the
conditional reverse diffusion to emit a paired (label, volume) sample.
"""

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import N_CLASSES
from .autoencoder import (
    AutoencoderConfig,
    VAE3D,
    continuous_to_label,
    decode_array,
    encode_array,
    label_to_continuous,
    make_vae,
    train_autoencoder,
)
from .controlnet import (
    ControlNet3D,
    condition_from_label_field,
    encode_condition_from_real,
    make_controlnet,
    sample_label_field,
    train_controlnet,
)
from .diffusion import (
    DenoiserConfig,
    LatentDenoiser,
    NoiseSchedule,
    TrainParams,
    make_denoiser,
    make_schedule,
    sample,
    train_denoiser,
)
from .phantoms import PhantomSpec, build_dataset
from .storage import (
    Manifest,
    ManifestEntry,
    checkpoint_id,
    load_checkpoint,
    save_checkpoint,
    write_array,
    write_csv_log,
)

STAGES = ("vae-vol", "vae-label", "ldm-label", "controlnet")


class StageError(RuntimeError):
    def __init__(self, stage: str, last_good: str | None, cause: str):
        self.stage = stage
        self.last_good = last_good
        super().__init__(
            f"stage {stage!r} failed ({cause}); last good checkpoint: {last_good or 'none'}"
        )


@dataclass
class ScheduleConfig:
    T: int = 50
    kind: str = "linear"
    beta_min: float = 1e-3
    beta_max: float = 0.2

    def build(self) -> NoiseSchedule:
        return make_schedule(self.T, self.kind, self.beta_min, self.beta_max)


@dataclass
class LdmStageConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainParams = field(default_factory=TrainParams)


@dataclass
class ControlNetStageConfig:
    base_denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    base_train: TrainParams = field(default_factory=TrainParams)
    branch_train: TrainParams = field(default_factory=TrainParams)


@dataclass
class DataConfig:
    n_items: int = 16
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    vol_vae: AutoencoderConfig = field(default_factory=lambda: AutoencoderConfig(in_channels=1))
    label_vae: AutoencoderConfig = field(
        default_factory=lambda: AutoencoderConfig(in_channels=N_CLASSES)
    )
    label_ldm: LdmStageConfig = field(default_factory=LdmStageConfig)
    controlnet: ControlNetStageConfig = field(default_factory=ControlNetStageConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: str = "ancestral"
    condition_mode: str = "continuous"  # or "argmax"
    out_dir: str = "runs/desk"
    seed: int = 0

    def validate(self) -> None:
        grid = tuple(self.phantom.grid_shape)
        self.phantom.validate()
        self.vol_vae.validate(grid)
        self.label_vae.validate(grid)
        if self.vol_vae.latent_channels != self.label_vae.latent_channels:
            raise ValueError(
                "volume and label latent channel counts must match for conditioning "
                f"({self.vol_vae.latent_channels} vs {self.label_vae.latent_channels})"
            )
        if self.vol_vae.downsample_levels != self.label_vae.downsample_levels:
            raise ValueError("volume and label autoencoders must share downsample_levels")
        for name, den in (
            ("label_ldm", self.label_ldm.denoiser),
            ("controlnet base", self.controlnet.base_denoiser),
        ):
            if den.latent_channels != self.vol_vae.latent_channels:
                raise ValueError(f"{name} denoiser channels != autoencoder latent channels")
            spatial = self.vol_vae.latent_shape(grid)[1:]
            if any(dim % 2**den.depth for dim in spatial):
                raise ValueError(
                    f"{name} depth {den.depth} does not divide latent grid {spatial}"
                )
        if self.sampler not in ("ancestral", "deterministic"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.condition_mode not in ("continuous", "argmax"):
            raise ValueError(f"unknown condition_mode {self.condition_mode!r}")

    def derive_seeds(self) -> "PipelineConfig":
        """Spread the global seed across stages (fixed offsets, echoed in JSON)."""
        s = self.seed
        return replace(
            self,
            vol_vae=replace(self.vol_vae, seed=s + 11),
            label_vae=replace(self.label_vae, seed=s + 12),
            label_ldm=LdmStageConfig(
                denoiser=replace(self.label_ldm.denoiser, seed=s + 13),
                train=replace(self.label_ldm.train, seed=s + 13),
            ),
            controlnet=ControlNetStageConfig(
                base_denoiser=replace(self.controlnet.base_denoiser, seed=s + 14),
                base_train=replace(self.controlnet.base_train, seed=s + 14),
                branch_train=replace(self.controlnet.branch_train, seed=s + 15),
            ),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        phantom = dict(payload.get("phantom", {}))
        if "intensity_means" in phantom:
            phantom["intensity_means"] = {int(k): v for k, v in phantom["intensity_means"].items()}
        for key in ("grid_shape", "liver_axes_range", "n_vessels_range",
                    "vessel_radius_range", "n_tumors_range", "tumor_radius_range"):
            if key in phantom:
                phantom[key] = tuple(phantom[key])
        data = dict(payload.get("data", {}))
        if "ratios" in data:
            data["ratios"] = tuple(data["ratios"])
        ldm = payload.get("label_ldm", {})
        cn = payload.get("controlnet", {})
        return cls(
            data=DataConfig(**data),
            phantom=PhantomSpec(**phantom),
            vol_vae=AutoencoderConfig(**payload.get("vol_vae", {"in_channels": 1})),
            label_vae=AutoencoderConfig(**payload.get("label_vae", {"in_channels": N_CLASSES})),
            label_ldm=LdmStageConfig(
                denoiser=DenoiserConfig(**ldm.get("denoiser", {})),
                train=TrainParams(**ldm.get("train", {})),
            ),
            controlnet=ControlNetStageConfig(
                base_denoiser=DenoiserConfig(**cn.get("base_denoiser", {})),
                base_train=TrainParams(**cn.get("base_train", {})),
                branch_train=TrainParams(**cn.get("branch_train", {})),
            ),
            schedule=ScheduleConfig(**payload.get("schedule", {})),
            sampler=payload.get("sampler", "ancestral"),
            condition_mode=payload.get("condition_mode", "continuous"),
            out_dir=payload.get("out_dir", "runs/desk"),
            seed=payload.get("seed", 0),
        )

    @classmethod
    def from_json(cls, path: Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def default_desk(cls, out_dir: str = "runs/desk", seed: int = 0) -> "PipelineConfig":
        """CPU-tractable defaults: 16 phantoms at 32x32x16, T=50.

        The conditional branch gets most of the diffusion budget; a lightly
        trained base leaves it the headroom to exploit the conditions.
        """
        cfg = cls(
            label_ldm=LdmStageConfig(train=TrainParams(steps=900)),
            controlnet=ControlNetStageConfig(
                base_train=TrainParams(steps=300),
                branch_train=TrainParams(steps=2000, lr=5e-3, lr_schedule="cosine"),
            ),
            out_dir=out_dir,
            seed=seed,
        )
        return cfg.derive_seeds()

    # ---- layout -----------------------------------------------------------
    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def data_dir(self) -> Path:
        return self.out / "data"

    def checkpoint_base(self, stage: str) -> Path:
        return self.out / "checkpoints" / stage

    def log_path(self, name: str) -> Path:
        return self.out / "logs" / f"{name}.csv"


def _state_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def _load_state(model: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    model.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()})


def ensure_dataset(cfg: PipelineConfig) -> Manifest:
    manifest_path = cfg.data_dir() / "manifest.json"
    if manifest_path.exists():
        return Manifest.load(manifest_path)
    return build_dataset(
        cfg.data.n_items, cfg.seed, cfg.phantom, cfg.data_dir(), cfg.data.ratios
    )


def _encode_means(vae: VAE3D, items: list[np.ndarray]) -> np.ndarray:
    return np.stack([encode_array(vae, item)[0] for item in items])


def latent_scale(latents: np.ndarray) -> float:
    """Scalar bringing a latent dataset to unit standard deviation.

    Diffusion trains on scaled latents and samples are unscaled before
    decoding; without this, reverse chains started from standard-normal
    noise undershoot the latent magnitudes and decode to washed-out volumes.
    """
    std = float(np.std(latents))
    if not np.isfinite(std) or std == 0.0:
        raise ValueError("degenerate latent dataset (zero or non-finite spread)")
    return 1.0 / std


def _train_split_arrays(manifest: Manifest) -> tuple[list[np.ndarray], list[np.ndarray]]:
    volumes, labels = [], []
    for entry in manifest.by_split("train"):
        volumes.append(manifest.load_volume(entry)[None])  # (1, H, W, D)
        labels.append(manifest.load_label(entry))
    return volumes, labels


def run_training(cfg: PipelineConfig, resume: bool = True, only: str | None = None) -> dict:
    """Run (or resume) the four training stages; returns paths and what ran.

    A stage is considered done when its checkpoint exists; with ``resume``
    everything from the first missing stage onward is retrained, so each
    stage only ever consumes earlier-stage outputs. ``only`` scopes the run
    to a single stage, whose prerequisite checkpoints must already exist.
    """
    cfg.validate()
    manifest = ensure_dataset(cfg)
    schedule = cfg.schedule.build()
    (cfg.out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (cfg.out / "config.json").write_text(cfg.to_json())

    done = [cfg.checkpoint_base(s).with_suffix(".npz").exists() for s in STAGES]
    if only is None:
        first_missing = done.index(False) if not all(done) else len(STAGES)
        start = first_missing if resume else 0
        retrain = set(range(start, len(STAGES)))
        last = len(STAGES) - 1
    else:
        if only not in STAGES:
            raise ValueError(f"unknown stage {only!r}")
        idx = STAGES.index(only)
        for i in range(idx):
            if not done[i]:
                raise FileNotFoundError(
                    f"stage {only!r} requires the {STAGES[i]!r} checkpoint, which is missing"
                )
        retrain = set() if (done[idx] and resume) else {idx}
        last = idx

    volumes, labels = _train_split_arrays(manifest)
    one_hots = [label_to_continuous(lab) for lab in labels]
    grid = tuple(cfg.phantom.grid_shape)

    trained, skipped = [], []
    models: dict[str, torch.nn.Module] = {}
    last_good: str | None = None

    def run_stage(stage: str, fn):
        nonlocal last_good
        idx = STAGES.index(stage)
        if idx > last:
            return
        base = cfg.checkpoint_base(stage)
        if idx not in retrain:
            models[stage] = _load_stage_model(cfg, stage)
            skipped.append(stage)
            last_good = str(base)
            return
        try:
            model, echo = fn()
        except RuntimeError as exc:
            raise StageError(stage, last_good, str(exc)) from exc
        save_checkpoint(base, _state_arrays(model), echo)
        models[stage] = model
        trained.append(stage)
        last_good = str(base)

    def stage_vae_vol():
        model, log = train_autoencoder(volumes, cfg.vol_vae)
        write_csv_log(cfg.log_path("vae-vol"), ["step", "loss", "recon", "kl"], log)
        return model, {"stage": "vae-vol", "config": asdict(cfg.vol_vae), "grid_shape": grid}

    def stage_vae_label():
        model, log = train_autoencoder(one_hots, cfg.label_vae, label_targets=labels)
        write_csv_log(cfg.log_path("vae-label"), ["step", "loss", "recon", "kl"], log)
        return model, {"stage": "vae-label", "config": asdict(cfg.label_vae), "grid_shape": grid}

    def stage_ldm_label():
        latents = _encode_means(models["vae-label"], one_hots)
        scale = latent_scale(latents)
        model, log = train_denoiser(
            latents * scale, cfg.label_ldm.denoiser, schedule, cfg.label_ldm.train
        )
        write_csv_log(cfg.log_path("ldm-label"), ["step", "loss"], log)
        return model, {
            "stage": "ldm-label",
            "config": asdict(cfg.label_ldm),
            "schedule": asdict(cfg.schedule),
            "latent_scale": scale,
        }

    def stage_controlnet():
        vol_latents = _encode_means(models["vae-vol"], volumes)
        vol_scale = latent_scale(vol_latents)
        label_latents = _encode_means(models["vae-label"], one_hots)
        cond_scale = latent_scale(label_latents)
        conditions = np.stack(
            [encode_condition_from_real(lab, models["vae-label"]) for lab in labels]
        )
        base_model, base_log = train_denoiser(
            vol_latents * vol_scale, cfg.controlnet.base_denoiser, schedule,
            cfg.controlnet.base_train,
        )
        write_csv_log(cfg.log_path("controlnet-base"), ["step", "loss"], base_log)
        model, log = train_controlnet(
            vol_latents * vol_scale, conditions * cond_scale, base_model, schedule,
            cfg.controlnet.branch_train,
        )
        write_csv_log(cfg.log_path("controlnet"), ["step", "loss"], log)
        return model, {
            "stage": "controlnet",
            "config": asdict(cfg.controlnet),
            "schedule": asdict(cfg.schedule),
            "latent_scale": vol_scale,
            "cond_scale": cond_scale,
        }

    run_stage("vae-vol", stage_vae_vol)
    run_stage("vae-label", stage_vae_label)
    run_stage("ldm-label", stage_ldm_label)
    run_stage("controlnet", stage_controlnet)

    return {
        "manifest": str(cfg.data_dir() / "manifest.json"),
        "checkpoints": {s: str(cfg.checkpoint_base(s)) for s in STAGES},
        "trained": trained,
        "skipped": skipped,
    }


def _load_stage_model(cfg: PipelineConfig, stage: str) -> torch.nn.Module:
    base = cfg.checkpoint_base(stage)
    if not base.with_suffix(".npz").exists():
        raise FileNotFoundError(f"missing checkpoint for stage {stage!r}: {base}.npz")
    arrays, _ = load_checkpoint(base)
    if stage == "vae-vol":
        model = make_vae(cfg.vol_vae)
    elif stage == "vae-label":
        model = make_vae(cfg.label_vae)
        model.squash_output = False
    elif stage == "ldm-label":
        model = make_denoiser(cfg.label_ldm.denoiser)
    elif stage == "controlnet":
        base_model = make_denoiser(cfg.controlnet.base_denoiser)
        model = make_controlnet(base_model, seed=cfg.controlnet.branch_train.seed)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    _load_state(model, arrays)
    model.eval()
    return model


@dataclass
class CheckpointBundle:
    cfg: PipelineConfig
    vol_vae: VAE3D
    label_vae: VAE3D
    label_denoiser: LatentDenoiser
    controlnet: ControlNet3D
    schedule: NoiseSchedule
    ids: dict[str, str]
    label_scale: float = 1.0  # label-latent scaling used by the label denoiser
    vol_scale: float = 1.0  # volume-latent scaling used by the conditional denoiser
    cond_scale: float = 1.0  # scaling applied to training-time label conditions


def load_bundle(cfg: PipelineConfig) -> CheckpointBundle:
    ids = {}
    meta = {}
    for stage in STAGES:
        base = cfg.checkpoint_base(stage)
        if not base.with_suffix(".npz").exists():
            raise FileNotFoundError(f"missing checkpoint for stage {stage!r}: {base}.npz")
        arrays, config = load_checkpoint(base)
        ids[stage] = checkpoint_id(arrays)
        meta[stage] = config
    return CheckpointBundle(
        cfg=cfg,
        vol_vae=_load_stage_model(cfg, "vae-vol"),
        label_vae=_load_stage_model(cfg, "vae-label"),
        label_denoiser=_load_stage_model(cfg, "ldm-label"),
        controlnet=_load_stage_model(cfg, "controlnet"),
        schedule=cfg.schedule.build(),
        ids=ids,
        label_scale=meta["ldm-label"].get("latent_scale", 1.0),
        vol_scale=meta["controlnet"].get("latent_scale", 1.0),
        cond_scale=meta["controlnet"].get("cond_scale", 1.0),
    )


@dataclass
class SyntheticPair:
    label: np.ndarray  # uint8 (H, W, D)
    volume: np.ndarray  # float32 (H, W, D) in [0, 1]
    seed: int
    checkpoints: dict[str, str]


def _pair_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    if seed < 0:
        raise ValueError("synthesis seeds must be nonnegative")
    return (
        np.random.default_rng(np.random.SeedSequence([seed, 0])),
        np.random.default_rng(np.random.SeedSequence([seed, 1])),
    )


def synthesize_label(bundle: CheckpointBundle, seed: int) -> np.ndarray:
    """Sample a label latent from noise, decode, and discretize by argmax."""
    cfg = bundle.cfg
    label_rng, _ = _pair_rngs(seed)
    shape = cfg.label_vae.latent_shape(tuple(cfg.phantom.grid_shape))
    probs = sample_label_field(
        bundle.label_denoiser, bundle.label_vae, bundle.schedule, shape, label_rng,
        cfg.sampler, bundle.label_scale,
    )
    return continuous_to_label(probs)


def synthesize_pair(bundle: CheckpointBundle, seed: int) -> SyntheticPair:
    """Two-stage inference: synthesize a label, condition on it, synthesize the volume.

    The stored label is the argmax of the same decoded field that is
    re-encoded as the condition, so the pair is coupled with no re-sampling
    between the stages.
    """
    cfg = bundle.cfg
    grid = tuple(cfg.phantom.grid_shape)
    label_rng, vol_rng = _pair_rngs(seed)
    label_shape = cfg.label_vae.latent_shape(grid)
    probs = sample_label_field(
        bundle.label_denoiser, bundle.label_vae, bundle.schedule, label_shape, label_rng,
        cfg.sampler, bundle.label_scale,
    )
    label = continuous_to_label(probs)
    cond = condition_from_label_field(probs, bundle.vol_vae, cfg.condition_mode) * bundle.vol_scale
    vol_shape = cfg.vol_vae.latent_shape(grid)
    z_v = sample(
        bundle.controlnet, bundle.schedule, vol_shape, vol_rng, cond=cond, sampler=cfg.sampler
    )
    volume = decode_array(bundle.vol_vae, z_v / np.float32(bundle.vol_scale))[0]
    return SyntheticPair(label=label, volume=volume, seed=seed, checkpoints=dict(bundle.ids))


def synthesize_volume_for_label(bundle: CheckpointBundle, label: np.ndarray, seed: int) -> np.ndarray:
    """Debug path: condition the volume stage on a provided (real) label map."""
    cfg = bundle.cfg
    _, vol_rng = _pair_rngs(seed)
    cond = encode_condition_from_real(label, bundle.label_vae) * bundle.cond_scale
    vol_shape = cfg.vol_vae.latent_shape(tuple(cfg.phantom.grid_shape))
    z_v = sample(
        bundle.controlnet, bundle.schedule, vol_shape, vol_rng, cond=cond, sampler=cfg.sampler
    )
    return decode_array(bundle.vol_vae, z_v / np.float32(bundle.vol_scale))[0]


def synthesize_dataset(
    bundle: CheckpointBundle, n: int, seed: int, out_dir: Path
) -> Manifest:
    """Persist ``n`` synthetic pairs (item k uses seed ``seed + k``) and a manifest."""
    if n < 1:
        raise ValueError("need n >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        pair = synthesize_pair(bundle, seed + i)
        stem = f"synth_{i:04d}"
        write_array(out_dir / f"{stem}_vol", pair.volume.astype(np.float32))
        write_array(out_dir / f"{stem}_lab", pair.label.astype(np.uint8))
        entries.append(
            ManifestEntry(
                id=stem,
                volume=f"{stem}_vol.bin",
                label=f"{stem}_lab.bin",
                split="train",
                provenance="synthetic",
                seed=seed + i,
            )
        )
    manifest = Manifest(entries=entries, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def loss_drop(log_rows: list[list], window: int = 10) -> float:
    """Fractional drop of the trailing-window mean loss vs the leading window."""
    losses = [float(r[1]) for r in log_rows]
    if len(losses) < 2 * window:
        window = max(1, len(losses) // 2)
    first = float(np.mean(losses[:window]))
    last = float(np.mean(losses[-window:]))
    return 1.0 - last / first


def read_log_losses(path: Path) -> list[list]:
    rows = []
    lines = Path(path).read_text().strip().splitlines()[1:]
    for line in lines:
        parts = line.split(",")
        rows.append([int(parts[0])] + [float(p) if p else float("nan") for p in parts[1:]])
    return rows
