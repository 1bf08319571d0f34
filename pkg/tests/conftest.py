import numpy as np
import pytest

from volsynth.autoencoder import AutoencoderConfig
from volsynth.diffusion import DenoiserConfig, TrainParams
from volsynth.phantoms import PhantomSpec
from volsynth.pipeline import (
    ControlNetStageConfig,
    DataConfig,
    LdmStageConfig,
    PipelineConfig,
    ScheduleConfig,
    run_training,
)


def mini_config(out_dir: str, seed: int = 0) -> PipelineConfig:
    """Contract-test pipeline: tiny grids and step counts, trains in seconds."""
    cfg = PipelineConfig(
        data=DataConfig(n_items=10),
        phantom=PhantomSpec(grid_shape=(16, 16, 8)),
        vol_vae=AutoencoderConfig(in_channels=1, base_width=8, steps=60, batch_size=4),
        label_vae=AutoencoderConfig(in_channels=5, base_width=8, steps=60, batch_size=4),
        label_ldm=LdmStageConfig(
            denoiser=DenoiserConfig(base_width=16, time_embed_dim=32),
            train=TrainParams(steps=60),
        ),
        controlnet=ControlNetStageConfig(
            base_denoiser=DenoiserConfig(base_width=16, time_embed_dim=32),
            base_train=TrainParams(steps=60),
            branch_train=TrainParams(steps=50),
        ),
        schedule=ScheduleConfig(T=8, beta_min=0.01, beta_max=0.35),
        out_dir=out_dir,
        seed=seed,
    )
    return cfg.derive_seeds()


@pytest.fixture(scope="session")
def trained_mini(tmp_path_factory):
    """One trained mini pipeline shared by pipeline/CLI contract tests."""
    root = tmp_path_factory.mktemp("mini-run")
    cfg = mini_config(str(root / "run"), seed=0)
    result = run_training(cfg)
    return cfg, result


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
