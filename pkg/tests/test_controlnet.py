import hashlib

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from volsynth.autoencoder import AutoencoderConfig, label_to_continuous, make_vae
from volsynth.controlnet import (
    condition_from_label_field,
    encode_condition_from_real,
    encode_condition_from_synthetic,
    make_controlnet,
    predict_noise_conditional,
    render_label_field,
    train_controlnet,
)
from volsynth.diffusion import (
    DenoiserConfig,
    TrainParams,
    make_denoiser,
    make_schedule,
    predict_noise,
    q_sample,
    train_denoiser,
)
from volsynth.phantoms import PhantomSpec, generate_phantom

SCHED = make_schedule(T=8, beta_min=0.05, beta_max=0.4)
DCFG = DenoiserConfig(base_width=32, time_embed_dim=32, seed=0)


def _state_digest(module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().numpy().tobytes())
    return h.hexdigest()


def test_zero_init_identity(rng):
    base = make_denoiser(DCFG)
    cn = make_controlnet(base, seed=1)
    for _ in range(8):
        z = rng.standard_normal((4, 4, 4, 2), dtype=np.float32)
        c = rng.standard_normal((4, 4, 4, 2), dtype=np.float32) * 3
        t = int(rng.integers(1, SCHED.T + 1))
        unconditional = predict_noise(base, z, t)
        conditional = predict_noise_conditional(cn, z, t, c)
        assert np.abs(conditional - unconditional).max() <= 1e-6


def test_fusion_layers_start_at_zero():
    cn = make_controlnet(make_denoiser(DCFG), seed=2)
    for conv in list(cn.fuse_skips) + [cn.fuse_mid, cn.fuse_out]:
        assert torch.all(conv.weight == 0)
        assert torch.all(conv.bias == 0)


def test_predict_noise_routes_condition(rng):
    base = make_denoiser(DCFG)
    cn = make_controlnet(base, seed=4)
    z = rng.standard_normal((4, 4, 4, 2), dtype=np.float32)
    c = rng.standard_normal((4, 4, 4, 2), dtype=np.float32)
    via_generic = predict_noise(cn, z, 2, cond=c)
    via_conditional = predict_noise_conditional(cn, z, 2, c)
    assert np.array_equal(via_generic, via_conditional)


def test_condition_shape_validation(rng):
    cn = make_controlnet(make_denoiser(DCFG), seed=0)
    z = rng.standard_normal((4, 4, 4, 2), dtype=np.float32)
    with pytest.raises(ValueError, match="channels"):
        predict_noise_conditional(cn, z, 1, np.zeros((2, 4, 4, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="grid"):
        predict_noise_conditional(cn, z, 1, np.zeros((4, 2, 4, 2), dtype=np.float32))


@pytest.fixture(scope="module")
def trained_controlnet():
    rng = np.random.default_rng(0)
    latents = rng.standard_normal((8, 4, 4, 4, 2), dtype=np.float32)
    # conditions that identify items, like real-label latents do
    conditions = latents.copy()
    base, _ = train_denoiser(latents, DCFG, SCHED, TrainParams(steps=200, seed=0))
    digest_before = _state_digest(base)
    model, log = train_controlnet(
        latents, conditions, base, SCHED,
        TrainParams(steps=500, lr=8e-3, seed=1, lr_schedule="cosine"),
    )
    return latents, conditions, base, digest_before, model, log


def test_base_weights_bitwise_frozen(trained_controlnet):
    _, _, base, digest_before, model, _ = trained_controlnet
    assert _state_digest(base) == digest_before
    assert _state_digest(model.base) == digest_before


def test_initial_loss_equals_base_loss(trained_controlnet):
    latents, conditions, base, _, _, log = trained_controlnet
    fresh = make_controlnet(base, seed=1)
    rng = np.random.default_rng(1)
    idx = rng.integers(0, len(latents), size=8)
    ts = rng.integers(1, SCHED.T + 1, size=8)
    eps = rng.standard_normal((8, 4, 4, 4, 2), dtype=np.float32)
    z_t = np.stack([q_sample(latents[i], int(t), e, SCHED) for i, t, e in zip(idx, ts, eps)])
    zt = torch.from_numpy(z_t)
    tt = torch.from_numpy(ts.astype(np.float32))
    with torch.no_grad():
        cond_loss = F.mse_loss(fresh(zt, tt, torch.from_numpy(conditions[idx])), torch.from_numpy(eps))
        base_loss = F.mse_loss(base(zt, tt), torch.from_numpy(eps))
    assert abs(cond_loss.item() - base_loss.item()) < 1e-5


def test_overfit_loss_drops_below_60pct(trained_controlnet):
    _, _, _, _, _, log = trained_controlnet
    init = np.mean([r[1] for r in log[:10]])
    final = np.mean([r[1] for r in log[-10:]])
    assert final < 0.6 * init


def test_conditional_objective_matches_recomputation(trained_controlnet):
    latents, conditions, _, _, model, _ = trained_controlnet
    rng = np.random.default_rng(6)
    idx = rng.integers(0, len(latents), size=6)
    ts = rng.integers(1, SCHED.T + 1, size=6)
    eps = rng.standard_normal((6, 4, 4, 4, 2), dtype=np.float32)
    z_t = np.stack([q_sample(latents[i], int(t), e, SCHED) for i, t, e in zip(idx, ts, eps)])
    with torch.no_grad():
        pred = model(
            torch.from_numpy(z_t),
            torch.from_numpy(ts.astype(np.float32)),
            torch.from_numpy(conditions[idx]),
        )
    impl = F.mse_loss(pred, torch.from_numpy(eps)).item()
    oracle = float(np.mean((pred.numpy() - eps) ** 2))
    assert abs(impl - oracle) < 1e-5


def test_condition_sensitivity_after_training(trained_controlnet, rng):
    _, conditions, _, _, model, _ = trained_controlnet
    diffs = []
    for _ in range(6):
        z = rng.standard_normal((4, 4, 4, 2), dtype=np.float32)
        t = int(rng.integers(1, SCHED.T + 1))
        a = predict_noise_conditional(model, z, t, conditions[0])
        b = predict_noise_conditional(model, z, t, conditions[1])
        diffs.append(np.linalg.norm(a - b))
    assert np.mean(diffs) > 0


def test_unpaired_data_rejected():
    base = make_denoiser(DCFG)
    with pytest.raises(ValueError, match="unpaired"):
        train_controlnet(
            np.zeros((4, 4, 4, 4, 2), dtype=np.float32),
            np.zeros((3, 4, 4, 4, 2), dtype=np.float32),
            base,
            SCHED,
            TrainParams(steps=1),
        )


# --- condition encoders ----------------------------------------------------

@pytest.fixture(scope="module")
def small_vaes():
    torch.manual_seed(0)
    vol_vae = make_vae(AutoencoderConfig(in_channels=1, base_width=8, seed=0))
    label_vae = make_vae(AutoencoderConfig(in_channels=5, base_width=8, seed=1))
    label_vae.squash_output = False
    return vol_vae, label_vae


def test_real_condition_shape_and_determinism(small_vaes):
    _, label_vae = small_vaes
    _, label = generate_phantom(0, PhantomSpec(grid_shape=(16, 16, 8)))
    c1 = encode_condition_from_real(label, label_vae)
    c2 = encode_condition_from_real(label, label_vae)
    assert c1.shape == (4, 4, 4, 2)
    assert np.array_equal(c1, c2)
    assert np.all(np.isfinite(c1))


def test_real_conditions_distinguish_labels(small_vaes):
    _, label_vae = small_vaes
    spec = PhantomSpec(grid_shape=(16, 16, 8))
    c0 = encode_condition_from_real(generate_phantom(0, spec)[1], label_vae)
    c1 = encode_condition_from_real(generate_phantom(1, spec)[1], label_vae)
    assert np.abs(c0 - c1).max() > 0


def test_all_background_condition_finite(small_vaes):
    _, label_vae = small_vaes
    cond = encode_condition_from_real(np.zeros((16, 16, 8), dtype=np.uint8), label_vae)
    assert np.all(np.isfinite(cond))


def test_render_label_field_extremes():
    bg = label_to_continuous(np.zeros((4, 4, 2), dtype=np.uint8))
    assert render_label_field(bg).shape == (1, 4, 4, 2)
    assert np.allclose(render_label_field(bg), 0.0)
    tumor = label_to_continuous(np.full((4, 4, 2), 4, dtype=np.uint8))
    assert np.allclose(render_label_field(tumor), 1.0)


def test_condition_modes(small_vaes):
    vol_vae, _ = small_vaes
    rng = np.random.default_rng(3)
    field = rng.random((5, 16, 16, 8)).astype(np.float32)
    soft = condition_from_label_field(field, vol_vae, "continuous")
    hard = condition_from_label_field(field, vol_vae, "argmax")
    assert soft.shape == hard.shape == (4, 4, 4, 2)
    assert np.abs(soft - hard).max() > 0
    with pytest.raises(ValueError, match="mode"):
        condition_from_label_field(field, vol_vae, "soft")


def test_synthetic_condition_seeded(small_vaes):
    vol_vae, label_vae = small_vaes
    model = make_denoiser(DCFG)
    shape = (4, 4, 4, 2)
    kwargs = dict(
        label_model=model, label_vae=label_vae, vol_vae=vol_vae,
        schedule=SCHED, latent_shape=shape,
    )
    c1 = encode_condition_from_synthetic(5, **kwargs)
    c2 = encode_condition_from_synthetic(5, **kwargs)
    c3 = encode_condition_from_synthetic(6, **kwargs)
    assert c1.shape == shape
    assert np.array_equal(c1, c2)
    assert np.abs(c1 - c3).max() > 0
