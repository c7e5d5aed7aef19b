"""Noise schedules, conditioning embeddings, denoiser, and samplers."""

import numpy as np
import pytest

from triforge.diffusion import (
    COND_DROPOUT,
    DEFAULT_DDIM_STEPS,
    DEFAULT_GUIDANCE,
    EMBED_WIDTH,
    Denoiser,
    DenoiserConfig,
    DiffusionError,
    build_schedule,
    cfg_epsilon,
    ddim_sample,
    ddim_timesteps,
    ddpm_step,
    embed_caption,
    null_embedding,
    q_sample,
    train_ldm,
)


def test_schedule_identities():
    s = build_schedule(T=100)
    np.testing.assert_allclose(s.alphas, 1.0 - s.betas, atol=1e-12)
    np.testing.assert_allclose(s.alpha_bars, np.cumprod(s.alphas), atol=1e-12)
    prev = np.concatenate([[1.0], s.alpha_bars[:-1]])
    np.testing.assert_allclose(
        s.posterior_var, (1 - prev) / (1 - s.alpha_bars) * s.betas, atol=1e-12)


def test_snr_shift_exact():
    base = build_schedule(T=200)
    for shift in (0.5, 2.0, 4.0):
        shifted = build_schedule(T=200, shift=shift)
        t = np.arange(1, 201)
        np.testing.assert_allclose(shifted.snr(t) * shift**2, base.snr(t),
                                   rtol=1e-12)
    # identity at shift 1
    same = build_schedule(T=200, shift=1.0)
    np.testing.assert_array_equal(same.betas, base.betas)


def test_schedule_validation():
    with pytest.raises(DiffusionError):
        build_schedule(beta_start=0.5, beta_end=0.1)
    with pytest.raises(DiffusionError):
        build_schedule(shift=0.0)


def test_q_sample_endpoints_and_batch_t():
    s = build_schedule(T=1000)
    f0 = np.ones((2, 3, 4), np.float32)
    eps = np.zeros_like(f0)
    nearly = q_sample(f0, 1, eps, s)
    np.testing.assert_allclose(nearly, np.sqrt(s.alpha_bar(1)) * f0,
                               atol=1e-6)
    assert s.alpha_bar(1) > 0.999
    assert s.alpha_bar(1000) < 1e-3
    per_sample = q_sample(f0, np.array([1, 1000]), eps, s)
    assert per_sample[0].mean() > 0.99 and per_sample[1].mean() < 0.05
    with pytest.raises(DiffusionError):
        q_sample(f0, 0, eps, s)


def test_ddpm_step_inverts_single_forward_step():
    # with the exact noise, one reverse step at t=1 recovers f0
    s = build_schedule(T=10)
    rng = np.random.default_rng(0)
    f0 = rng.standard_normal((4, 4)).astype(np.float32)
    eps = rng.standard_normal((4, 4)).astype(np.float32)
    f1 = q_sample(f0, 1, eps, s)
    back = ddpm_step(f1, 1, eps, s)
    np.testing.assert_allclose(back, f0, atol=1e-5)


def test_cfg_epsilon_algebra():
    a = np.ones((2, 2), np.float32)
    b = np.zeros((2, 2), np.float32)
    np.testing.assert_array_equal(cfg_epsilon(a, b, 1.0), a)
    np.testing.assert_array_equal(cfg_epsilon(a, b, 0.0), b)
    np.testing.assert_array_equal(cfg_epsilon(a, b, 7.5), 7.5 * a)


def test_embed_caption_properties():
    e = embed_caption("a red sphere")
    assert e.vector.shape == (EMBED_WIDTH,)
    assert not e.is_null
    np.testing.assert_allclose(np.linalg.norm(e.vector), 1.0, atol=1e-6)
    np.testing.assert_array_equal(e.vector, embed_caption("A Red Sphere!").vector)
    assert embed_caption("").is_null
    assert null_embedding().is_null
    sim = float(e.vector @ embed_caption("a blue torus").vector)
    assert sim < 0.9  # distinct captions stay distinguishable


def test_ddim_timesteps_subsequence():
    taus = ddim_timesteps(1000, 50)
    assert taus[0] == 1 and taus[-1] == 1000
    assert np.all(np.diff(taus) > 0)
    np.testing.assert_array_equal(ddim_timesteps(10, 10), np.arange(1, 11))


def test_denoiser_zero_init_and_loss_scale():
    cfg = DenoiserConfig(channels=4, height=8, width=24, base=8, emb_dim=16,
                         T=50)
    model = Denoiser(cfg)
    x = np.random.default_rng(0).standard_normal((4, 8, 24)).astype(np.float32)
    pred = model.epsilon(x, 10, embed_caption("hello"))
    np.testing.assert_array_equal(pred, np.zeros_like(pred))  # zero-init head


def test_denoiser_save_load_roundtrip(tmp_path):
    cfg = DenoiserConfig(channels=4, height=8, width=24, base=8, emb_dim=16,
                         T=50)
    schedule = build_schedule(T=50)
    rng = np.random.default_rng(1)
    model = Denoiser(cfg)
    for p in model.params():
        p.data = rng.standard_normal(p.shape).astype(np.float32) * 0.05
    model.save(tmp_path / "den", schedule)
    back, sched = Denoiser.load(tmp_path / "den")
    assert sched.T == 50
    x = rng.standard_normal((4, 8, 24)).astype(np.float32)
    np.testing.assert_array_equal(back.epsilon(x, 5), model.epsilon(x, 5))


def test_train_ldm_and_ddim_determinism():
    rng = np.random.default_rng(2)
    latents = [rng.standard_normal((4, 8, 24)).astype(np.float32)
               for _ in range(2)]
    schedule = build_schedule(T=50)
    cfg = DenoiserConfig(channels=4, height=8, width=24, base=8, emb_dim=16,
                         T=50)
    model, history = train_ldm(latents, ["a", "b"], schedule, steps=40,
                               batch=2, model_cfg=cfg, seed=0)
    assert history[0] == pytest.approx(1.0, abs=0.15)  # eps-pred at zero init
    e = embed_caption("a")
    x1 = ddim_sample(model, e, schedule, n_steps=10, seed=7)
    x2 = ddim_sample(model, e, schedule, n_steps=10, seed=7)
    np.testing.assert_array_equal(x1, x2)
    x3 = ddim_sample(model, e, schedule, n_steps=10, seed=8)
    assert not np.array_equal(x1, x3)


def test_defaults_match_documented_values():
    assert DEFAULT_GUIDANCE == 7.5
    assert DEFAULT_DDIM_STEPS == 200
    assert COND_DROPOUT == 0.10
    s = build_schedule()
    assert s.T == 1000
    assert s.betas[0] == pytest.approx(1e-4)
    assert s.betas[-1] == pytest.approx(2e-2)
