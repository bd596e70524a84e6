from __future__ import annotations

import numpy as np
import pytest

from clipchain.denoiser import GaussianWorld, GaussianWorldDenoiser
from clipchain.errors import ConfigError, NumericError
from clipchain.sampler import (
    SamplerConfig,
    ddim_step,
    guided_noise,
    inference_timesteps,
    load_trajectory,
    sample_clip,
    save_trajectory,
)
from clipchain.schedule import build_schedule, q_sample

SHAPE = (4, 1, 6, 6)


def _analytic(schedule, mu=0.5, s=0.1, shape=SHAPE):
    return GaussianWorldDenoiser(GaussianWorld(mu=mu, s=s), schedule, latent_shape=shape)


def test_inference_timesteps_endpoints_and_order() -> None:
    ts = inference_timesteps(1000, 50)
    assert ts[0] == 999
    assert ts[-1] == 0
    assert len(ts) == 50
    assert np.all(np.diff(ts) < 0)


def test_inference_timesteps_degenerate_and_invalid() -> None:
    assert list(inference_timesteps(100, 1)) == [99]
    assert list(inference_timesteps(100, 100)) == list(range(99, -1, -1))
    with pytest.raises(ConfigError):
        inference_timesteps(100, 101)
    with pytest.raises(ConfigError):
        inference_timesteps(100, 0)


def test_guided_noise_identities_are_exact() -> None:
    rng = np.random.default_rng(0)
    e_u = rng.standard_normal(SHAPE).astype(np.float32)
    e_c = rng.standard_normal(SHAPE).astype(np.float32)
    np.testing.assert_array_equal(guided_noise(e_u, e_c, 1.0), e_c)
    np.testing.assert_array_equal(guided_noise(e_u, e_c, 0.0), e_u)


def test_guided_noise_scalar_arithmetic() -> None:
    e_u = np.array([0.1], dtype=np.float64)
    e_c = np.array([0.2], dtype=np.float64)
    np.testing.assert_allclose(guided_noise(e_u, e_c, 10.0), [1.1], rtol=1e-12)


def test_guided_noise_affine_in_w() -> None:
    rng = np.random.default_rng(1)
    e_u = rng.standard_normal(SHAPE).astype(np.float32)
    e_c = rng.standard_normal(SHAPE).astype(np.float32)
    for w in (0.5, 2.0, 7.5):
        expected = e_u + w * (e_c - e_u)
        np.testing.assert_allclose(guided_noise(e_u, e_c, w), expected, rtol=1e-6)
    # Identical branches collapse for any w.
    np.testing.assert_allclose(guided_noise(e_c, e_c, 11.0), e_c, rtol=1e-6)


def test_guided_noise_shape_mismatch() -> None:
    with pytest.raises(ConfigError):
        guided_noise(np.zeros((2, 2)), np.zeros((3, 2)), 2.0)


def test_ddim_step_inverts_q_sample() -> None:
    sched = build_schedule("linear", 100)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal(SHAPE).astype(np.float32)
    eps = rng.standard_normal(SHAPE).astype(np.float32)
    t = 80
    z_t = q_sample(sched, x0, t, eps)
    # With the true noise as the prediction, stepping to the terminal
    # recovers x0 exactly up to float precision.
    recovered = ddim_step(sched, z_t, eps, t, None)
    np.testing.assert_allclose(recovered, x0, atol=1e-5)


def test_ddim_step_intermediate_matches_marginal_form() -> None:
    sched = build_schedule("linear", 100)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal(SHAPE).astype(np.float32)
    eps = rng.standard_normal(SHAPE).astype(np.float32)
    t, t_prev = 70, 30
    z_t = q_sample(sched, x0, t, eps)
    out = ddim_step(sched, z_t, eps, t, t_prev)
    np.testing.assert_allclose(out, q_sample(sched, x0, t_prev, eps), atol=1e-5)


def test_ddim_step_rejects_bad_timesteps() -> None:
    sched = build_schedule("linear", 100)
    z = np.zeros(SHAPE, dtype=np.float32)
    with pytest.raises(ConfigError):
        ddim_step(sched, z, z, 10, 10)
    with pytest.raises(ConfigError):
        ddim_step(sched, z, z, 10, 20)


def test_eta_not_supported() -> None:
    with pytest.raises(ConfigError):
        SamplerConfig(eta=0.5)


def test_signal_range_validation_and_describe() -> None:
    assert SamplerConfig().signal_range is None
    assert SamplerConfig().describe()["signal_range"] is None
    assert SamplerConfig(signal_range=2.5).describe()["signal_range"] == 2.5
    for bad in (0.0, -1.0, float("inf"), float("nan")):
        with pytest.raises(ConfigError):
            SamplerConfig(signal_range=bad)


def test_ddim_step_signal_range_clamps_clean_estimate() -> None:
    sched = build_schedule("linear", 100)
    rng = np.random.default_rng(7)
    z_t = (10.0 * rng.standard_normal(SHAPE)).astype(np.float32)
    eps = rng.standard_normal(SHAPE).astype(np.float32)
    t, t_prev, r = 90, 40, 1.0
    ab_t = float(sched.alpha_bar[t])
    sb_t = float(np.sqrt(1.0 - ab_t * ab_t))
    x0_clamped = np.clip((z_t - sb_t * eps) / ab_t, -r, r)
    assert np.any(np.abs((z_t - sb_t * eps) / ab_t) > r), "inputs must exercise the clamp"
    ab_p = float(sched.alpha_bar[t_prev])
    sb_p = float(np.sqrt(1.0 - ab_p * ab_p))
    expected = (ab_p * x0_clamped + sb_p * eps).astype(np.float32)
    out = ddim_step(sched, z_t, eps, t, t_prev, signal_range=r)
    np.testing.assert_array_equal(out, expected)
    terminal = ddim_step(sched, z_t, eps, t, None, signal_range=r)
    np.testing.assert_array_equal(terminal, x0_clamped.astype(np.float32))


def test_signal_range_non_binding_leaves_samples_unchanged() -> None:
    sched = build_schedule("cosine", 200)
    model = _analytic(sched)
    noise = np.random.default_rng(8).standard_normal(SHAPE).astype(np.float32)
    plain = SamplerConfig(num_inference_steps=12, guidance_scale=1.0)
    loose = SamplerConfig(num_inference_steps=12, guidance_scale=1.0, signal_range=1e6)
    clip_a, _ = sample_clip(model, sched, None, noise, plain)
    clip_b, _ = sample_clip(model, sched, None, noise, loose)
    np.testing.assert_array_equal(clip_a.latents, clip_b.latents)


def test_signal_range_bounds_final_output() -> None:
    class ZeroNoiseModel:
        cond_dim = 1

        def predict_noise(self, z, t, cond):
            return np.zeros_like(z)

    sched = build_schedule("cosine", 200)
    noise = (50.0 * np.random.default_rng(9).standard_normal(SHAPE)).astype(np.float32)
    cfg = SamplerConfig(num_inference_steps=8, guidance_scale=1.0, signal_range=1.0)
    clip, _ = sample_clip(ZeroNoiseModel(), sched, None, noise, cfg)
    assert np.all(np.abs(clip.latents) <= 1.0)
    unclamped_cfg = SamplerConfig(num_inference_steps=8, guidance_scale=1.0)
    unclamped, _ = sample_clip(ZeroNoiseModel(), sched, None, noise, unclamped_cfg)
    assert np.abs(unclamped.latents).max() > 1.0


def test_sample_clip_is_bitwise_deterministic() -> None:
    sched = build_schedule("cosine", 200)
    model = _analytic(sched)
    noise = np.random.default_rng(4).standard_normal(SHAPE).astype(np.float32)
    cfg = SamplerConfig(num_inference_steps=10, guidance_scale=1.0)
    clip_a, traj_a = sample_clip(model, sched, None, noise, cfg)
    clip_b, traj_b = sample_clip(model, sched, None, noise, cfg)
    np.testing.assert_array_equal(clip_a.latents, clip_b.latents)
    for t in traj_a.timesteps:
        np.testing.assert_array_equal(traj_a.steps[t], traj_b.steps[t])


def test_trajectory_records_every_visited_timestep() -> None:
    sched = build_schedule("cosine", 200)
    model = _analytic(sched)
    noise = np.random.default_rng(5).standard_normal(SHAPE).astype(np.float32)
    cfg = SamplerConfig(num_inference_steps=13, guidance_scale=1.0)
    _, traj = sample_clip(model, sched, None, noise, cfg)
    ts = inference_timesteps(200, 13)
    assert traj.timesteps == tuple(int(t) for t in ts)
    assert sorted(traj.steps) == sorted(int(t) for t in ts)
    np.testing.assert_array_equal(traj.steps[int(ts[0])], noise)
    assert traj.final is not None


def test_record_trajectory_off_returns_none() -> None:
    sched = build_schedule("cosine", 100)
    model = _analytic(sched)
    noise = np.random.default_rng(6).standard_normal(SHAPE).astype(np.float32)
    cfg = SamplerConfig(num_inference_steps=5, guidance_scale=1.0, record_trajectory=False)
    clip, traj = sample_clip(model, sched, None, noise, cfg)
    assert traj is None
    assert clip.latents.shape == SHAPE


def test_total_override_reproduces_reference_trajectory() -> None:
    sched = build_schedule("cosine", 100)
    model = _analytic(sched)
    noise = np.random.default_rng(7).standard_normal(SHAPE).astype(np.float32)
    cfg = SamplerConfig(num_inference_steps=8, guidance_scale=1.0)
    _, ref = sample_clip(model, sched, None, noise, cfg)
    ts = list(ref.timesteps)
    override = {}
    for k, t in enumerate(ts):
        for j in range(SHAPE[0]):
            if k + 1 < len(ts):
                override[(t, j)] = ref.steps[ts[k + 1]][j]
            else:
                override[(t, j)] = ref.final[j]
    fresh = np.random.default_rng(8).standard_normal(SHAPE).astype(np.float32)
    clip, _ = sample_clip(model, sched, None, fresh, cfg, override=override)
    np.testing.assert_array_equal(clip.latents, ref.final)


def test_partial_override_pins_then_releases_one_frame() -> None:
    sched = build_schedule("cosine", 1000)
    model = _analytic(sched)
    rng = np.random.default_rng(9)
    noise = rng.standard_normal(SHAPE).astype(np.float32)
    cfg = SamplerConfig(num_inference_steps=50, guidance_scale=1.0)
    _, ref = sample_clip(model, sched, None, noise, cfg)
    ts = list(ref.timesteps)
    injected = {
        ts[k]: rng.standard_normal(SHAPE[1:]).astype(np.float32) for k in range(20)
    }
    override = {(t, 0): v for t, v in injected.items()}
    _, traj = sample_clip(model, sched, None, noise, cfg, override=override)
    # The replacement consuming timestep ts[k] lands in the lattice entry
    # stored at the next visited timestep.
    for k in range(20):
        np.testing.assert_array_equal(traj.steps[ts[k + 1]][0], injected[ts[k]])
    # Uninjected frames never see the override.
    for t in ts:
        np.testing.assert_array_equal(traj.steps[t][1:], ref.steps[t][1:])
    # After the injection window the pinned frame evolves freely again and
    # diverges from the reference run.
    assert not np.allclose(traj.final[0], ref.final[0])


def test_override_validation() -> None:
    sched = build_schedule("cosine", 100)
    model = _analytic(sched)
    noise = np.zeros(SHAPE, dtype=np.float32)
    cfg = SamplerConfig(num_inference_steps=5, guidance_scale=1.0)
    frame = np.zeros(SHAPE[1:], dtype=np.float32)
    with pytest.raises(ConfigError):
        sample_clip(model, sched, None, noise, cfg, override={(57, 0): frame})
    ts = inference_timesteps(100, 5)
    with pytest.raises(ConfigError):
        sample_clip(model, sched, None, noise, cfg, override={(int(ts[0]), 9): frame})
    with pytest.raises(ConfigError):
        sample_clip(
            model, sched, None, noise, cfg,
            override={(int(ts[0]), 0): np.zeros((1, 2, 2), np.float32)},
        )


def test_non_finite_latent_raises_numeric_error() -> None:
    sched = build_schedule("cosine", 100)

    class _NanModel:
        latent_shape = SHAPE
        num_timesteps = 100
        cond_dim = 0

        def predict_noise(self, z_t, t, cond=None, enable_temporal=True):
            return np.full_like(z_t, np.nan)

    noise = np.zeros(SHAPE, dtype=np.float32)
    cfg = SamplerConfig(num_inference_steps=5, guidance_scale=1.0)
    with pytest.raises(NumericError):
        sample_clip(_NanModel(), sched, None, noise, cfg)


def test_step_count_refinement_improves_moments() -> None:
    for profile in ("linear", "cosine"):
        sched = build_schedule(profile, 1000)
        model = _analytic(sched, shape=(1, 1, 128, 128))
        rng = np.random.default_rng(42)
        errors = []
        for steps in (5, 10, 25, 50):
            noise = rng.standard_normal((1, 1, 128, 128), dtype=np.float32)
            cfg = SamplerConfig(
                num_inference_steps=steps, guidance_scale=1.0, record_trajectory=False
            )
            clip, _ = sample_clip(model, sched, None, noise, cfg)
            errors.append(
                abs(float(clip.latents.mean()) - 0.5)
                + abs(float(clip.latents.std()) - 0.1)
            )
        for coarse, fine in zip(errors, errors[1:]):
            assert fine <= coarse + 1e-3


def test_trajectory_round_trip(tmp_path) -> None:
    sched = build_schedule("cosine", 100)
    model = _analytic(sched)
    noise = np.random.default_rng(10).standard_normal(SHAPE).astype(np.float32)
    cfg = SamplerConfig(num_inference_steps=6, guidance_scale=1.0)
    _, traj = sample_clip(model, sched, None, noise, cfg, clip_index=3)
    path = str(tmp_path / "traj.npz")
    save_trajectory(path, traj)
    loaded = load_trajectory(path)
    assert loaded.clip_index == 3
    assert loaded.timesteps == traj.timesteps
    assert loaded.config_hash == traj.config_hash
    for t in traj.timesteps:
        np.testing.assert_array_equal(loaded.steps[t], traj.steps[t])
    np.testing.assert_array_equal(loaded.final, traj.final)
