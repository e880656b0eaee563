from dataclasses import replace

import numpy as np
import pytest

from core.conditioning import ConditioningPair, Latent
from core.diffusion import (
    MLPDenoiser,
    add_noise,
    deterministic_decode,
    gaussian_ddim_trajectory,
    gaussian_sampler_moments,
    load_model,
    make_rng,
    make_schedule,
    oracle_gaussian_denoiser,
    oracle_mixture_denoiser,
    sample,
    sample_batch,
    sample_saved,
    sample_trajectory,
    save_model,
    time_embedding,
    training_loss,
)
from core.errors import ConfigError

LATENT = (1, 1, 4)
MU = np.array([1.5, -2.0, 2.5, 3.0]).reshape(LATENT)
VAR = np.array([0.25, 0.5, 1.0, 0.75]).reshape(LATENT)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule(1000, 1e-4, 0.02, 10)


@pytest.fixture
def cond():
    return ConditioningPair(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))


def two_modes(a=1.0, b=2.0):
    return np.stack([np.full(LATENT, a), np.full(LATENT, b)])


# -------------------------------------------------------------------
# Schedule and forward process
# -------------------------------------------------------------------
def test_schedule_is_variance_preserving(schedule):
    np.testing.assert_allclose(schedule.alphas ** 2 + schedule.sigmas ** 2, 1.0, atol=1e-12)
    assert np.all(np.diff(schedule.alphas) < 0)
    assert schedule.steps_train == 1000
    assert schedule.alphas[-1] < 0.01


def test_inference_indices_run_from_last_step_to_zero(schedule):
    idx = schedule.indices(10)
    assert len(idx) == 10
    assert idx[0] == 999 and idx[-1] == 0
    assert np.all(np.diff(idx) < 0)
    assert schedule.indices(1).tolist() == [999]
    with pytest.raises(ConfigError):
        schedule.indices(0)
    with pytest.raises(ConfigError):
        schedule.indices(1001)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02, 1), (100, 0.02, 1e-4, 10), (100, 1e-4, 1.0, 10), (10, 1e-4, 0.02, 20)])
def test_invalid_schedules_are_rejected(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_add_noise_mixes_signal_and_noise(schedule):
    z = np.ones(LATENT)
    eps = np.full(LATENT, 2.0)
    out = add_noise(z, eps, 500, schedule)
    np.testing.assert_allclose(out, schedule.alphas[500] + 2.0 * schedule.sigmas[500])
    with pytest.raises(ConfigError):
        add_noise(z, eps, 1000, schedule)
    with pytest.raises(ConfigError):
        add_noise(z, np.ones((2, 2, 4)), 5, schedule)
    lat = add_noise(Latent(np.zeros((1, 1, 4)), (8, 8)), eps, 0, schedule)
    assert isinstance(lat, Latent)


def test_oracle_beats_a_zero_predictor(schedule, cond):
    rng = make_rng(0)
    z = MU + np.sqrt(VAR) * rng.standard_normal((512,) + LATENT)
    eps = rng.standard_normal(z.shape)
    oracle = oracle_gaussian_denoiser(MU, VAR, schedule)
    zero = lambda z_i, c, i: np.zeros_like(z_i)  # noqa: E731
    assert training_loss(oracle, z, cond, 700, eps) < training_loss(zero, z, cond, 700, eps, schedule)


# -------------------------------------------------------------------
# Sampling
# -------------------------------------------------------------------
def test_sampling_is_deterministic_per_seed(schedule, cond):
    den = oracle_gaussian_denoiser(MU, VAR, schedule)
    for sampler in ("ddim", "ddpm"):
        a = sample(den, cond, schedule, 42, LATENT, sampler=sampler)
        b = sample(den, cond, schedule, 42, LATENT, sampler=sampler)
        c = sample(den, cond, schedule, 43, LATENT, sampler=sampler)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)
    assert a.source_resolution == (8, 8)


def test_batch_sampling_matches_single_seeds(schedule, cond):
    den = oracle_gaussian_denoiser(MU, VAR, schedule)
    batch = sample_batch(den, cond, schedule, [3, 4, 5], LATENT, sampler="ddpm")
    for k, seed in enumerate([3, 4, 5]):
        np.testing.assert_allclose(batch[k], sample(den, cond, schedule, seed, LATENT, sampler="ddpm").data,
                                   atol=1e-12)


def test_ten_step_ddim_matches_its_analytic_moments(schedule, cond):
    den = oracle_gaussian_denoiser(MU, VAR, schedule)
    n = 10000
    z = sample_batch(den, cond, schedule, range(n), LATENT, inference_steps=10)
    mean, var = gaussian_sampler_moments(MU, VAR, schedule, 10)
    assert np.all(np.abs(z.mean(axis=0) - mean) < 5 * np.sqrt(var / n) + 1e-9)
    np.testing.assert_allclose(z.var(axis=0), var, rtol=0.06)


def test_thousand_step_ddim_recovers_the_data_distribution(schedule):
    mean, var = gaussian_sampler_moments(MU, VAR, schedule, 1000)
    np.testing.assert_allclose(mean, MU, atol=0.03)
    assert np.all(np.abs(var - VAR) / VAR < 0.05)


def test_thousand_step_ddpm_recovers_the_data_distribution(schedule, cond):
    den = oracle_gaussian_denoiser(MU, VAR, schedule)
    n = 4000
    z = sample_batch(den, cond, schedule, range(n), LATENT, inference_steps=1000, sampler="ddpm")
    assert np.all(np.abs(z.mean(axis=0) - MU) < 5 * np.sqrt(VAR / n) + 0.03)
    np.testing.assert_allclose(z.var(axis=0), VAR, rtol=0.1)


def test_trajectory_follows_the_analytic_recursion(schedule, cond):
    den = oracle_gaussian_denoiser(MU, VAR, schedule)
    traj = sample_trajectory(den, cond, schedule, 7, LATENT, inference_steps=10)
    assert len(traj) == 11
    analytic = gaussian_ddim_trajectory(traj[0], MU, VAR, schedule, 10)
    for got, want in zip(traj, analytic):
        np.testing.assert_allclose(got, want, atol=1e-9)
    np.testing.assert_allclose(traj[-1], sample(den, cond, schedule, 7, LATENT).data, atol=1e-12)


def test_unknown_sampler_is_rejected(schedule, cond):
    with pytest.raises(ConfigError):
        sample(oracle_gaussian_denoiser(MU, VAR, schedule), cond, schedule, 0, LATENT, sampler="euler")


# -------------------------------------------------------------------
# Mixture oracle
# -------------------------------------------------------------------
def context_weights(c):
    return np.array([0.9, 0.1]) if np.mean(c.context) < 0.5 else np.array([0.1, 0.9])


def test_samples_land_on_a_mode_rather_than_between(schedule, cond):
    den = oracle_mixture_denoiser(two_modes(), 1e-4, schedule=schedule)
    z = sample_batch(den, cond, schedule, range(1000), LATENT, inference_steps=100).reshape(1000, -1)
    per_sample = z.mean(axis=1)
    nearest = np.where(per_sample < 1.5, 1.0, 2.0)
    assert (np.abs(per_sample - nearest) < 0.1).mean() >= 0.98
    frac_low = (per_sample < 1.5).mean()
    assert 0.4 < frac_low < 0.6


def test_conditioning_shifts_mode_frequencies(schedule):
    den = oracle_mixture_denoiser(two_modes(), 1e-4, weight_fn=context_weights, schedule=schedule)
    fractions = []
    for value in (0.0, 1.0):
        c = ConditioningPair(np.full((1, 1, 1), value), np.zeros((1, 1, 1)))
        z = sample_batch(den, c, schedule, range(2000), LATENT, inference_steps=1000, sampler="ddpm")
        fractions.append((z.reshape(2000, -1).mean(axis=1) < 1.5).mean())
    assert fractions[0] > 0.8
    assert fractions[1] < 0.2


def test_frozen_noise_with_new_context_changes_the_sample(schedule):
    den = oracle_mixture_denoiser(two_modes(), 1e-4, weight_fn=context_weights, schedule=schedule)
    outs = []
    for value in (0.0, 1.0):
        c = ConditioningPair(np.full((1, 1, 1), value), np.zeros((1, 1, 1)))
        outs.append(sample_batch(den, c, schedule, range(500), LATENT, inference_steps=100).reshape(500, -1))
    switched = (outs[0].mean(axis=1) < 1.5) != (outs[1].mean(axis=1) < 1.5)
    assert switched.mean() > 0.5


def test_mixture_oracle_rejects_bad_variances(schedule):
    with pytest.raises(ConfigError):
        oracle_mixture_denoiser(two_modes(), 0.0, schedule=schedule)
    with pytest.raises(ConfigError):
        oracle_gaussian_denoiser(MU, -VAR, schedule)


# -------------------------------------------------------------------
# Network
# -------------------------------------------------------------------
def numeric_gradient_check(model, z, cond, i, target, h=1e-4, picks=6, seed=0):
    pred, cache = model.forward(z, cond, i)
    _, grads = model.backward(cache, pred, target)
    rng = np.random.default_rng(seed)
    for name, analytic in grads.arrays().items():
        for flat in rng.choice(analytic.size, size=min(picks, analytic.size), replace=False):
            idx = np.unravel_index(flat, analytic.shape)
            losses = []
            for step in (h, -h):
                params = model.params.copy()
                getattr(params, name)[idx] += step
                perturbed = replace(model, params=params)
                p, c = perturbed.forward(z, cond, i)
                losses.append(perturbed.backward(c, p, target)[0])
            numeric = (losses[0] - losses[1]) / (2 * h)
            assert abs(analytic[idx] - numeric) <= 1e-4 * max(abs(analytic[idx]), abs(numeric), 1e-3)


@pytest.mark.parametrize("pointwise", [False, True])
def test_denoiser_gradients_match_finite_differences(schedule, pointwise):
    rng = np.random.default_rng(1)
    model = MLPDenoiser.create((2, 3, 4), 2, 3, hidden=7, embed_dim=4, pointwise=pointwise, schedule=schedule, seed=2)
    model.params.w2[:] = rng.normal(size=model.params.w2.shape)
    cond = ConditioningPair(rng.normal(size=(5, 2, 3, 2)), rng.normal(size=(5, 2, 3, 3)))
    z = rng.normal(size=(5, 2, 3, 4))
    numeric_gradient_check(model, z, cond, rng.integers(0, 1000, size=5), rng.normal(size=z.shape))


def test_decoder_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    model = MLPDenoiser.create((2, 2, 4), 3, 4, hidden=6, noise_input=False, seed=5)
    model.params.w2[:] = rng.normal(size=model.params.w2.shape)
    cond = ConditioningPair(rng.normal(size=(4, 2, 2, 3)), rng.normal(size=(4, 2, 2, 4)))
    numeric_gradient_check(model, None, cond, None, rng.normal(size=(4, 2, 2, 4)))


def test_pointwise_model_accepts_any_spatial_size(schedule):
    model = MLPDenoiser.create((2, 2, 4), 1, 4, hidden=5, pointwise=True, schedule=schedule)
    wide = replace(model, latent_shape=(3, 5, 4))
    cond = ConditioningPair(np.zeros((3, 5, 1)), np.zeros((3, 5, 4)))
    assert wide(np.zeros((3, 5, 4)), cond, 10).shape == (3, 5, 4)


def test_time_embedding_shape_and_range():
    emb = time_embedding(np.array([0, 10, 999]), 16)
    assert emb.shape == (3, 16)
    assert np.abs(emb).max() <= 1.0
    np.testing.assert_allclose(emb[0, 8:], 1.0)


def test_deterministic_decode_needs_a_decoder(schedule):
    decoder = MLPDenoiser.create((2, 2, 4), 1, 4, hidden=5, noise_input=False)
    cond = ConditioningPair(np.zeros((2, 2, 1)), np.zeros((2, 2, 4)))
    out = deterministic_decode(cond, decoder)
    assert isinstance(out, Latent)
    assert out.source_resolution == (16, 16)
    denoiser = MLPDenoiser.create((2, 2, 4), 1, 4, hidden=5, schedule=schedule)
    with pytest.raises(ConfigError):
        deterministic_decode(cond, denoiser)


def test_saved_parameters_reproduce_samples(tmp_path, schedule):
    model = MLPDenoiser.create((2, 2, 4), 1, 4, hidden=5, pointwise=True, schedule=schedule, seed=3)
    save_model(tmp_path / "den.cft", model, {"steps_train": 1000, "beta_start": 1e-4, "beta_end": 0.02})
    loaded = load_model(tmp_path / "den.cft", schedule)
    assert loaded.meta() == model.meta()
    cond = ConditioningPair(np.full((2, 2, 1), 0.3), np.zeros((2, 2, 4)))
    z = np.random.default_rng(0).normal(size=(2, 2, 4))
    np.testing.assert_allclose(loaded(z, cond, 100), model(z, cond, 100), atol=1e-5)

    direct = sample(loaded, cond, schedule, 9, (2, 2, 4), inference_steps=10)
    from_file = sample_saved(tmp_path / "den.cft", cond, 9, inference_steps=10)
    np.testing.assert_allclose(from_file.data, direct.data, atol=1e-12)

    wide = ConditioningPair(np.zeros((3, 4, 1)), np.zeros((3, 4, 4)))
    assert sample_saved(tmp_path / "den.cft", wide, 0, inference_steps=5).shape == (3, 4, 4)
