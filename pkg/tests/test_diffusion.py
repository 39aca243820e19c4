"""Tests for the noise schedule, reverse-step math, sampling and pretraining."""

import math

import numpy as np
import pytest
import torch

from pyphantomrl.diffusion import (
    Denoiser,
    batch_logprob,
    build_generator,
    denoise_mean,
    forward_noise,
    make_schedule,
    pretrain_generator,
    pretrain_step,
    sample_trajectory,
    sinusoidal_embedding,
    transition_logprob,
)
from pyphantomrl.exceptions import ShapeMismatchError
from pyphantomrl.numcore import AdamOptimizer, as_image_batch, gaussian_sample, rng_stream
from pyphantomrl.phantom import images_of
from pyphantomrl.textcond import batch_conditions, tokenize


def _streams(n: int, label: str = "sample"):
    return [rng_stream(0, f"{label}/{i}") for i in range(n)]


def test_schedule_cumulative_products():
    """beta=(0.1, 0.2) gives abar=(0.9, 0.72) and sigma^2=beta."""
    sched = make_schedule(2, 0.1, 0.2)
    assert np.allclose(sched.alpha_bars, [0.9, 0.72])
    assert np.allclose(sched.sigmas**2, [0.1, 0.2])


def test_schedule_is_decreasing():
    sched = make_schedule(50, 0.002, 0.4)
    assert np.all(np.diff(sched.alpha_bars) < 0)


def test_schedule_rejects_bad_bounds():
    with pytest.raises(ValueError):
        make_schedule(0, 0.1, 0.2)
    with pytest.raises(ValueError):
        make_schedule(5, 0.3, 0.2)
    with pytest.raises(ValueError):
        make_schedule(5, 0.1, 1.0)


def test_schedule_rejects_out_of_range_t():
    sched = make_schedule(2, 0.1, 0.2)
    with pytest.raises(ValueError):
        sched.beta(3, torch.zeros(1))


def test_forward_noise_scalar(float64):
    """x0=1, eps=0, abar=0.81 gives x_t=0.9."""
    sched = make_schedule(1, 0.19, 0.19)
    x_t = forward_noise(torch.ones(1), 1, torch.zeros(1), sched)
    assert x_t.item() == pytest.approx(0.9)


def test_forward_noise_pure_noise_norm(float64):
    sched = make_schedule(1, 0.19, 0.19)
    eps = torch.tensor([0.6, 0.8])
    x_t = forward_noise(torch.zeros(2), 1, eps, sched)
    assert torch.linalg.vector_norm(x_t).item() == pytest.approx(math.sqrt(0.19))


def test_forward_noise_near_zero_noise(float64):
    sched = make_schedule(1, 1e-8, 1e-8)
    x0 = torch.tensor([0.3, 0.7])
    assert torch.allclose(forward_noise(x0, 1, torch.ones(2), sched), x0, atol=1e-3)


def test_forward_noise_marginal_moments(float64):
    """Over 10^4 draws x_t has mean sqrt(abar) x0 and variance 1 - abar."""
    n = 10_000
    sched = make_schedule(10, 0.05, 0.2)
    abar = float(sched.alpha_bars[4])
    x0 = torch.full((n,), 0.7)
    x_t = forward_noise(x0, 5, gaussian_sample(rng_stream(0, "marginal"), (n,)), sched)
    mean_se = math.sqrt((1.0 - abar) / n)
    var_se = (1.0 - abar) * math.sqrt(2.0 / n)
    assert abs(float(x_t.mean()) - math.sqrt(abar) * 0.7) < 4 * mean_se
    assert abs(float(x_t.var()) - (1.0 - abar)) < 4 * var_se


def test_denoise_mean_zero_noise(float64):
    sched = make_schedule(2, 0.1, 0.2)
    x_t = torch.tensor([0.5, -1.0])
    mu = denoise_mean(x_t, torch.zeros(2), 2, sched)
    assert torch.allclose(mu, x_t / math.sqrt(0.8))
    assert mu.shape == x_t.shape


def test_denoise_mean_hand_value(float64):
    """t=2, x_t=1, eps_hat=1 gives (1 - 0.2/sqrt(0.28))/sqrt(0.8)."""
    sched = make_schedule(2, 0.1, 0.2)
    mu = denoise_mean(torch.ones(1), torch.ones(1), 2, sched)
    assert mu.item() == pytest.approx(0.6955, abs=1e-4)


def test_transition_logprob_values(float64):
    assert transition_logprob(torch.zeros(1), torch.zeros(1), 1.0).item() == pytest.approx(-0.918939, abs=1e-6)
    d, sigma = 6, 0.5
    expected = -(d / 2) * math.log(2 * math.pi * sigma**2)
    assert transition_logprob(torch.ones(d), torch.ones(d), sigma).item() == pytest.approx(expected)


def test_transition_logprob_unimodal(float64):
    mu = torch.zeros(3)
    far = transition_logprob(torch.full((3,), 2.0), mu, 1.0)
    near = transition_logprob(torch.full((3,), 1.0), mu, 1.0)
    assert near > far


def test_transition_logprob_rejects_zero_sigma():
    with pytest.raises(ValueError):
        transition_logprob(torch.zeros(2), torch.zeros(2), 0.0)


def test_batch_logprob_per_item(float64):
    x = torch.zeros(2, 1, 2, 2)
    mu = torch.stack([torch.zeros(1, 2, 2), torch.ones(1, 2, 2)])
    values = batch_logprob(x, mu, 1.0)
    assert values.shape == (2,)
    assert values[0] > values[1]


def test_sinusoidal_embedding_shape():
    emb = sinusoidal_embedding(torch.tensor([1, 5, 10]), 16)
    assert emb.shape == (3, 16)
    assert emb.abs().max() <= 1.0


def test_denoiser_shapes(tiny_generator):
    denoiser = tiny_generator.denoiser
    cond, mask = batch_conditions([[2, 3, 18], [11, 12]], tiny_generator.encoder)
    x = torch.zeros(2, 1, 16, 16)
    out = denoiser(x, torch.tensor([1, 2]), cond, mask)
    assert out.shape == x.shape
    with pytest.raises(ShapeMismatchError):
        denoiser(x, torch.tensor([1, 2]), torch.zeros(2, 3, 5))


def test_denoiser_needs_patch_multiple():
    with pytest.raises(ValueError):
        Denoiser(image_size=12)


def test_denoiser_attends_to_ace_rows(tiny_generator):
    """Changing one ACE row changes the predicted noise."""
    from pyphantomrl.textcond import init_ace

    ace = init_ace(2, 8, rng_stream(0, "ace"))
    tokens = [[2, 3, 18]]
    x = gaussian_sample(rng_stream(0, "ace/x"), (1, 1, 16, 16))
    t = torch.tensor([2])
    with torch.no_grad():
        cond, mask = batch_conditions(tokens, tiny_generator.encoder, ace.weight)
        before = tiny_generator.denoiser(x, t, cond, mask)
        bumped = ace.weight.clone()
        bumped[0] += 1.0
        cond, mask = batch_conditions(tokens, tiny_generator.encoder, bumped)
        after = tiny_generator.denoiser(x, t, cond, mask)
    assert float((after - before).abs().max()) > 0.0


def test_trajectory_shapes(tiny_generator, tiny_schedule):
    """T+1 states, one mean and log-prob per step."""
    cond, mask = batch_conditions([[2, 3, 18]] * 2, tiny_generator.encoder)
    traj = sample_trajectory(tiny_generator.denoiser, cond, mask, tiny_schedule, _streams(2))
    assert traj.states.shape == (4, 2, 1, 16, 16)
    assert traj.means.shape == (3, 2, 1, 16, 16)
    assert traj.log_probs.shape == (3, 2)
    assert traj.timesteps == [3, 2, 1]
    assert traj.stream_labels == ["sample/0", "sample/1"]
    images = traj.final_images()
    assert images.min() >= 0.0 and images.max() <= 1.0


def test_trajectory_log_probs_recompute(tiny_generator, tiny_schedule):
    """Stored log-probs match transition_logprob on the stored states."""
    cond, mask = batch_conditions([[2, 3, 18]], tiny_generator.encoder)
    traj = sample_trajectory(tiny_generator.denoiser, cond, mask, tiny_schedule, _streams(1))
    for k, t in enumerate(traj.timesteps):
        sigma = float(tiny_schedule.sigmas[t - 1])
        expected = transition_logprob(traj.states[k + 1, 0], traj.means[k, 0], sigma)
        assert torch.allclose(traj.log_probs[k, 0], expected, rtol=1e-5)


def test_trajectory_is_deterministic(tiny_generator, tiny_schedule):
    cond, mask = batch_conditions([[2, 3, 18]] * 2, tiny_generator.encoder)
    first = sample_trajectory(tiny_generator.denoiser, cond, mask, tiny_schedule, _streams(2))
    second = sample_trajectory(tiny_generator.denoiser, cond, mask, tiny_schedule, _streams(2))
    assert torch.equal(first.states, second.states)


def test_trajectory_items_are_batch_independent(tiny_generator, tiny_schedule):
    """An item's initial noise depends on its own stream only."""
    cond, mask = batch_conditions([[2, 3, 18]] * 2, tiny_generator.encoder)
    pair = sample_trajectory(tiny_generator.denoiser, cond, mask, tiny_schedule, _streams(2))
    alone = sample_trajectory(tiny_generator.denoiser, cond[1:], mask[1:], tiny_schedule, _streams(2)[1:])
    assert torch.equal(pair.states[0, 1], alone.states[0, 0])


def test_trajectory_stream_count_checked(tiny_generator, tiny_schedule):
    cond, mask = batch_conditions([[2, 3, 18]] * 2, tiny_generator.encoder)
    with pytest.raises(ShapeMismatchError):
        sample_trajectory(tiny_generator.denoiser, cond, mask, tiny_schedule, _streams(1))


def _fixed_loss(generator, images, tokens, sched) -> float:
    stream = rng_stream(0, "test/fixed-loss")
    t = torch.from_numpy(stream.integers(1, sched.T + 1, (images.shape[0],))).long()
    eps = gaussian_sample(stream, tuple(images.shape))
    cond, mask = batch_conditions(tokens, generator.encoder)
    with torch.no_grad():
        pred = generator.denoiser(forward_noise(images, t, eps, sched), t, cond, mask)
    return float(((eps - pred) ** 2).mean())


def test_untrained_loss_is_about_one(tiny_dataset):
    """A near-zero untrained output leaves the unit noise variance as loss."""
    train, _, _ = tiny_dataset
    sched = make_schedule(20, 0.005, 0.2)
    generator = build_generator(16, 16, 8, 24, rng_stream(0, "init"))
    images = as_image_batch(images_of(train * 8))
    tokens = [tokenize(s.report, 24) for s in train * 8]
    assert images.numel() >= 10_000
    assert _fixed_loss(generator, images, tokens, sched) == pytest.approx(1.0, abs=0.05)


def test_pretraining_lowers_loss(tiny_dataset):
    """200 steps on a fixed 16-item batch reduce the denoising loss."""
    train, test, _ = tiny_dataset
    items = (train + test + train)[:16]
    images = as_image_batch(images_of(items))
    tokens = [tokenize(s.report, 24) for s in items]
    sched = make_schedule(20, 0.005, 0.2)
    generator = build_generator(16, 16, 8, 24, rng_stream(0, "init"))
    before = _fixed_loss(generator, images, tokens, sched)
    optimizer = AdamOptimizer(generator.store(), lr=3e-3)
    for step in range(200):
        loss = pretrain_step(generator, images, tokens, sched, rng_stream(0, f"fit/{step}"), optimizer)
        assert loss >= 0.0
    assert _fixed_loss(generator, images, tokens, sched) < before


def test_pretrain_generator_records_losses(tiny_dataset, tiny_schedule):
    train, _, _ = tiny_dataset
    calls = []
    generator = pretrain_generator(
        as_image_batch(images_of(train)),
        [tokenize(s.report, 24) for s in train],
        tiny_schedule,
        rng_stream(0, "pretrain"),
        steps=3,
        batch_size=4,
        lr=1e-3,
        d_model=16,
        d_tau=8,
        m_max=24,
        on_step=lambda step, loss: calls.append(step),
    )
    assert len(generator.losses) == 3
    assert calls == [0, 1, 2]


def test_pretrain_is_deterministic(tiny_dataset, tiny_schedule):
    train, _, _ = tiny_dataset
    args = (as_image_batch(images_of(train)), [tokenize(s.report, 24) for s in train], tiny_schedule)
    first = pretrain_generator(*args, rng_stream(0, "pretrain"), steps=2, batch_size=4, lr=1e-3, d_model=16, d_tau=8, m_max=24)
    second = pretrain_generator(*args, rng_stream(0, "pretrain"), steps=2, batch_size=4, lr=1e-3, d_model=16, d_tau=8, m_max=24)
    assert first.store().state_hash() == second.store().state_hash()
    assert first.losses == second.losses


def test_denoiser_gradients_match_finite_differences(float64, finite_difference_check):
    """Denoiser and report encoder, trained jointly, agree with central differences."""
    generator = build_generator(16, 16, 8, 24, rng_stream(0, "fd/generator"))
    x = gaussian_sample(rng_stream(0, "fd/x"), (2, 1, 16, 16))
    eps = gaussian_sample(rng_stream(0, "fd/eps"), (2, 1, 16, 16))
    t = torch.tensor([1, 3])
    tokens = [tokenize("no device .", 24), tokenize("small opacity in the left lung .", 24)]

    def loss(_):
        cond, mask = batch_conditions(tokens, generator.encoder)
        return ((generator.denoiser(x, t, cond, mask) - eps) ** 2).mean()

    finite_difference_check(loss, generator.store())
