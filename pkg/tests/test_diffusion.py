import math

import numpy as np
import pytest
import torch
from scipy import stats

from diffusion import (
    DTYPE,
    NoiseStream,
    categorical_posterior,
    decode_types,
    init_state,
    perturb_coords,
    perturb_types,
    posterior_from,
    reverse_coord_step,
    score_from_x0,
    type_marginal,
)
from errors import DegenerateDistributionError
from schedule import build_schedule, posterior_coeffs


def test_noise_streams_are_reproducible_and_independent():
    a, b, c = NoiseStream(3, 0, 1), NoiseStream(3, 0, 1), NoiseStream(3, 1, 0)
    assert torch.equal(a.coords(4), b.coords(4))
    assert a.seed != c.seed
    assert 1 <= NoiseStream(0).randint(1, 3) <= 3


def test_forward_coordinate_moments(desk_schedule):
    t = 40
    x0 = torch.tensor([[1.0, -2.0, 0.5]], dtype=DTYPE)
    noise = NoiseStream(11).normal(10000, 1, 3)
    x_t = perturb_coords(x0, desk_schedule, t, noise).reshape(10000, 3)
    alpha_bar = desk_schedule.alpha_bar[t]
    sd = math.sqrt(1 - alpha_bar)
    mean = x_t.mean(0).numpy()
    assert np.all(np.abs(mean - math.sqrt(alpha_bar) * x0.numpy()[0]) <= 3 * sd / math.sqrt(10000))
    var = x_t.var(0).numpy()
    var_se = sd**2 * math.sqrt(2.0 / 9999)
    assert np.all(np.abs(var - sd**2) <= 4 * var_se)


def test_perturb_coords_limits(desk_schedule):
    x0 = torch.ones(2, 3, dtype=DTYPE)
    noise = torch.zeros(2, 3, dtype=DTYPE)
    assert torch.allclose(perturb_coords(x0, desk_schedule, 1, noise), x0 * math.sqrt(desk_schedule.alpha_bar[1]))
    with pytest.raises(IndexError):
        perturb_coords(x0, desk_schedule, 0, noise)


def test_gumbel_max_matches_marginal(desk_schedule):
    t = 30
    v0 = torch.tensor([[0.0, 1.0, 0.0, 0.0]], dtype=DTYPE).expand(20000, 4)
    stream = NoiseStream(5)
    v_t = perturb_types(v0, desk_schedule, t, stream.gumbel(20000, 4))
    observed = v_t.sum(0).numpy()
    expected = type_marginal(v0[:1], float(desk_schedule.alpha_bar[t]))[0].numpy() * 20000
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_types_stay_put_without_noise():
    sched = build_schedule(5, 1e-7, 1e-7, 6.0)
    v0 = torch.eye(4, dtype=DTYPE)
    # alpha_bar is not exactly 1, so extreme Gumbel draws could still flip; small draws cannot
    gumbel = torch.zeros(4, 4, dtype=DTYPE)
    assert torch.equal(perturb_types(v0, sched, 1, gumbel), v0)


def test_categorical_posterior_normalizes(desk_schedule):
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        t = int(torch.randint(1, 101, (1,), generator=g))
        v_t = torch.nn.functional.one_hot(torch.randint(4, (3,), generator=g), 4).to(DTYPE)
        v0_hat = torch.softmax(torch.randn(3, 4, generator=g, dtype=DTYPE) * 3, dim=-1)
        post = categorical_posterior(v_t, v0_hat, desk_schedule, t)
        assert torch.all(torch.abs(post.sum(-1) - 1) <= 1e-12)
        assert torch.all(post >= 0)


def test_first_step_posterior_follows_prediction(desk_schedule):
    v_t = torch.eye(4, dtype=DTYPE)[[0, 1]]
    v0_hat = torch.eye(4, dtype=DTYPE)[[2, 2]]
    post = categorical_posterior(v_t, v0_hat, desk_schedule, 1)
    # alpha_bar_0 = 1, so all mass sits on the predicted class
    assert torch.allclose(post, v0_hat)


def test_degenerate_posterior_raises():
    v_t = torch.tensor([[1.0, 0.0]], dtype=DTYPE)
    v0_hat = torch.tensor([[0.0, 1.0]], dtype=DTYPE)
    with pytest.raises(DegenerateDistributionError):
        posterior_from(v_t, v0_hat, 1.0, 1.0)


def test_reverse_step_is_posterior_mean_minus_displacement(desk_schedule):
    x_t = torch.randn(3, 3, dtype=DTYPE)
    x0_hat = torch.randn(3, 3, dtype=DTYPE)
    disp = torch.full((3, 3), 0.25, dtype=DTYPE)
    c0, ct, _ = posterior_coeffs(desk_schedule, 17)
    step = reverse_coord_step(x_t, x0_hat, desk_schedule, 17, torch.zeros(3, 3, dtype=DTYPE), disp)
    assert torch.allclose(step, c0 * x0_hat + ct * x_t - disp, atol=0, rtol=0)


def test_first_reverse_step_is_deterministic(desk_schedule):
    x_t = torch.randn(2, 3, dtype=DTYPE)
    x0_hat = torch.randn(2, 3, dtype=DTYPE)
    zeros = torch.zeros(2, 3, dtype=DTYPE)
    a = reverse_coord_step(x_t, x0_hat, desk_schedule, 1, torch.randn(2, 3, dtype=DTYPE), zeros)
    b = reverse_coord_step(x_t, x0_hat, desk_schedule, 1, torch.randn(2, 3, dtype=DTYPE), zeros)
    assert torch.equal(a, b)


def test_score_from_x0_at_the_true_x0():
    alpha_bar = 0.3
    x0 = torch.tensor([0.5], dtype=DTYPE)
    eps = torch.tensor([1.2], dtype=DTYPE)
    x_t = math.sqrt(alpha_bar) * x0 + math.sqrt(1 - alpha_bar) * eps
    assert torch.allclose(score_from_x0(x_t, x0, alpha_bar), -eps / math.sqrt(1 - alpha_bar))


def test_init_state_shapes():
    state = init_state(6, 4, NoiseStream(0), 100)
    assert state.x_t.shape == (6, 3)
    assert torch.equal(state.v_t.sum(-1), torch.ones(6, dtype=DTYPE))
    assert state.t == 100


def test_decode_types():
    prob = torch.tensor([[0.1, 0.6, 0.3], [0.5, 0.2, 0.3]], dtype=DTYPE)
    assert decode_types(prob, "argmax", None).argmax(-1).tolist() == [1, 0]
    big = torch.tensor([[0.0, 0.0, 50.0], [50.0, 0.0, 0.0]], dtype=DTYPE)
    assert decode_types(prob, "stochastic", big).argmax(-1).tolist() == [2, 0]


def test_init_state_is_standard_normal_with_uniform_types():
    n = 10000
    state = init_state(n, 4, NoiseStream(2), 100)
    x = state.x_t.numpy()
    assert np.all(np.abs(x.mean(0)) <= 3 / math.sqrt(n))
    assert np.all(np.abs(x.var(0) - 1.0) <= 3 * math.sqrt(2.0 / (n - 1)))
    observed = state.v_t.sum(0).numpy()
    assert stats.chisquare(observed, np.full(4, n / 4)).pvalue > 0.01


def test_two_type_perturbation_stays_with_probability_point_nine():
    sched = build_schedule(1, 0.2, 0.2, 6.0)
    assert float(sched.alpha_bar[1]) == pytest.approx(0.8)
    n = 10000
    v0 = torch.tensor([[0.0, 1.0]], dtype=DTYPE).expand(n, 2)
    v_t = perturb_types(v0, sched, 1, NoiseStream(9).gumbel(n, 2))
    stay = float(v_t[:, 1].mean())
    assert abs(stay - 0.9) <= 0.01
    direct = np.random.default_rng(9).choice(2, size=n, p=[0.1, 0.9])
    table = np.array([v_t.sum(0).numpy(), np.bincount(direct, minlength=2)])
    assert stats.chi2_contingency(table).pvalue > 0.01


def test_analytic_denoiser_chain_recovers_the_data_gaussian():
    mu, sd, chains = 1.5, 0.5, 5000
    sched = build_schedule(1000, 1e-7, 0.2, 6.0)
    stream = NoiseStream(17)
    x = stream.normal(chains, 1)
    zeros = torch.zeros_like(x)
    for t in range(sched.T, 0, -1):
        alpha_bar = float(sched.alpha_bar[t])
        # E[x0 | x_t] for x0 ~ N(mu, sd^2)
        gain = math.sqrt(alpha_bar) * sd**2 / (alpha_bar * sd**2 + 1 - alpha_bar)
        x0_hat = mu + gain * (x - math.sqrt(alpha_bar) * mu)
        x = reverse_coord_step(x, x0_hat, sched, t, stream.normal(chains, 1), zeros)
    samples = x.numpy()[:, 0]
    assert abs(samples.mean() - mu) <= 3 * sd / math.sqrt(chains)
    assert abs(samples.var() - sd**2) <= 3 * sd**2 * math.sqrt(2.0 / (chains - 1))
