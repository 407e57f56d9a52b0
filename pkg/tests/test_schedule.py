import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steerpaint.schedule import (
    Modulator, ScheduleError, build_schedule, denoise_step, forward_diffuse,
    modulate, noise_to_score, score_to_noise,
)


@pytest.fixture(scope="module")
def sched():
    return build_schedule(200, 5e-4, 0.1)


def test_alpha_bar_is_cumulative_product(sched):
    assert sched.alpha_bar[0] == 1.0
    assert len(sched.alpha_bar) == sched.T + 1
    np.testing.assert_allclose(sched.alpha_bar[1:], np.cumprod(1 - sched.beta), rtol=1e-14)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.beta[0] == 5e-4 and sched.beta[-1] == pytest.approx(0.1)


def test_schedule_is_read_only(sched):
    with pytest.raises(ValueError):
        sched.alpha_bar[3] = 0.0


@pytest.mark.parametrize("T,b0,b1", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_bad_schedule_rejected(T, b0, b1):
    with pytest.raises(ScheduleError):
        build_schedule(T, b0, b1)


def test_forward_diffuse_moments(sched):
    rng = np.random.default_rng(0)
    z0 = np.full(200_000, 0.7)
    eps = rng.standard_normal(z0.shape)
    t = 50
    zt = forward_diffuse(z0, t, eps, sched)
    ab = sched.alpha_bar[t]
    assert abs(zt.mean() - np.sqrt(ab) * 0.7) < 5e-3
    assert abs(zt.var() - (1 - ab)) < 5e-3


def test_forward_diffuse_rejects_t_out_of_range(sched):
    with pytest.raises(ScheduleError):
        forward_diffuse(np.zeros(3), sched.T + 1, np.zeros(3), sched)
    with pytest.raises(ScheduleError):
        forward_diffuse(np.zeros(3), 0, np.zeros(3), sched)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.floats(-5, 5))
def test_score_noise_round_trip(t, e):
    sched = build_schedule(200, 5e-4, 0.1)
    eps = np.array([e, -e, 0.5])
    back = score_to_noise(noise_to_score(eps, t, sched), t, sched)
    np.testing.assert_allclose(back, eps, rtol=1e-12, atol=1e-14)


def test_score_matches_gaussian_oracle(sched):
    # for z_t ~ N(sqrt(ab) x0, (1 - ab)), grad log p(z_t | x0) = -(z_t - sqrt(ab) x0) / (1 - ab)
    t, x0, eps = 37, 0.3, np.array([0.8])
    ab = sched.alpha_bar[t]
    zt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    np.testing.assert_allclose(noise_to_score(eps, t, sched), -(zt - np.sqrt(ab) * x0) / (1 - ab), rtol=1e-12)


def test_denoise_step_with_true_noise_recovers_posterior_mean(sched):
    # with the exact noise, the mean of step t is the q(z_{t-1} | z_t, x0) posterior mean
    t, x0, eps = 20, np.array([0.4, -0.2]), np.array([0.3, 1.1])
    ab, ab_prev, beta = sched.alpha_bar[t], sched.alpha_bar[t - 1], sched.beta[t - 1]
    zt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    post = (np.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * zt
    np.testing.assert_allclose(denoise_step(zt, t, eps, sched, np.zeros(2)), post, rtol=1e-12)


def test_denoise_step_needs_noise_above_one(sched):
    with pytest.raises(ScheduleError):
        denoise_step(np.zeros(2), 5, np.zeros(2), sched)
    out = denoise_step(np.ones(2), 1, np.zeros(2), sched)  # deterministic last step
    np.testing.assert_allclose(out, np.ones(2) / np.sqrt(1 - sched.beta[0]))


def _chain(sched, n, seed):
    """Ancestral sampling where the data distribution is N(0, 1).

    Every marginal is then N(0, 1) and the optimal noise prediction is
    E[eps | z_t] = sqrt(1 - ab_t) * z_t.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    for t in range(sched.T, 0, -1):
        eps = np.sqrt(1 - sched.alpha_bar[t]) * z
        z = denoise_step(z, t, eps, sched, rng.standard_normal(n) if t > 1 else None)
    return z


@pytest.mark.parametrize("b0,b1", [(5e-4, 0.1), (1e-4, 0.02)])
def test_chain_preserves_standard_gaussian(b0, b1):
    z = _chain(build_schedule(200, b0, b1), 10_000, seed=1)
    assert abs(z.mean()) < 0.05
    assert 0.9 <= z.var() <= 1.1


def test_modulators(sched):
    t = 120
    assert modulate(Modulator(), t, sched) == pytest.approx(np.sqrt(sched.alpha_bar[t]))
    assert modulate(Modulator("sqrt_one_minus_alpha_bar"), t, sched) == pytest.approx(np.sqrt(1 - sched.alpha_bar[t]))
    assert modulate(Modulator.constant(0.5), t, sched) == 0.5
    assert modulate(Modulator(), 0, sched) == 1.0
    with pytest.raises(ValueError):
        Modulator("linear")
    assert Modulator.constant(0.5).label == "constant(0.5)"
