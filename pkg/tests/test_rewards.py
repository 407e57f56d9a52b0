import numpy as np
import pytest

from steerpaint import autodiff as ad
from steerpaint.autodiff import Tensor
from steerpaint.rewards import RewardHandle, reward_align, reward_coherence, reward_preference, x0_estimate
from steerpaint.scenes import COLORS, generate_scene, masked_latent
from steerpaint.schedule import NoiseSchedule, ScheduleError, build_schedule

from helpers import central_fd, rel_err


def test_x0_estimate_inverts_forward_process():
    sched = build_schedule(200, 5e-4, 0.1)
    rng = np.random.default_rng(0)
    x0, eps = rng.random((4, 4, 3)), rng.standard_normal((4, 4, 3))
    for t in (1, 50, 150):
        ab = sched.alpha_bar[t]
        zt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
        np.testing.assert_allclose(x0_estimate(zt, t, eps, sched), x0, atol=1e-9)
    np.testing.assert_array_equal(x0_estimate(x0, 0, eps, sched), x0)


def test_x0_estimate_undefined_when_alpha_bar_vanishes():
    sched = NoiseSchedule(T=2, beta=np.array([0.5, 1.0]), alpha_bar=np.array([1.0, 0.5, 0.0]))
    with pytest.raises(ScheduleError):
        x0_estimate(np.zeros(2), 2, np.zeros(2), sched)


def _small_mask():
    m = np.zeros((6, 6))
    m[2:4, 1:5] = 1
    return m


def test_coherence_matches_hand_count():
    m = _small_mask()
    x0 = np.zeros((6, 6, 1))
    z_m = np.zeros((6, 6, 1))
    x0[m > 0] = 1.0
    # every boundary pair jumps by exactly 1
    assert reward_coherence(x0, z_m, m).item() == pytest.approx(-1.0)
    assert reward_coherence(np.zeros((6, 6, 1)), z_m, m).item() == 0.0
    assert reward_coherence(x0, z_m, np.zeros((6, 6))).item() == 0.0


def test_preference_penalises_variation_and_gamut():
    flat = np.full((4, 4, 3), 0.5)
    assert reward_preference(flat).item() == 0.0
    noisy = flat + np.random.default_rng(0).normal(0, 0.1, flat.shape)
    assert reward_preference(noisy).item() < 0
    oog = np.full((4, 4, 3), 1.5)
    assert reward_preference(oog).item() == pytest.approx(-0.25)


@pytest.mark.parametrize("fn", ["coherence", "preference"])
def test_reward_gradients_match_finite_differences(fn):
    rng = np.random.default_rng(4)
    m = _small_mask()
    z_m = rng.random((6, 6, 3)) * (1 - m[..., None])
    x = rng.normal(0.5, 0.6, (6, 6, 3))
    f = {"coherence": lambda a: reward_coherence(a, z_m, m),
         "preference": lambda a: reward_preference(a)}[fn]
    t = Tensor(x, requires_grad=True)
    (g,) = ad.grad(f(t), [t])
    assert rel_err(g, central_fd(lambda a: f(a).item(), x)) < 1e-4


def test_align_gradient_matches_finite_differences(fresh_model):
    scene = generate_scene(21)
    x = scene.image + np.random.default_rng(0).normal(0, 0.05, scene.image.shape)
    t = Tensor(x, requires_grad=True)
    (g,) = ad.grad(reward_align(t, scene.prompt, scene.mask, fresh_model), [t])
    fd = central_fd(lambda a: reward_align(a, scene.prompt, scene.mask, fresh_model).item(), x)
    assert rel_err(g, fd) < 1e-4


def test_align_is_a_cosine(fresh_model):
    scene = generate_scene(2)
    r = reward_align(scene.image, scene.prompt, scene.mask, fresh_model).item()
    assert -1.0 <= r <= 1.0
    with pytest.raises(ValueError):
        reward_align(scene.image, np.zeros(4, int), scene.mask, fresh_model)
    with pytest.raises(ValueError):
        reward_align(scene.image, scene.prompt, np.zeros((32, 32)), fresh_model)


def test_handle_dispatch(fresh_model):
    scene = generate_scene(3)
    z_m = masked_latent(scene.image, scene.mask)
    h = RewardHandle("coherence", mask=scene.mask, z_m=z_m)
    assert h(scene.image).item() == reward_coherence(scene.image, z_m, scene.mask).item()
    with pytest.raises(ValueError):
        RewardHandle("clip")




def test_align_prefers_true_colour_on_reference(ref_model):
    """Ground-truth object scores above the same object painted in another colour."""
    wins = 0
    n = 24
    for k in range(n):
        sc = generate_scene(500 + k)
        wrong = (sc.color + 1 + k % 7) % len(COLORS)
        alt = generate_scene(500 + k, color=wrong, shape=sc.shape)
        r_true = reward_align(sc.image, sc.prompt, sc.mask, ref_model).item()
        r_wrong = reward_align(alt.image, sc.prompt, alt.mask, ref_model).item()
        wins += r_true > r_wrong
    assert wins / n >= 0.9
