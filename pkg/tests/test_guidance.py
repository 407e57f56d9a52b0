import numpy as np
import pytest

from steerpaint import autodiff as ad
from steerpaint.autodiff import Tensor
from steerpaint.denoiser import DenoiserConfig, DenoiserModel, cfg_predict
from steerpaint.guidance import (
    GuidanceError, GuidanceSpec, RewardTerm, guided_eps, guided_steps, run_degu, scene_rewards,
    write_guidance_trace,
)
from steerpaint.rewards import x0_estimate
from steerpaint.scenes import generate_scene, masked_latent
from steerpaint.schedule import Modulator, build_schedule, modulate

from helpers import fd_directional, rel_err

SCHED = build_schedule(200, 5e-4, 0.1)


def _linear_eps(B):
    return lambda z: z * Tensor(B)


def _quad_reward(a):
    return lambda x0: ((x0 - Tensor(a)).square() * -0.5).sum()


def test_quadratic_oracle_on_2x2_latent():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(2, 2, 1))
    B = rng.normal(size=(2, 2, 1))
    a = rng.normal(size=(2, 2, 1))
    t, gamma = 73, 0.8
    for mod in (Modulator(), Modulator("sqrt_one_minus_alpha_bar"), Modulator.constant(0.5)):
        got = guided_eps(_linear_eps(B), z, t, [RewardTerm("q", gamma, _quad_reward(a))], mod, SCHED)
        ab = SCHED.alpha_bar[t]
        K = (1 - np.sqrt(1 - ab) * B) / np.sqrt(ab)  # elementwise x0 = K z
        grad_r = -K * (K * z - a)
        expect = B * z - modulate(mod, t, SCHED) * gamma * grad_r
        np.testing.assert_allclose(got, expect, rtol=0, atol=1e-10)


def test_guidance_is_linear_in_weights():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(2, 2, 3))
    B = rng.normal(size=z.shape)
    r1 = _quad_reward(rng.normal(size=z.shape))
    w = rng.normal(size=z.shape)
    r2 = lambda x0: (x0.tanh() * Tensor(w)).sum()
    eps = (B * z)
    t = 120

    def corr(g1, g2):
        return guided_eps(_linear_eps(B), z, t, [RewardTerm("a", g1, r1), RewardTerm("b", g2, r2)],
                          Modulator(), SCHED) - eps

    both = corr(0.7, 1.3)
    np.testing.assert_allclose(both, corr(0.7, 0.0) + corr(0.0, 1.3), atol=1e-10)
    np.testing.assert_allclose(corr(1.4, 0.0), 2 * corr(0.7, 0.0), atol=1e-10)


def test_zero_weights_return_plain_prediction():
    z = np.ones((2, 2, 1))
    out = guided_eps(_linear_eps(np.full(z.shape, 2.0)), z, 10, [RewardTerm("a", 0.0, _quad_reward(z))],
                     Modulator(), SCHED)
    np.testing.assert_array_equal(out, 2.0 * z)


def test_non_finite_gradient_raises():
    z = np.ones((2, 2, 1))
    bad = lambda x0: (x0 * Tensor(np.full(z.shape, np.inf))).sum()
    with ad.checked(False), np.errstate(all="ignore"):
        with pytest.raises(GuidanceError):
            guided_eps(_linear_eps(np.ones(z.shape)), z, 10, [RewardTerm("bad", 1.0, bad)], Modulator(), SCHED)


def test_guided_steps_count():
    assert guided_steps(200, 1) == list(range(200, 0, -1))
    assert len(guided_steps(200, 3)) == int(np.ceil(200 / 3))
    assert guided_steps(10, 4) == [10, 6, 2]


def test_spec_validation():
    with pytest.raises(ValueError):
        GuidanceSpec(gamma_c=-1.0)
    with pytest.raises(ValueError):
        GuidanceSpec(s_guide=0)
    s = GuidanceSpec.scaled(0.5)
    assert (s.gamma_c, s.gamma_m, s.gamma_q) == (2.0, 0.5, 0.05)
    assert not s.without_guidance().enabled


@pytest.mark.parametrize("name", ["c", "m", "q"])
def test_reward_gradient_through_denoiser(fresh_model, name):
    scene = generate_scene(8, "freeform")
    spec = GuidanceSpec(gamma_c=1.0, gamma_m=1.0, gamma_q=1.0)
    term = {tm.name: tm for tm in scene_rewards(fresh_model, scene, spec)}[name]
    z_m = masked_latent(scene.image, scene.mask)
    t = 90

    def reward(z, tensors=False):
        zt = Tensor(z, requires_grad=tensors)
        eps = cfg_predict(fresh_model, zt, t, scene.prompt, z_m, scene.mask, 7.5)
        r = term.fn(x0_estimate(zt, t, eps, SCHED))
        return (r, zt) if tensors else r.item()

    rng = np.random.default_rng(2)
    z = rng.standard_normal((32, 32, 3))
    r, zt = reward(z, tensors=True)
    (g,) = ad.grad(r, [zt])
    v = rng.standard_normal(z.shape)
    assert rel_err(np.sum(g * v), fd_directional(reward, z, v)) < 1e-3


def test_zero_gamma_sampler_is_bitwise_unguided(fresh_model):
    sched = build_schedule(200, 5e-4, 0.1)
    scene = generate_scene(4, "object_aligned")
    z_T = np.random.default_rng(0).standard_normal((32, 32, 3))
    a = run_degu(fresh_model, scene, z_T, GuidanceSpec(), sched, seed=3)
    b = run_degu(fresh_model, scene, z_T, GuidanceSpec(modulator=Modulator.constant(0.3), s_guide=7),
                 sched, seed=3)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.n_guided == 0


def test_blend_keeps_unmasked_pixels_and_counts_guided_steps():
    sched = build_schedule(12, 5e-4, 0.1)
    model = DenoiserModel(DenoiserConfig(T=12), seed=0)
    scene = generate_scene(9, "freeform")
    z_T = np.random.default_rng(1).standard_normal((32, 32, 3))
    res = run_degu(model, scene, z_T, GuidanceSpec.scaled(0.1, s_guide=5), sched, seed=0, trace=True)
    keep = scene.mask == 0
    np.testing.assert_array_equal(res.image[keep], scene.image[keep])
    assert res.n_guided == len(guided_steps(12, 5)) == 3
    assert [r["t"] for r in res.trace] == [12, 7, 2]
    assert {"gnorm_c", "gnorm_m", "gnorm_q", "r_c", "modulator"} <= set(res.trace[0])
    assert np.all((res.image >= 0) & (res.image <= 1))


def test_guidance_trace_csv(tmp_path):
    rows = [{"t": 5, "modulator": 0.9, "r_c": 0.1, "r_m": -0.2, "r_q": -0.01,
             "gnorm_c": 1.0, "gnorm_m": 2.0, "gnorm_q": 3.0}]
    write_guidance_trace(tmp_path / "g.csv", rows)
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "t,modulator,r_c,r_m,r_q,gnorm_c,gnorm_m,gnorm_q"
    assert lines[1].startswith("5,0.9,")
