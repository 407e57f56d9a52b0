import numpy as np
import pytest

from steerpaint import autodiff as ad
from steerpaint.autodiff import Tensor
from steerpaint.denoiser import (
    CheckpointError, DenoiserConfig, DenoiserModel, TrainConfig, cfg_predict, forward,
    load_checkpoint, masked_patch_weights, null_prompt, patchify, save_checkpoint, train, unpatchify,
)
from steerpaint.metrics import BenchmarkSuite
from steerpaint.scenes import generate_corpus, generate_scene, masked_latent
from steerpaint.schedule import build_schedule

from helpers import fd_directional, rel_err


def _inputs(seed=0):
    sc = generate_scene(seed, "freeform")
    z = np.random.default_rng(seed).standard_normal((32, 32, 3))
    return sc, z, masked_latent(sc.image, sc.mask)


def test_forward_shapes_and_attention_rows(fresh_model):
    sc, z, zm = _inputs()
    eps, tap = forward(fresh_model, z, 50, sc.prompt, zm, sc.mask)
    assert eps.shape == (32, 32, 3)
    assert tap.A_cross.shape == (64, 4) and tap.A_self.shape == (64, 64)
    assert tap.resolution == (8, 8)
    np.testing.assert_allclose(tap.A_cross.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tap.A_self.sum(-1), 1.0, atol=1e-12)


def test_batched_forward_matches_single(fresh_model):
    sc, z, zm = _inputs(1)
    sc2, z2, zm2 = _inputs(2)
    e1, _ = forward(fresh_model, z, 10, sc.prompt, zm, sc.mask)
    e2, _ = forward(fresh_model, z2, 90, sc2.prompt, zm2, sc2.mask)
    eb, tb = forward(fresh_model, np.stack([z, z2]), np.array([10, 90]), np.stack([sc.prompt, sc2.prompt]),
                     np.stack([zm, zm2]), np.stack([sc.mask, sc2.mask]))
    np.testing.assert_allclose(eb.data[0], e1.data, atol=1e-12)
    np.testing.assert_allclose(eb.data[1], e2.data, atol=1e-12)
    assert tb.A_cross.shape == (2, 64, 4)


def test_bad_inputs_rejected(fresh_model):
    sc, z, zm = _inputs()
    with pytest.raises(ad.ShapeError):
        forward(fresh_model, z[:16], 5, sc.prompt, zm, sc.mask)
    with pytest.raises(ad.ShapeError):
        forward(fresh_model, z, 5, sc.prompt, zm, sc.mask[:8, :8])
    with pytest.raises(ad.ShapeError):
        forward(fresh_model, z, 5, sc.prompt[:2], zm, sc.mask)
    with pytest.raises(ValueError):
        forward(fresh_model, z, 201, sc.prompt, zm, sc.mask)


def test_cfg_combination(fresh_model):
    sc, z, zm = _inputs(3)
    e_c, _ = forward(fresh_model, z, 40, sc.prompt, zm, sc.mask)
    e_u, _ = forward(fresh_model, z, 40, null_prompt(), zm, sc.mask)
    out = cfg_predict(fresh_model, z, 40, sc.prompt, zm, sc.mask, 7.5).data
    np.testing.assert_allclose(out, e_u.data + 7.5 * (e_c.data - e_u.data), atol=1e-10)
    np.testing.assert_allclose(cfg_predict(fresh_model, z, 40, sc.prompt, zm, sc.mask, 1.0).data, e_c.data,
                               atol=1e-12)
    np.testing.assert_allclose(cfg_predict(fresh_model, z, 40, sc.prompt, zm, sc.mask, 0.0).data, e_u.data,
                               atol=1e-12)


def test_eps_gradient_wrt_latent(fresh_model):
    sc, z, zm = _inputs(4)
    w = np.random.default_rng(0).standard_normal(z.shape)

    def f(x, tensors=False):
        zt = Tensor(x, requires_grad=tensors)
        e, _ = forward(fresh_model, zt, 70, sc.prompt, zm, sc.mask)
        out = (e * Tensor(w)).sum()
        return (out, zt) if tensors else out.item()

    out, zt = f(z, True)
    (g,) = ad.grad(out, [zt])
    v = np.random.default_rng(1).standard_normal(z.shape)
    assert rel_err(np.sum(g * v), fd_directional(f, z, v)) < 1e-4


def test_patchify_round_trip():
    x = np.random.default_rng(0).random((2, 32, 32, 3))
    p = patchify(x, 4)
    assert p.shape == (2, 64, 48)
    np.testing.assert_array_equal(unpatchify(p, 4, 3).data, x)
    np.testing.assert_array_equal(p.data[0, 9].reshape(4, 4, 3), x[0, 4:8, 4:8])


def test_masked_patch_weights():
    m = np.zeros((32, 32))
    m[0:2, 0:4] = 1
    w = masked_patch_weights(m, 4)
    assert w.shape == (64,)
    assert w[0] == 0.5 and w[1:].sum() == 0


def test_checkpoint_round_trip(tmp_path, fresh_model):
    p = tmp_path / "m.npz"
    save_checkpoint(fresh_model, p, meta={"note": "x"})
    m2 = load_checkpoint(p)
    assert m2.cfg == fresh_model.cfg and m2.meta["note"] == "x"
    for k, v in fresh_model.params.items():
        np.testing.assert_array_equal(m2.params[k].data, v.data)
    save_checkpoint(m2, tmp_path / "n.npz")
    assert p.read_bytes() == (tmp_path / "n.npz").read_bytes()


def test_checkpoint_errors(tmp_path, fresh_model):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)
    params = {k: v.data for k, v in fresh_model.params.items() if k != "W_loc"}
    partial = DenoiserModel(fresh_model.cfg, params=params)
    save_checkpoint(partial, tmp_path / "partial.npz")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "partial.npz")


def test_short_training_reduces_loss_and_leaves_model_frozen():
    sched = build_schedule(50, 5e-4, 0.1)
    model = DenoiserModel(DenoiserConfig(T=50), seed=1)
    corpus = generate_corpus(96, seed=3)
    res = train(model, corpus, sched, TrainConfig(steps=40, batch_size=8, log_every=10, align_steps=5))
    losses = [l for _, l in res.loss_curve]
    assert losses[-1] < losses[0]
    assert res.null_batches > 0
    assert all(not p.requires_grad for p in model.params.values())
    with pytest.raises(ValueError):
        train(model, corpus, build_schedule(60, 5e-4, 0.1), TrainConfig(steps=1))


def test_reference_training_halved_the_loss(ref_model):
    curve = ref_model.meta["loss_curve"]
    assert curve[-1][0] == 5000
    assert curve[-1][1] < 0.5 * curve[0][1]


def test_reference_one_step_reconstruction(ref_model):
    """Denoising from t=1 in one step recovers held-out images to within 0.05 per pixel."""
    sched = build_schedule(200, 5e-4, 0.1)
    rng = np.random.default_rng(0)
    errs = []
    for sc in BenchmarkSuite().scenes[:20]:
        eps = rng.standard_normal(sc.image.shape)
        ab = sched.alpha_bar[1]
        z1 = np.sqrt(ab) * sc.image + np.sqrt(1 - ab) * eps
        with ad.no_grad():
            e, _ = forward(ref_model, z1, 1, sc.prompt, masked_latent(sc.image, sc.mask), sc.mask)
        x0 = (z1 - np.sqrt(1 - ab) * e.data) / np.sqrt(ab)
        errs.append(np.abs(x0 - sc.image).mean())
    assert np.mean(errs) < 0.05
