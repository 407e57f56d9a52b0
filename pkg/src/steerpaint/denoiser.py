"""Toy conditional inpainting denoiser with attention taps.

Input layout is the channel concatenation ``[z_t | z_m | mask]`` on the 32x32
latent grid, cut into 4x4 patches (an 8x8 token grid). One block runs
self-attention, cross-attention over prompt tokens, then an MLP.
"""
from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scenes import IMAGE_SIZE, NULL_TOKEN, PROMPT_LEN, VOCAB_SIZE, Scene, masked_latent
from .schedule import NoiseSchedule, forward_diffuse

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
IN_CHANNELS = 7
LATENT_CHANNELS = 3


class DivergenceError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    d: int = 32
    patch: int = 4
    size: int = IMAGE_SIZE
    mlp_ratio: int = 4
    vocab: int = VOCAB_SIZE
    prompt_len: int = PROMPT_LEN
    T: int = 200
    local: int = 32

    @property
    def grid(self) -> int:
        return self.size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


@dataclass
class AttentionTap:
    A_cross: np.ndarray  # (..., P, L)
    A_self: np.ndarray  # (..., P, P)
    resolution: tuple
    A_cross_t: Tensor | None = field(default=None, repr=False)
    A_self_t: Tensor | None = field(default=None, repr=False)


def timestep_table(T: int, d: int) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    t = np.arange(T + 1)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(t), np.cos(t)], axis=1)


def _init_params(cfg: DenoiserConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, pin = cfg.d, cfg.patch * cfg.patch * IN_CHANNELS
    pout = cfg.patch * cfg.patch * LATENT_CHANNELS
    h = d * cfg.mlp_ratio

    def w(fan_in, *shape):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    return {
        "W_in": w(pin, pin, d),
        "b_in": np.zeros(d),
        "pos": rng.normal(0.0, 0.02, size=(cfg.n_patches, d)),
        "W_t": w(d, d, d),
        "b_t": np.zeros(d),
        "Wq_s": w(d, d, d),
        "Wk_s": w(d, d, d),
        "Wv_s": w(d, d, d),
        "Wo_s": w(d, d, d) * 0.5,
        "token_embed": rng.normal(0.0, 1.0, size=(cfg.vocab, d)),
        "W_cq": w(pout, pout, d),
        "b_cq": np.zeros(d),
        "Wq_c": w(d, d, d),
        "Wk_c": w(d, d, d),
        "Wv_c": w(d, d, d),
        "Wo_c": w(d, d, d) * 0.5,
        "W1": w(d, d, h),
        "b1": np.zeros(h),
        "W2": w(h, h, d) * 0.5,
        "b2": np.zeros(d),
        "W_out": w(d, d, pout) * 0.1,
        "b_out": np.zeros(pout),
        # per-pixel 1x1 path from [z_t | z_m | mask] to the output, weights shifted by t
        "W_px": np.zeros((IN_CHANNELS, LATENT_CHANNELS)),
        "W_px_t": w(d, d, IN_CHANNELS * LATENT_CHANNELS) * 0.1,
        # local head: 3x3 input neighbourhood plus per-pixel token features
        "W_loc": w(9 * IN_CHANNELS, 9 * IN_CHANNELS, cfg.local),
        "W_tok_px": w(d, d, cfg.patch * cfg.patch * cfg.local),
        "W_loc_t": w(d, d, cfg.local),
        "b_loc": np.zeros(cfg.local),
        "W_loc_out": w(cfg.local, cfg.local, LATENT_CHANNELS) * 0.1,
        # text side of the alignment reward; fitted after denoiser training
        "align_embed": rng.normal(0.0, 1.0, size=(cfg.vocab, d)),
    }


class DenoiserModel:
    """Parameters of the noise predictor plus the alignment-reward text table."""

    def __init__(self, cfg: DenoiserConfig | None = None, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None, meta: dict | None = None):
        self.cfg = cfg or DenoiserConfig()
        if params is None:
            params = _init_params(self.cfg, np.random.default_rng(np.random.SeedSequence([seed, 0xDE7])))
        self.params = {k: Tensor(v) for k, v in params.items()}
        self.meta = dict(meta or {})
        self._ttable = timestep_table(self.cfg.T, self.cfg.d)

    def param_names(self) -> list[str]:
        return list(self.params)

    def trainable(self, names: Sequence[str] | None = None) -> dict[str, Tensor]:
        """Fresh grad-tracking copies of the named parameters, installed on the model."""
        names = names or [k for k in self.params if k != "align_embed"]
        out = {}
        for k in names:
            t = Tensor(self.params[k].data, requires_grad=True)
            self.params[k] = t
            out[k] = t
        return out

    def freeze(self):
        self.params = {k: Tensor(v.data) for k, v in self.params.items()}

    def patch_features(self, x) -> Tensor:
        """Frozen image-side patch embedding (latent channels only), shape (..., P, d)."""
        cfg = self.cfg
        W = self.params["W_in"].data.reshape(cfg.patch, cfg.patch, IN_CHANNELS, cfg.d)
        Wz = Tensor(W[:, :, :LATENT_CHANNELS, :].reshape(-1, cfg.d))
        return patchify(x, cfg.patch) @ Wz


def patchify(x, p: int) -> Tensor:
    """(B, H, W, C) or (H, W, C) -> (B, P, p*p*C) or (P, p*p*C)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    B, H, W, C = x.shape
    g = H // p
    out = x.reshape(B, g, p, g, p, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, g * g, p * p * C)
    return out.reshape(out.shape[1:]) if single else out


def unpatchify(x: Tensor, p: int, C: int) -> Tensor:
    B, P, _ = x.shape
    g = int(round(np.sqrt(P)))
    return x.reshape(B, g, g, p, p, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, g * p, g * p, C)


def _layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt()


def _as_batch(x, ndim: int):
    if isinstance(x, Tensor):
        return (x.reshape((1,) + x.shape), True) if x.ndim == ndim else (x, False)
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == ndim else (x, False)


def _neighbourhood(x: Tensor) -> Tensor:
    """Zero-padded 3x3 neighbourhoods stacked on the channel axis: (B, H, W, 9C)."""
    B, H, W, C = x.shape
    zr = Tensor(np.zeros((B, 1, W, C)))
    xp = ad.concat([zr, x, zr], axis=1)
    zc = Tensor(np.zeros((B, H + 2, 1, C)))
    xp = ad.concat([zc, xp, zc], axis=2)
    return ad.concat([xp[:, dy:dy + H, dx:dx + W, :] for dy in range(3) for dx in range(3)], axis=-1)


def forward(model: DenoiserModel, z_t, t, c, z_m, m_prime) -> tuple[Tensor, AttentionTap]:
    """Predict the noise in ``z_t`` and expose the block's attention maps.

    ``z_t`` may be a Tensor (gradients flow through it) or an array; ``c`` holds
    token ids; ``m_prime`` is the mask on the latent grid. All inputs accept an
    optional leading batch axis; ``t`` is an int or per-item int array.
    """
    cfg = model.cfg
    P = model.params
    z_t, single = _as_batch(z_t, 3)
    z_m, _ = _as_batch(z_m, 3)
    m, _ = _as_batch(m_prime, 2)
    c = np.asarray(c, dtype=np.int64)
    if c.ndim == 1:
        c = c[None]
    B = z_t.shape[0]
    expect = (cfg.size, cfg.size, LATENT_CHANNELS)
    if tuple(z_t.shape[1:]) != expect or tuple(np.shape(z_m)[1:]) != expect:
        raise ad.ShapeError(f"latents must be {expect}, got {z_t.shape[1:]} and {np.shape(z_m)[1:]}")
    if tuple(np.shape(m)[1:]) != (cfg.size, cfg.size):
        raise ad.ShapeError(f"mask must be {(cfg.size, cfg.size)}, got {np.shape(m)[1:]}")
    if c.shape[-1] != cfg.prompt_len:
        raise ad.ShapeError(f"prompt must have {cfg.prompt_len} tokens")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    if np.any(t < 0) or np.any(t > cfg.T):
        raise ValueError(f"timestep outside [0, {cfg.T}]")
    z_m = np.broadcast_to(np.asarray(z_m.data if isinstance(z_m, Tensor) else z_m), (B,) + expect)
    m = np.broadcast_to(np.asarray(m), (B, cfg.size, cfg.size))
    c = np.broadcast_to(c, (B, cfg.prompt_len))

    cond = np.concatenate([z_m, m[..., None]], axis=-1)
    x = ad.concat([z_t if isinstance(z_t, Tensor) else Tensor(z_t), Tensor(cond)], axis=-1)
    temb = Tensor(model._ttable[t]) @ P["W_t"] + P["b_t"]
    h = patchify(x, cfg.patch) @ P["W_in"] + P["b_in"] + P["pos"] + temb.reshape(B, 1, cfg.d)

    # attention routing (queries, and keys among patches) sees only the noisy
    # latent, so the maps are decided by latent content rather than read off
    # the mask channel; values carry the full conditioning
    zq = patchify(x[..., :LATENT_CHANNELS], cfg.patch) @ P["W_cq"] + P["b_cq"] + P["pos"]
    zn = _layer_norm(zq + temb.reshape(B, 1, cfg.d))

    scale = 1.0 / np.sqrt(cfg.d)
    q, k, v = zn @ P["Wq_s"], zn @ P["Wk_s"], _layer_norm(h) @ P["Wv_s"]
    A_s = ad.softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)
    h = h + (A_s @ v) @ P["Wo_s"]

    emb = P["token_embed"][c]
    qc, kc, vc = zn @ P["Wq_c"], emb @ P["Wk_c"], emb @ P["Wv_c"]
    A_c = ad.softmax((qc @ kc.swapaxes(-1, -2)) * scale, axis=-1)
    h = h + (A_c @ vc) @ P["Wo_c"]

    hn = _layer_norm(h)
    h = h + ((hn @ P["W1"] + P["b1"]).silu() @ P["W2"] + P["b2"])
    hf = _layer_norm(h)
    out = unpatchify(hf @ P["W_out"] + P["b_out"], cfg.patch, LATENT_CHANNELS)
    w_px = (temb @ P["W_px_t"]).reshape(B, IN_CHANNELS, LATENT_CHANNELS) + P["W_px"]
    pix = x.reshape(B, cfg.size * cfg.size, IN_CHANNELS) @ w_px
    out = out + pix.reshape(B, cfg.size, cfg.size, LATENT_CHANNELS)

    hl = _neighbourhood(x) @ P["W_loc"] + unpatchify(hf @ P["W_tok_px"], cfg.patch, cfg.local)
    hl = hl + (temb @ P["W_loc_t"] + P["b_loc"]).reshape(B, 1, 1, cfg.local)
    out = out + hl.silu() @ P["W_loc_out"]

    if single:
        out = out.reshape(out.shape[1:])
        A_c = A_c.reshape(A_c.shape[1:])
        A_s = A_s.reshape(A_s.shape[1:])
    tap = AttentionTap(A_cross=A_c.data, A_self=A_s.data, resolution=(cfg.grid, cfg.grid),
                       A_cross_t=A_c, A_self_t=A_s)
    return out, tap


def null_prompt(prompt_len: int = PROMPT_LEN) -> np.ndarray:
    return np.full(prompt_len, NULL_TOKEN, dtype=np.int64)


def cfg_predict(model: DenoiserModel, z_t, t, c, z_m, m_prime, cfg_scale: float = 7.5,
                return_tap: bool = False):
    """Classifier-free guided noise: ``e_u + s * (e_c - e_u)``.

    Conditional and unconditional passes run as one batch of two.
    """
    if cfg_scale < 0:
        raise ValueError("cfg_scale must be >= 0")
    c = np.asarray(c, dtype=np.int64)
    z, single = _as_batch(z_t, 3)
    zm, _ = _as_batch(z_m, 3)
    m, _ = _as_batch(m_prime, 2)
    B = z.shape[0]
    cb = np.broadcast_to(c if c.ndim == 2 else c[None], (B, c.shape[-1]))
    nb = np.full_like(cb, NULL_TOKEN)
    zz = ad.concat([z, z], axis=0) if isinstance(z, Tensor) else np.concatenate([z, z], axis=0)
    zmb = np.broadcast_to(np.asarray(zm), (B,) + np.shape(zm)[1:])
    mb = np.broadcast_to(np.asarray(m), (B,) + np.shape(m)[1:])
    tt = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    eps, tap = forward(model, zz, np.concatenate([tt, tt]), np.concatenate([cb, nb]),
                       np.concatenate([zmb, zmb]), np.concatenate([mb, mb]))
    e_c, e_u = eps[:B], eps[B:]
    out = e_u + cfg_scale * (e_c - e_u)
    if single:
        out = out.reshape(out.shape[1:])
    if return_tap:
        return out, tap
    return out


# -- training --------------------------------------------------------------
@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr_train: float = 2e-3
    cfg_drop_prob: float = 0.1
    log_every: int = 50
    seed: int = 0
    align_steps: int = 400
    align_temperature: float = 0.1
    align_lr: float = 0.05


@dataclass
class TrainResult:
    model: DenoiserModel
    loss_curve: list = field(default_factory=list)  # (step, loss)
    null_batches: int = 0
    align_curve: list = field(default_factory=list)


class _Adam:
    def __init__(self, shapes: dict, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.n = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        self.n += 1
        lr = self.lr if lr is None else lr
        out = {}
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1**self.n)
            vh = self.v[k] / (1 - self.b2**self.n)
            out[k] = params[k] - lr * mh / (np.sqrt(vh) + self.eps)
        return out


def corpus_arrays(corpus: Sequence[Scene]) -> dict[str, np.ndarray]:
    return {
        "z0": np.stack([s.image for s in corpus]),
        "mask": np.stack([s.mask for s in corpus]),
        "prompt": np.stack([s.prompt for s in corpus]),
        "z_m": np.stack([masked_latent(s.image, s.mask) for s in corpus]),
    }


def train(model: DenoiserModel, corpus: Sequence[Scene], sched: NoiseSchedule,
          cfg: TrainConfig | None = None, steps: int | None = None,
          lr_train: float | None = None, cfg_drop_prob: float | None = None) -> TrainResult:
    """Fit the noise predictor by minimising ``E||eps - eps_theta(z_t, t, c, z_m, M)||^2``.

    Mini-batch gradient steps use Adam with a cosine-decayed learning rate.
    With probability ``cfg_drop_prob`` a sample's prompt is replaced by null tokens.
    Afterwards the alignment text table is fitted (see ``fit_alignment``).
    """
    cfg = cfg or TrainConfig()
    steps = cfg.steps if steps is None else steps
    lr = cfg.lr_train if lr_train is None else lr_train
    drop = cfg.cfg_drop_prob if cfg_drop_prob is None else cfg_drop_prob
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if sched.T != model.cfg.T:
        raise ValueError(f"schedule T={sched.T} but model built for T={model.cfg.T}")
    data = corpus_arrays(corpus)
    n = len(corpus)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7AA1]))
    names = [k for k in model.params if k != "align_embed"]
    opt = _Adam({k: model.params[k].shape for k in names}, lr)
    result = TrainResult(model=model)
    sqrt_ab = np.sqrt(sched.alpha_bar)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bar)
    running = []
    for step in range(steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        eps = rng.normal(size=data["z0"][idx].shape)
        z_t = sqrt_ab[t][:, None, None, None] * data["z0"][idx] + sqrt_1mab[t][:, None, None, None] * eps
        prompts = data["prompt"][idx].copy()
        dropped = rng.random(cfg.batch_size) < drop
        prompts[dropped] = NULL_TOKEN
        result.null_batches += int(dropped.any())
        params = model.trainable(names)
        pred, _ = forward(model, z_t, t, prompts, data["z_m"][idx], data["mask"][idx])
        loss = ((pred - eps).square()).mean()
        lval = loss.item()
        if not np.isfinite(lval):
            raise DivergenceError(f"training loss became {lval} at step {step}")
        grads = ad.grad(loss, [params[k] for k in names])
        lr_now = lr * 0.5 * (1.0 + np.cos(np.pi * step / max(steps, 1)))
        new = opt.step({k: params[k].data for k in names}, dict(zip(names, grads)), lr_now)
        for k in names:
            model.params[k] = Tensor(new[k])
        running.append(lval)
        if (step + 1) % cfg.log_every == 0 or step == steps - 1:
            result.loss_curve.append((step + 1, float(np.mean(running))))
            logger.debug("step %d loss %.5f", step + 1, np.mean(running))
            running = []
    model.freeze()
    result.align_curve = fit_alignment(model, corpus, cfg)
    return result


def masked_patch_weights(mask: np.ndarray, patch: int) -> np.ndarray:
    """Fraction of masked pixels in each patch, flattened to (..., P)."""
    mask = np.asarray(mask, dtype=np.float64)
    *lead, H, W = mask.shape
    g = H // patch
    return mask.reshape(*lead, g, patch, g, patch).mean(axis=(-3, -1)).reshape(*lead, g * g)


def fit_alignment(model: DenoiserModel, corpus: Sequence[Scene], cfg: TrainConfig) -> list:
    """Fit the alignment text table against the frozen image-side patch features.

    Contrastive cross-entropy over every (color, shape) prompt: logits are
    cosine similarities between a scene's masked-region mean feature (clean
    image) and each prompt's mean token vector, divided by a temperature.
    """
    from .scenes import COLOR_NAMES, SHAPES, make_prompt

    if cfg.align_steps <= 0:
        return []
    data = corpus_arrays(corpus)
    w = masked_patch_weights(data["mask"], model.cfg.patch)
    feats = model.patch_features(data["z0"]).data
    f = (w[..., None] * feats).sum(axis=1) / w.sum(axis=1, keepdims=True)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    prompts = np.stack([make_prompt(ci, si) for ci in range(len(COLOR_NAMES)) for si in range(len(SHAPES))])
    labels = np.array([s.color * len(SHAPES) + s.shape for s in corpus])
    active = (prompts != NULL_TOKEN).astype(np.float64)
    onehot = np.zeros((len(prompts), model.cfg.vocab))
    for i, p in enumerate(prompts):
        for tok, a in zip(p, active[i]):
            if a:
                onehot[i, tok] += 1.0 / active[i].sum()
    opt = _Adam({"align_embed": model.params["align_embed"].shape}, cfg.align_lr)
    F = Tensor(f)
    Y = np.eye(len(prompts))[labels]
    curve = []
    for step in range(cfg.align_steps):
        E = Tensor(model.params["align_embed"].data, requires_grad=True)
        e = Tensor(onehot) @ E
        e = e / (e.square().sum(axis=-1, keepdims=True)).sqrt()
        logits = (F @ e.T) * (1.0 / cfg.align_temperature)
        mx = logits.data.max(axis=1, keepdims=True)
        lse = (logits - mx).exp().sum(axis=1, keepdims=True).log() + mx
        loss = -((logits - lse) * Y).sum() * (1.0 / len(corpus))
        (g,) = ad.grad(loss, [E])
        new = opt.step({"align_embed": E.data}, {"align_embed": g})
        model.params["align_embed"] = Tensor(new["align_embed"])
        curve.append(loss.item())
    return curve


# -- checkpoints -----------------------------------------------------------
def save_checkpoint(model: DenoiserModel, path, meta: dict | None = None):
    """Write an ``.npz`` holding every parameter plus a JSON metadata header."""
    meta = {**model.meta, **(meta or {})}
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "meta": meta,
    }
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> DenoiserModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as z:
            header = json.loads(bytes(z["header"]).decode())
            params = {k.split("/", 1)[1]: np.array(z[k]) for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    for k, shape in header["shapes"].items():
        if k not in params or list(params[k].shape) != shape:
            raise CheckpointError(f"parameter {k} missing or mis-shaped in {path}")
    try:
        cfg = DenoiserConfig(**header["config"])
    except TypeError as exc:
        raise CheckpointError(f"bad config in {path}: {exc}") from exc
    expected = {k: v.shape for k, v in _init_params(cfg, np.random.default_rng(0)).items()}
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        bad = sorted(set(expected) ^ set(got)) or sorted(k for k in expected if expected[k] != got[k])
        raise CheckpointError(f"checkpoint {path} does not match the model layout: {bad}")
    return DenoiserModel(cfg, params=params, meta=header.get("meta", {}))
