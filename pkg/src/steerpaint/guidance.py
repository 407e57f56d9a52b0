"""Reward-gradient noise correction and the guided inpainting sampler."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import DenoiserModel, cfg_predict
from .rewards import reward_align, reward_coherence, reward_preference, x0_estimate
from .scenes import Scene, decode, masked_latent
from .schedule import Modulator, NoiseSchedule, denoise_step, modulate

__all__ = [
    "GuidanceSpec",
    "GuidanceError",
    "RewardTerm",
    "guided_eps",
    "scene_rewards",
    "run_degu",
    "guided_steps",
    "ablate_modulator",
    "GAMMA_RATIO",
    "sampler_seed",
]

GAMMA_RATIO = (4.0, 1.0, 0.1)
logger = logging.getLogger(__name__)
SAMPLER_STREAM = 0x5A3F1


class GuidanceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GuidanceSpec:
    gamma_c: float = 0.0
    gamma_m: float = 0.0
    gamma_q: float = 0.0
    modulator: Modulator = Modulator()
    s_guide: int = 1
    cfg_scale: float = 7.5

    def __post_init__(self):
        if min(self.gamma_c, self.gamma_m, self.gamma_q) < 0:
            raise ValueError("guidance weights must be >= 0")
        if self.s_guide < 1:
            raise ValueError("s_guide must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")

    @classmethod
    def scaled(cls, scale: float, ratio=GAMMA_RATIO, **kw) -> "GuidanceSpec":
        c, m, q = ratio
        return cls(gamma_c=scale * c, gamma_m=scale * m, gamma_q=scale * q, **kw)

    @property
    def enabled(self) -> bool:
        return (self.gamma_c, self.gamma_m, self.gamma_q) != (0.0, 0.0, 0.0)

    def without_guidance(self) -> "GuidanceSpec":
        return replace(self, gamma_c=0.0, gamma_m=0.0, gamma_q=0.0)


@dataclass(frozen=True)
class RewardTerm:
    name: str
    gamma: float
    fn: Callable  # x0 Tensor -> scalar Tensor


def guided_eps(eps_fn: Callable, z_t, t: int, terms: Sequence[RewardTerm], modulator: Modulator,
               sched: NoiseSchedule, info: dict | None = None) -> np.ndarray:
    """Corrected noise ``eps - mod(t) * grad_z sum_k gamma_k r_k(x0(z, eps(z)))``.

    ``eps_fn`` maps a latent Tensor to the predicted noise Tensor; the reward
    gradient runs through it, i.e. through the frozen denoiser. When ``info`` is
    given it is filled with reward values and per-reward gradient norms.
    """
    z_arr = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t, dtype=np.float64)
    active = [term for term in terms if term.gamma != 0.0]
    if not active:
        with ad.no_grad():
            return eps_fn(Tensor(z_arr)).data
    z = Tensor(z_arr, requires_grad=True)
    eps = eps_fn(z)
    x0 = x0_estimate(z, t, eps, sched)
    values = [term.fn(x0) for term in active]
    total = values[0] * active[0].gamma
    for term, v in zip(active[1:], values[1:]):
        total = total + v * term.gamma
    if info is not None:
        info.update({f"r_{term.name}": v.item() for term, v in zip(active, values)})
        for term, v in zip(active, values):
            (g,) = ad.grad(v, [z], retain_graph=True)
            info[f"gnorm_{term.name}"] = float(np.linalg.norm(g))
    (g,) = ad.grad(total, [z])
    if not np.all(np.isfinite(g)):
        bad = [term.name for term, v in zip(active, values)
               if not np.isfinite(v.item())]
        raise GuidanceError(f"non-finite reward gradient at t={t} (rewards: {bad or [t.name for t in active]})")
    mod = modulate(modulator, t, sched)
    if info is not None:
        info["modulator"] = mod
    return eps.data - mod * g


def scene_rewards(model: DenoiserModel, scene: Scene, spec: GuidanceSpec) -> list[RewardTerm]:
    """Reward terms for one scene, each scored on the blended clean estimate."""
    m3 = scene.mask[..., None]
    z_m = masked_latent(scene.image, scene.mask)
    known = Tensor(z_m * (1.0 - m3))
    inside = Tensor(m3)

    def blend(x0):
        return x0 * inside + known

    return [
        RewardTerm("c", spec.gamma_c, lambda x0: reward_align(blend(x0), scene.prompt, scene.mask, model)),
        RewardTerm("m", spec.gamma_m, lambda x0: reward_coherence(x0, z_m, scene.mask)),
        RewardTerm("q", spec.gamma_q, lambda x0: reward_preference(blend(x0), scene.prompt)),
    ]


def sampler_seed(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), SAMPLER_STREAM]))


def guided_steps(T: int, s_guide: int) -> list[int]:
    """Timesteps (T down to 1) at which guidance fires: every ``s_guide``-th step from T."""
    return [t for t in range(T, 0, -1) if (T - t) % s_guide == 0]


@dataclass
class DeguResult:
    image: np.ndarray
    z0: np.ndarray
    trace: list = field(default_factory=list)
    n_guided: int = 0


def run_degu(model: DenoiserModel, scene: Scene, z_T: np.ndarray, spec: GuidanceSpec,
             sched: NoiseSchedule, seed: int = 0, trace: bool = False) -> DeguResult:
    """Denoise from ``z_T`` with optional reward guidance, then blend with the input.

    The unmasked pixels of the returned image are the input image's pixels.
    """
    z_m = masked_latent(scene.image, scene.mask)
    mask = scene.mask
    c = scene.prompt
    rng = sampler_seed(seed)
    terms = scene_rewards(model, scene, spec)
    fire = set(guided_steps(sched.T, spec.s_guide)) if spec.enabled else set()
    z = np.asarray(z_T, dtype=np.float64)
    rows = []
    n_guided = 0

    def eps_fn(zt, t):
        return cfg_predict(model, zt, t, c, z_m, mask, spec.cfg_scale)

    for t in range(sched.T, 0, -1):
        noise = rng.standard_normal(z.shape) if t > 1 else None
        if t in fire:
            info = {"t": t} if trace else None
            eps = guided_eps(lambda zt: eps_fn(zt, t), z, t, terms, spec.modulator, sched, info)
            n_guided += 1
            if trace:
                rows.append(info)
        else:
            with ad.no_grad():
                eps = eps_fn(Tensor(z), t).data
        z = denoise_step(z, t, eps, sched, noise)
    m3 = mask[..., None]
    image = np.clip(decode(z), 0.0, 1.0) * m3 + decode(z_m) * (1.0 - m3)
    return DeguResult(image=image, z0=z, trace=rows, n_guided=n_guided)


def write_guidance_trace(path, rows: list[dict]):
    cols = ["t", "modulator", "r_c", "r_m", "r_q", "gnorm_c", "gnorm_m", "gnorm_q"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in cols])


def ablate_modulator(model: DenoiserModel, scenes: Sequence[Scene], noises: Sequence[np.ndarray],
                     spec: GuidanceSpec, sched: NoiseSchedule, seeds: Sequence[int],
                     modulators: Sequence[Modulator] | None = None, align_fn=None) -> list[dict]:
    """Run the same scenes/noise/seeds under each modulator and tabulate toy metrics.

    Includes an ``unguided`` row as the paired baseline. A chain that goes
    non-finite under a modulator is scored as an empty fill (known pixels, zero
    hole) and counted in the row's ``diverged`` column, so one unstable arm
    does not abort the table.
    """
    from .metrics import evaluate

    modulators = modulators or [
        Modulator.constant(0.5),
        Modulator("sqrt_one_minus_alpha_bar"),
        Modulator("sqrt_alpha_bar"),
    ]
    rows = []
    arms = [("unguided", spec.without_guidance())] + [(m.label, replace(spec, modulator=m)) for m in modulators]
    for label, s in arms:
        outs, diverged = [], 0
        for sc, z, sd in zip(scenes, noises, seeds):
            try:
                outs.append(run_degu(model, sc, z, s, sched, seed=sd).image)
            except (GuidanceError, ad.NonFiniteError) as exc:
                logger.warning("modulator %s diverged on scene %d: %s", label, sc.seed, exc)
                outs.append(decode(masked_latent(sc.image, sc.mask)))
                diverged += 1
        rep = evaluate(outs, scenes, align_fn=align_fn)
        rows.append({"modulator": label, **rep.as_row(), "diverged": diverged})
    return rows
