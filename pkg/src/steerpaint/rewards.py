"""Differentiable toy rewards scored on the one-step clean estimate.

All rewards are "higher is better" scalars and accept arrays or Tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .scenes import NULL_TOKEN
from .schedule import NoiseSchedule, ScheduleError

__all__ = [
    "x0_estimate",
    "reward_align",
    "reward_coherence",
    "reward_preference",
    "RewardHandle",
]


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def x0_estimate(z_t, t: int, eps_pred, sched: NoiseSchedule):
    """Tweedie estimate ``(z_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)``."""
    sched.check_t(t, allow_zero=True)
    ab = float(sched.alpha_bar[t])
    if ab <= 0.0:
        raise ScheduleError("alpha_bar is zero; clean estimate undefined")
    if ab == 1.0:
        return z_t
    return (z_t - np.sqrt(1.0 - ab) * eps_pred) * (1.0 / np.sqrt(ab))


def reward_align(x0, c, mask, model) -> Tensor:
    """Cosine between the masked region's mean patch feature and the prompt vector.

    Image features come from the model's frozen latent-channel patch embedding;
    the prompt vector is the mean of ``align_embed`` rows over non-null tokens.
    Patches are weighted by the fraction of their pixels inside ``mask``.
    """
    from .denoiser import masked_patch_weights

    w = masked_patch_weights(mask, model.cfg.patch)
    if w.sum() <= 0:
        raise ValueError("reward_align needs a nonempty mask")
    c = np.asarray(c)
    active = c[c != NULL_TOKEN]
    if active.size == 0:
        raise ValueError("prompt has no active tokens")
    feats = model.patch_features(_t(x0))
    f = (Tensor(w[:, None] / w.sum()) * feats).sum(axis=0)
    e = model.params["align_embed"].data[active].mean(axis=0)
    e = Tensor(e / np.linalg.norm(e))
    return (f * e).sum() / f.square().sum().sqrt()


def reward_coherence(x0, z_m, mask) -> Tensor:
    """Negative mean squared jump between 4-neighbours straddling the mask edge.

    The image is composited from ``x0`` inside the mask and ``z_m`` outside;
    jumps are averaged over channels and boundary pairs. No boundary gives 0.
    """
    mask = np.asarray(mask, dtype=np.float64)
    m3 = mask[..., None]
    comp = _t(x0) * Tensor(m3) + Tensor(np.asarray(z_m, dtype=np.float64) * (1.0 - m3))
    bx = np.abs(mask[:, 1:] - mask[:, :-1])[..., None]
    by = np.abs(mask[1:, :] - mask[:-1, :])[..., None]
    n_pairs = bx.sum() + by.sum()
    if n_pairs == 0:
        return Tensor(0.0) if not isinstance(x0, Tensor) else (comp * 0.0).sum()
    dx = comp[:, 1:, :] - comp[:, :-1, :]
    dy = comp[1:, :, :] - comp[:-1, :, :]
    energy = (dx.square() * Tensor(bx)).sum() + (dy.square() * Tensor(by)).sum()
    return -energy * (1.0 / (n_pairs * comp.shape[-1]))


def reward_preference(x0, c=None) -> Tensor:
    """Negative squared total variation plus out-of-gamut penalty, per element.

    ``c`` is accepted for interface symmetry; the toy preference model ignores it.
    """
    x = _t(x0)
    dx = x[:, 1:, :] - x[:, :-1, :]
    dy = x[1:, :, :] - x[:-1, :, :]
    tv = dx.square().sum() + dy.square().sum()
    over = (x - 1.0).relu()
    under = (-x).relu()
    penalty = over.square().sum() + under.square().sum()
    return -(tv + penalty) * (1.0 / x.size)


@dataclass(frozen=True)
class RewardHandle:
    """Binds a reward kind to the context it needs (prompt, mask, known latent, model)."""

    kind: str
    c: np.ndarray | None = None
    mask: np.ndarray | None = None
    z_m: np.ndarray | None = None
    model: object = None

    KINDS = ("align", "coherence", "preference")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown reward {self.kind!r}")

    def __call__(self, x0) -> Tensor:
        if self.kind == "align":
            return reward_align(x0, self.c, self.mask, self.model)
        if self.kind == "coherence":
            return reward_coherence(x0, self.z_m, self.mask)
        return reward_preference(x0, self.c)
