"""Linear DDPM noise schedules, forward diffusion and the ancestral reverse step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

__all__ = [
    "NoiseSchedule",
    "Modulator",
    "ScheduleError",
    "build_schedule",
    "forward_diffuse",
    "noise_to_score",
    "score_to_noise",
    "denoise_step",
    "modulate",
]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas plus cumulative products.

    ``alpha_bar`` has length ``T + 1`` with ``alpha_bar[0] == 1``; ``beta[t - 1]``
    is the variance added by step ``t``.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def beta_at(self, t: int) -> float:
        self.check_t(t)
        return float(self.beta[t - 1])

    def check_t(self, t: int, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [{lo}, {self.T}]")

    def posterior_variance(self, t: int) -> float:
        b = self.beta_at(t)
        return b * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    beta.flags.writeable = False
    alpha_bar.flags.writeable = False
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def forward_diffuse(z0, t: int, eps, sched: NoiseSchedule):
    """Noise ``z0`` to step ``t``. Works on arrays or Tensors (differentiably)."""
    sched.check_t(t)
    if np.shape(_data(z0)) != np.shape(_data(eps)):
        raise ScheduleError("eps must match z0's shape")
    ab = float(sched.alpha_bar[t])
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def noise_to_score(eps, t: int, sched: NoiseSchedule):
    sched.check_t(t, allow_zero=True)
    ab = float(sched.alpha_bar[t])
    if ab >= 1.0:
        raise ScheduleError("score undefined where alpha_bar == 1")
    return -eps / np.sqrt(1.0 - ab)


def score_to_noise(score, t: int, sched: NoiseSchedule):
    sched.check_t(t, allow_zero=True)
    ab = float(sched.alpha_bar[t])
    if ab >= 1.0:
        raise ScheduleError("score undefined where alpha_bar == 1")
    return -score * np.sqrt(1.0 - ab)


def denoise_step(z_t, t: int, eps_hat, sched: NoiseSchedule, rng_noise=None) -> np.ndarray:
    """One ancestral DDPM step z_t -> z_{t-1} using the small posterior variance.

    ``rng_noise`` is required for ``t > 1`` and ignored at ``t == 1``.
    """
    sched.check_t(t)
    z_t, eps_hat = _data(z_t), _data(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ScheduleError("eps_hat must match z_t's shape")
    beta = float(sched.beta[t - 1])
    ab = float(sched.alpha_bar[t])
    mean = (z_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    if rng_noise is None:
        raise ScheduleError("rng_noise needed for t > 1")
    return mean + np.sqrt(sched.posterior_variance(t)) * _data(rng_noise)


@dataclass(frozen=True)
class Modulator:
    """Timestep-dependent scale on reward gradients."""

    kind: str = "sqrt_alpha_bar"
    value: float = 0.5

    KINDS = ("sqrt_alpha_bar", "sqrt_one_minus_alpha_bar", "constant")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown modulator kind {self.kind!r}")

    @classmethod
    def constant(cls, value: float = 0.5) -> "Modulator":
        return cls("constant", float(value))

    @property
    def label(self) -> str:
        if self.kind == "constant":
            return f"constant({self.value:g})"
        return self.kind


def modulate(mod: Modulator, t: int, sched: NoiseSchedule) -> float:
    sched.check_t(t, allow_zero=True)
    if mod.kind == "sqrt_alpha_bar":
        return float(np.sqrt(sched.alpha_bar[t]))
    if mod.kind == "sqrt_one_minus_alpha_bar":
        return float(np.sqrt(1.0 - sched.alpha_bar[t]))
    return float(mod.value)
