"""Initial-noise optimisation that steers attention into the mask.

The optimiser tunes a per-element Gaussian ``N(mu, sigma^2)`` over the starting
latent so that, at the first denoising step, both the aggregated cross-attention
map (prompt tokens -> patches) and the aggregated self-attention map (masked
patches -> all patches) put their mass inside the mask.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import DenoiserModel, forward
from .scenes import NULL_TOKEN, downsample_mask

__all__ = [
    "NoiseDistribution",
    "PrinoConfig",
    "NoisePool",
    "NoiseOptResult",
    "aggregate_cross",
    "aggregate_self",
    "loss_cross",
    "loss_self",
    "loss_kl",
    "dynamic_lambda3",
    "loss_joint",
    "attention_losses",
    "initial_noise",
    "optimize_noise",
    "write_trace_csv",
]

NOISE_STREAM = 0x2015E


@dataclass
class NoiseDistribution:
    mu: Tensor
    sigma: Tensor

    @classmethod
    def standard(cls, shape) -> "NoiseDistribution":
        return cls(Tensor(np.zeros(shape)), Tensor(np.ones(shape)))


@dataclass(frozen=True)
class PrinoConfig:
    lambda1: float = 1.0
    lambda2: float = 5.0
    lambda3_base: float = 500.0
    lambda3_slope: float = 1e6
    tau_c: float = 0.1
    tau_s: float = 0.1
    tau_kl: float = 0.003
    tau_iter: int = 40
    tau_round: int = 5
    lr: float = 0.1
    t_ini: int | None = None  # None -> the schedule's T (first denoising step)


def aggregate_cross(A_cross, active_tokens) -> Tensor:
    """Per-token spatial distributions averaged over active tokens, as an (h', w') map.

    Each active column of the (P, L) map is renormalised to sum to one over
    patches before averaging, so the result is itself a distribution over space.
    """
    A = A_cross if isinstance(A_cross, Tensor) else Tensor(A_cross)
    active = np.asarray(active_tokens, dtype=bool)
    if active.ndim != 1 or active.shape[0] != A.shape[-1]:
        raise ValueError("active_tokens must flag each prompt position")
    if not active.any():
        raise ValueError("no active tokens to aggregate")
    idx = np.nonzero(active)[0]
    cols = A[:, idx]
    cols = cols / cols.sum(axis=0, keepdims=True)
    g = int(round(np.sqrt(A.shape[0])))
    return cols.mean(axis=1).reshape(g, g)


def aggregate_self(A_self, m_prime) -> Tensor:
    """Self-attention rows averaged over the masked query patches, as an (h', w') map."""
    A = A_self if isinstance(A_self, Tensor) else Tensor(A_self)
    m = np.asarray(m_prime, dtype=np.float64).reshape(-1)
    if m.shape[0] != A.shape[0]:
        raise ValueError("mask resolution does not match the attention map")
    if m.sum() <= 0:
        raise ValueError("mask has no masked patch")
    g = int(round(np.sqrt(A.shape[0])))
    return (Tensor((m / m.sum())[None, :]) @ A).reshape(g, g)


def _steer_loss(A_agg, m_prime) -> Tensor:
    A = A_agg if isinstance(A_agg, Tensor) else Tensor(A_agg)
    m = np.asarray(m_prime, dtype=np.float64)
    if m.shape != A.shape:
        raise ValueError(f"map {A.shape} and mask {m.shape} differ")
    return (Tensor(1.0 - m) * A - Tensor(m) * A).sum()


def loss_cross(A_c_agg, m_prime) -> Tensor:
    """Attention outside the mask minus attention inside it (cross-attention map)."""
    return _steer_loss(A_c_agg, m_prime)


def loss_self(A_s_agg, m_prime) -> Tensor:
    """Same objective as :func:`loss_cross`, applied to the self-attention map."""
    return _steer_loss(A_s_agg, m_prime)


def loss_kl(dist: NoiseDistribution | None = None, *, mu=None, log_sigma=None) -> Tensor:
    """Mean elementwise KL(N(mu, sigma^2) || N(0, 1)).

    Pass either a ``NoiseDistribution`` or ``mu``/``log_sigma`` Tensors; the
    log-parameterised form is what the optimiser differentiates.
    """
    if dist is not None:
        sig = dist.sigma if isinstance(dist.sigma, Tensor) else Tensor(dist.sigma)
        if np.any(sig.data <= 0):
            raise ValueError("sigma must be strictly positive")
        mu = dist.mu if isinstance(dist.mu, Tensor) else Tensor(dist.mu)
        var = sig.square()
        return ((mu.square() + var - var.log() - 1.0) * 0.5).mean()
    var = (log_sigma * 2.0).exp()
    return ((mu.square() + var - log_sigma * 2.0 - 1.0) * 0.5).mean()


def dynamic_lambda3(lkl: float, cfg: PrinoConfig = PrinoConfig()) -> float:
    return cfg.lambda3_base + float(lkl) * cfg.lambda3_slope


def loss_joint(lc, ls, lkl, cfg: PrinoConfig = PrinoConfig()):
    """``l1*L_c + l2*L_s + l3(L_kl)*L_kl``; the KL weight is itself a function of the KL value.

    Gradients flow through the weight too, so this is an ordinary function of (mu, sigma).
    """
    lam3 = cfg.lambda3_base + lkl * cfg.lambda3_slope
    return cfg.lambda1 * lc + cfg.lambda2 * ls + lam3 * lkl


def attention_losses(model: DenoiserModel, z, t: int, c, z_m, mask) -> tuple[Tensor, Tensor, object]:
    """Forward once and return (L_c, L_s, tap) for a single latent."""
    m_att = downsample_mask(mask, model.cfg.patch)
    _, tap = forward(model, z, t, c, z_m, mask)
    active = np.asarray(c) != NULL_TOKEN
    lc = loss_cross(aggregate_cross(tap.A_cross_t, active), m_att)
    ls = loss_self(aggregate_self(tap.A_self_t, m_att), m_att)
    return lc, ls, tap


def initial_noise(seed: int, round_index: int, shape) -> np.ndarray:
    """Starting latent for ``round_index``; round 0 is also the unoptimised baseline draw."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), NOISE_STREAM, int(round_index)]))
    return rng.standard_normal(shape)


@dataclass
class NoisePool:
    entries: list = field(default_factory=list)  # (latent, L_joint, round)

    def add(self, latent: np.ndarray, value: float, round_index: int):
        self.entries.append((latent, float(value), int(round_index)))

    def argmin(self):
        if not self.entries:
            raise ValueError("empty noise pool")
        # min() keeps the first of equal keys, i.e. the earliest round
        return min(self.entries, key=lambda e: e[1])


@dataclass
class NoiseOptResult:
    z_T: np.ndarray
    exit: str  # "early" or "pool"
    round_index: int
    forward_passes: int
    trace: list = field(default_factory=list)
    pool: NoisePool = field(default_factory=NoisePool)

    def final(self) -> dict | None:
        rows = [r for r in self.trace if r["round"] == self.round_index]
        return rows[-1] if rows else None


def optimize_noise(model: DenoiserModel, c, z_m, mask, cfg: PrinoConfig = PrinoConfig(),
                   seed: int = 0, t_ini: int | None = None) -> NoiseOptResult:
    """Run the round/iteration noise search and return the chosen starting latent.

    Each round draws fresh noise, resets ``mu = 0, sigma = 1`` and takes up to
    ``tau_iter`` plain SGD steps on ``(mu, log sigma)``. A round returns
    immediately once both attention losses fall below their thresholds, and
    stops early once the KL term exceeds ``tau_kl``. Otherwise its last
    evaluated latent joins a pool, and the pool's lowest joint loss wins.

    ``mask`` is on the latent grid; the attention-resolution mask is derived
    from it by nearest-neighbour sampling.
    """
    shape = np.shape(z_m)
    if t_ini is None:
        t_ini = model.cfg.T if cfg.t_ini is None else cfg.t_ini
    t = int(t_ini)
    pool = NoisePool()
    trace: list[dict] = []
    passes = 0
    for r in range(cfg.tau_round):
        z_T = initial_noise(seed, r, shape)
        mu = np.zeros(shape)
        log_sigma = np.zeros(shape)
        last = (z_T, float("inf"))
        for j in range(cfg.tau_iter):
            mu_t = Tensor(mu, requires_grad=True)
            ls_t = Tensor(log_sigma, requires_grad=True)
            z = mu_t + ls_t.exp() * Tensor(z_T)
            lc, lss, _ = attention_losses(model, z, t, c, z_m, mask)
            lkl = loss_kl(mu=mu_t, log_sigma=ls_t)
            lj = loss_joint(lc, lss, lkl, cfg)
            passes += 1
            row = {
                "round": r, "iter": j, "L_c": lc.item(), "L_s": lss.item(), "L_kl": lkl.item(),
                "lambda3": dynamic_lambda3(lkl.item(), cfg), "L_joint": lj.item(), "event": "step",
            }
            trace.append(row)
            latent = z.data.copy()
            last = (latent, row["L_joint"])
            if row["L_c"] < cfg.tau_c and row["L_s"] < cfg.tau_s:
                row["event"] = "early_stop"
                ad.current_tape().free()
                return NoiseOptResult(latent, "early", r, passes, trace, pool)
            if row["L_kl"] > cfg.tau_kl:
                row["event"] = "kl_break"
                ad.current_tape().free()
                break
            if j == cfg.tau_iter - 1:
                # an update here would never be scored; the round ends on this iterate
                ad.current_tape().free()
                break
            g_mu, g_ls = ad.grad(lj, [mu_t, ls_t])
            mu = mu - cfg.lr * g_mu
            log_sigma = log_sigma - cfg.lr * g_ls
        pool.add(last[0], last[1], r)
    latent, _, r = pool.argmin()
    return NoiseOptResult(latent, "pool", r, passes, trace, pool)


def write_trace_csv(path, trace: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["round", "iter", "L_c", "L_s", "L_kl", "lambda3", "L_joint", "event"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in trace:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in cols])
