"""Run configuration: a flat INI file with one section per component.

Unknown sections or keys are rejected. Every run writes its resolved config
next to its outputs so the run can be reproduced from that file alone.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, TrainConfig
from .guidance import GAMMA_RATIO, GuidanceSpec
from .noise_opt import PrinoConfig
from .schedule import Modulator, NoiseSchedule, build_schedule

__all__ = [
    "ConfigError",
    "ScheduleParams",
    "ModelParams",
    "TrainParams",
    "PrinoParams",
    "GuidanceParams",
    "RunParams",
    "RunConfig",
    "load_config",
    "derive_seed",
]


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleParams:
    T: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1


@dataclass
class ModelParams:
    d: int = 32
    patch: int = 4
    mlp_ratio: int = 4
    local: int = 32
    init_seed: int = 0


@dataclass
class TrainParams:
    steps: int = 5000
    batch_size: int = 32
    lr_train: float = 2e-3
    cfg_drop_prob: float = 0.1
    log_every: int = 50
    align_steps: int = 400
    align_temperature: float = 0.1
    align_lr: float = 0.05
    corpus_size: int = 4096
    corpus_seed: int = 0
    object_aligned_frac: float = 0.45


@dataclass
class PrinoParams:
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


@dataclass
class GuidanceParams:
    gamma_scale: float = 15.0
    gamma_c: float = GAMMA_RATIO[0]
    gamma_m: float = GAMMA_RATIO[1]
    gamma_q: float = GAMMA_RATIO[2]
    modulator: str = "sqrt_alpha_bar"
    modulator_value: float = 0.5
    s_guide: int = 1
    cfg_scale: float = 7.5


@dataclass
class RunParams:
    seed: int = 0
    out_dir: str = "runs"
    enable_prino: bool = True
    enable_degu: bool = True
    trace: bool = False


_SECTIONS = {
    "schedule": ScheduleParams,
    "model": ModelParams,
    "train": TrainParams,
    "prino": PrinoParams,
    "guidance": GuidanceParams,
    "run": RunParams,
}


@dataclass
class RunConfig:
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    model: ModelParams = field(default_factory=ModelParams)
    train: TrainParams = field(default_factory=TrainParams)
    prino: PrinoParams = field(default_factory=PrinoParams)
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    run: RunParams = field(default_factory=RunParams)

    # -- derived objects ---------------------------------------------------
    def build_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return build_schedule(s.T, s.beta_start, s.beta_end)

    def denoiser_config(self) -> DenoiserConfig:
        m = self.model
        return DenoiserConfig(d=m.d, patch=m.patch, mlp_ratio=m.mlp_ratio, local=m.local,
                              T=self.schedule.T)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            steps=t.steps, batch_size=t.batch_size, lr_train=t.lr_train,
            cfg_drop_prob=t.cfg_drop_prob, log_every=t.log_every,
            seed=derive_seed(self.run.seed, "train"), align_steps=t.align_steps,
            align_temperature=t.align_temperature, align_lr=t.align_lr,
        )

    def prino_config(self) -> PrinoConfig:
        return PrinoConfig(**dataclasses.asdict(self.prino))

    def guidance_spec(self) -> GuidanceSpec:
        g = self.guidance
        mod = Modulator.constant(g.modulator_value) if g.modulator == "constant" else Modulator(g.modulator)
        return GuidanceSpec(
            gamma_c=g.gamma_scale * g.gamma_c,
            gamma_m=g.gamma_scale * g.gamma_m,
            gamma_q=g.gamma_scale * g.gamma_q,
            modulator=mod, s_guide=g.s_guide, cfg_scale=g.cfg_scale,
        )

    # -- serialisation -----------------------------------------------------
    def to_ini(self) -> str:
        lines = []
        for name in _SECTIONS:
            lines.append(f"[{name}]")
            sec = getattr(self, name)
            for f in fields(sec):
                lines.append(f"{f.name} = {_render(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str, source: str = "<string>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        cfg = cls()
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"{source}: unknown section [{section}]")
            target = getattr(cfg, section)
            known = {f.name: f for f in fields(target)}
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {section}.{key}")
                default = getattr(target, key)
                setattr(target, key, _parse(raw, default, f"{section}.{key}", source))
        cfg.validate(source)
        return cfg

    def validate(self, source: str = "<config>"):
        try:
            self.build_schedule()
            self.guidance_spec()
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        if self.prino.tau_round < 1 or self.prino.tau_iter < 0:
            raise ConfigError(f"{source}: tau_round must be >= 1 and tau_iter >= 0")
        if self.schedule.T != self.denoiser_config().T:
            raise ConfigError(f"{source}: inconsistent T")


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default, key: str, source: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{source}: bad value for {key}: {raw!r}") from exc
    return raw


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return RunConfig.from_ini(path.read_text(), source=str(path))


def derive_seed(seed: int, *keys) -> int:
    """Split one global seed into independent per-component seeds.

    String keys are folded to integers so the mapping is stable across runs.
    """
    ints = [int(seed)]
    for k in keys:
        if isinstance(k, str):
            ints.append(int.from_bytes(k.encode(), "little") % (2**63))
        else:
            ints.append(int(k))
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint64)[0] % (2**63))
