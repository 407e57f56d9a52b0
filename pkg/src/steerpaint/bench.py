"""Paired-seed experiment orchestration over the four pipeline arms.

Arms:
    base   raw Gaussian start, unguided sampling
    prino  optimised start, unguided sampling
    degu   raw Gaussian start, reward-guided sampling
    full   optimised start, reward-guided sampling

Every arm of a scene shares the scene seed, so the raw start is the same
draw across arms (round 0 of the noise search starts from it too) and the
sampler's per-step noise is identical.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import derive_seed
from .denoiser import DenoiserModel
from .guidance import DeguResult, GuidanceSpec, ablate_modulator, run_degu, write_guidance_trace
from .imageio import write_pgm, write_ppm
from .metrics import MetricReport, evaluate, paired_difference, write_metrics_csv
from .noise_opt import NoiseOptResult, PrinoConfig, initial_noise, optimize_noise, write_trace_csv
from .rewards import reward_align
from .scenes import Scene, masked_latent
from .schedule import Modulator, NoiseSchedule

__all__ = ["ARMS", "Pipeline", "ArmOutput", "BenchResult", "scene_seed", "run_bench", "run_ablation"]

ARMS = ("base", "prino", "degu", "full")
_USES_NOISE_OPT = {"base": False, "prino": True, "degu": False, "full": True}
_USES_GUIDANCE = {"base": False, "prino": False, "degu": True, "full": True}


def scene_seed(run_seed: int, scene: Scene) -> int:
    return derive_seed(run_seed, "scene", scene.seed)


@dataclass
class ArmOutput:
    arm: str
    scene: Scene
    image: np.ndarray
    z_T: np.ndarray
    sample: DeguResult
    noise: NoiseOptResult | None = None


@dataclass
class Pipeline:
    model: DenoiserModel
    sched: NoiseSchedule
    prino: PrinoConfig = field(default_factory=PrinoConfig)
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)

    def __post_init__(self):
        self._noise_cache: dict = {}

    def latent_shape(self):
        c = self.model.cfg
        return (c.size, c.size, 3)

    def raw_noise(self, seed: int) -> np.ndarray:
        return initial_noise(seed, 0, self.latent_shape())

    def optimized_noise(self, scene: Scene, seed: int) -> NoiseOptResult:
        key = (scene.seed, seed)
        if key not in self._noise_cache:
            z_m = masked_latent(scene.image, scene.mask)
            self._noise_cache[key] = optimize_noise(self.model, scene.prompt, z_m, scene.mask,
                                                    self.prino, seed=seed)
        return self._noise_cache[key]

    def run_arm(self, scene: Scene, arm: str, seed: int, trace: bool = False) -> ArmOutput:
        if arm not in ARMS:
            raise ValueError(f"unknown arm {arm!r}; choose from {ARMS}")
        noise = self.optimized_noise(scene, seed) if _USES_NOISE_OPT[arm] else None
        z_T = noise.z_T if noise is not None else self.raw_noise(seed)
        spec = self.guidance if _USES_GUIDANCE[arm] else self.guidance.without_guidance()
        res = run_degu(self.model, scene, z_T, spec, self.sched, seed=seed, trace=trace)
        return ArmOutput(arm, scene, res.image, z_T, res, noise)

    def align_score(self, image: np.ndarray, scene: Scene) -> float:
        with ad.no_grad():
            return reward_align(image, scene.prompt, scene.mask, self.model).item()


@dataclass
class BenchResult:
    reports: dict  # arm -> MetricReport
    summary: list
    paired: list
    outputs: dict = field(default_factory=dict, repr=False)  # arm -> [ArmOutput]


def _summary_row(arm: str, rep: MetricReport) -> dict:
    return {"arm": arm, "n": len(rep.per_scene), **rep.as_row()}


def write_arm_artifacts(out_dir, o: ArmOutput, trace: bool):
    """Images for one (scene, arm) pair plus its traces when requested."""
    out_dir = Path(out_dir)
    write_ppm(out_dir / f"output_{o.arm}.ppm", o.image)
    if trace:
        if o.noise is not None:
            write_trace_csv(out_dir / f"noise_trace_{o.arm}.csv", o.noise.trace)
        if o.sample.trace:
            write_guidance_trace(out_dir / f"guidance_trace_{o.arm}.csv", o.sample.trace)


def write_scene_inputs(out_dir, scene: Scene):
    out_dir = Path(out_dir)
    write_ppm(out_dir / "input.ppm", scene.image)
    write_pgm(out_dir / "mask.pgm", scene.mask)
    write_ppm(out_dir / "masked.ppm", masked_latent(scene.image, scene.mask))


def run_bench(pipe: Pipeline, scenes: Sequence[Scene], arms: Sequence[str] = ARMS, run_seed: int = 0,
              out_dir=None, trace: bool = False, save_images: bool = False) -> BenchResult:
    """Run every arm on every scene and write metrics.csv / summary.csv / paired.csv."""
    for a in arms:
        if a not in ARMS:
            raise ValueError(f"unknown arm {a!r}")
    outputs = {a: [] for a in arms}
    for sc in scenes:
        seed = scene_seed(run_seed, sc)
        for a in arms:
            o = pipe.run_arm(sc, a, seed, trace=trace)
            outputs[a].append(o)
            if out_dir is not None and (save_images or trace):
                d = Path(out_dir) / f"scene_{sc.seed}"
                write_scene_inputs(d, sc)
                write_arm_artifacts(d, o, trace)
    reports = {a: evaluate([o.image for o in outputs[a]], list(scenes), align_fn=pipe.align_score)
               for a in arms}
    summary = [_summary_row(a, reports[a]) for a in arms]
    paired = []
    if "base" in reports:
        for a in arms:
            if a == "base":
                continue
            for key in ("correct", "boundary_energy", "composite_reward"):
                paired.append({"arm": a, "vs": "base", **paired_difference(reports[a], reports["base"], key)})
    if out_dir is not None:
        rows = [{"arm": a, **r} for a in arms for r in reports[a].per_scene]
        write_metrics_csv(Path(out_dir) / "metrics.csv", rows)
        write_metrics_csv(Path(out_dir) / "summary.csv", summary)
        write_metrics_csv(Path(out_dir) / "paired.csv", paired)
    return BenchResult(reports, summary, paired, outputs)


def run_ablation(pipe: Pipeline, scenes: Sequence[Scene], run_seed: int = 0, out_dir=None,
                 modulators: Sequence[Modulator] | None = None) -> list[dict]:
    """Modulator ablation on the raw-noise guided arm; writes ablation.csv."""
    seeds = [scene_seed(run_seed, sc) for sc in scenes]
    noises = [pipe.raw_noise(s) for s in seeds]
    rows = ablate_modulator(pipe.model, scenes, noises, pipe.guidance, pipe.sched, seeds,
                            modulators=modulators, align_fn=pipe.align_score)
    if out_dir is not None:
        write_metrics_csv(Path(out_dir) / "ablation.csv", rows)
    return rows


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
