"""Toy-scale diffusion inpainting with attention-steered initial noise and reward guidance."""
from .autodiff import Tensor, backward, grad, no_grad
from .bench import ARMS, Pipeline, run_ablation, run_bench
from .config import RunConfig, load_config
from .denoiser import DenoiserConfig, DenoiserModel, cfg_predict, forward, load_checkpoint, save_checkpoint, train
from .estimator import SteeredInpainter
from .guidance import GuidanceSpec, guided_eps, run_degu
from .metrics import BenchmarkSuite, classify_region, evaluate
from .noise_opt import PrinoConfig, optimize_noise
from .scenes import Scene, generate_corpus, generate_scene
from .schedule import Modulator, build_schedule, denoise_step

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad", "no_grad",
    "ARMS", "Pipeline", "run_ablation", "run_bench",
    "RunConfig", "load_config",
    "DenoiserConfig", "DenoiserModel", "cfg_predict", "forward", "load_checkpoint", "save_checkpoint", "train",
    "SteeredInpainter",
    "GuidanceSpec", "guided_eps", "run_degu",
    "BenchmarkSuite", "classify_region", "evaluate",
    "PrinoConfig", "optimize_noise",
    "Scene", "generate_corpus", "generate_scene",
    "Modulator", "build_schedule", "denoise_step",
]
