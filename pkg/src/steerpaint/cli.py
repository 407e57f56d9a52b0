"""Command line entry point: ``steerpaint {train,inpaint,bench,ablate-modulator}``.

Exit codes: 0 success, 2 usage error, 3 bad config, 4 bad checkpoint,
5 numerical failure (divergence or non-finite guidance).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .autodiff import NonFiniteError
from .bench import ARMS, Pipeline, run_ablation, run_bench, write_arm_artifacts, write_scene_inputs, scene_seed
from .config import ConfigError, RunConfig, load_config
from .denoiser import CheckpointError, DenoiserModel, DivergenceError, load_checkpoint, save_checkpoint, train
from .guidance import GuidanceError
from .metrics import BenchmarkSuite, evaluate, write_metrics_csv
from .scenes import generate_corpus, generate_scene

log = logging.getLogger("steerpaint")

OUT_ROOT_ENV = "STEERPAINT_OUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 2, 3, 4, 5


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if getattr(args, "trace", False):
        cfg.run.trace = True
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    """``--out`` wins; otherwise ``$STEERPAINT_OUT_ROOT`` (or the config's out_dir) / command."""
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV) or cfg.run.out_dir
    return Path(root) / args.command


def _model(args, cfg: RunConfig) -> DenoiserModel:
    if not args.checkpoint:
        raise CheckpointError("--checkpoint is required")
    model = load_checkpoint(args.checkpoint)
    if model.cfg.T != cfg.schedule.T:
        raise CheckpointError(f"checkpoint trained for T={model.cfg.T}, config has T={cfg.schedule.T}")
    return model


def _pipeline(args, cfg) -> Pipeline:
    return Pipeline(_model(args, cfg), cfg.build_schedule(), cfg.prino_config(), cfg.guidance_spec())


def _default_arm(cfg: RunConfig) -> str:
    return {(False, False): "base", (True, False): "prino",
            (False, True): "degu", (True, True): "full"}[(cfg.run.enable_prino, cfg.run.enable_degu)]


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    if args.steps is not None:
        cfg.train.steps = args.steps
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    t = cfg.train
    corpus = generate_corpus(t.corpus_size, t.corpus_seed, t.object_aligned_frac)
    model = DenoiserModel(cfg.denoiser_config(), seed=cfg.model.init_seed)
    log.info("training %d steps on %d scenes", t.steps, len(corpus))
    res = train(model, corpus, cfg.build_schedule(), cfg.train_config())
    meta = {"steps": t.steps, "seed": cfg.run.seed, "loss_curve": res.loss_curve,
            "align_loss": [res.align_curve[0], res.align_curve[-1]] if res.align_curve else []}
    save_checkpoint(model, out / "checkpoint.npz", meta=meta)
    write_metrics_csv(out / "loss_curve.csv", [{"step": s, "loss": l} for s, l in res.loss_curve])
    write_metrics_csv(out / "align_curve.csv", [{"step": i, "loss": l} for i, l in enumerate(res.align_curve)])
    print(f"checkpoint: {out / 'checkpoint.npz'}")
    return EXIT_OK


def _scene(args):
    if args.scene_seed is not None:
        return generate_scene(args.scene_seed, args.mode)
    return BenchmarkSuite()[args.scene]


def cmd_inpaint(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    pipe = _pipeline(args, cfg)
    scene = _scene(args)
    arms = args.arm or [_default_arm(cfg)]
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    write_scene_inputs(out, scene)
    seed = scene_seed(cfg.run.seed, scene)
    outputs = [pipe.run_arm(scene, a, seed, trace=cfg.run.trace) for a in arms]
    rows = []
    for o in outputs:
        write_arm_artifacts(out, o, cfg.run.trace)
        rep = evaluate([o.image], [scene], align_fn=pipe.align_score)
        rows.append({"arm": o.arm, **rep.per_scene[0]})
    write_metrics_csv(out / "metrics.csv", rows)
    for r in rows:
        print(f"{r['arm']:6s} correct={r['correct']} boundary_energy={r['boundary_energy']:.5f}")
    return EXIT_OK


def _suite(args):
    scenes = BenchmarkSuite().scenes
    return scenes[: args.scenes] if args.scenes else scenes


def cmd_bench(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    pipe = _pipeline(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    res = run_bench(pipe, _suite(args), args.arm or ARMS, cfg.run.seed, out_dir=out,
                    trace=cfg.run.trace, save_images=args.save_images)
    for row in res.summary:
        print(f"{row['arm']:6s} acc={row['alignment_accuracy']:.3f} "
              f"boundary={row['boundary_energy']:.5f} composite={row['composite_reward']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    pipe = _pipeline(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    rows = run_ablation(pipe, _suite(args), cfg.run.seed, out_dir=out)
    for row in rows:
        print(f"{row['modulator']:26s} composite={row['composite_reward']:.4f} acc={row['alignment_accuracy']:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="steerpaint", description="Toy diffusion inpainting with steered initial noise and reward guidance.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", help="INI config file (defaults used when omitted)")
        if checkpoint:
            sp.add_argument("--checkpoint", help="trained denoiser .npz")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV} or run.out_dir, plus command)")
        sp.add_argument("--trace", action="store_true", help="write per-iteration / per-step traces")

    sp = sub.add_parser("train", help="train the denoiser")
    common(sp, checkpoint=False)
    sp.add_argument("--steps", type=int, help="override train.steps")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("inpaint", help="inpaint one scene")
    common(sp)
    sp.add_argument("--arm", action="append", choices=ARMS, help="repeatable; default from run flags")
    sp.add_argument("--scene", type=int, default=0, help="benchmark scene index")
    sp.add_argument("--scene-seed", type=int, help="generate a fresh scene from this seed instead")
    sp.add_argument("--mode", choices=("object_aligned", "freeform"), default="object_aligned")
    sp.set_defaults(func=cmd_inpaint)

    sp = sub.add_parser("bench", help="run arms on the benchmark suite")
    common(sp)
    sp.add_argument("--arm", action="append", choices=ARMS, help="repeatable; default all arms")
    sp.add_argument("--scenes", type=int, help="use only the first N benchmark scenes")
    sp.add_argument("--save-images", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("ablate-modulator", help="compare guidance modulators")
    common(sp)
    sp.add_argument("--scenes", type=int, help="use only the first N benchmark scenes")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DivergenceError, GuidanceError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
