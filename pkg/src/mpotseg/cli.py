"""Experiment runner: ``python -m mpotseg <verb> [--config PATH] [--seed INT] [--out DIR]``.

Verbs
    train      fit one model; writes config.txt, metrics.csv and checkpoint.bin
    ablate     train every variant over paired seeds; writes ablation.csv
    dump-maps  render per-prompt and fused score maps of a checkpoint as PGM images
    diagnose   prompt dispersion and per-layer alignment strength of a checkpoint
    eval       evaluate a checkpoint on the held-out scenes

Exit status: 0 success, 2 configuration error, 3 divergence, 4 I/O error.
``MPOT_THREADS`` caps how many ablation runs execute in parallel processes.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io, metrics
from .alignment import Model, collapse_prompts, forward
from .autodiff import no_grad
from .config import ConfigError, ExperimentConfig, format_config, load_config, parse_config
from .synthetic import World
from .training import (
    DivergenceError,
    eval_scene_seeds,
    evaluate,
    fit,
    prompt_embeddings,
    train_miou_seen,
)

log = logging.getLogger("mpotseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

METRICS_HEADER = ["step", "phase", "loss_total", "loss_ce", "loss_focal", "loss_dice",
                  "miou_seen", "miou_unseen", "hiou", "pacc"]
ABLATION_HEADER = ["variant", "seed", "miou_seen", "miou_unseen", "hiou", "pacc",
                   "dispersion", "train_miou_seen"]
EVAL_HEADER = ["miou_seen", "miou_unseen", "hiou", "pacc"]
DIAG_HEADER = ["kind", "class", "layer", "value"]


def thread_cap() -> int:
    raw = os.environ.get("MPOT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MPOT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MPOT_THREADS must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------- train

@dataclass
class RunSummary:
    variant: str
    seed: int
    final: dict
    dispersion: float
    train_miou_seen: float
    seconds: float


def _train(cfg: ExperimentConfig, out: Path | None) -> RunSummary:
    t0 = time.perf_counter()
    world = World(cfg.world)
    result = fit(world, cfg.pipeline, cfg.schedule, cfg.loss)
    model = result.state.model
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        text = format_config(cfg)
        (out / "config.txt").write_text(text, encoding="utf-8")
        io.write_csv(out / "metrics.csv", METRICS_HEADER, result.trace)
        io.save_checkpoint(out / "checkpoint.bin", result.state.arrays(), text)
    disp = metrics.prompt_dispersion(prompt_embeddings(model, world), cfg.world.n_prompts)
    tr = train_miou_seen(model, world, cfg.schedule, cfg.pipeline)
    return RunSummary(cfg.pipeline.matcher, cfg.seed, result.trace[-1], disp, tr,
                      time.perf_counter() - t0)


def run_train(cfg: ExperimentConfig) -> RunSummary:
    """Train one model and write its artifacts under ``cfg.out``."""
    s = _train(cfg, Path(cfg.out))
    log.info("trained %s seed %d in %.1fs: seen %.3f unseen %.3f hIoU %.3f (train seen %.3f)",
             s.variant, s.seed, s.seconds, s.final["miou_seen"], s.final["miou_unseen"],
             s.final["hiou"], s.train_miou_seen)
    return s


def _ablation_job(args) -> RunSummary:
    cfg, out = args
    return _train(cfg, out)


def run_ablation(cfg: ExperimentConfig, variants=None, seeds=None, workers: int = 1) -> list[dict]:
    """Train each variant on the same seeds; write per-seed and mean rows to ``ablation.csv``."""
    variants = tuple(variants or cfg.ablation.variants)
    seeds = tuple(seeds or cfg.ablation.seeds)
    if len(variants) < 2:
        raise ConfigError("an ablation needs at least two variants")
    root = Path(cfg.out)
    jobs = [(cfg.with_matcher(v).with_seed(s), root / v / f"seed{s}") for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_ablation_job, jobs))
    else:
        summaries = [_ablation_job(j) for j in jobs]
    rows = []
    for v in variants:
        mine = [s for s in summaries if s.variant == v]
        for s in mine:
            rows.append({"variant": v, "seed": s.seed, **{k: float(s.final[k]) for k in EVAL_HEADER},
                         "dispersion": float(s.dispersion), "train_miou_seen": float(s.train_miou_seen)})
        mean = {k: float(np.mean([r[k] for r in rows if r["variant"] == v])) for k in ABLATION_HEADER[2:]}
        rows.append({"variant": v, "seed": "mean", **mean})
    io.write_csv(root / "ablation.csv", ABLATION_HEADER, rows)
    return rows


# ------------------------------------------------------ checkpoint verbs

def load_trained(path) -> tuple[ExperimentConfig, Model]:
    arrays, meta = io.load_checkpoint(path)
    cfg = parse_config(meta)
    return cfg, Model.from_arrays({k: v for k, v in arrays.items()
                                   if k.startswith(("prompts.", "gta.", "decoder."))})


def run_eval(checkpoint, out: Path) -> dict:
    cfg, model = load_trained(checkpoint)
    world = World(cfg.world)
    scenes = [world.generate_scene(s) for s in eval_scene_seeds(cfg.schedule)]
    row = evaluate(model, world, scenes, cfg.pipeline)
    io.write_csv(out / "eval.csv", EVAL_HEADER, [row])
    return row


def dump_score_maps(checkpoint, scene_seed: int | None, out: Path) -> list[Path]:
    """Final-layer score map per (class, prompt) plus each class's fused map, as PGM files."""
    cfg, model = load_trained(checkpoint)
    world = World(cfg.world)
    seed = eval_scene_seeds(cfg.schedule)[0] if scene_seed is None else scene_seed
    scene = world.generate_scene(seed)
    with no_grad():
        pred = forward(scene, model, world.text_encoder, cfg.pipeline)
    hl, wl = scene.grid
    n = cfg.world.n_prompts
    k = cfg.world.n_classes
    last = pred.scores.data[-1]
    fused = collapse_prompts(pred.fused, n).data
    out.mkdir(parents=True, exist_ok=True)
    written, scales = [], {}
    maps = [(f"class{c}_prompt{j}", last[:, c * n + j]) for c in range(k) for j in range(n)]
    maps += [(f"class{c}_fused", fused[:, c]) for c in range(k)]
    for name, values in maps:
        img, lo, hi = io.scale_to_bytes(values.reshape(hl, wl))
        path = out / f"{name}.pgm"
        io.write_pgm(path, img)
        scales[name] = (lo, hi)
        written.append(path)
    io.write_scale_sidecar(out / "scales.txt", scales)
    return written


def report_diagnostics(checkpoint, out: Path, classes=None) -> list[dict]:
    """Per probed class: one dispersion row and one alignment-strength row per layer."""
    cfg, model = load_trained(checkpoint)
    world = World(cfg.world)
    n = cfg.world.n_prompts
    classes = list(range(cfg.world.n_classes) if classes is None else classes)
    if any(not 0 <= c < cfg.world.n_classes for c in classes):
        raise ConfigError(f"probed classes must lie in 0..{cfg.world.n_classes - 1}")
    g = prompt_embeddings(model, world)
    scenes = [world.generate_scene(s) for s in eval_scene_seeds(cfg.schedule)]
    strength = np.zeros((cfg.world.n_classes, cfg.world.n_layers))
    with no_grad():
        for sc in scenes:
            s = forward(sc, model, world.text_encoder, cfg.pipeline).scores
            for c in classes:
                strength[c] += metrics.layer_alignment_strength(s, c, n)
    strength /= len(scenes)
    rows = []
    for c in classes:
        rows.append({"kind": "dispersion", "class": c, "layer": "",
                     "value": metrics.prompt_dispersion(g[c * n : (c + 1) * n], n)})
        rows += [{"kind": "alignment", "class": c, "layer": i + 1, "value": float(strength[c, i])}
                 for i in range(cfg.world.n_layers)]
    io.write_csv(out / "diagnostics.csv", DIAG_HEADER, rows)
    return rows


# ----------------------------------------------------------------- main

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m mpotseg", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("train", "ablate", "dump-maps", "diagnose", "eval"):
        sp = sub.add_parser(verb)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
        if verb in ("dump-maps", "diagnose", "eval"):
            sp.add_argument("--checkpoint", help="defaults to <out>/checkpoint.bin")
        if verb == "dump-maps":
            sp.add_argument("--scene-seed", type=int, help="scene to render (default: first eval scene)")
        if verb == "diagnose":
            sp.add_argument("--classes", help="comma-separated class ids to probe (default: all)")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out:
            cfg = replace(cfg, out=args.out)
        out = Path(cfg.out)
        ckpt = getattr(args, "checkpoint", None) or out / "checkpoint.bin"
        workers = thread_cap()
        if args.verb == "train":
            s = run_train(cfg)
            print(f"seen={s.final['miou_seen']:.4f} unseen={s.final['miou_unseen']:.4f} "
                  f"hiou={s.final['hiou']:.4f} train_seen={s.train_miou_seen:.4f} -> {out}")
        elif args.verb == "ablate":
            rows = run_ablation(cfg, workers=workers)
            for r in rows:
                if r["seed"] == "mean":
                    print(f"{r['variant']:9s} unseen={r['miou_unseen']:.4f} seen={r['miou_seen']:.4f} "
                          f"hiou={r['hiou']:.4f} dispersion={r['dispersion']:.4f}")
        elif args.verb == "eval":
            row = run_eval(ckpt, out)
            print(" ".join(f"{k}={v:.4f}" for k, v in row.items()))
        elif args.verb == "dump-maps":
            files = dump_score_maps(ckpt, args.scene_seed, out / "maps")
            print(f"wrote {len(files)} images to {out / 'maps'}")
        elif args.verb == "diagnose":
            classes = None
            if args.classes:
                try:
                    classes = [int(c) for c in args.classes.split(",")]
                except ValueError:
                    raise ConfigError(f"bad --classes {args.classes!r}") from None
            rows = report_diagnostics(ckpt, out, classes)
            print(f"wrote {len(rows)} rows to {out / 'diagnostics.csv'}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, io.FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
