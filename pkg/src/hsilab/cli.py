"""Command-line entry point: synth | masks | pretrain | adapt | eval | gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All commands are
deterministic given --seed; the resolved config and seed are printed at
start. HV_LOG in {quiet, info, debug} controls verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import pipeline
from .cube import SynthSpec, synth_scene, write_cube, write_labels
from .masks import write_masks
from .pipeline import TrainConfig, load_checkpoint, save_checkpoint
from .pseudolabel import EmptyMaskPool
from .verification import run_all

log = logging.getLogger("hsilab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _setup_logging():
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("HV_LOG", "info"), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)


def _print_config(cfg: TrainConfig):
    print(f"seed = {cfg.seed}")
    for line in pipeline.format_config(cfg).splitlines():
        print(f"config: {line}")


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"bad --size {text!r}, expected HxW") from exc


def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError as exc:
        raise UsageError(f"bad --range {text!r}, expected LO:HI") from exc


def _resolve_config(args, overrides: dict) -> TrainConfig:
    base = TrainConfig()
    if getattr(args, "config", None):
        base = pipeline.read_config(args.config, base=base)
    return dataclasses.replace(base, **overrides)


def _map_jobs(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _resolve_config(args, {"seed": args.seed})
    _print_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = _parse_size(args.size)
    lo, hi = _parse_range(args.range)

    def one(i: int):
        spec = SynthSpec(height=h, width=w, bands=args.bands, wavelength_range=(lo, hi),
                         n_materials=args.materials, noise_sigma=args.noise,
                         seed=args.seed + i)
        cube, labels, regions = synth_scene(spec)
        stem = out / f"scene_{i:04d}"
        write_cube(cube, stem.with_suffix(".hvc"))
        write_labels(labels, stem.with_suffix(".hvl"))
        write_masks(regions, stem.with_suffix(".hvm"))
        return stem

    stems = _map_jobs(one, range(args.images), args.jobs)
    print(f"wrote {len(stems)} scenes to {out}")
    return 0


def cmd_masks(args) -> int:
    cfg = _resolve_config(args, {
        "seed": args.seed, "tau": args.tau, "min_area": args.min_area,
        "r_max": args.r_max, "sources": args.sources, "kmeans_k": args.kmeans_k,
    })
    _print_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = pipeline.load_cube_dir(args.cubes)
    fusion = cfg.fusion()

    def one(item):
        name, cube = item
        try:
            target = pipeline.generate_target(
                cube, config=fusion, sources=cfg.source_list(),
                kmeans_k=cfg.kmeans_k, kmeans_seed=cfg.kmeans_seed,
            )
        except EmptyMaskPool:
            log.info("skipping %s: empty mask pool", name)
            return None
        write_masks(target.parts, out / f"{name}.hvm")
        return name

    written = [n for n in _map_jobs(one, items, args.jobs) if n]
    print(f"wrote {len(written)} mask files to {out}")
    return 0


def cmd_pretrain(args) -> int:
    overrides = {"seed": args.seed}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.scale is not None:
        overrides["scale"] = args.scale
    if args.no_distill:
        overrides["use_distillation"] = False
    if args.no_pseudo_masks:
        overrides["use_pseudo_masks"] = False
    cfg = _resolve_config(args, overrides)
    if not cfg.use_pseudo_masks and not cfg.use_distillation:
        raise UsageError("--no-pseudo-masks together with --no-distill leaves no objective")
    _print_config(cfg)
    teacher = pipeline.make_teacher(cfg, args.teacher if args.teacher != "toy" else None)
    log_path = args.log if args.log else str(args.out) + ".log"
    ckpt = pipeline.pretrain(args.cubes, args.masks, teacher, cfg, log_path=log_path)
    save_checkpoint(ckpt, args.out)
    print(f"wrote checkpoint {args.out} and loss log {log_path}")
    return 0


def cmd_adapt(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = pipeline.parse_config(ckpt.config_text)
    cfg = dataclasses.replace(cfg, seed=args.seed)
    _print_config(cfg)
    adapted = pipeline.adapt_head(
        ckpt, args.cubes, steps=args.steps, lr=args.lr, classes=args.classes, seed=args.seed,
    )
    n_head = sum(
        arr.size for name, (arr, tag) in adapted.entries.items() if name.startswith("probe.")
    )
    save_checkpoint(adapted, args.out)
    print(f"trained {n_head} head parameters; wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = pipeline.parse_config(ckpt.config_text)
    _print_config(cfg)
    report = pipeline.evaluate_seg(ckpt, args.cubes)
    print(report.summary())
    print("confusion:")
    for row in report.confusion:
        print("  " + " ".join(f"{int(v):6d}" for v in row))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = TrainConfig(seed=args.seed)
    _print_config(cfg)
    results = run_all(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name:14s} max_rel_err={err:.3e} {status}")
        worst = max(worst, err)
    print(f"worst {worst:.3e}")
    return 0 if worst < 1e-4 else 2


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="hsilab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scene files")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=64)
    p.add_argument("--size", default="64x64")
    p.add_argument("--bands", type=int, default=25)
    p.add_argument("--materials", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--range", default="600:975")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("masks", help="generate fused pseudo-mask files")
    p.add_argument("--cubes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--min-area", type=int, default=16, dest="min_area")
    p.add_argument("--r-max", type=int, default=16, dest="r_max")
    p.add_argument("--sources", default="rgb,seq,material")
    p.add_argument("--kmeans-k", type=int, default=6, dest="kmeans_k")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_masks)

    p = sub.add_parser("pretrain", help="pre-train a backbone checkpoint")
    p.add_argument("--cubes", required=True)
    p.add_argument("--masks", default=None, help="directory of .hvm files; default: generate")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--teacher", default="toy", help="'toy' or a directory of .hvt files")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--scale", choices=sorted(pipeline.SCALES), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-distill", action="store_true", dest="no_distill")
    p.add_argument("--no-pseudo-masks", action="store_true", dest="no_pseudo_masks")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("adapt", help="train a class probe on a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cubes", required=True, help="directory of .hvc + .hvl pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a probed checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cubes", required=True, help="directory of .hvc + .hvl pairs")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def run(argv) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
