"""Command-line entry points.

Subcommands: train, evaluate, episode-dump, ablate, make-synthetic.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint
error (see errors.py).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, parse_override
from .errors import FewsegError


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    overrides = dict(parse_override(item) for item in (args.override or []))
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_train(args) -> int:
    from .train import train

    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    result = train(cfg, log_file=out_dir / "train_log.jsonl",
                   resume=args.resume, progress=True)
    print(f"checkpoint: {result.checkpoint_path}")
    if result.history:
        print(f"final loss: {result.history[-1]['final']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluate import evaluate_checkpoint, write_results_csv

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0]
    report = evaluate_checkpoint(args.checkpoint, args.fold, args.shots,
                                 args.episodes, seeds)
    for row in report["per_seed"]:
        print(json.dumps(row))
    print(json.dumps({"mean_miou": report["miou"], "mean_fb_iou": report["fb_iou"]}))
    if args.csv:
        write_results_csv([report], args.csv)
        print(f"csv: {args.csv}")
    return 0


def cmd_episode_dump(args) -> int:
    from .data import build_dataset, make_folds
    from .model import build_model
    from .render import dump_episode

    cfg = _load_config(args)
    dataset = build_dataset(cfg)
    fold = make_folds(cfg.dataset, cfg.fold)
    if args.checkpoint:
        from .checkpoint import load_checkpoint, restore_model

        model, _ = restore_model(load_checkpoint(args.checkpoint))
    else:
        model = build_model(cfg)
    out = dump_episode(model, dataset, fold, cfg, args.out, seed=args.seed)
    print(f"episode rendered to {out}")
    return 0


def cmd_ablate(args) -> int:
    from .ablate import ablate, format_table

    cfg = _load_config(args)
    rows = ablate(cfg, args.axis, args.values,
                  eval_episodes=args.episodes, eval_seed=args.eval_seed)
    print(format_table(rows, args.axis))
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(rows, indent=2))
    return 0


def cmd_make_synthetic(args) -> int:
    from .data import materialize_dataset, synthetic_dataset

    dataset = synthetic_dataset(args.images, args.size, args.seed)
    out = materialize_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} image/mask pairs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewseg",
        description="Episodic few-shot segmentation: train, evaluate, inspect.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--shots", type=int, choices=(1, 5), required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--csv", default=None, help="write a results CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("episode-dump", help="render one episode as PNGs")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_episode_dump)

    p = sub.add_parser("ablate", help="sweep one config axis")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--json-out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("make-synthetic", help="materialize the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=240)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FewsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
