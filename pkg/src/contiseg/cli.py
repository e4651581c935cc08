"""Command-line interface: train, eval, memory-build, split-info."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import config_from_file, make_config
from .protocol import BACKGROUND_ID, build_task_sequence, load_dataset
from .rehearsal import MemoryStore, save_memory, update_memory
from .segnet import load_checkpoint
from .trainer import evaluate_step, run_continual


def _add_train(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("train", help="run a continual training experiment")
    p.add_argument("--config", type=str, default=None, help="flat YAML/JSON config file")
    p.add_argument("--preset", choices=["finetune", "plop", "ploplong"], default=None)
    p.add_argument("--scale", choices=["desk", "paper"], default=None)
    p.add_argument("--split", type=str, default=None, help='e.g. "15-1"')
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", type=str, default=None,
                   help="dataset root with train/ and test/ (default: synthetic)")
    p.add_argument("--out", type=str, default=None, help="output directory")


def _add_eval(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--batch-size", type=int, default=8)


def _add_memory_build(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("memory-build", help="build a rehearsal memory from a dataset")
    p.add_argument("--ckpt", type=str, required=True,
                   help="checkpoint whose class list selects the stored classes")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--m", type=int, default=10, help="entries per class")
    p.add_argument("--kind", choices=["image", "object", "patch"], default="object")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dilate-radius", type=int, default=8)


def _add_split_info(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("split-info", help="show the step structure of a split")
    p.add_argument("--split", type=str, required=True)
    p.add_argument("--classes", type=int, required=True, help="foreground class count")


def cmd_train(args: argparse.Namespace) -> int:
    extra = {}
    if args.split:
        extra["protocol.split"] = args.split
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.data:
        extra["protocol.data_dir"] = args.data
    if args.out:
        extra["output_dir"] = args.out
    if args.config:
        cfg = config_from_file(args.config, preset=args.preset, scale=args.scale,
                               extra=extra)
    else:
        cfg = make_config(args.preset or "plop", args.scale or "desk", overrides=extra)
    report = run_continual(cfg, progress=True)
    print(f"avg mIoU over steps: {report.avg:.4f}")
    print(f"outputs written to {cfg.output_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    if not samples:
        print("no samples to evaluate", file=sys.stderr)
        return 1
    universe = [c for c in model.class_ids if c != BACKGROUND_ID]
    seq = build_task_sequence(universe, [len(universe)])
    m = evaluate_step(model, samples, seq, 1, batch_size=args.batch_size)
    print(json.dumps({
        "miou_all": m.miou_all,
        "per_class": {str(c): v for c, v in m.per_class.items()},
    }, indent=2))
    return 0


def cmd_memory_build(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    classes = [c for c in model.class_ids if c != BACKGROUND_ID]
    store = MemoryStore.empty(args.kind, args.m, args.seed)
    update_memory(store, samples, classes, step_index=0,
                  dilate_radius=args.dilate_radius)
    manifest = save_memory(store, args.out)
    print(f"stored {store.total_entries()} entries for {len(classes)} classes "
          f"({manifest['total_bytes']} bytes) under {args.out}")
    return 0


def cmd_split_info(args: argparse.Namespace) -> int:
    universe = list(range(1, args.classes + 1))
    seq = build_task_sequence(universe, args.split)
    print(f"split {args.split} over {args.classes} classes: {seq.num_steps} steps")
    for t in range(1, seq.num_steps + 1):
        group = seq.current_classes(t)
        print(f"  step {t}: {len(group)} classes {list(group)}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="contiseg", description="continual semantic segmentation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)
    _add_eval(sub)
    _add_memory_build(sub)
    _add_split_info(sub)
    args = parser.parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "memory-build": cmd_memory_build,
        "split-info": cmd_split_info,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
