"""Command-line entry points.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from decoupleseg.errors import DimensionError, NonFiniteError
from decoupleseg.metrics import DESK_SLACKS, LARGE_SLACKS
from decoupleseg.synth import SceneSpec, generate_dataset, load_split
from decoupleseg.tensor import read_dsk1

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("decoupleseg")


def _slacks(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--slack expects comma-separated ints, got {text!r}") from exc
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("--slack needs at least one non-negative int")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decoupleseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-val", type=int, default=50)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=5)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("baseline", "decoupled"))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--slack", type=_slacks)
    t.add_argument("--val-every", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out")
    e.add_argument("--slack", type=_slacks)
    e.add_argument("--large-slacks", action="store_true", help=f"use slacks {LARGE_SLACKS}")

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=100)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--only", help="comma-separated subset of checks")
    c.add_argument("--inject-bug", action="store_true", help="flip the sign of the warp flow gradient")
    c.add_argument("--kink-aware", action="store_true")
    c.add_argument("--out", help="write the table as CSV here")

    i = sub.add_parser("inspect", help="dump feature, flow and edge rasters for one scene")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="a (3,H,W) DSK1 image")
    src.add_argument("--dataset", help="dataset directory; use with --index")
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--t-b", type=float, default=0.8)
    return p


def load_train_config(args):
    from decoupleseg.train import TrainConfig

    d = {}
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
    overrides = {"mode": args.mode, "seed": args.seed, "epochs": args.epochs,
                 "batch_size": args.batch_size, "base_lr": args.lr, "slacks": args.slack}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(d)


def cmd_gen_data(args) -> int:
    spec = SceneSpec(seed=args.seed, height=args.size, width=args.size, num_classes=args.classes)
    manifest = generate_dataset(args.n_train, args.n_val, spec, args.out)
    print(f"wrote {manifest['splits']['train']['count']} train / "
          f"{manifest['splits']['val']['count']} val scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from decoupleseg.train import train

    cfg = load_train_config(args)
    _, rows, rep = train(cfg, args.dataset, args.out, val_every=args.val_every)
    print(f"trained {cfg.epochs} epochs ({cfg.mode}); final loss {rows[-1]['total']:.4f}; "
          f"val mIoU {rep['mean_iou']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from decoupleseg.metrics import report_to_json
    from decoupleseg.train import evaluate, write_report

    slacks = LARGE_SLACKS if args.large_slacks else (args.slack or DESK_SLACKS)
    rep = evaluate(args.checkpoint, args.dataset, slacks)
    if args.out:
        write_report(rep, args.out, "metrics")
    print(report_to_json(rep))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from decoupleseg.gradsuite import SUITE, run_suite

    names = args.only.split(",") if args.only else None
    if names and any(n not in SUITE for n in names):
        raise ValueError(f"unknown check in --only; choose from {', '.join(SUITE)}")
    rows = run_suite(args.seed, args.instances, args.tol, args.inject_bug, names, args.kink_aware)
    print(f"{'check':<18} {'n':>4} {'max_rel_err':>12} {'time':>7}  result")
    for r in rows:
        print(f"{r.name:<18} {r.instances:>4} {r.max_rel_err:>12.3e} {r.seconds:>6.1f}s  "
              f"{'PASS' if r.passed else 'FAIL'}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("check,instances,max_rel_err,passed\n")
            for r in rows:
                fh.write(f"{r.name},{r.instances},{r.max_rel_err!r},{int(r.passed)}\n")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def cmd_inspect(args) -> int:
    from decoupleseg.train import inspect, load_checkpoint

    net = load_checkpoint(args.checkpoint)
    if args.image:
        image = read_dsk1(args.image).astype(np.float32)
    else:
        images, _ = load_split(args.dataset, "val")
        image = images[args.index]
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected a (3,H,W) image, got {image.shape}")
    paths = inspect(net, image, args.out, args.t_b)
    print(f"wrote {len(paths)} rasters to {args.out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
