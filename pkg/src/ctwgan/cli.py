"""Command-line entry point: simulate / train / evaluate / report / run-all."""

from __future__ import annotations

import argparse
import sys

from . import experiment


def _add_common(sub):
    sub.add_argument("--config", required=True, help="JSON experiment config")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    sub.add_argument("--progress", type=int, default=None,
                     help="print losses every N generator steps")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ctwgan",
        description="Texture-preserving WGAN CT reconstruction experiments")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train", "evaluate", "report", "run-all"):
        _add_common(subs.add_parser(name))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = experiment.load_config(args.config, seed_override=args.seed)
    try:
        if args.command == "simulate":
            experiment.stage_simulate(cfg, args.out)
        elif args.command == "train":
            experiment.stage_train(cfg, args.out, progress=args.progress)
        elif args.command == "evaluate":
            experiment.stage_evaluate(cfg, args.out)
        elif args.command == "report":
            experiment.stage_report(cfg, args.out)
        else:
            experiment.run_experiment(cfg, args.out, progress=args.progress)
    except experiment.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
