#!/usr/bin/env python3
"""Run the full desk-scale experiment with the default config.

Equivalent to:
    ctwgan run-all --config scripts/default_config.json --out <dir>

The run takes roughly 20-30 minutes on one CPU core; most of it is the
adversarial training stage. Pass --progress to see loss lines.
"""

import argparse
import os
import sys

from ctwgan import cli

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/default", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override seed")
    ap.add_argument("--config", default=os.path.join(HERE, "default_config.json"))
    ap.add_argument("--progress", type=int, default=100,
                    help="print losses every N generator steps (0 = quiet)")
    args = ap.parse_args()
    argv = ["run-all", "--config", args.config, "--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    if args.progress:
        argv += ["--progress", str(args.progress)]
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())
