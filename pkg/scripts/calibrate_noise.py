#!/usr/bin/env python3
"""Sweep the count-noise level and report the resulting FBP quality.

Useful when changing image size or angle count: pick an n0 that puts the
noisy-FBP baseline in the target PSNR regime (the default config aims
for roughly 23 dB at 64x64 / 120 angles).
"""

import argparse

import numpy as np

from ctwgan import ctsim, metrics
from ctwgan.train import make_synthetic_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--angles", type=int, default=120)
    ap.add_argument("--sigma", type=float, default=5.0)
    ap.add_argument("--n", type=int, default=6, help="phantoms per level")
    ap.add_argument("--n0", type=float, nargs="*",
                    default=[100, 250, 500, 1000, 2500, 10000])
    args = ap.parse_args()
    for n0 in args.n0:
        noise = ctsim.NoiseModel(n0=n0, sigma=args.sigma,
                                 mu_scale=4.0 / args.size)
        ds = make_synthetic_dataset(args.n, args.size, args.angles,
                                    noise, seed=11)
        ps = [metrics.psnr(i, t, data_range=1.0)
              for t, i in zip(ds.truths, ds.inputs)]
        print(f"n0={n0:>8g}  FBP PSNR {np.mean(ps):6.2f} dB "
              f"(+/- {np.std(ps):.2f})")


if __name__ == "__main__":
    main()
