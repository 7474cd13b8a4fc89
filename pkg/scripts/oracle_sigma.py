"""Reverse-process variance with the closed-form Gaussian denoiser: fixed schedule sigmas
(posterior, beta) against the exact reverse std, for x0 ~ N(m, s^2).

    python3 scripts/oracle_sigma.py --T 50 --chains 10000
"""
import argparse

import numpy as np

from shapediff.denoise import GaussianOracleDenoiser
from shapediff.sample import SamplerConfig, run_chain
from shapediff.schedule import scaled_linear_schedule
from shapediff.voxgrid import Prior2D

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--T", type=int, default=50)
    ap.add_argument("--chains", type=int, default=10_000)
    ap.add_argument("--m", type=float, default=0.3)
    ap.add_argument("--s", type=float, default=0.4)
    args = ap.parse_args()
    prior = Prior2D(np.zeros((4, 4)), np.zeros((4, 4)))
    for label in ("posterior", "beta", "exact"):
        sch = scaled_linear_schedule(args.T, variance_mode="beta" if label == "beta" else "posterior")
        orc = GaussianOracleDenoiser(args.m, args.s, sch)
        # a plain callable hides reverse_sigma, so the sampler falls back to the schedule sigma
        den = orc if label == "exact" else (lambda inp, t, o=orc: o(inp, t))
        x, _ = run_chain(prior, (4, 4, 4), SamplerConfig(sch, den), np.random.default_rng(0), n_chains=args.chains)
        se = x.std() / np.sqrt(x.size)
        print(f"{label:9s} mean {x.mean():.4f} ({(x.mean() - args.m) / se:+.2f} SE)  "
              f"var {x.var():.4f} ({x.var() / args.s**2 - 1:+.3f} rel)")
