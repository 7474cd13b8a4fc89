"""Chain-length pilot: train the conditional denoiser, then compare per-class volume errors of
diffusion samples with the cylinder and ellipsoid fits on held-out shapes.

    python3 scripts/volume_pilot.py --T 1000 --epochs 100 --lr 1e-3
"""
import argparse
import time

import numpy as np

from shapediff.baseline import cylinder_fit, ellipsoid_fit
from shapediff.denoise import ConvDenoiser, train
from shapediff.diffuse import decode
from shapediff.sample import SamplerConfig, sample_batch
from shapediff.schedule import scaled_linear_schedule
from shapediff.voxgrid import synth_shape

CLASSES = ("ball", "biconcave", "spiky", "elongated")

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--T", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--per-class", type=int, default=15)
    ap.add_argument("--test-per-class", type=int, default=8)
    args = ap.parse_args()
    n = args.size
    train_set = [synth_shape(c, n, s) for c in CLASSES for s in range(args.per_class)]
    test_set = [synth_shape(c, n, 1000 + s) for c in CLASSES for s in range(args.test_per_class)]
    sch = scaled_linear_schedule(args.T)
    t0 = time.time()
    net = ConvDenoiser.init(np.random.default_rng(0), dtype=np.float32)
    model, curve = train(net, train_set, sch, args.epochs, np.random.default_rng(1), lr=args.lr)
    loss = np.array([r.loss for r in curve])
    print(f"train {time.time() - t0:.0f}s  loss first/last 100: {loss[:100].mean():.3f} / {loss[-100:].mean():.3f}")
    xs = sample_batch([s.prior for s in test_set], (n, n, n), SamplerConfig(sch, model), list(range(len(test_set))))
    errs = {}
    for s, x in zip(test_set, xs):
        gt = s.target.values.sum()
        vols = (decode(x).sum(), cylinder_fit(s.prior.mask, n).values.sum(), ellipsoid_fit(s.prior.mask, n).values.sum())
        errs.setdefault(s.class_label, []).append([abs(v - gt) / gt for v in vols] + [gt, vols[0]])
    print(f"{'class':10s} {'diff':>6s} {'cyl':>6s} {'ell':>6s}  mean vol gt/pred")
    for c in CLASSES:
        e = np.array(errs[c])
        print(f"{c:10s} " + " ".join(f"{v:6.2f}" for v in np.median(e[:, :3], 0)) + f"  {e[:, 3].mean():.0f}/{e[:, 4].mean():.0f}")
    allv = np.concatenate([np.array(v)[:, :3] for v in errs.values()])
    print("overall median  diffusion %.3f  cylinder %.3f  ellipsoid %.3f" % tuple(np.median(allv, 0)))
