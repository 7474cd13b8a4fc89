"""Desk-scale pipeline through the CLI: train on 60 shapes, reconstruct 80 held-out priors,
compare volume errors with the cylinder fit, and run the 40:5:5 augmentation experiment.

    python3 scripts/desk_pipeline.py --out runs/desk
"""
import argparse
import csv
import time
from pathlib import Path

from shapediff.cli import main

CONFIG = """\
seed=0
size=16
T=1000
epochs=100
lr=0.001
k=5
"""


def run(*argv):
    t0 = time.time()
    if main([str(a) for a in argv]) != 0:
        raise SystemExit(f"failed: {' '.join(map(str, argv))}")
    print(f"{argv[0]:12s} {time.time() - t0:7.1f}s", flush=True)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "desk.cfg"
    cfg.write_text(CONFIG)
    c = ("--config", cfg, "--seed", args.seed)
    classes = "ball,biconcave,spiky,elongated"
    run("gen-data", "--classes", classes, "--counts", "15,15,15,15", "--out", out / "train_data", *c)
    run("train", "--manifest", out / "train_data/manifest.csv", "--out-checkpoint", out / "ckpt/model.dnz",
        "--log-every", 1000, *c)
    run("gen-data", "--classes", classes, "--counts", "20,20,20,20", "--out", out / "test_data",
        "--config", cfg, "--seed", args.seed + 1)
    test_man = out / "test_data/manifest.csv"
    run("sample", "--checkpoint", out / "ckpt/model.dnz", "--manifest", test_man, "--k", 1, "--out", out / "diffusion", *c)
    for fit in ("cylinder", "ellipsoid"):
        run("baseline", "--manifest", test_man, "--fit", fit, "--out", out / fit, *c)
    run("eval", "--gt", test_man, "--pred-dirs", ",".join(str(out / d) for d in ("diffusion", "cylinder", "ellipsoid")),
        "--out", out / "eval", *c)
    run("gen-data", "--classes", "ball,spiky,elongated", "--counts", "40,5,5", "--out", out / "clf_data",
        "--config", cfg, "--seed", args.seed + 2)
    run("augment-exp", "--manifest", out / "clf_data/manifest.csv", "--checkpoint", out / "ckpt/model.dnz",
        "--out", out / "augment", *c)
    print("\nmedian relative errors")
    for r in rows(out / "eval/summary.csv"):
        print(f"  {r['metric']:13s} {r['model']:10s} {float(r['median']):.3f}")
    print("augmentation (mean macro F1)")
    for r in rows(out / "augment/summary.csv"):
        print(f"  {r['arm']:10s} {float(r['f1_macro_mean']):.3f} +- {float(r['f1_macro_std']):.3f}")
