"""Command-line pipelines: gen-data, train, sample, baseline, features, eval, classify, augment-exp.

Every command writes only under its output directory, stages files in a hidden
subdirectory until it succeeds, and leaves a run.json provenance record.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import shutil
import sys
import time
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import baseline_fit
from .denoise import ConvDenoiser, load_checkpoint, save_checkpoint, train, write_loss_csv
from .diffuse import decode
from .evalkit import assign_folds, evaluate_models
from .forest import augmentation_experiment, confusion_matrix, f1_scores, train_forest
from .morpho import extract_features, read_features_csv, write_features_csv
from .sample import SamplerConfig, chain_seeds, sample_batch
from .schedule import scaled_linear_schedule
from .voxgrid import (
    SYNTH_CLASSES,
    Manifest,
    ManifestRecord,
    VoxelGrid,
    load_samples,
    read_manifest,
    read_voxel_file,
    synth_shape,
    write_manifest,
    write_prior_file,
    write_voxel_file,
)


class UsageError(Exception):
    """Bad flags or config; exit code 2."""


# ---------------------------------------------------------------------------
# config


@dataclass
class RunConfig:
    seed: int = 0
    size: int = 32
    T: int = 1000
    beta_start: float = 1e-4  # endpoints are given for 1000 steps and rescaled by 1000 / T
    beta_end: float = 0.02
    variance_mode: str = "posterior"
    epochs: int = 100
    lr: float = 1e-4
    batch: int = 1
    compute_dtype: str = "float32"
    k: int = 5
    clamp: str = ""  # "lo,hi" in encoded units, empty for none
    smooth_sigma: float = 1.0
    n_estimators: int = 1000
    max_depth: int = 10
    n_folds: int = 5
    minority: str = ""  # comma list; empty = every class except the largest

    def validate(self) -> "RunConfig":
        checks = [
            (16 <= self.size <= 64, "size must be in [16, 64]"),
            (1 <= self.T <= 10_000, "T must be in [1, 10000]"),
            (0 < self.beta_start <= self.beta_end < 1, "need 0 < beta_start <= beta_end < 1"),
            (self.variance_mode in ("posterior", "beta"), "variance_mode must be posterior or beta"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (0 < self.lr < 1, "lr must be in (0, 1)"),
            (self.batch == 1, "batch size is fixed at 1"),
            (self.compute_dtype in ("float32", "float64"), "compute_dtype must be float32 or float64"),
            (self.k >= 1, "k must be >= 1"),
            (self.smooth_sigma >= 0, "smooth_sigma must be >= 0"),
            (self.n_estimators >= 1, "n_estimators must be >= 1"),
            (self.max_depth >= 1, "max_depth must be >= 1"),
            (self.n_folds >= 5, "n_folds must be >= 5 (manifests of 5+ records carry folds 0..4)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise UsageError(msg)
        self.clamp_range()
        return self

    def clamp_range(self):
        if not self.clamp:
            return None
        try:
            lo, hi = (float(v) for v in self.clamp.split(","))
        except ValueError:
            raise UsageError(f"clamp must be 'lo,hi', got {self.clamp!r}") from None
        if not lo < hi:
            raise UsageError("clamp needs lo < hi")
        return lo, hi

    def schedule(self):
        return scaled_linear_schedule(self.T, self.beta_start, self.beta_end, self.variance_mode)

    def minority_classes(self, labels) -> set:
        if self.minority:
            return {c.strip() for c in self.minority.split(",") if c.strip()}
        counts = {c: list(labels).count(c) for c in set(labels)}
        top = max(counts.values())
        return {c for c, n in counts.items() if n < top}


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    types = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for key, val in values.items():
        typ = {"int": int, "float": float, "str": str}[types[key]]
        try:
            kwargs[key] = typ(val)
        except ValueError:
            raise UsageError(f"config {key}: cannot parse {val!r} as {types[key]}") from None
    return RunConfig(**kwargs).validate()


# ---------------------------------------------------------------------------
# output staging and provenance


class Output:
    """Stage files in <out>/.staging-<pid>; commit moves them into <out>, abort deletes them."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.created_dir = not self.dir.exists()
        self.dir.mkdir(parents=True, exist_ok=True)
        self.stage = self.dir / f".staging-{id(self):x}"
        self.stage.mkdir()

    def path(self, rel) -> Path:
        p = self.stage / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def files(self) -> list[Path]:
        return sorted(p for p in self.stage.rglob("*") if p.is_file())

    def commit(self) -> None:
        for p in self.files():
            dest = self.dir / p.relative_to(self.stage)
            dest.parent.mkdir(parents=True, exist_ok=True)
            p.replace(dest)
        shutil.rmtree(self.stage)

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)
        if self.created_dir:
            shutil.rmtree(self.dir, ignore_errors=True)


def _versions() -> dict:
    import scipy
    import skimage

    return dict(python=platform.python_version(), numpy=np.__version__, scipy=scipy.__version__,
                skimage=skimage.__version__, shapediff=__version__)


def write_provenance(out: Output, command: str, argv, config: RunConfig | None, extra=None) -> None:
    digests = {str(p.relative_to(out.stage)): hashlib.sha256(p.read_bytes()).hexdigest() for p in out.files()}
    record = dict(
        command=command,
        argv=list(argv),
        config=dataclasses.asdict(config) if config else None,
        seed=config.seed if config else None,
        versions=_versions(),
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
        outputs=digests,
    )
    if extra:
        record.update(extra)
    out.path("run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def sample_seed(seed: int, sample_id: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(sample_id.encode())]).generate_state(1)[0])


def _split(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _records(manifest_path, fold):
    samples = load_samples(manifest_path)
    if fold is not None:
        samples = [s for s in samples if s.fold == fold]
    return samples


def _grid_files(d: Path) -> list[Path]:
    return sorted(p for p in Path(d).glob("*.vox") if p.is_file())


def _id_of(path: Path, known: set) -> str:
    """Prediction files are <id>.vox or <id>_<j>.vox."""
    stem = path.stem
    if stem in known:
        return stem
    base, _, tail = stem.rpartition("_")
    if tail.isdigit() and base in known:
        return base
    raise UsageError(f"cannot match {path.name} to a known sample id")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig, out: Output):
    classes, counts = _split(args.classes), _split(args.counts)
    if len(classes) != len(counts):
        raise UsageError("--classes and --counts differ in length")
    try:
        counts = [int(c) for c in counts]
    except ValueError:
        raise UsageError("--counts must be integers") from None
    if any(c < 1 for c in counts):
        raise UsageError("--counts must be positive")
    bad = [c for c in classes if c not in SYNTH_CLASSES]
    if bad:
        raise UsageError(f"unknown classes {bad}; choose from {list(SYNTH_CLASSES)}")
    samples = []
    for cls, n in zip(classes, counts):
        for i in range(n):
            samples.append(synth_shape(cls, cfg.size, sample_seed(cfg.seed, f"{cls}{i}"), sample_id=f"{cls}_{i:04d}"))
    if len(samples) >= 5:
        if len(samples) < cfg.n_folds:
            raise UsageError(f"{len(samples)} samples cannot fill {cfg.n_folds} folds")
        assign_folds(samples, cfg.n_folds, cfg.seed)
    else:
        for s in samples:
            s.fold = 0
    records = []
    for s in samples:
        vp, pp = f"voxels/{s.id}.vox", f"priors/{s.id}.vox"
        write_voxel_file(s.target, out.path(vp), "u8")
        write_prior_file(s.prior, out.path(pp))
        records.append(ManifestRecord(s.id, vp, pp, s.class_label, s.fold))
    write_manifest(Manifest(records), out.path("manifest.csv"))


def cmd_train(args, cfg: RunConfig, out: Output):
    data = load_samples(args.manifest)
    if args.holdout_fold is not None:
        data = [s for s in data if s.fold != args.holdout_fold]
    if not data:
        raise UsageError("no training samples selected")
    dtype = np.float32 if cfg.compute_dtype == "float32" else np.float64
    rng = np.random.default_rng(cfg.seed)
    net = ConvDenoiser.init(rng, dtype=dtype)
    model, curve = train(net, data, cfg.schedule(), cfg.epochs, rng, lr=cfg.lr, log_every=args.log_every)
    save_checkpoint(model, out.path(args.checkpoint_name))
    write_loss_csv(curve, out.path("loss.csv"))


def _load_model(path, cfg):
    model = load_checkpoint(path)
    model.dtype = np.float32 if cfg.compute_dtype == "float32" else np.float64
    return model


def reconstruct_many(model, cfg: RunConfig, items, chunk: int = 64):
    """items: (key, prior, depth) triples with k chains each; returns key -> list of binary grids."""
    sch = cfg.schedule()
    scfg = SamplerConfig(sch, model, clamp_range=cfg.clamp_range(), seed=cfg.seed)
    jobs = []
    for key, prior, depth in items:
        for j, s in enumerate(chain_seeds(sample_seed(cfg.seed, key), cfg.k)):
            jobs.append((key, prior, depth, s))
    out: dict = {}
    # chains sharing dims run as one batch; results do not depend on batching
    by_dims: dict = {}
    for job in jobs:
        by_dims.setdefault((job[2],) + job[1].dims, []).append(job)
    for dims, group in by_dims.items():
        for i in range(0, len(group), chunk):
            part = group[i:i + chunk]
            xs = sample_batch([p for _, p, _, _ in part], dims, scfg, [s for *_, s in part])
            for (key, *_), x in zip(part, xs):
                out.setdefault(key, []).append(VoxelGrid(decode(x), binary=True))
    return out


def cmd_sample(args, cfg: RunConfig, out: Output):
    model = _load_model(args.checkpoint, cfg)
    samples = _records(args.manifest, args.fold)
    depth = lambda s: s.target.dims[0] if s.target is not None else s.prior.dims[0]
    grids = reconstruct_many(model, cfg, [(s.id, s.prior, depth(s)) for s in samples])
    for s in samples:
        for j, g in enumerate(grids[s.id]):
            write_voxel_file(g, out.path(f"{s.id}_{j}.vox"), "u8")


def cmd_baseline(args, cfg: RunConfig, out: Output):
    for s in _records(args.manifest, args.fold):
        g = baseline_fit(s.prior.mask, s.target.dims[0], args.fit)
        write_voxel_file(g, out.path(f"{s.id}_0.vox"), "u8")


def cmd_features(args, cfg: RunConfig, out: Output):
    src = Path(args.inp)
    rows, skipped = [], []
    if src.is_file():
        for s in load_samples(src):
            rows.append((s.id, s.class_label, extract_features(s.target, s.prior, cfg.smooth_sigma or None)))
    else:
        if not args.manifest:
            raise UsageError("features over a prediction directory needs --manifest for priors and labels")
        samples = {s.id: s for s in load_samples(args.manifest)}
        for p in _grid_files(src):
            s = samples[_id_of(p, set(samples))]
            grid = read_voxel_file(p)
            if not (grid.values > 0.5).any():
                skipped.append(p.name)  # an empty prediction has no shape features
                continue
            rows.append((p.stem, s.class_label, extract_features(grid, s.prior, cfg.smooth_sigma or None)))
    write_features_csv(rows, out.path("features.csv"))
    if skipped:
        print(f"features: skipped {len(skipped)} empty grids", file=sys.stderr)
    return dict(skipped_empty=skipped)


def _load_gt(path: Path) -> dict:
    if path.is_file():
        return {s.id: s.target for s in load_samples(path)}
    return {p.stem: read_voxel_file(p) for p in _grid_files(path)}


def cmd_eval(args, cfg: RunConfig, out: Output):
    gt = _load_gt(Path(args.gt))
    known = set(gt)
    preds = {}
    for d in _split(args.pred_dirs):
        d = Path(d)
        per: dict = {}
        for p in _grid_files(d):
            per.setdefault(_id_of(p, known), []).append(read_voxel_file(p))
        preds[d.name] = per
    report = evaluate_models(gt, preds, cfg.smooth_sigma or None)
    report.write_rows(out.path("rows.csv"))
    report.write_summary(out.path("summary.csv"))
    report.write_quantiles(out.path("quantiles.csv"))


def cmd_classify(args, cfg: RunConfig, out: Output):
    rows = read_features_csv(args.features)
    ids = [r[0] for r in rows]
    labels = [r[1] for r in rows]
    X = np.array([r[2].values for r in rows])
    if Path(args.folds).is_file():
        by_id = {r.id: r.fold for r in read_manifest(args.folds).records}
        folds = np.array([by_id[i] for i in ids])
    else:
        try:
            n = int(args.folds)
        except ValueError:
            raise UsageError("--folds is neither a manifest nor an integer") from None
        holders = [type("S", (), {"class_label": c, "fold": -1})() for c in labels]
        assign_folds(holders, n, cfg.seed)
        folds = np.array([h.fold for h in holders])
    classes = sorted(set(labels))
    with open(out.path("folds.csv"), "w") as fh:
        fh.write("fold,f1_macro,f1_weighted\n")
        for f in sorted(set(folds.tolist())):
            tr, te = folds != f, folds == f
            model = train_forest(X[tr], [l for l, m in zip(labels, tr) if m], cfg.n_estimators, cfg.max_depth,
                                 seed=int(np.random.SeedSequence([cfg.seed, f]).generate_state(1)[0]))
            y_te = [l for l, m in zip(labels, te) if m]
            pred = model.predict(X[te])
            macro, weighted, _ = f1_scores(y_te, pred)
            fh.write(f"{f},{macro:.6f},{weighted:.6f}\n")
            cm = confusion_matrix(y_te, pred, classes)
            with open(out.path(f"confusion_fold{f}.csv"), "w") as cf:
                cf.write("true\\pred," + ",".join(classes) + "\n")
                for c, row in zip(classes, cm):
                    cf.write(c + "," + ",".join(str(v) for v in row) + "\n")


def cmd_augment_exp(args, cfg: RunConfig, out: Output):
    cfg.k = args.k if args.k is not None else cfg.k
    samples = load_samples(args.manifest)
    model = _load_model(args.checkpoint, cfg)
    sigma = cfg.smooth_sigma or None
    feature_fn = lambda grid, prior: extract_features(grid, prior, sigma)
    minority = cfg.minority_classes([s.class_label for s in samples])

    cache: dict = {}
    dropped = [0]

    # the checkpoint is fixed across folds (trained on data disjoint from the manifest),
    # so a sample's reconstructions can be reused by every fold that trains on it
    def reconstruct(prior, k, seed):
        key = (hashlib.sha256(prior.to_array().tobytes()).hexdigest(), k, seed)
        if key not in cache:
            sub = dataclasses.replace(cfg, k=k, seed=seed)
            grids = reconstruct_many(model, sub, [("aug", prior, prior.dims[0])])["aug"]
            kept = [g for g in grids if (g.values > 0.5).any()]
            dropped[0] += len(grids) - len(kept)  # empty reconstructions carry no features
            cache[key] = kept
        return cache[key]

    factory = lambda train_views, fold: reconstruct

    report = augmentation_experiment(samples, minority, cfg.k, feature_fn, factory, seed=cfg.seed,
                                     n_estimators=cfg.n_estimators, max_depth=cfg.max_depth)
    report.log.assert_no_leakage(samples)
    report.write_csv(out.path("folds.csv"))
    conf_dir = out.path("confusions")
    conf_dir.mkdir()
    report.write_confusions(conf_dir)
    with open(out.path("summary.csv"), "w") as fh:
        fh.write("arm,f1_macro_mean,f1_macro_std,f1_weighted_mean,f1_weighted_std\n")
        for arm in ("baseline", "augmented"):
            fh.write(f"{arm},{report.mean(arm):.6f},{report.std(arm):.6f},"
                     f"{report.mean(arm, 'f1_weighted'):.6f},{report.std(arm, 'f1_weighted'):.6f}\n")
    return dict(minority=sorted(minority), leakage_checked=True, dropped_empty=dropped[0])


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shapediff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_flag="--out"):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        if out_flag:
            sp.add_argument(out_flag, required=True, dest="out")
        return sp

    g = common(sub.add_parser("gen-data", help="synthetic shapes + priors + manifest"))
    g.add_argument("--classes", required=True)
    g.add_argument("--counts", required=True)
    g.add_argument("--size", type=int)

    t = common(sub.add_parser("train", help="train the denoiser"), out_flag=None)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--holdout-fold", type=int)
    t.add_argument("--log-every", type=int, default=0)

    s = common(sub.add_parser("sample", help="k reconstructions per prior"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--fold", type=int)

    b = common(sub.add_parser("baseline", help="cylinder or ellipsoid fits"))
    b.add_argument("--manifest", required=True)
    b.add_argument("--fit", required=True, choices=["cylinder", "ellipsoid"])
    b.add_argument("--fold", type=int)

    f = common(sub.add_parser("features", help="feature CSV for a manifest or a prediction dir"))
    f.add_argument("--in", required=True, dest="inp")
    f.add_argument("--manifest")

    e = common(sub.add_parser("eval", help="relative-error report"))
    e.add_argument("--gt", required=True)
    e.add_argument("--pred-dirs", required=True)

    c = common(sub.add_parser("classify", help="cross-validated random forest"))
    c.add_argument("--features", required=True)
    c.add_argument("--folds", required=True, help="manifest with folds, or a fold count")

    a = common(sub.add_parser("augment-exp", help="augmentation experiment"))
    a.add_argument("--manifest", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--k", type=int)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "baseline": cmd_baseline,
    "features": cmd_features,
    "eval": cmd_eval,
    "classify": cmd_classify,
    "augment-exp": cmd_augment_exp,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    out = None
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        # precedence: config file < --set < dedicated flags
        for key in ("seed", "size", "k"):
            if getattr(args, key, None) is not None:
                overrides[key] = getattr(args, key)
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            ckpt = Path(args.out_checkpoint)
            args.out, args.checkpoint_name = ckpt.parent, ckpt.name
        out = Output(args.out)
        extra = COMMANDS[args.command](args, cfg, out)
        write_provenance(out, args.command, argv, cfg, extra)
        out.commit()
        return 0
    except UsageError as exc:
        if out:
            out.abort()
        print(f"shapediff {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure must clean up partial outputs
        if out:
            out.abort()
        print(f"shapediff {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
