"""Relative-error metrics, stratified folds, and Table-1-style aggregation."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .morpho import shape_metrics

METRICS = ("volume", "surface_area", "roughness", "curvature")


class ZeroGroundTruth(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


class MissingGroundTruth(KeyError):
    pass


def relative_error(pred_value: float, gt_value: float) -> float:
    if not gt_value > 0:
        raise ZeroGroundTruth(f"ground truth must be positive, got {gt_value}")
    return abs(pred_value - gt_value) / gt_value


def assign_folds(samples, n_folds: int = 5, rng=None):
    """Stratified random partition: each class is shuffled and dealt round-robin to folds.

    Dealing continues across classes from where the previous class stopped so fold sizes
    stay within one of each other overall. Mutates and returns `samples`.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    if len(samples) < n_folds:
        raise TooFewSamples(f"{len(samples)} samples cannot fill {n_folds} folds")
    rng = np.random.default_rng(rng)
    by_class: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        by_class[s.class_label].append(i)
    offset = 0
    for label in sorted(by_class):
        idx = by_class[label]
        perm = rng.permutation(len(idx))
        for j, p in enumerate(perm):
            samples[idx[p]].fold = (offset + j) % n_folds
        offset += len(idx)
    return samples


@dataclass
class MetricRow:
    sample_id: str
    model: str
    metric: str
    relative_error: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def aggregates(self) -> dict[tuple[str, str], dict[str, float]]:
        groups: dict[tuple[str, str], list[float]] = defaultdict(list)
        for r in self.rows:
            groups[(r.model, r.metric)].append(r.relative_error)
        out = {}
        for key, vals in groups.items():
            a = np.asarray(vals)
            out[key] = dict(median=float(np.median(a)), mean=float(a.mean()), std=float(a.std()), n=len(a))
        return out

    def values(self, model: str, metric: str) -> np.ndarray:
        return np.array([r.relative_error for r in self.rows if r.model == model and r.metric == metric])

    def write_rows(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "model", "metric", "relative_error"])
            for r in self.rows:
                w.writerow([r.sample_id, r.model, r.metric, repr(r.relative_error)])

    def write_summary(self, path) -> None:
        """One row per (metric, model), ordered like Table 1: metric blocks, then models."""
        agg = self.aggregates()
        models = list(dict.fromkeys(r.model for r in self.rows))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "model", "median", "mean", "std", "n"])
            for metric in METRICS:
                for model in models:
                    if (model, metric) in agg:
                        a = agg[(model, metric)]
                        w.writerow([metric, model, f"{a['median']:.6f}", f"{a['mean']:.6f}", f"{a['std']:.6f}", a["n"]])

    def write_quantiles(self, path, qs=(0.0, 0.25, 0.5, 0.75, 1.0)) -> None:
        """Box-plot data per (metric, model)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "model"] + [f"q{int(q * 100)}" for q in qs])
            for (model, metric) in sorted(self.aggregates(), key=lambda k: (METRICS.index(k[1]), k[0])):
                v = self.values(model, metric)
                w.writerow([metric, model] + [f"{x:.6f}" for x in np.quantile(v, qs)])


def read_report(path) -> MetricReport:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return MetricReport([MetricRow(r["sample"], r["model"], r["metric"], float(r["relative_error"])) for r in reader])


def evaluate_models(gt: dict, predictions: dict[str, dict[str, list]], smooth_sigma: float | None = 1.0) -> MetricReport:
    """gt: sample id -> ground-truth grid. predictions: model -> sample id -> list of grids.

    Every prediction instance contributes one row per metric (pooled, not averaged per sample).
    """
    gt_metrics: dict[str, dict[str, float]] = {}
    report = MetricReport()
    for model, per_sample in predictions.items():
        for sid, grids in per_sample.items():
            if sid not in gt:
                raise MissingGroundTruth(sid)
            if sid not in gt_metrics:
                gt_metrics[sid] = shape_metrics(gt[sid], smooth_sigma)
            ref = gt_metrics[sid]
            for g in grids:
                m = shape_metrics(g, smooth_sigma)
                for name in METRICS:
                    report.rows.append(MetricRow(sid, model, name, relative_error(m[name], ref[name])))
    return report
