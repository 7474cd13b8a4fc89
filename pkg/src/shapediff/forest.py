"""Random forest (Gini, bootstrap, sqrt-d feature subsampling), F1 scores, and the
feature-space augmentation experiment with an access log guarding train/test separation."""
from __future__ import annotations

import csv
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class SingleClass(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class LeakageError(AssertionError):
    pass


def gini(counts) -> float:
    c = np.asarray(counts, dtype=np.float64)
    n = c.sum()
    if n == 0:
        return 0.0
    p = c / n
    return float(1.0 - np.sum(p * p))


# ---------------------------------------------------------------------------
# trees


@dataclass
class DecisionTree:
    """Flat node arrays; `feature[i] == -1` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, n_classes)
    max_depth: int

    def depth(self) -> int:
        def rec(i):
            return 0 if self.feature[i] < 0 else 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        # argmax returns the lowest class index on ties
        return np.argmax(self.counts[self.leaf_index(np.asarray(X, dtype=np.float64))], axis=1)


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int, features: np.ndarray):
    """Lowest weighted child Gini over candidate features; ties keep the lowest feature index
    and then the lowest threshold."""
    n = len(y)
    best = (np.inf, -1, 0.0)
    onehot = np.eye(n_classes)[y]
    for f in np.sort(features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        left = np.cumsum(onehot[order], axis=0)[:-1]
        right = left[-1] + onehot[order[-1]] - left
        nl = np.arange(1, n, dtype=np.float64)
        nr = n - nl
        gl = 1.0 - np.sum(left**2, axis=1) / nl**2
        gr = 1.0 - np.sum(right**2, axis=1) / nr**2
        score = (nl * gl + nr * gr) / n
        score[~valid] = np.inf
        j = int(np.argmin(score))
        if score[j] < best[0] - 1e-12:
            best = (float(score[j]), int(f), 0.5 * (xs[j] + xs[j + 1]))
    return best


def build_tree(X: np.ndarray, y: np.ndarray, n_classes: int, max_depth: int, max_features: int, rng) -> DecisionTree:
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        c = counts[node]
        if depth >= max_depth or len(idx) < 2 or np.count_nonzero(c) <= 1:
            continue
        feats = rng.choice(X.shape[1], size=max_features, replace=False)
        score, f, thr = _best_split(X[idx], y[idx], n_classes, feats)
        if f < 0:
            continue
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return DecisionTree(
        np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(counts), max_depth
    )


# ---------------------------------------------------------------------------
# forest


@dataclass
class ForestModel:
    trees: list[DecisionTree]
    classes: list
    n_estimators: int
    max_depth: int
    max_features: int
    n_features: int
    seed: int

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise DimMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def votes(self, X) -> np.ndarray:
        X = self._check(X)
        v = np.zeros((len(X), len(self.classes)), dtype=np.int64)
        rows = np.arange(len(X))
        for t in self.trees:
            np.add.at(v, (rows, t.predict(X)), 1)
        return v

    def predict_index(self, X) -> np.ndarray:
        return np.argmax(self.votes(X), axis=1)

    def predict(self, X) -> list:
        return [self.classes[i] for i in self.predict_index(X)]


def _as_matrix(features) -> np.ndarray:
    rows = [getattr(f, "values", f) for f in features]
    lengths = {len(r) for r in rows}
    if len(lengths) > 1:
        raise DimMismatch(f"feature vectors have differing lengths {sorted(lengths)}")
    return np.asarray(rows, dtype=np.float64)


def train_forest(features, labels, n_estimators: int = 1000, max_depth: int = 10, seed: int = 0,
                 max_features: int | None = None) -> ForestModel:
    X = _as_matrix(features)
    if len(X) != len(labels):
        raise DimMismatch("features and labels differ in length")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise SingleClass("need at least two classes")
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[c] for c in labels])
    d = X.shape[1]
    m = max_features or math.ceil(math.sqrt(d))
    trees = []
    for s in np.random.SeedSequence(seed).spawn(n_estimators):
        rng = np.random.default_rng(s)
        boot = rng.integers(0, len(X), size=len(X))
        trees.append(build_tree(X[boot], y[boot], len(classes), max_depth, m, rng))
    return ForestModel(trees, classes, n_estimators, max_depth, m, d, seed)


def predict_class(model: ForestModel, feature_vector):
    return model.predict(feature_vector)[0]


# ---------------------------------------------------------------------------
# metrics


def f1_scores(true, pred) -> tuple[float, float, dict]:
    if len(true) != len(pred):
        raise LengthMismatch(f"{len(true)} labels vs {len(pred)} predictions")
    if len(true) == 0:
        raise LengthMismatch("need at least one sample")
    support = Counter(true)
    per_class = {}
    for c in sorted(support):
        tp = sum(1 for a, b in zip(true, pred) if a == c and b == c)
        fp = sum(1 for a, b in zip(true, pred) if a != c and b == c)
        fn = support[c] - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        per_class[c] = 2 * p * r / (p + r) if p + r else 0.0
    macro = float(np.mean(list(per_class.values())))
    weighted = float(sum(per_class[c] * support[c] for c in per_class) / len(true))
    return macro, weighted, per_class


def confusion_matrix(true, pred, classes) -> np.ndarray:
    idx = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for a, b in zip(true, pred):
        m[idx[a], idx[b]] += 1
    return m


# ---------------------------------------------------------------------------
# augmentation experiment


@dataclass
class AccessLog:
    """Every read of a sample's prior or target, tagged with fold and phase ("train"/"test")."""

    events: list[tuple[int, str, str, str]] = field(default_factory=list)

    def record(self, fold: int, phase: str, sample_id: str, what: str) -> None:
        self.events.append((fold, phase, sample_id, what))

    def train_reads(self, fold: int) -> set[str]:
        return {sid for f, ph, sid, _ in self.events if f == fold and ph == "train"}

    def assert_no_leakage(self, samples) -> None:
        for fold in sorted({s.fold for s in samples}):
            test_ids = {s.id for s in samples if s.fold == fold}
            leaked = self.train_reads(fold) & test_ids
            if leaked:
                raise LeakageError(f"fold {fold}: training touched test samples {sorted(leaked)}")


class LoggedSample:
    """Read-only view of a Sample that logs accesses to its prior and target."""

    def __init__(self, sample, log: AccessLog, fold: int, phase: str):
        self._s, self._log, self._fold, self._phase = sample, log, fold, phase
        self.id, self.class_label = sample.id, sample.class_label

    @property
    def fold(self):
        return self._s.fold

    @property
    def prior(self):
        self._log.record(self._fold, self._phase, self.id, "prior")
        return self._s.prior

    @property
    def target(self):
        self._log.record(self._fold, self._phase, self.id, "target")
        return self._s.target


@dataclass
class FoldResult:
    fold: int
    arm: str
    f1_macro: float
    f1_weighted: float
    per_class: dict
    confusion: np.ndarray
    n_train: int


@dataclass
class AugmentationReport:
    classes: list
    results: list[FoldResult] = field(default_factory=list)
    log: AccessLog = field(default_factory=AccessLog)

    def mean(self, arm: str, key: str = "f1_macro") -> float:
        return float(np.mean([getattr(r, key) for r in self.results if r.arm == arm]))

    def std(self, arm: str, key: str = "f1_macro") -> float:
        return float(np.std([getattr(r, key) for r in self.results if r.arm == arm]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "arm", "f1_macro", "f1_weighted"])
            for r in self.results:
                w.writerow([r.fold, r.arm, f"{r.f1_macro:.6f}", f"{r.f1_weighted:.6f}"])

    def write_confusions(self, out_dir) -> None:
        from pathlib import Path

        out_dir = Path(out_dir)
        for r in self.results:
            with open(out_dir / f"confusion_fold{r.fold}_{r.arm}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["true\\pred", *self.classes])
                for c, row in zip(self.classes, r.confusion):
                    w.writerow([c, *row.tolist()])


# generator_factory(train_views, fold) -> reconstruct(prior, k, seed) -> list of grids
GeneratorFactory = Callable[[list, int], Callable]


def augmentation_experiment(
    samples,
    minority_classes,
    k_aug: int,
    feature_fn: Callable,
    generator_factory: GeneratorFactory | None = None,
    seed: int = 0,
    n_estimators: int = 1000,
    max_depth: int = 10,
) -> AugmentationReport:
    """Per fold: a baseline forest on ground-truth train features, and an augmented forest that
    also sees features of k_aug reconstructions for every train sample of a minority class.

    All sample reads go through an access log; test-split samples are only read in the
    "test" phase. `feature_fn(grid, prior)` returns a feature vector.
    """
    classes = sorted({s.class_label for s in samples})
    report = AugmentationReport(classes)
    log = report.log
    minority = set(minority_classes)
    folds = sorted({s.fold for s in samples})
    gt_cache: dict[str, np.ndarray] = {}

    def gt_features(view):
        target, prior = view.target, view.prior  # logged reads, also on cache hits
        if view.id not in gt_cache:
            gt_cache[view.id] = np.asarray(feature_fn(target, prior).values)
        return gt_cache[view.id]

    for fold in folds:
        train_views = [LoggedSample(s, log, fold, "train") for s in samples if s.fold != fold]
        test_views = [LoggedSample(s, log, fold, "test") for s in samples if s.fold == fold]
        X_train = [gt_features(v) for v in train_views]
        y_train = [v.class_label for v in train_views]
        X_test = np.array([gt_features(v) for v in test_views])
        y_test = [v.class_label for v in test_views]
        fold_seed = int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])

        X_aug, y_aug = list(X_train), list(y_train)
        if k_aug > 0:
            if generator_factory is None:
                raise ValueError("k_aug > 0 needs a generator factory")
            reconstruct = generator_factory(train_views, fold)
            for v in train_views:
                if v.class_label not in minority:
                    continue
                prior = v.prior
                # seeded by sample, not fold: a fixed generator gives the same draws in every fold
                aug_seed = int(np.random.SeedSequence([seed, zlib.crc32(v.id.encode())]).generate_state(1)[0])
                for g in reconstruct(prior, k_aug, aug_seed):
                    X_aug.append(np.asarray(feature_fn(g, prior).values))
                    y_aug.append(v.class_label)

        for arm, (X, y) in (("baseline", (X_train, y_train)), ("augmented", (X_aug, y_aug))):
            model = train_forest(X, y, n_estimators, max_depth, seed=fold_seed)
            pred = model.predict(X_test)
            macro, weighted, per_class = f1_scores(y_test, pred)
            report.results.append(
                FoldResult(fold, arm, macro, weighted, per_class, confusion_matrix(y_test, pred, classes), len(X))
            )
    return report
