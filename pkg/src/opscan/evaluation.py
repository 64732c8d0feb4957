"""Evaluation protocol: confusion-matrix metrics, stratified k-fold
cross-validation, held-out testing and the prominent-feature sweep, plus a
synthetic corpus generator used as a test oracle."""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifiers import Dataset, SelectionProvenance, TrainedModel, predict_batch, train_classifier
from .corpus import Label, LabeledHistogramSet, stratified_split
from .dalvik import DEFAULT_TABLE
from .errors import (
    DimensionMismatch,
    EmptyMatrix,
    InvalidParam,
    OpscanError,
    TooFewInstances,
)
from .extraction import OpcodeHistogram
from .features import (
    FeatureRanking,
    NormalizationMode,
    compute_class_means,
    project_set,
    rank_features,
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Malware is the positive class: TP/FN count malware apps classified
    correctly/incorrectly, TN/FP the benign ones."""

    tp: int
    fn: int
    tn: int
    fp: int

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fn + other.fn,
                               self.tn + other.tn, self.fp + other.fp)

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp

    @property
    def malware_count(self) -> int:
        return self.tp + self.fn

    @property
    def benign_count(self) -> int:
        return self.tn + self.fp


@dataclass(frozen=True)
class MetricSet:
    accuracy_pct: float
    tpr: float
    tnr: float
    fpr: float
    fnr: float


def confusion(model: TrainedModel, test: Dataset) -> ConfusionMatrix:
    if test.m != model.n_features:
        raise DimensionMismatch(
            f"test set has {test.m} features, model expects {model.n_features}")
    pred, _ = predict_batch(model, test.x)
    y = test.y
    tp = int(((pred == 1) & (y == 1)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    return ConfusionMatrix(tp=tp, fn=fn, tn=tn, fp=fp)


def metrics(cm: ConfusionMatrix) -> MetricSet:
    """Accuracy = (TP+TN)/(TP+FN+TN+FP) x 100; rates with zero denominators
    come back as NaN, never 0."""
    if cm.total < 1:
        raise EmptyMatrix("confusion matrix holds no instances")
    accuracy = (cm.tp + cm.tn) / cm.total * 100.0
    mal = cm.malware_count
    ben = cm.benign_count
    tpr = cm.tp / mal if mal else math.nan
    fnr = cm.fn / mal if mal else math.nan
    tnr = cm.tn / ben if ben else math.nan
    fpr = cm.fp / ben if ben else math.nan
    return MetricSet(accuracy_pct=accuracy, tpr=tpr, tnr=tnr, fpr=fpr, fnr=fnr)


@dataclass(frozen=True)
class ClassifierConfig:
    kind: str
    params: dict = field(default_factory=dict)


def stratified_fold_indices(labels: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Deterministic per-class shuffle dealt round-robin into k folds."""
    if k < 2:
        raise InvalidParam(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        if members.size < k:
            raise TooFewInstances(
                f"class {cls} has {members.size} instances, fewer than k={k}")
        perm = rng.permutation(members)
        for pos, row in enumerate(perm):
            folds[pos % k].append(int(row))
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def _fit_cell(train_set: LabeledHistogramSet, test_set: LabeledHistogramSet,
              ranking: FeatureRanking, mode: NormalizationMode,
              config: ClassifierConfig, seed: int) -> ConfusionMatrix:
    x_train, y_train = project_set(train_set, ranking, mode)
    x_test, y_test = project_set(test_set, ranking, mode)
    names = ranking.feature_names()
    model = train_classifier(config.kind, Dataset.from_arrays(x_train, y_train, names),
                             seed=seed,
                             selection=SelectionProvenance(ranking=ranking, mode=mode),
                             **config.params)
    return confusion(model, Dataset.from_arrays(x_test, y_test, names))


@dataclass(frozen=True)
class FoldResult:
    fold: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    ranking: FeatureRanking
    cm: ConfusionMatrix
    metrics: MetricSet


@dataclass(frozen=True)
class CrossValidationResult:
    folds: tuple[FoldResult, ...]
    aggregate_cm: ConfusionMatrix
    aggregate_metrics: MetricSet  # micro-average: metrics of the summed matrix
    k: int
    seed: int


def cross_validate(hist_set: LabeledHistogramSet, classifier: ClassifierConfig,
                   n_features: int, mode: NormalizationMode = NormalizationMode.MEAN_RAW_COUNT,
                   k: int = 10, seed: int = 0,
                   paper_faithful: bool = False) -> CrossValidationResult:
    """Stratified k-fold: feature selection is recomputed on each fold's
    training rows unless paper_faithful pins it to the full set."""
    labels = hist_set.labels_array()
    folds = stratified_fold_indices(labels, k, seed)
    all_idx = np.arange(len(hist_set))
    shared_ranking = None
    if paper_faithful:
        shared_ranking = rank_features(compute_class_means(hist_set, mode), n_features)
    results = []
    agg = ConfusionMatrix(0, 0, 0, 0)
    for fold_no, test_idx in enumerate(folds):
        mask = np.ones(len(hist_set), dtype=bool)
        mask[test_idx] = False
        train_idx = all_idx[mask]
        train_set = hist_set.subset(train_idx)
        test_set = hist_set.subset(test_idx)
        ranking = shared_ranking if shared_ranking is not None else \
            rank_features(compute_class_means(train_set, mode), n_features)
        cm = _fit_cell(train_set, test_set, ranking, mode, classifier, seed)
        agg = agg + cm
        results.append(FoldResult(fold=fold_no, train_indices=train_idx,
                                  test_indices=test_idx, ranking=ranking,
                                  cm=cm, metrics=metrics(cm)))
    return CrossValidationResult(folds=tuple(results), aggregate_cm=agg,
                                 aggregate_metrics=metrics(agg), k=k, seed=seed)


@dataclass(frozen=True)
class SweepRow:
    classifier: str
    n_features: int
    seed: int
    cm: ConfusionMatrix | None
    metrics: MetricSet | None
    wall_ms: float
    error: str | None = None


@dataclass(frozen=True)
class ClassifierSweepStats:
    classifier: str
    best_accuracy: float
    best_n: int
    accuracy_std: float  # population std of accuracy across the grid
    cells_ok: int


@dataclass
class SweepReport:
    rows: list[SweepRow]
    feature_counts: tuple[int, ...]
    seed: int
    test_fraction: float
    mode: NormalizationMode

    def summarize(self) -> list[ClassifierSweepStats]:
        stats = []
        for kind in sorted({r.classifier for r in self.rows}):
            ok = [r for r in self.rows if r.classifier == kind and r.error is None]
            if not ok:
                continue
            accs = np.array([r.metrics.accuracy_pct for r in ok])
            best = int(np.argmax(accs))
            stats.append(ClassifierSweepStats(
                classifier=kind,
                best_accuracy=float(accs[best]),
                best_n=ok[best].n_features,
                accuracy_std=float(np.std(accs)),
                cells_ok=len(ok)))
        return stats

    def least_fluctuation(self) -> str | None:
        stats = self.summarize()
        if not stats:
            return None
        return min(stats, key=lambda s: (s.accuracy_std, s.classifier)).classifier


def grid_counts(start: int = 20, stop: int = 200, step: int = 20) -> tuple[int, ...]:
    """Inclusive sweep grid; the default mirrors the 20..200-by-20 protocol."""
    if start < 1 or stop < start or step < 1:
        raise InvalidParam(f"bad grid ({start}, {stop}, {step})")
    return tuple(range(start, stop + 1, step))


def _run_sweep_cell(args):
    kind, params, n, ranking, mode_value, train_payload, test_payload, seed = args
    mode = NormalizationMode.from_string(mode_value)
    x_train, y_train, x_test, y_test = train_payload[0], train_payload[1], \
        test_payload[0], test_payload[1]
    names = ranking.feature_names()
    started = time.perf_counter()
    model = train_classifier(kind, Dataset.from_arrays(x_train, y_train, names),
                             seed=seed,
                             selection=SelectionProvenance(ranking=ranking, mode=mode),
                             **params)
    cm = confusion(model, Dataset.from_arrays(x_test, y_test, names))
    wall_ms = (time.perf_counter() - started) * 1000.0
    return cm, wall_ms


def feature_sweep(hist_set: LabeledHistogramSet,
                  classifiers: list[ClassifierConfig],
                  feature_counts: tuple[int, ...] | None = None,
                  mode: NormalizationMode = NormalizationMode.MEAN_RAW_COUNT,
                  test_fraction: float = 0.2, seed: int = 0,
                  paper_faithful: bool = False, jobs: int = 1) -> SweepReport:
    """Train/evaluate every (classifier, n) cell against one held-out
    split. Failed cells are marked and the rest still run; rows come back
    sorted by classifier then n."""
    if feature_counts is None:
        feature_counts = grid_counts()
    if not feature_counts:
        raise InvalidParam("empty sweep grid")
    if not classifiers:
        raise InvalidParam("no classifiers configured")
    split = stratified_split(hist_set, test_fraction, seed)
    train_set = hist_set.subset(split.train)
    test_set = hist_set.subset(split.test)
    ranking_source = hist_set if paper_faithful else train_set
    profile = compute_class_means(ranking_source, mode)

    cells = []
    for config in classifiers:
        for n in feature_counts:
            ranking = rank_features(profile, n)
            x_train, y_train = project_set(train_set, ranking, mode)
            x_test, y_test = project_set(test_set, ranking, mode)
            cells.append((config.kind, config.params, n, ranking, mode.value,
                          (x_train, y_train), (x_test, y_test), seed))

    rows = []
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(cell, pool.submit(_run_sweep_cell, cell)) for cell in cells]
            for cell, fut in futures:
                rows.append(_row_from_future(cell, fut.result, seed))
    else:
        for cell in cells:
            rows.append(_row_from_future(cell, lambda c=cell: _run_sweep_cell(c), seed))
    rows.sort(key=lambda r: (r.classifier, r.n_features))
    return SweepReport(rows=rows, feature_counts=tuple(feature_counts), seed=seed,
                       test_fraction=test_fraction, mode=mode)


def _row_from_future(cell, produce, seed) -> SweepRow:
    kind, _, n = cell[0], cell[1], cell[2]
    try:
        cm, wall_ms = produce()
    except OpscanError as exc:
        return SweepRow(classifier=kind, n_features=n, seed=seed, cm=None,
                        metrics=None, wall_ms=0.0, error=str(exc))
    return SweepRow(classifier=kind, n_features=n, seed=seed, cm=cm,
                    metrics=metrics(cm), wall_ms=wall_ms)


def _fmt(value: float) -> str:
    return repr(float(value))


SWEEP_CSV_HEADER = ["classifier", "n_features", "seed", "TP", "FN", "TN", "FP",
                    "accuracy_pct", "TPR", "TNR", "FPR", "FNR", "wall_ms"]


def write_sweep_csv(path, report: SweepReport, config: dict | None = None) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        for row in report.rows:
            if row.error is not None:
                writer.writerow([row.classifier, row.n_features, row.seed,
                                 "", "", "", "", "", "", "", "", "", ""])
                fh.write(f"# error: {row.classifier} n={row.n_features}: {row.error}\n")
                continue
            cm, ms = row.cm, row.metrics
            writer.writerow([row.classifier, row.n_features, row.seed,
                             cm.tp, cm.fn, cm.tn, cm.fp,
                             _fmt(ms.accuracy_pct), _fmt(ms.tpr), _fmt(ms.tnr),
                             _fmt(ms.fpr), _fmt(ms.fnr), f"{row.wall_ms:.3f}"])


def read_sweep_csv(path) -> list[dict]:
    """Rows as dicts keyed by the sweep header; '#' comments skipped."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
        return list(reader)


FOLD_CSV_HEADER = ["fold", "classifier", "n_features", "seed", "TP", "FN", "TN", "FP",
                   "accuracy_pct", "TPR", "TNR", "FPR", "FNR"]


def write_fold_csv(path, rows: list[tuple[str, str, int, int, ConfusionMatrix, MetricSet]],
                   config: dict | None = None) -> None:
    """Rows are (fold label, classifier, n_features, seed, cm, metrics)."""
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(FOLD_CSV_HEADER)
        for fold, kind, n, seed, cm, ms in rows:
            writer.writerow([fold, kind, n, seed, cm.tp, cm.fn, cm.tn, cm.fp,
                             _fmt(ms.accuracy_pct), _fmt(ms.tpr), _fmt(ms.tnr),
                             _fmt(ms.fpr), _fmt(ms.fnr)])


@dataclass(frozen=True)
class SyntheticCorpus:
    histograms: LabeledHistogramSet
    planted: tuple[int, ...]          # all truly discriminative opcodes
    benign_favored: tuple[int, ...]
    malware_favored: tuple[int, ...]


def generate_synthetic_corpus(n_benign: int, n_malware: int, separation: float,
                              seed: int, *, n_active: int = 64,
                              n_planted_per_class: int = 12,
                              size_range: tuple[int, int] = (3000, 9000)) -> SyntheticCorpus:
    """Sample per-app histograms from two class-conditional multinomial
    profiles. separation=0 makes the profiles identical; separation=1 gives
    each class exclusive dominant opcodes. Deterministic from the seed."""
    if n_benign < 1 or n_malware < 1:
        raise InvalidParam("need at least one app per class")
    if not 0.0 <= separation <= 1.0:
        raise InvalidParam(f"separation must be in [0,1], got {separation}")
    if n_active > 256 or 2 * n_planted_per_class > n_active:
        raise InvalidParam("planted opcodes must fit inside the active set")
    rng = np.random.default_rng(seed)
    defined = np.array([op for op in range(256) if DEFAULT_TABLE.is_defined(op)])
    active = rng.choice(defined, size=n_active, replace=False)
    benign_favored = np.sort(active[:n_planted_per_class])
    malware_favored = np.sort(active[n_planted_per_class:2 * n_planted_per_class])
    shared = active[2 * n_planted_per_class:]

    # Planted opcodes carry 40% of the profile mass so their signal is not
    # drowned by heavy shared opcodes.
    shared_w = rng.dirichlet(np.full(shared.size, 0.8)) * 0.6
    planted_w = rng.uniform(0.8, 1.2, size=2 * n_planted_per_class)
    planted_w = planted_w / planted_w.sum() * 0.4
    boost = 1.0 + 3.0 * separation
    damp = 1.0 - separation

    benign_profile = np.zeros(256)
    malware_profile = np.zeros(256)
    benign_profile[shared] = shared_w
    malware_profile[shared] = shared_w
    bf_w = planted_w[:n_planted_per_class]
    mf_w = planted_w[n_planted_per_class:]
    benign_profile[benign_favored] = bf_w * boost
    benign_profile[malware_favored] = mf_w * damp
    malware_profile[benign_favored] = bf_w * damp
    malware_profile[malware_favored] = mf_w * boost
    benign_profile /= benign_profile.sum()
    malware_profile /= malware_profile.sum()

    rows: list[tuple[OpcodeHistogram, Label]] = []
    lo, hi = size_range
    for i in range(n_benign):
        total = int(rng.integers(lo, hi + 1))
        counts = rng.multinomial(total, benign_profile)
        rows.append((OpcodeHistogram.from_counts(f"benign_{i:04d}", counts), Label.BENIGN))
    for i in range(n_malware):
        total = int(rng.integers(lo, hi + 1))
        counts = rng.multinomial(total, malware_profile)
        rows.append((OpcodeHistogram.from_counts(f"malware_{i:04d}", counts), Label.MALWARE))
    planted = tuple(sorted(int(v) for v in np.concatenate([benign_favored, malware_favored])))
    hist_set = LabeledHistogramSet(
        rows=rows,
        provenance=f"synthetic(seed={seed},separation={separation},"
                   f"n={n_benign}+{n_malware})")
    return SyntheticCorpus(histograms=hist_set, planted=planted,
                           benign_favored=tuple(int(v) for v in benign_favored),
                           malware_favored=tuple(int(v) for v in malware_favored))
