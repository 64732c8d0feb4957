"""Tree classifiers behind one train/predict contract: gain-ratio decision
tree, random forest and naive-Bayes tree, all induced from scratch."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import Label
from .errors import DimensionMismatch, EmptyDataset, InvalidParam
from .features import FeatureRanking, NormalizationMode

VARIANCE_FLOOR = 1e-9

KIND_DECISION_TREE = "dt"
KIND_RANDOM_FOREST = "rf"
KIND_NAIVE_BAYES_TREE = "nbt"
SUPPORTED_KINDS = (KIND_DECISION_TREE, KIND_RANDOM_FOREST, KIND_NAIVE_BAYES_TREE)


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus parallel labels (0 = benign, 1 = malware)."""

    x: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]

    @classmethod
    def from_arrays(cls, x, y, feature_names=None) -> "Dataset":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int8)
        if x.ndim != 2:
            raise InvalidParam(f"feature matrix must be 2-d, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise InvalidParam("labels must parallel the feature rows")
        if not np.isfinite(x).all():
            raise InvalidParam("feature values must be finite")
        if feature_names is None:
            feature_names = tuple(f"f{i}" for i in range(x.shape[1]))
        feature_names = tuple(feature_names)
        if len(feature_names) != x.shape[1]:
            raise InvalidParam("feature_names length must match the feature count")
        return cls(x=x, y=y, feature_names=feature_names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]


@dataclass
class NaiveBayesLeaf:
    """Gaussian naive-Bayes model fitted on one leaf's instances."""

    priors: np.ndarray     # (2,) Laplace-smoothed (count+1)/(total+2)
    means: np.ndarray      # (2, m)
    variances: np.ndarray  # (2, m), floored at VARIANCE_FLOOR


class TreeNode:
    """Internal node (feature, threshold, children; value <= threshold goes
    left) or leaf (class counts, optional naive-Bayes model)."""

    __slots__ = ("feature", "threshold", "left", "right",
                 "n_benign", "n_malware", "nb")

    def __init__(self):
        self.feature = None
        self.threshold = None
        self.left = None
        self.right = None
        self.n_benign = 0
        self.n_malware = 0
        self.nb = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass(frozen=True)
class SelectionProvenance:
    ranking: FeatureRanking
    mode: NormalizationMode


@dataclass
class TrainedModel:
    kind: str
    params: dict
    trees: list[TreeNode]
    feature_names: tuple[str, ...]
    seed: int | None = None
    selection: SelectionProvenance | None = None

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


def _entropy_counts(mal, n):
    """Binary entropy in bits from malware counts and totals (arrays)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        p = mal / n
        q = (n - mal) / n
        tp = np.where(mal > 0, p * np.log2(p), 0.0)
        tq = np.where(n - mal > 0, q * np.log2(q), 0.0)
    return -(tp + tq)


def _best_split(xn: np.ndarray, yn: np.ndarray, min_leaf: int):
    """Best (gain_ratio, feature position, threshold) over all midpoint
    candidates of the node submatrix, or None when no candidate has
    positive gain. Ties break by lower feature position, then lower
    threshold."""
    n, m = xn.shape
    if n < 2:
        return None
    order = np.argsort(xn, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(xn, order, axis=0)
    sorted_mal = yn[order].astype(np.int64)
    mal_prefix = np.cumsum(sorted_mal, axis=0)
    total_mal = int(yn.sum())

    left_n = np.arange(1, n, dtype=np.int64)[:, None]       # (n-1, 1)
    right_n = n - left_n
    left_mal = mal_prefix[:-1, :]                            # (n-1, m)
    right_mal = total_mal - left_mal
    boundary = sorted_vals[:-1, :] != sorted_vals[1:, :]
    valid = boundary & (left_n >= min_leaf) & (right_n >= min_leaf)

    parent_entropy = _entropy_counts(np.int64(total_mal), np.int64(n))
    wl = left_n / n
    wr = right_n / n
    info_gain = parent_entropy - wl * _entropy_counts(left_mal, left_n) \
        - wr * _entropy_counts(right_mal, right_n)
    split_info = -(wl * np.log2(wl) + wr * np.log2(wr))
    gain_ratio = np.where(valid, info_gain / split_info, -np.inf)

    flat = gain_ratio.T.ravel()  # feature-major, ascending threshold within
    k = int(np.argmax(flat))
    best = flat[k]
    if not best > 0.0:
        return None
    f = k // (n - 1)
    pos = k % (n - 1)
    lo = sorted_vals[pos, f]
    hi = sorted_vals[pos + 1, f]
    threshold = (lo + hi) / 2.0
    if threshold >= hi:  # adjacent floats can collapse the midpoint
        threshold = lo
    return float(best), int(f), float(threshold)


def _grow_tree(x: np.ndarray, y: np.ndarray, idx: np.ndarray, *,
               min_leaf: int, min_split_size: int, max_depth: int | None,
               mtry: int | None = None, rng=None,
               leaf_rows: list | None = None) -> TreeNode:
    """Iterative top-down induction. `min_split_size` is the smallest node
    still considered for splitting; `mtry` restricts each node to a fresh
    random feature subset. `leaf_rows` collects (leaf, row indices)."""
    m_total = x.shape[1]
    root = TreeNode()
    stack = [(root, idx, 0)]
    while stack:
        node, node_idx, depth = stack.pop()
        yn = y[node_idx]
        n = node_idx.size
        n_mal = int(yn.sum())
        n_ben = n - n_mal
        split = None
        depth_stop = max_depth is not None and depth >= max_depth
        if n_mal and n_ben and n >= min_split_size and not depth_stop:
            if mtry is None or mtry >= m_total:
                feats = None
                xn = x[node_idx]
            else:
                feats = np.sort(rng.choice(m_total, size=mtry, replace=False))
                xn = x[node_idx][:, feats]
            split = _best_split(xn, yn, min_leaf)
        if split is None:
            node.n_benign = n_ben
            node.n_malware = n_mal
            if leaf_rows is not None:
                leaf_rows.append((node, node_idx))
            continue
        _, fpos, threshold = split
        feature = int(feats[fpos]) if feats is not None else fpos
        node.feature = feature
        node.threshold = threshold
        go_left = x[node_idx, feature] <= threshold
        node.left = TreeNode()
        node.right = TreeNode()
        stack.append((node.right, node_idx[~go_left], depth + 1))
        stack.append((node.left, node_idx[go_left], depth + 1))
    return root


def route_to_leaf(root: TreeNode, vector: np.ndarray) -> TreeNode:
    node = root
    while not node.is_leaf:
        node = node.left if vector[node.feature] <= node.threshold else node.right
    return node


def _require_nonempty(data: Dataset) -> None:
    if data.n == 0 or data.m == 0:
        raise EmptyDataset("training needs at least one instance and one feature")


def train_decision_tree(data: Dataset, *, min_leaf: int = 2,
                        max_depth: int | None = None,
                        seed: int | None = None,
                        selection: SelectionProvenance | None = None) -> TrainedModel:
    """Gain-ratio tree with midpoint thresholds. Stops on purity, fewer
    than 2*min_leaf instances, max_depth, or no positive-gain split."""
    _require_nonempty(data)
    if min_leaf < 1:
        raise InvalidParam(f"min_leaf must be >= 1, got {min_leaf}")
    root = _grow_tree(data.x, data.y, np.arange(data.n), min_leaf=min_leaf,
                      min_split_size=2 * min_leaf, max_depth=max_depth)
    return TrainedModel(kind=KIND_DECISION_TREE,
                        params={"min_leaf": min_leaf, "max_depth": max_depth},
                        trees=[root], feature_names=data.feature_names,
                        seed=seed, selection=selection)


def train_random_forest(data: Dataset, *, n_trees: int = 100, mtry: int | None = None,
                        min_leaf: int = 1, seed: int = 0, bootstrap: bool = True,
                        max_depth: int | None = None,
                        selection: SelectionProvenance | None = None) -> TrainedModel:
    """Bootstrap-resampled gain-ratio trees, each node restricted to a
    fresh random subset of mtry features. All randomness derives from the
    single seed through per-tree spawned generators, so sequential and
    parallel training match."""
    _require_nonempty(data)
    if n_trees < 1:
        raise InvalidParam(f"n_trees must be >= 1, got {n_trees}")
    if min_leaf < 1:
        raise InvalidParam(f"min_leaf must be >= 1, got {min_leaf}")
    if mtry is None:
        mtry = int(math.floor(math.log2(data.m))) + 1
    if not 1 <= mtry <= data.m:
        raise InvalidParam(f"mtry must be in [1, {data.m}], got {mtry}")
    tree_seeds = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    base_idx = np.arange(data.n)
    for tree_seed in tree_seeds:
        rng = np.random.default_rng(tree_seed)
        idx = rng.integers(0, data.n, size=data.n) if bootstrap else base_idx
        trees.append(_grow_tree(data.x, data.y, idx, min_leaf=min_leaf,
                                min_split_size=2 * min_leaf, max_depth=max_depth,
                                mtry=mtry, rng=rng))
    return TrainedModel(kind=KIND_RANDOM_FOREST,
                        params={"n_trees": n_trees, "mtry": mtry, "min_leaf": min_leaf,
                                "bootstrap": bootstrap, "max_depth": max_depth},
                        trees=trees, feature_names=data.feature_names,
                        seed=seed, selection=selection)


def train_nbt(data: Dataset, *, min_leaf_for_nb: int = 30,
              max_depth: int | None = None, seed: int | None = None,
              selection: SelectionProvenance | None = None) -> TrainedModel:
    """Gain-ratio tree that stops splitting nodes smaller than
    min_leaf_for_nb and fits a Gaussian naive-Bayes model on each mixed
    leaf; single-class leaves fall back to their majority counts."""
    _require_nonempty(data)
    if min_leaf_for_nb < 1:
        raise InvalidParam(f"min_leaf_for_nb must be >= 1, got {min_leaf_for_nb}")
    leaf_rows: list[tuple[TreeNode, np.ndarray]] = []
    root = _grow_tree(data.x, data.y, np.arange(data.n), min_leaf=1,
                      min_split_size=min_leaf_for_nb, max_depth=max_depth,
                      leaf_rows=leaf_rows)
    for leaf, idx in leaf_rows:
        leaf.nb = _fit_nb_leaf(data.x[idx], data.y[idx])
    return TrainedModel(kind=KIND_NAIVE_BAYES_TREE,
                        params={"min_leaf_for_nb": min_leaf_for_nb, "max_depth": max_depth},
                        trees=[root], feature_names=data.feature_names,
                        seed=seed, selection=selection)


def _fit_nb_leaf(x: np.ndarray, y: np.ndarray) -> NaiveBayesLeaf | None:
    """None when the leaf holds a single class (majority fallback)."""
    benign = x[y == 0]
    malware = x[y == 1]
    if benign.shape[0] == 0 or malware.shape[0] == 0:
        return None
    n = x.shape[0]
    priors = np.array([(benign.shape[0] + 1) / (n + 2), (malware.shape[0] + 1) / (n + 2)])
    means = np.stack([benign.mean(axis=0), malware.mean(axis=0)])
    variances = np.stack([benign.var(axis=0), malware.var(axis=0)])
    variances = np.maximum(variances, VARIANCE_FLOOR)
    return NaiveBayesLeaf(priors=priors, means=means, variances=variances)


def _nb_malware_posterior(nb: NaiveBayesLeaf, vector: np.ndarray) -> float:
    log_joint = np.log(nb.priors) + np.sum(
        -0.5 * np.log(2.0 * np.pi * nb.variances)
        - (vector[None, :] - nb.means) ** 2 / (2.0 * nb.variances), axis=1)
    log_norm = np.logaddexp(log_joint[0], log_joint[1])
    return float(np.exp(log_joint[1] - log_norm))


def _leaf_malware_fraction(leaf: TreeNode) -> float:
    total = leaf.n_benign + leaf.n_malware
    return leaf.n_malware / total if total else 0.5


def _score_vector(model: TrainedModel, vector: np.ndarray) -> float:
    if model.kind == KIND_RANDOM_FOREST:
        votes = 0
        for tree in model.trees:
            leaf = route_to_leaf(tree, vector)
            if _leaf_malware_fraction(leaf) >= 0.5:
                votes += 1
        return votes / len(model.trees)
    leaf = route_to_leaf(model.trees[0], vector)
    if model.kind == KIND_NAIVE_BAYES_TREE and leaf.nb is not None:
        return _nb_malware_posterior(leaf.nb, vector)
    return _leaf_malware_fraction(leaf)


@dataclass(frozen=True)
class Prediction:
    label: Label
    score: float  # malware-class probability


def predict(model: TrainedModel, vector) -> Prediction:
    """Score one feature vector; score >= 0.5 maps to Malware (a detector
    fails safe on ties)."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (model.n_features,):
        raise DimensionMismatch(
            f"expected vector of length {model.n_features}, got shape {v.shape}")
    score = _score_vector(model, v)
    label = Label.MALWARE if score >= 0.5 else Label.BENIGN
    return Prediction(label=label, score=score)


def predict_batch(model: TrainedModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Vector of predicted labels (0/1) and malware scores for a matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise DimensionMismatch(
            f"expected matrix with {model.n_features} columns, got shape {x.shape}")
    scores = np.array([_score_vector(model, row) for row in x])
    labels = (scores >= 0.5).astype(np.int8)
    return labels, scores


def count_leaves(model: TrainedModel) -> int:
    total = 0
    for tree in model.trees:
        stack = [tree]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                total += 1
            else:
                stack.extend((node.left, node.right))
    return total


_TRAINERS = {
    KIND_DECISION_TREE: train_decision_tree,
    KIND_RANDOM_FOREST: train_random_forest,
    KIND_NAIVE_BAYES_TREE: train_nbt,
}


def train_classifier(kind: str, data: Dataset, *, seed: int = 0,
                     selection: SelectionProvenance | None = None,
                     **params) -> TrainedModel:
    """Dispatch by classifier id; unknown kinds name the supported set so
    additional classifiers can plug in later."""
    if kind not in _TRAINERS:
        raise InvalidParam(
            f"unsupported classifier {kind!r}; supported: {', '.join(SUPPORTED_KINDS)}")
    return _TRAINERS[kind](data, seed=seed, selection=selection, **params)
