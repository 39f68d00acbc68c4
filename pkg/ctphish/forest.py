"""
Random forest of Gini decision trees.

Each tree draws its bootstrap sample and per-node feature permutations from a
Philox counter-based generator keyed by (seed, tree index), so tree k is the
same no matter how many trees are grown or in which order they are built.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .errors import DimensionMismatch, EmptyClass, UntrainedModel

logger = logging.getLogger(__name__)

LEAF = -1


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, tree_index], dtype=np.uint64)))


@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    impurity_decrease: np.ndarray
    n_samples: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf phish fraction for every row of X."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] != LEAF
        while active.any():
            idx = rows[active]
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] != LEAF
        return self.value[node]

    def importances(self, n_features: int) -> np.ndarray:
        imp = np.zeros(n_features, dtype=np.float64)
        split = self.feature != LEAF
        np.add.at(imp, self.feature[split], self.impurity_decrease[split])
        total = imp.sum()
        return imp / total if total > 0 else imp

    def to_dict(self) -> Dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "impurity_decrease": self.impurity_decrease.tolist(),
            "n_samples": self.n_samples.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DecisionTree":
        return cls(
            feature=np.asarray(data["feature"], dtype=np.int64),
            threshold=np.asarray(data["threshold"], dtype=np.float64),
            left=np.asarray(data["left"], dtype=np.int64),
            right=np.asarray(data["right"], dtype=np.int64),
            value=np.asarray(data["value"], dtype=np.float64),
            impurity_decrease=np.asarray(data["impurity_decrease"], dtype=np.float64),
            n_samples=np.asarray(data["n_samples"], dtype=np.int64),
        )


def _best_split(x: np.ndarray, y: np.ndarray):
    """
    Lowest weighted child Gini over midpoints of distinct sorted values.
    Returns (child_impurity, threshold) or None when x is constant.
    """
    n = len(y)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ys = y[order]
    valid = xs[1:] > xs[:-1]
    if not valid.any():
        return None
    left_pos = np.cumsum(ys)[:-1]
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    right_pos = ys.sum() - left_pos
    # n * weighted child Gini: 2*p*q/n per side
    impurity = (2.0 * left_pos * (n_left - left_pos) / n_left
                + 2.0 * right_pos * (n_right - right_pos) / n_right)
    impurity = np.where(valid, impurity, np.inf)
    i = int(np.argmin(impurity))
    threshold = (xs[i] + xs[i + 1]) / 2.0
    if threshold >= xs[i + 1]:
        threshold = xs[i]
    return float(impurity[i]), float(threshold)


def build_tree(X: np.ndarray, y: np.ndarray, rng: np.random.Generator, max_features: int) -> DecisionTree:
    n_total, n_features = X.shape
    sample = rng.integers(0, n_total, size=n_total)
    Xb, yb = X[sample], y[sample].astype(np.float64)

    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []
    decrease: List[float] = []
    n_samples: List[int] = []

    def new_node(indices: np.ndarray) -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(yb[indices].mean()))
        decrease.append(0.0)
        n_samples.append(len(indices))
        return len(feature) - 1

    stack = [(new_node(np.arange(n_total)), np.arange(n_total))]
    while stack:
        node, indices = stack.pop()
        ys = yb[indices]
        n = len(indices)
        positives = ys.sum()
        if n < 2 or positives == 0 or positives == n:
            continue

        best = None
        order = rng.permutation(n_features)
        for rank, f in enumerate(order):
            # keep drawing past max_features until some feature can split
            if rank >= max_features and best is not None:
                break
            found = _best_split(Xb[indices, f], ys)
            if found is None:
                continue
            candidate = (found[0], int(f), found[1])
            if best is None or candidate < best:
                best = candidate
        if best is None:
            continue

        child_impurity, f, thr = best
        parent_impurity = 2.0 * positives * (n - positives) / n
        go_left = Xb[indices, f] <= thr
        left_idx, right_idx = indices[go_left], indices[~go_left]

        feature[node] = f
        threshold[node] = thr
        decrease[node] = (parent_impurity - child_impurity) / n_total
        left[node] = new_node(left_idx)
        right[node] = new_node(right_idx)
        stack.append((right[node], right_idx))
        stack.append((left[node], left_idx))

    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
        impurity_decrease=np.asarray(decrease, dtype=np.float64),
        n_samples=np.asarray(n_samples, dtype=np.int64),
    )


class RandomForest:
    """
    Bagged Gini trees with sqrt(p) features per split, grown until pure.
    """

    def __init__(self, n_trees: int = 200, seed: int = 0, n_jobs: int = 1):
        if n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        self.n_trees = n_trees
        self.seed = seed
        self.n_jobs = n_jobs
        self.n_features: Optional[int] = None
        self.trees: List[DecisionTree] = []

    @property
    def max_features(self) -> int:
        return max(1, int(math.floor(math.sqrt(self.n_features))))

    def fit(self, X, y) -> "RandomForest":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != len(y):
            raise DimensionMismatch(f"X has shape {X.shape} but y has {len(y)} labels")
        if not np.isfinite(X).all():
            raise ValueError("feature matrix contains non-finite values")
        if not ((y == 0).any() and (y == 1).any()):
            raise EmptyClass("training data needs both labels")
        self.n_features = X.shape[1]

        def grow(k: int) -> DecisionTree:
            return build_tree(X, y, tree_rng(self.seed, k), self.max_features)

        with ThreadPoolExecutor(max_workers=max(1, self.n_jobs)) as pool:
            self.trees = list(pool.map(grow, range(self.n_trees)))
        logger.info(f"Trained {self.n_trees} trees on {X.shape[0]} samples x {self.n_features} features")
        return self

    def _check(self, X: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise UntrainedModel("forest has no trees")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"forest expects {self.n_features} features, got {X.shape[1]}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        """Mean leaf phish fraction over trees, independent of tree order."""
        X = self._check(X)
        leaves = np.stack([tree.apply(X) for tree in self.trees])
        scores = np.array([math.fsum(column) for column in leaves.T]) / len(self.trees)
        return np.clip(scores, 0.0, 1.0)

    def feature_importances(self) -> np.ndarray:
        """Mean decrease in impurity, normalized per tree and over the forest."""
        if not self.trees:
            raise UntrainedModel("forest has no trees")
        per_tree = np.stack([tree.importances(self.n_features) for tree in self.trees])
        mean = per_tree.mean(axis=0)
        total = mean.sum()
        return mean / total if total > 0 else mean

    def to_dict(self) -> Dict:
        return {
            "n_trees": self.n_trees,
            "seed": self.seed,
            "n_features": self.n_features,
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RandomForest":
        forest = cls(n_trees=int(data["n_trees"]), seed=int(data["seed"]))
        forest.n_features = int(data["n_features"])
        forest.trees = [DecisionTree.from_dict(t) for t in data["trees"]]
        if not forest.trees:
            raise ValueError("serialized forest has no trees")
        for tree in forest.trees:
            split = tree.feature != LEAF
            if (tree.feature[split] >= forest.n_features).any():
                raise ValueError("tree node references a feature beyond the forest dimension")
            if ((tree.value < 0) | (tree.value > 1)).any():
                raise ValueError("leaf fraction outside [0, 1]")
        return forest
