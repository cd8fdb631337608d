"""Baseline classifiers with fixed defaults behind one fit/predict interface.

Defaults (not tunable from the experiment harness):

* knn -- k=5, Euclidean, majority vote, even votes go to label 0
* logistic_regression -- L2 strength C=1.0, full-batch gradient descent,
  1000 iterations, learning rate 0.1, inputs min-max scaled on the
  training rows
* decision_tree -- CART with Gini impurity, grown until pure, min 2 samples
  to split, best-split ties resolved by lowest feature then lowest threshold
* random_forest -- 100 bootstrapped CART trees, sqrt(d) features per split
* svm -- linear, hinge loss, C=1, deterministic subgradient descent for
  1000 epochs, inputs min-max scaled on the training rows
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import Dataset, DataError, MinMaxScaler
from .neighbors import NeighborQuery, kneighbors

LEARNER_NAMES = ("knn", "logistic_regression", "decision_tree", "random_forest", "svm")

_ALIASES = {"lr": "logistic_regression", "dt": "decision_tree", "rf": "random_forest"}

_DEFAULTS: dict[str, dict[str, Any]] = {
    "knn": {"k": 5, "r": 2.0},
    "logistic_regression": {"C": 1.0, "iterations": 1000, "learning_rate": 0.1},
    "decision_tree": {"min_samples_split": 2, "max_features": None},
    "random_forest": {"n_trees": 100, "bootstrap": True, "max_features": "sqrt", "min_samples_split": 2},
    "svm": {"C": 1.0, "epochs": 1000},
}


@dataclass(frozen=True)
class LearnerKind:
    """A learner name plus optional overrides of its frozen defaults."""

    kind: str
    options: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self) -> None:
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in LEARNER_NAMES:
            raise ValueError(f"unknown learner {self.kind!r}; expected one of {LEARNER_NAMES}")
        object.__setattr__(self, "kind", kind)
        unknown = set(dict(self.options)) - set(_DEFAULTS[kind])
        if unknown:
            raise ValueError(f"unknown options for {kind}: {sorted(unknown)}")

    @classmethod
    def of(cls, kind: str, **options: Any) -> "LearnerKind":
        return cls(kind, tuple(sorted(options.items())))

    @property
    def params(self) -> dict[str, Any]:
        return {**_DEFAULTS[self.kind], **dict(self.options)}


def _as_kind(kind: LearnerKind | str) -> LearnerKind:
    return kind if isinstance(kind, LearnerKind) else LearnerKind(kind)


def _fit_scaler(x: np.ndarray) -> MinMaxScaler:
    return MinMaxScaler(x.min(axis=0), x.max(axis=0))


class KNearestNeighbors:
    def __init__(self, k: int = 5, r: float = 2.0):
        self.query = NeighborQuery(k, r)

    def fit(self, x: np.ndarray, y: np.ndarray) -> "KNearestNeighbors":
        if self.query.k > x.shape[0]:
            raise DataError(f"knn needs at least k={self.query.k} training rows")
        self.x_ = x
        self.y_ = y
        return self

    def predict(self, rows: np.ndarray) -> np.ndarray:
        idx = kneighbors(self.x_, self.query, queries=rows)
        votes = self.y_[idx].sum(axis=1)
        return (2 * votes > self.query.k).astype(np.int64)


class LogisticRegression:
    def __init__(self, C: float = 1.0, iterations: int = 1000, learning_rate: float = 0.1):
        self.C = C
        self.iterations = iterations
        self.learning_rate = learning_rate

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LogisticRegression":
        self.scaler_ = _fit_scaler(x)
        xs = self.scaler_.transform(x)
        n, d = xs.shape
        w = np.zeros(d)
        b = 0.0
        yf = y.astype(float)
        l2 = 1.0 / (self.C * n)
        for _ in range(self.iterations):
            p = _sigmoid(xs @ w + b)
            err = p - yf
            w -= self.learning_rate * (xs.T @ err / n + l2 * w)
            b -= self.learning_rate * err.mean()
        self.coef_ = w
        self.intercept_ = b
        return self

    def decision_function(self, rows: np.ndarray) -> np.ndarray:
        return self.scaler_.transform(rows) @ self.coef_ + self.intercept_

    def predict(self, rows: np.ndarray) -> np.ndarray:
        return (self.decision_function(rows) > 0).astype(np.int64)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LinearSVM:
    """Soft-margin linear SVM trained by full-batch subgradient descent.

    Minimises ``0.5*|w|^2 + C * sum(hinge)`` with the Pegasos step schedule
    ``1 / (lambda * t)`` where ``lambda = 1 / (C * n)``; the iterate with the
    lowest primal objective is kept.
    """

    def __init__(self, C: float = 1.0, epochs: int = 1000):
        self.C = C
        self.epochs = epochs

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LinearSVM":
        self.scaler_ = _fit_scaler(x)
        xs = self.scaler_.transform(x)
        n, d = xs.shape
        ys = np.where(y == 1, 1.0, -1.0)
        lam = 1.0 / (self.C * n)
        w = np.zeros(d)
        b = 0.0
        best = (math.inf, w.copy(), b)
        for t in range(1, self.epochs + 1):
            margins = ys * (xs @ w + b)
            viol = margins < 1.0
            obj = 0.5 * lam * (w @ w) + np.maximum(0.0, 1.0 - margins).mean()
            if obj < best[0]:
                best = (obj, w.copy(), b)
            eta = 1.0 / (lam * t)
            grad_w = lam * w - (ys[viol, None] * xs[viol]).sum(axis=0) / n
            grad_b = -ys[viol].sum() / n
            w = w - eta * grad_w
            b = b - eta * grad_b
            # Pegasos projection onto the ball that contains the optimum
            norm = math.sqrt(w @ w)
            radius = 1.0 / math.sqrt(lam)
            if norm > radius:
                w *= radius / norm
        margins = ys * (xs @ w + b)
        obj = 0.5 * lam * (w @ w) + np.maximum(0.0, 1.0 - margins).mean()
        if obj < best[0]:
            best = (obj, w.copy(), b)
        _, self.coef_, self.intercept_ = best
        return self

    def decision_function(self, rows: np.ndarray) -> np.ndarray:
        return self.scaler_.transform(rows) @ self.coef_ + self.intercept_

    def predict(self, rows: np.ndarray) -> np.ndarray:
        return (self.decision_function(rows) > 0).astype(np.int64)

    def support_mask(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Rows on or inside the margin, or misclassified (nonzero dual weight)."""
        ys = np.where(y == 1, 1.0, -1.0)
        return ys * self.decision_function(x) <= 1.0 + 1e-9


class DecisionTree:
    """CART classifier using Gini impurity.

    A node is split whenever it is impure and some feature takes more than
    one value in it, even if the best split does not lower impurity; that
    is what lets an unlimited tree isolate XOR cells.
    """

    def __init__(self, min_samples_split: int = 2, max_features: int | None = None, seed: int | None = None):
        self.min_samples_split = min_samples_split
        self.max_features = max_features
        self.seed = seed

    def fit(self, x: np.ndarray, y: np.ndarray) -> "DecisionTree":
        rng = np.random.default_rng(self.seed)
        n, d = x.shape
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node() -> int:
            for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0)):
                lst.append(v)
            return len(feature) - 1

        root = new_node()
        stack = [(root, np.arange(n))]
        while stack:
            node, idx = stack.pop()
            yi = y[idx]
            pos = int(yi.sum())
            value[node] = 1 if 2 * pos > idx.size else 0
            if idx.size < self.min_samples_split or pos == 0 or pos == idx.size:
                continue
            split = self._best_split(x, yi, idx, d, rng)
            if split is None:
                continue
            f, thr = split
            go_left = x[idx, f] <= thr
            feature[node], threshold[node] = f, thr
            left[node], right[node] = new_node(), new_node()
            stack.append((right[node], idx[~go_left]))
            stack.append((left[node], idx[go_left]))
        self.feature_ = np.array(feature)
        self.threshold_ = np.array(threshold)
        self.left_ = np.array(left)
        self.right_ = np.array(right)
        self.value_ = np.array(value, dtype=np.int64)
        return self

    def _best_split(self, x, yi, idx, d, rng):
        if self.max_features is None or self.max_features >= d:
            groups = [np.arange(d)]
        else:
            perm = rng.permutation(d)
            groups = [np.sort(perm[: self.max_features]), np.sort(perm[self.max_features :])]
        for candidates in groups:
            best = None
            best_score = -math.inf
            for f in candidates:
                found = _gini_split(x[idx, f], yi)
                if found is None:
                    continue
                s, thr = found
                if best is None or s > best_score + 1e-12 * max(1.0, abs(best_score)):
                    best_score, best = s, (int(f), thr)
            if best is not None:
                return best
        return None

    def apply(self, rows: np.ndarray) -> np.ndarray:
        node = np.zeros(rows.shape[0], dtype=np.int64)
        active = self.feature_[node] >= 0
        while np.any(active):
            cur = node[active]
            go_left = rows[active, self.feature_[cur]] <= self.threshold_[cur]
            node[active] = np.where(go_left, self.left_[cur], self.right_[cur])
            active = self.feature_[node] >= 0
        return node

    def predict(self, rows: np.ndarray) -> np.ndarray:
        return self.value_[self.apply(rows)]


def _gini_split(v: np.ndarray, y: np.ndarray):
    """Best threshold on one feature, scored by the Gini purity sum.

    Maximising ``sum_children (p^2 + q^2) / n_child`` is the same as
    minimising the size-weighted child Gini impurity.
    """
    order = np.argsort(v, kind="stable")
    vs = v[order]
    valid = vs[1:] > vs[:-1]
    if not valid.any():
        return None
    ys = y[order]
    n = v.size
    total_pos = ys.sum()
    pl = np.cumsum(ys)[:-1].astype(float)
    nl = np.arange(1, n, dtype=float)
    nr = n - nl
    pr = total_pos - pl
    s = (pl**2 + (nl - pl) ** 2) / nl + (pr**2 + (nr - pr) ** 2) / nr
    s[~valid] = -math.inf
    i = int(np.argmax(s))
    thr = 0.5 * (vs[i] + vs[i + 1])
    if not vs[i] <= thr < vs[i + 1]:
        thr = vs[i]
    return float(s[i]), float(thr)


class RandomForest:
    def __init__(
        self,
        n_trees: int = 100,
        bootstrap: bool = True,
        max_features: int | str | None = "sqrt",
        min_samples_split: int = 2,
        seed: int = 0,
    ):
        self.n_trees = n_trees
        self.bootstrap = bootstrap
        self.max_features = max_features
        self.min_samples_split = min_samples_split
        self.seed = seed

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RandomForest":
        n, d = x.shape
        if self.max_features == "sqrt":
            m = max(1, int(math.sqrt(d)))
        else:
            m = self.max_features
        self.trees_ = []
        for t in range(self.n_trees):
            rng = np.random.default_rng([self.seed, t])
            rows = rng.integers(0, n, size=n) if self.bootstrap else np.arange(n)
            tree_seed = int(rng.integers(0, 2**63 - 1))
            tree = DecisionTree(self.min_samples_split, m, seed=tree_seed)
            self.trees_.append(tree.fit(x[rows], y[rows]))
        return self

    def tree_predictions(self, rows: np.ndarray) -> np.ndarray:
        return np.stack([t.predict(rows) for t in self.trees_])

    def predict(self, rows: np.ndarray) -> np.ndarray:
        votes = self.tree_predictions(rows).sum(axis=0)
        return (2 * votes > len(self.trees_)).astype(np.int64)


@dataclass
class FittedModel:
    kind: LearnerKind
    estimator: Any
    n_features: int
    meta: dict = field(default_factory=dict)


def _build(kind: LearnerKind, seed: int):
    p = kind.params
    if kind.kind == "knn":
        return KNearestNeighbors(p["k"], p["r"])
    if kind.kind == "logistic_regression":
        return LogisticRegression(p["C"], p["iterations"], p["learning_rate"])
    if kind.kind == "decision_tree":
        return DecisionTree(p["min_samples_split"], p["max_features"], seed=seed)
    if kind.kind == "random_forest":
        return RandomForest(p["n_trees"], p["bootstrap"], p["max_features"], p["min_samples_split"], seed=seed)
    return LinearSVM(p["C"], p["epochs"])


def fit(kind: LearnerKind | str, train: Dataset, seed: int = 0) -> FittedModel:
    kind = _as_kind(kind)
    train.require_both_classes()
    est = _build(kind, seed).fit(train.features, train.labels)
    return FittedModel(kind, est, train.n_features)


def predict(model: FittedModel, rows) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got {rows.shape[1]}")
    return model.estimator.predict(rows)
