"""Oversampling baselines: random duplication, SMOTE and its variants, and
SMOTUNED (SMOTE whose k, r and m are tuned by differential evolution).

Every oversampler returns a new dataset whose first ``n`` rows are the
input rows unchanged, followed by the synthetic minority rows (label 1).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, DataError
from .learners import LearnerKind, LinearSVM, fit, predict
from .metrics import evaluate
from .neighbors import NeighborQuery, kneighbors, pairwise_distances


class ResamplingWarning(UserWarning):
    """An oversampler fell back to a simpler strategy or returned its input."""


class DegenerateResampling(ValueError):
    """The oversampler cannot run on this data; callers should fall back to SMOTE."""


@dataclass(frozen=True)
class SmoteParams:
    """SMOTE configuration.

    ``m`` is the minority total after resampling; ``None`` means full
    balance with the majority class. ``ratio`` (minority/majority after
    resampling) is an alternative way to set the target and is ignored when
    ``m`` is given.
    """

    k: int = 5
    r: float = 2.0
    m: int | None = None
    seed: int = 0
    ratio: float | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.ratio is not None and self.ratio <= 0:
            raise ValueError("ratio must be positive")

    def target(self, data: Dataset) -> int:
        if self.m is not None:
            m = int(self.m)
        elif self.ratio is not None:
            m = max(data.n_minority, math.ceil(self.ratio * data.n_majority))
        else:
            m = max(data.n_minority, data.n_majority)
        if m < data.n_minority:
            raise ValueError(f"target m={m} is below the current minority count {data.n_minority}")
        return m


@dataclass(frozen=True)
class SmotunedBounds:
    k_range: tuple[int, int] = (1, 20)
    r_range: tuple[int, int] = (1, 6)
    m_range: tuple[int, int] = (50, 500)

    def __post_init__(self) -> None:
        for name in ("k_range", "r_range", "m_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")

    def as_box(self) -> list[tuple[float, float]]:
        return [tuple(map(float, b)) for b in (self.k_range, self.r_range, self.m_range)]


@dataclass(frozen=True)
class DeConfig:
    population_size: int = 10
    mutation_factor: float = 0.8
    crossover_rate: float = 0.9
    generations: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.population_size < 4:
            raise ValueError("population_size must be >= 4 (rand/1 needs three partners)")
        if not 0 < self.mutation_factor <= 2:
            raise ValueError("mutation_factor must lie in (0, 2]")
        if not 0 <= self.crossover_rate <= 1:
            raise ValueError("crossover_rate must lie in [0, 1]")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")


def interpolate(base: np.ndarray, neighbor: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Points ``base + u * (neighbor - base)``, one ``u`` per row."""
    u = np.asarray(u, dtype=float).reshape(-1, 1)
    return base + u * (neighbor - base)


def _minority_neighbors(x_min: np.ndarray, k: int, r: float) -> np.ndarray:
    if x_min.shape[0] < 2:
        raise DataError(f"SMOTE needs at least 2 minority samples, got {x_min.shape[0]}")
    if k > x_min.shape[0] - 1:
        raise DataError(f"k={k} too large for {x_min.shape[0]} minority samples (max {x_min.shape[0] - 1})")
    return kneighbors(x_min, NeighborQuery(k, r))


def _majority_counts(data: Dataset, k: int, r: float) -> np.ndarray:
    """Majority-class members among each minority row's k neighbours in the full set."""
    if k > data.n_rows - 1:
        raise DataError(f"k={k} too large for {data.n_rows} rows")
    min_rows = np.flatnonzero(data.labels == 1)
    d = pairwise_distances(data.features[min_rows], data.features, r)
    d[np.arange(min_rows.size), min_rows] = np.inf
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    return (data.labels[nn] == 0).sum(axis=1)


def _synthesize(x_min, nn, seeds, rng) -> np.ndarray:
    picks = nn[seeds, rng.integers(0, nn.shape[1], size=seeds.size)]
    return interpolate(x_min[seeds], x_min[picks], rng.random(seeds.size))


def random_oversample(data: Dataset, seed: int = 0) -> Dataset:
    data.require_both_classes()
    n_new = data.n_majority - data.n_minority
    if n_new <= 0:
        return data
    rng = np.random.default_rng(seed)
    x_min = data.minority
    return data.append(x_min[rng.integers(0, x_min.shape[0], size=n_new)], 1)


def smote(data: Dataset, params: SmoteParams) -> Dataset:
    """Synthesise minority rows on segments between minority neighbours.

    Each synthetic row picks a random minority seed, one of its ``k``
    nearest minority neighbours (Minkowski order ``r``) and a uniform
    position along the segment.
    """
    data.require_both_classes()
    n_new = params.target(data) - data.n_minority
    if n_new == 0:
        return data
    x_min = data.minority
    nn = _minority_neighbors(x_min, params.k, params.r)
    rng = np.random.default_rng(params.seed)
    seeds = rng.integers(0, x_min.shape[0], size=n_new)
    return data.append(_synthesize(x_min, nn, seeds, rng), 1)


def adasyn_allocation(weights: np.ndarray, budget: int) -> np.ndarray:
    """Split ``budget`` proportionally to ``weights``; the rounding residue
    goes one apiece to the highest-weight points (lowest index on ties)."""
    w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        raise DegenerateResampling("ADASYN degenerate: no minority point borders the majority class; use SMOTE")
    share = w / w.sum() * budget
    counts = np.floor(share + 1e-9).astype(np.int64)
    residue = budget - int(counts.sum())
    order = np.lexsort((np.arange(w.size), -w))
    counts[order[:residue]] += 1
    return counts


def adasyn(data: Dataset, params: SmoteParams) -> Dataset:
    """Density-adaptive SMOTE: minority points with more majority neighbours
    receive proportionally more synthetic rows."""
    data.require_both_classes()
    n_new = params.target(data) - data.n_minority
    if n_new == 0:
        return data
    x_min = data.minority
    nn = _minority_neighbors(x_min, params.k, params.r)
    ratios = _majority_counts(data, params.k, params.r) / params.k
    counts = adasyn_allocation(ratios, n_new)
    seeds = np.repeat(np.arange(x_min.shape[0]), counts)
    rng = np.random.default_rng(params.seed)
    return data.append(_synthesize(x_min, nn, seeds, rng), 1)


def borderline_categories(data: Dataset, k: int, r: float = 2.0) -> np.ndarray:
    """Label each minority row 'safe', 'danger' or 'noise' (borderline-1 rule)."""
    n_maj = _majority_counts(data, k, r)
    out = np.full(n_maj.size, "safe", dtype=object)
    out[(2 * n_maj >= k) & (n_maj < k)] = "danger"
    out[n_maj == k] = "noise"
    return out


def borderline_smote(data: Dataset, params: SmoteParams) -> Dataset:
    data.require_both_classes()
    n_new = params.target(data) - data.n_minority
    if n_new == 0:
        return data
    x_min = data.minority
    nn = _minority_neighbors(x_min, params.k, params.r)
    danger = np.flatnonzero(borderline_categories(data, params.k, params.r) == "danger")
    if danger.size == 0:
        warnings.warn("BorderlineSMOTE found no DANGER samples; returning input unchanged", ResamplingWarning)
        return data
    rng = np.random.default_rng(params.seed)
    seeds = danger[rng.integers(0, danger.size, size=n_new)]
    return data.append(_synthesize(x_min, nn, seeds, rng), 1)


def svm_support_minority(data: Dataset) -> np.ndarray:
    """Indices (into the minority rows) of minority support vectors."""
    svm = LinearSVM().fit(data.features, data.labels)
    mask = svm.support_mask(data.features, data.labels)
    return np.flatnonzero(mask[data.labels == 1])


def svm_smote(data: Dataset, params: SmoteParams) -> Dataset:
    """SMOTE seeded at the minority support vectors of a linear SVM.

    A seed whose neighbourhood is mostly majority interpolates towards a
    minority neighbour; otherwise it extrapolates away from it. Noise seeds
    (all neighbours majority) are dropped.
    """
    data.require_both_classes()
    n_new = params.target(data) - data.n_minority
    if n_new == 0:
        return data
    x_min = data.minority
    nn = _minority_neighbors(x_min, params.k, params.r)
    n_maj = _majority_counts(data, params.k, params.r)
    sv = svm_support_minority(data)
    sv = sv[n_maj[sv] < params.k]
    if sv.size == 0:
        warnings.warn("SVMSMOTE found no usable minority support vectors; falling back to SMOTE", ResamplingWarning)
        return smote(data, params)
    rng = np.random.default_rng(params.seed)
    seeds = sv[rng.integers(0, sv.size, size=n_new)]
    picks = nn[seeds, rng.integers(0, params.k, size=n_new)]
    u = rng.random(n_new)
    # interpolate inside the danger zone, extrapolate (negative step) elsewhere
    step = np.where(2 * n_maj[seeds] > params.k, u, -u)
    return data.append(interpolate(x_min[seeds], x_min[picks], step), 1)


def kmeans(x: np.ndarray, n_clusters: int, seed: int, iterations: int = 50) -> np.ndarray:
    """Lloyd's algorithm from distinct random rows; returns cluster labels."""
    n = x.shape[0]
    n_clusters = min(n_clusters, n)
    rng = np.random.default_rng(seed)
    centers = x[rng.choice(n, size=n_clusters, replace=False)].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        assign = np.argmin(pairwise_distances(x, centers, 2.0), axis=1)
        for c in range(n_clusters):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
    return np.argmin(pairwise_distances(x, centers, 2.0), axis=1)


def _largest_remainder(weights: np.ndarray, budget: int) -> np.ndarray:
    share = weights / weights.sum() * budget
    counts = np.floor(share + 1e-9).astype(np.int64)
    order = np.lexsort((np.arange(weights.size), -(share - counts)))
    counts[order[: budget - int(counts.sum())]] += 1
    return counts


def kmeans_smote(data: Dataset, params: SmoteParams, n_clusters: int = 8) -> Dataset:
    """Cluster all rows, then run SMOTE inside minority-dominated clusters.

    Clusters qualify when more than half their members are minority (and at
    least two are). The budget is split in proportion to each cluster's mean
    pairwise minority distance, so sparser clusters get more rows.
    """
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    data.require_both_classes()
    n_new = params.target(data) - data.n_minority
    if n_new == 0:
        return data
    assign = kmeans(data.features, n_clusters, params.seed)
    min_mask = data.labels == 1
    chosen, sparsity = [], []
    for c in np.unique(assign):
        members = assign == c
        n_min = int(np.sum(members & min_mask))
        if n_min >= 2 and n_min / members.sum() > 0.5:
            pts = data.features[members & min_mask]
            d = pairwise_distances(pts, pts, params.r)
            chosen.append(c)
            sparsity.append(d.sum() / (n_min * (n_min - 1)))
    if not chosen:
        raise DegenerateResampling("KMeansSMOTE: no cluster is minority-dominated; use SMOTE")
    sparsity = np.array(sparsity)
    if sparsity.sum() == 0:
        sparsity = np.ones_like(sparsity)
    budget = _largest_remainder(sparsity, n_new)
    rng = np.random.default_rng(params.seed)
    new_rows = []
    for c, b in zip(chosen, budget):
        if b == 0:
            continue
        pts = data.features[(assign == c) & min_mask]
        nn = kneighbors(pts, NeighborQuery(min(params.k, pts.shape[0] - 1), params.r))
        new_rows.append(_synthesize(pts, nn, rng.integers(0, pts.shape[0], size=b), rng))
    return data.append(np.vstack(new_rows), 1)


class ObjectiveError(RuntimeError):
    """The objective raised while differential evolution evaluated a candidate."""


def differential_evolution(
    objective: Callable[[np.ndarray], float],
    bounds: Sequence[tuple[float, float]],
    config: DeConfig = DeConfig(),
    initial: Sequence[Sequence[float]] | None = None,
) -> tuple[np.ndarray, float]:
    """Minimise ``objective`` over a box with DE/rand/1/bin.

    Trial vectors for a whole generation are drawn before any of them is
    evaluated, so evaluation order cannot change the result. ``initial``
    optionally fixes the first population members (clipped to the box).
    Exactly ``population_size * (generations + 1)`` evaluations are made.
    """
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    if lo.size == 0:
        raise ValueError("bounds must be nonempty")
    if np.any(lo > hi):
        raise ValueError("each lower bound must not exceed its upper bound")
    n_pop, dim = config.population_size, lo.size
    rng = np.random.default_rng(config.seed)
    pop = lo + rng.random((n_pop, dim)) * (hi - lo)
    if initial is not None:
        for i, point in enumerate(list(initial)[:n_pop]):
            pop[i] = np.clip(np.asarray(point, dtype=float), lo, hi)

    best_x, best_f = None, math.inf

    def evaluate_one(x: np.ndarray, gen: int, i: int) -> float:
        nonlocal best_x, best_f
        try:
            f = float(objective(x.copy()))
        except Exception as exc:
            raise ObjectiveError(f"objective failed at generation {gen}, candidate {i}, x={x.tolist()}") from exc
        if f < best_f:
            best_x, best_f = x.copy(), f
        return f

    fit_vals = np.array([evaluate_one(pop[i], 0, i) for i in range(n_pop)])
    for gen in range(1, config.generations + 1):
        trials = np.empty_like(pop)
        for i in range(n_pop):
            others = [j for j in range(n_pop) if j != i]
            r1, r2, r3 = rng.choice(others, size=3, replace=False)
            mutant = np.clip(pop[r1] + config.mutation_factor * (pop[r2] - pop[r3]), lo, hi)
            cross = rng.random(dim) < config.crossover_rate
            cross[rng.integers(dim)] = True
            trials[i] = np.where(cross, mutant, pop[i])
        for i in range(n_pop):
            f = evaluate_one(trials[i], gen, i)
            if f <= fit_vals[i]:
                pop[i], fit_vals[i] = trials[i], f
    return best_x, best_f


def _decode(x: np.ndarray, train: Dataset, seed: int) -> SmoteParams:
    k = int(np.clip(round(x[0]), 1, max(1, train.n_minority - 1)))
    r = float(max(1, round(x[1])))
    m = max(int(round(x[2])), train.n_minority)
    return SmoteParams(k=k, r=r, m=m, seed=seed)


def validation_g(learner: LearnerKind | str, train: Dataset, validation: Dataset, seed: int) -> float:
    model = fit(learner, train, seed)
    return evaluate(validation.labels, predict(model, validation.features)).g_score


def smotuned(
    train: Dataset,
    validation: Dataset,
    bounds: SmotunedBounds = SmotunedBounds(),
    learner: LearnerKind | str = "knn",
    config: DeConfig = DeConfig(),
) -> tuple[Dataset, SmoteParams]:
    """Tune SMOTE's (k, r, m) by DE against ``1 - g/100`` on ``validation``.

    The genome is continuous and rounded at evaluation. Every candidate
    shares ``config.seed`` for SMOTE and the learner, so candidates differ
    only in their parameters. The first population member is the
    conventional SMOTE setting (k=5, r=2, full balance) clipped to the box;
    a non-degenerate m range is widened upward to reach full balance.
    """
    train.require_both_classes()
    validation.require_both_classes()
    cache: dict[tuple, float] = {}

    def loss(x: np.ndarray) -> float:
        p = _decode(x, train, config.seed)
        key = (p.k, p.r, p.m)
        if key not in cache:
            cache[key] = 1.0 - validation_g(learner, smote(train, p), validation, config.seed) / 100.0
        return cache[key]

    balanced = max(train.n_majority, train.n_minority)
    box = bounds.as_box()
    if box[2][0] < box[2][1]:
        # keep full balance reachable so the conventional setting is a search-space member
        box[2] = (box[2][0], max(box[2][1], float(balanced)))
    best_x, _ = differential_evolution(loss, box, config, initial=[(5, 2, balanced)])
    best = _decode(best_x, train, config.seed)
    return smote(train, best), best


OVERSAMPLERS = {
    "random_oversampler": lambda data, params: random_oversample(data, params.seed),
    "smote": smote,
    "adasyn": adasyn,
    "borderline_smote": borderline_smote,
    "svm_smote": svm_smote,
    "kmeans_smote": kmeans_smote,
}


def with_seed(params: SmoteParams, seed: int) -> SmoteParams:
    return replace(params, seed=seed)
