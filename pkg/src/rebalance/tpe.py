"""Tree-of-Parzen-Estimators search over flat spaces.

History is split at the gamma-quantile of loss into a good and a bad set.
Each dimension gets an independent density per set: truncated Gaussian
kernels for numeric dimensions, add-one smoothed counts for choices.
Candidates are drawn from the good densities and the one maximising
l(x)/g(x) is proposed.
"""

from __future__ import annotations

import math
import time
import traceback
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .seeding import hash64

SENTINEL_LOSS = 1.0


@dataclass(frozen=True)
class Choice:
    name: str
    options: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "options", tuple(self.options))
        if not self.options:
            raise ValueError(f"{self.name}: options must be nonempty")

    def sample(self, rng: np.random.Generator) -> Any:
        return self.options[int(rng.integers(len(self.options)))]

    def contains(self, value: Any) -> bool:
        return value in self.options


@dataclass(frozen=True)
class Uniform:
    name: str
    low: float
    high: float

    def __post_init__(self) -> None:
        if not self.low < self.high:
            raise ValueError(f"{self.name}: need low < high, got [{self.low}, {self.high}]")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))

    def quantize(self, x: float) -> float:
        return float(min(max(x, self.low), self.high))

    def contains(self, value: Any) -> bool:
        return isinstance(value, (int, float)) and self.low <= value <= self.high


@dataclass(frozen=True)
class QUniform(Uniform):
    q: float = 1.0

    def __post_init__(self) -> None:
        super().__post_init__()
        if not self.q > 0:
            raise ValueError(f"{self.name}: q must be positive")

    def quantize(self, x: float) -> float:
        v = round(x / self.q) * self.q
        if v < self.low:
            v += self.q * math.ceil((self.low - v) / self.q - 1e-12)
        if v > self.high:
            v -= self.q * math.ceil((v - self.high) / self.q - 1e-12)
        v = round(v, 12)
        return int(v) if float(self.q).is_integer() and float(v).is_integer() else v

    def sample(self, rng: np.random.Generator) -> float:
        return self.quantize(rng.uniform(self.low, self.high))

    def contains(self, value: Any) -> bool:
        if not super().contains(value):
            return False
        k = value / self.q
        return abs(k - round(k)) < 1e-9


Dimension = Choice | Uniform | QUniform


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ValueError("dimension names must be unique")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def validate(self, assignment: dict) -> None:
        if set(assignment) != set(self.names):
            raise ValueError(f"assignment keys {sorted(assignment)} != {sorted(self.names)}")
        for d in self.dimensions:
            if not d.contains(assignment[d.name]):
                raise ValueError(f"{d.name}={assignment[d.name]!r} outside its domain")


@dataclass
class Trial:
    assignment: dict
    loss: float
    status: str = "ok"
    wall_time: float = 0.0
    iteration: int = 0
    error: str | None = None
    payload: Any = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "assignment": self.assignment,
            "loss": self.loss,
            "status": self.status,
            "wall_time": self.wall_time,
            "error": self.error,
        }


@dataclass(frozen=True)
class TpeConfig:
    n_startup: int = 10
    gamma: float = 0.25
    n_candidates: int = 24
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_startup < 1 or self.n_candidates < 1:
            raise ValueError("n_startup and n_candidates must be >= 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_prior(space: SearchSpace, seed) -> dict:
    rng = _rng(seed)
    return {d.name: d.sample(rng) for d in space.dimensions}


class _Parzen:
    """Truncated Gaussian mixture with equal weights on [low, high]."""

    def __init__(self, values: Sequence[float], low: float, high: float):
        self.low, self.high = low, high
        width = high - low
        mu = np.asarray(values, dtype=float)
        if mu.size == 0:
            self.mu = self.sigma = mu
            return
        if mu.size == 1:
            sigma = np.array([width])
        else:
            gaps = np.abs(mu[:, None] - mu[None, :])
            np.fill_diagonal(gaps, np.inf)
            sigma = gaps.min(axis=1)
        self.mu = mu
        self.sigma = np.clip(sigma, 0.01 * width, width)
        self._lo = ndtr((low - self.mu) / self.sigma)
        self._hi = ndtr((high - self.mu) / self.sigma)
        self._mass = np.maximum(self._hi - self._lo, 1e-300)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.mu.size == 0:
            return np.full(x.shape, -math.log(self.high - self.low))
        z = (x[:, None] - self.mu) / self.sigma
        comp = -0.5 * z * z - np.log(self.sigma * math.sqrt(2 * math.pi) * self._mass)
        top = comp.max(axis=1, keepdims=True)
        return (top[:, 0] + np.log(np.exp(comp - top).sum(axis=1))) - math.log(self.mu.size)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.mu.size == 0:
            return rng.uniform(self.low, self.high, size=n)
        k = rng.integers(self.mu.size, size=n)
        u = self._lo[k] + rng.uniform(size=n) * (self._hi[k] - self._lo[k])
        x = self.mu[k] + self.sigma[k] * ndtri(np.clip(u, 1e-300, 1 - 1e-16))
        return np.clip(x, self.low, self.high)


def _categorical(values: Sequence, options: tuple) -> np.ndarray:
    counts = np.ones(len(options))
    for v in values:
        counts[options.index(v)] += 1.0
    return counts / counts.sum()


def split_history(history: Sequence[Trial], gamma: float) -> tuple[list[Trial], list[Trial]]:
    """Good/bad sets; ties in loss are ordered by iteration."""
    ranked = sorted(history, key=lambda t: (t.loss, t.iteration))
    n_good = max(1, math.ceil(gamma * len(ranked)))
    return ranked[:n_good], ranked[n_good:]


def tpe_suggest(space: SearchSpace, history: Sequence[Trial], config: TpeConfig, seed=None) -> dict:
    rng = _rng(config.seed if seed is None else seed)
    if len(history) < config.n_startup:
        return sample_prior(space, rng)
    good, bad = split_history(history, config.gamma)
    n = config.n_candidates
    score = np.zeros(n)
    columns: dict[str, list] = {}
    for d in space.dimensions:
        gv = [t.assignment[d.name] for t in good]
        bv = [t.assignment[d.name] for t in bad]
        if isinstance(d, Choice):
            pl, pg = _categorical(gv, d.options), _categorical(bv, d.options)
            idx = rng.choice(len(d.options), size=n, p=pl)
            score += np.log(pl[idx]) - np.log(pg[idx])
            columns[d.name] = [d.options[i] for i in idx]
        else:
            lden, gden = _Parzen(gv, d.low, d.high), _Parzen(bv, d.low, d.high)
            x = lden.sample(rng, n)
            score += lden.log_pdf(x) - gden.log_pdf(x)
            columns[d.name] = [d.quantize(v) for v in x]
    best = int(np.argmax(score))
    return {name: columns[name][best] for name in space.names}


def _evaluate(objective, assignment: dict, iteration: int, sentinel: float) -> Trial:
    start = time.perf_counter()
    try:
        result = objective(assignment)
        payload = None
        if isinstance(result, tuple):
            result, payload = result
        loss = float(result)
        if not math.isfinite(loss):
            raise ValueError(f"objective returned non-finite loss {loss!r}")
        return Trial(assignment, loss, "ok", time.perf_counter() - start, iteration, payload=payload)
    except Exception as exc:  # failures are trial outcomes, not aborts
        msg = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return Trial(assignment, sentinel, "failed", time.perf_counter() - start, iteration, msg)


def best_trial(history: Sequence[Trial]) -> Trial:
    return min(history, key=lambda t: (t.loss, t.iteration))


def optimize(
    space: SearchSpace,
    objective: Callable[[dict], float | tuple[float, Any]],
    n_iterations: int,
    config: TpeConfig = TpeConfig(),
    sentinel: float = SENTINEL_LOSS,
) -> tuple[Trial, list[Trial]]:
    """Run ``n_iterations`` sequential evaluations.

    The objective may return a loss or ``(loss, payload)``; payloads stay
    attached to their trial. Exceptions become failed trials carrying
    ``sentinel``.
    """
    if n_iterations < 1:
        raise ValueError("n_iterations must be >= 1")
    history: list[Trial] = []
    for i in range(n_iterations):
        assignment = tpe_suggest(space, history, config, seed=hash64(config.seed, "tpe", i))
        history.append(_evaluate(objective, assignment, i, sentinel))
    return best_trial(history), history


def random_search(
    space: SearchSpace,
    objective: Callable[[dict], float],
    n_iterations: int,
    seed: int = 0,
    sentinel: float = SENTINEL_LOSS,
) -> tuple[Trial, list[Trial]]:
    """Prior sampling with the same per-iteration seed stream as ``optimize``."""
    history = [
        _evaluate(objective, sample_prior(space, hash64(seed, "tpe", i)), i, sentinel)
        for i in range(n_iterations)
    ]
    return best_trial(history), history
