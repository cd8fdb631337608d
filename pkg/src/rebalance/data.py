"""Datasets, CSV ingestion, stratified splitting and min-max scaling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_LABEL_ALIASES = {
    "1": 1, "0": 0,
    "1.0": 1, "0.0": 0,
    "yes": 1, "no": 0,
    "true": 1, "false": 0,
}


class DataError(ValueError):
    """Malformed or unusable input data."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Dense numeric features plus binary labels (1 = minority/security).

    Arrays are copied on construction and made read-only.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        x = np.array(self.features, dtype=float, copy=True)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(0, 0)
        if x.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {x.shape}")
        y = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain NaN or Inf")
        if y.size and not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be 0 or 1")
        names = tuple(self.feature_names) or tuple(f"f{j}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError(f"{len(names)} feature names for {x.shape[1]} columns")
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "feature_names", names)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_minority(self) -> int:
        return int(self.labels.sum())

    @property
    def n_majority(self) -> int:
        return self.n_rows - self.n_minority

    @property
    def minority(self) -> np.ndarray:
        return self.features[self.labels == 1]

    @property
    def majority(self) -> np.ndarray:
        return self.features[self.labels == 0]

    def require_both_classes(self) -> None:
        if self.n_minority == 0 or self.n_majority == 0:
            raise DataError(
                f"both classes required (majority={self.n_majority}, minority={self.n_minority})"
            )

    def subset(self, index: Sequence[int] | np.ndarray) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[index], self.labels[index], self.feature_names)

    def append(self, rows: np.ndarray, label: int) -> "Dataset":
        """Return a new dataset with ``rows`` appended, all tagged ``label``."""
        rows = np.asarray(rows, dtype=float).reshape(-1, self.n_features)
        if rows.shape[0] == 0:
            return self
        return Dataset(
            np.vstack([self.features, rows]),
            np.concatenate([self.labels, np.full(rows.shape[0], label, dtype=np.int64)]),
            self.feature_names,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.feature_names == other.feature_names
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.64
    validation_fraction: float = 0.16
    test_fraction: float = 0.20
    seed: int = 0

    def __post_init__(self) -> None:
        fracs = (self.train_fraction, self.validation_fraction, self.test_fraction)
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1): {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")


@dataclass(frozen=True, eq=False)
class MinMaxScaler:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self) -> None:
        lo = _frozen(np.array(self.minimum, dtype=float, copy=True).reshape(-1))
        hi = _frozen(np.array(self.maximum, dtype=float, copy=True).reshape(-1))
        if lo.shape != hi.shape:
            raise ValueError("minimum and maximum must have the same length")
        if np.any(lo > hi):
            raise ValueError("minimum exceeds maximum for some feature")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    @property
    def span(self) -> np.ndarray:
        return self.maximum - self.minimum

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        span = self.span
        safe = np.where(span > 0, span, 1.0)
        out = (x - self.minimum) / safe
        # constant columns map to 0
        out[:, span == 0] = 0.0
        return out

    def inverse_transform(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        return x * self.span + self.minimum

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.minimum.shape[0]:
            raise DataError(
                f"scaler fitted on {self.minimum.shape[0]} columns, got array of shape {x.shape}"
            )
        return x


def load_csv(path: str | Path, label_column: str) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    Labels may be written as 0/1, yes/no or true/false (any case). Every
    error names the offending row (1-based, header is row 1) and column.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty dataset (no header row)") from None
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not found in header {header}")
        label_idx = header.index(label_column)
        names = [h for j, h in enumerate(header) if j != label_idx]
        rows: list[list[float]] = []
        labels: list[int] = []
        for line_no, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise DataError(
                    f"{path}: row {line_no} has {len(record)} cells, expected {len(header)}"
                )
            raw_label = record[label_idx].strip().lower()
            if raw_label not in _LABEL_ALIASES:
                raise DataError(
                    f"{path}: row {line_no}, column {label_column!r}: "
                    f"label {record[label_idx]!r} is not binary"
                )
            labels.append(_LABEL_ALIASES[raw_label])
            values = []
            for j, cell in enumerate(record):
                if j == label_idx:
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: row {line_no}, column {header[j]!r}: non-numeric value {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(
                        f"{path}: row {line_no}, column {header[j]!r}: non-finite value {cell!r}"
                    )
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: empty dataset")
    return Dataset(np.array(rows, dtype=float), np.array(labels), tuple(names))


def write_csv(data: Dataset, path: str | Path, label_column: str = "label") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*data.feature_names, label_column])
        for row, label in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def _partition_counts(n: int, fractions: Sequence[float]) -> list[int]:
    # largest-remainder rounding; ties go to the earlier partition
    exact = [f * n for f in fractions]
    counts = [math.floor(e + 1e-9) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    order = sorted(range(len(fractions)), key=lambda j: (-remainders[j], j))
    for j in order[: n - sum(counts)]:
        counts[j] += 1
    # every partition must see every class
    for j in range(len(counts)):
        if counts[j] == 0:
            donor = max(range(len(counts)), key=lambda i: (counts[i], -i))
            counts[donor] -= 1
            counts[j] += 1
    return counts


def stratified_split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Split into (train, validation, test) preserving the class ratio.

    Per class, partition sizes are ``fraction * class_count`` rounded by the
    largest-remainder rule, so they always sum to the class count and never
    deviate from the exact share by a full sample. Rows keep their original
    relative order inside each partition.
    """
    fractions = (spec.train_fraction, spec.validation_fraction, spec.test_fraction)
    rng = np.random.default_rng(spec.seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for cls in (0, 1):
        idx = np.flatnonzero(data.labels == cls)
        if idx.size < 3:
            raise DataError(
                f"class {cls} has {idx.size} samples; at least 3 are needed to stratify"
            )
        idx = rng.permutation(idx)
        counts = _partition_counts(idx.size, fractions)
        start = 0
        for j, c in enumerate(counts):
            parts[j].append(idx[start : start + c])
            start += c
    return tuple(data.subset(np.sort(np.concatenate(p))) for p in parts)  # type: ignore[return-value]


def fit_minmax(data: Dataset) -> MinMaxScaler:
    if data.n_rows == 0:
        raise DataError("cannot fit a scaler on an empty dataset")
    return MinMaxScaler(data.features.min(axis=0), data.features.max(axis=0))


def apply_scaler(scaler: MinMaxScaler, data: Dataset, direction: str = "forward") -> Dataset:
    if direction == "forward":
        x = scaler.transform(data.features)
    elif direction == "inverse":
        x = scaler.inverse_transform(data.features)
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return Dataset(x, data.labels, data.feature_names)


def make_synthetic_imbalanced(
    n_majority: int,
    n_minority: int,
    n_features: int,
    separation: float,
    seed: int,
) -> Dataset:
    """Two unit-variance Gaussian blobs whose means differ by ``separation``
    along the first axis. Majority rows come first."""
    if min(n_majority, n_minority, n_features) < 1:
        raise ValueError("counts and feature width must be at least 1")
    rng = np.random.default_rng(seed)
    maj = rng.standard_normal((n_majority, n_features))
    mino = rng.standard_normal((n_minority, n_features))
    mino[:, 0] += separation
    return Dataset(
        np.vstack([maj, mino]),
        np.concatenate([np.zeros(n_majority, dtype=np.int64), np.ones(n_minority, dtype=np.int64)]),
    )
