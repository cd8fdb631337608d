"""Confusion-matrix scores on the 0-100 scale and divergence diagnostics.

Ratios with a zero denominator are defined as 0. Values are never rounded
here; rounding happens only when a report is rendered.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricReport:
    pd: float
    pf: float
    prec: float
    acc: float
    f1: float
    g_score: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: float(d[k]) for k in ("pd", "pf", "prec", "acc", "f1", "g_score")})


METRIC_NAMES = ("pd", "pf", "prec", "acc", "f1", "g_score")


def confusion(truth, predicted) -> ConfusionMatrix:
    truth = np.asarray(truth).reshape(-1)
    predicted = np.asarray(predicted).reshape(-1)
    if truth.shape != predicted.shape:
        raise ValueError(f"length mismatch: {truth.size} truths vs {predicted.size} predictions")
    for name, v in (("truth", truth), ("predicted", predicted)):
        if v.size and not np.all((v == 0) | (v == 1)):
            raise ValueError(f"{name} labels must be binary")
    t = truth == 1
    p = predicted == 1
    return ConfusionMatrix(
        tp=int(np.sum(t & p)),
        tn=int(np.sum(~t & ~p)),
        fp=int(np.sum(~t & p)),
        fn=int(np.sum(t & ~p)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def g_measure(pd: float, pf: float) -> float:
    """Harmonic mean of recall and specificity, both on the 0-100 scale."""
    spec = 100.0 - pf
    return _ratio(2.0 * pd * spec, pd + spec) if pd > 0 else 0.0


def score(cm: ConfusionMatrix) -> MetricReport:
    if cm.total == 0:
        raise ValueError("cannot score an empty confusion matrix")
    pd = 100.0 * _ratio(cm.tp, cm.tp + cm.fn)
    pf = 100.0 * _ratio(cm.fp, cm.fp + cm.tn)
    prec = 100.0 * _ratio(cm.tp, cm.tp + cm.fp)
    acc = 100.0 * (cm.tp + cm.tn) / cm.total
    f1 = _ratio(2.0 * pd * prec, pd + prec)
    return MetricReport(pd=pd, pf=pf, prec=prec, acc=acc, f1=f1, g_score=g_measure(pd, pf))


def evaluate(truth, predicted) -> MetricReport:
    return score(confusion(truth, predicted))


def _check_distribution(v: np.ndarray, name: str) -> None:
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a nonempty vector")
    if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not a probability vector (sum={v.sum()!r})")


def kl_divergence(p, q) -> float:
    """Discrete KL(p || q) in nats."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValueError("p and q must have the same length")
    support = p > 0
    if np.any(q[support] == 0):
        raise ValueError("support violation: p > 0 where q = 0 (divergence is infinite)")
    return float(max(0.0, np.sum(p[support] * np.log(p[support] / q[support]))))


def js_divergence(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def marginal_histogram(
    rows,
    column: int,
    bins: int,
    value_range: tuple[float, float] | None = None,
) -> np.ndarray:
    """Add-one smoothed histogram of one feature column.

    Bins are equal width over ``value_range``; pass the combined min/max of
    the real and synthetic columns so both histograms share bin edges.
    Defaults to the column's own range. A degenerate range puts every value
    in the first bin.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    col = np.atleast_2d(np.asarray(rows, dtype=float))[:, column]
    if col.size == 0:
        raise ValueError("rows must be nonempty")
    lo, hi = value_range if value_range is not None else (col.min(), col.max())
    if hi > lo:
        pos = np.floor((col - lo) / (hi - lo) * bins).astype(np.int64)
        pos = np.clip(pos, 0, bins - 1)
    else:
        pos = np.zeros(col.size, dtype=np.int64)
    counts = np.bincount(pos, minlength=bins).astype(float)
    return (counts + 1.0) / (col.size + bins)


def marginal_js(real, synthetic, bins: int = 20) -> np.ndarray:
    """Per-feature JS divergence between real and synthetic marginals."""
    real = np.atleast_2d(np.asarray(real, dtype=float))
    synthetic = np.atleast_2d(np.asarray(synthetic, dtype=float))
    out = np.empty(real.shape[1])
    for j in range(real.shape[1]):
        lo = min(real[:, j].min(), synthetic[:, j].min())
        hi = max(real[:, j].max(), synthetic[:, j].max())
        out[j] = js_divergence(
            marginal_histogram(real, j, bins, (lo, hi)),
            marginal_histogram(synthetic, j, bins, (lo, hi)),
        )
    return out
