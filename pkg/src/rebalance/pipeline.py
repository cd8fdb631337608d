"""Dazzle training, treatment dispatch, the repeat-and-score harness, reports.

Each experiment cell (repeat, treatment, learner) gets its own seed from
``hash64(master_seed, repeat, treatment, learner)``; the per-repeat split
seed depends on ``(master_seed, repeat)`` only, so every treatment in a
repeat sees the same partitions. Only ``smotuned`` and ``dazzle`` read the
validation partition, and the test partition is read only while scoring.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import json
import math
import os
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .cwgan_gp import GanHyperParams, ModelDefaults, oversample_with_gan
from .data import Dataset, DataError, SplitSpec, load_csv, stratified_split
from .learners import LEARNER_NAMES, LearnerKind, fit, predict
from .metrics import METRIC_NAMES, MetricReport, evaluate
from .seeding import hash64
from .smote_family import (
    OVERSAMPLERS,
    DeConfig,
    DegenerateResampling,
    SmoteParams,
    SmotunedBounds,
    smote,
    smotuned,
)
from .tpe import Choice, QUniform, SearchSpace, TpeConfig, Trial, optimize, sample_prior
from . import cwgan_gp, nnet

TREATMENTS = (
    "none", "random_oversampler", "smote", "adasyn", "borderline_smote", "svm_smote",
    "kmeans_smote", "smotuned", "cwgan_gp", "dazzle",
)
DEFAULT_TREATMENTS = tuple(t for t in TREATMENTS if t != "kmeans_smote")
DEFAULT_REPORT_METRICS = ("pd", "pf", "f1", "g_score")
LOWER_IS_BETTER = frozenset({"pf"})
SCHEMA_VERSION = 1
RECORDS_FILE = "records.jsonl"


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class DazzleError(RuntimeError):
    """Every Bayesian-optimisation trial failed."""


_PHASE: contextvars.ContextVar[str] = contextvars.ContextVar("rebalance_phase", default="idle")


def current_phase() -> str:
    return _PHASE.get()


@contextlib.contextmanager
def phase(name: str):
    token = _PHASE.set(name)
    try:
        yield
    finally:
        _PHASE.reset(token)


def _guard_test_partition(test: Dataset) -> Dataset:
    """Hook around the test partition; instrumented runs swap in a tripwire."""
    return test


def gan_search_space() -> SearchSpace:
    return SearchSpace((
        Choice("batch_size", cwgan_gp.BATCH_SIZES),
        Choice("lr_generator", cwgan_gp.LEARNING_RATES),
        Choice("lr_discriminator", cwgan_gp.LEARNING_RATES),
        Choice("optimizer_generator", nnet.OPTIMIZERS),
        Choice("optimizer_discriminator", nnet.OPTIMIZERS),
        Choice("activation_generator", nnet.ACTIVATIONS),
        Choice("activation_discriminator", nnet.ACTIVATIONS),
        QUniform("epochs", float(cwgan_gp.EPOCH_RANGE[0]), float(cwgan_gp.EPOCH_RANGE[1]), 1.0),
        Choice("layer_norm_generator", (False, True)),
        Choice("layer_norm_discriminator", (False, True)),
    ))


def hp_from_assignment(assignment: dict) -> GanHyperParams:
    return GanHyperParams(**{**assignment, "epochs": int(assignment["epochs"])})


def _validation_g(learner: LearnerKind, data: Dataset, validation: Dataset, seed: int) -> float:
    with phase("fit"):
        model = fit(learner, data, seed)
    with phase("validate"):
        return evaluate(validation.labels, predict(model, validation.features)).g_score


@dataclass
class DazzleResult:
    resampled: Dataset
    best_hp: GanHyperParams
    history: list[Trial]
    best: Trial

    @property
    def best_g(self) -> float:
        return 100.0 * (1.0 - self.best.loss)


TrialFn = Callable[[GanHyperParams, int], "tuple[float, Dataset]"]


def dazzle_train(
    train: Dataset,
    validation: Dataset,
    learner: LearnerKind | str = "knn",
    bo_iterations: int = 30,
    seed: int = 0,
    space: SearchSpace | None = None,
    tpe_config: TpeConfig | None = None,
    model_defaults: ModelDefaults | None = None,
    trial_fn: TrialFn | None = None,
) -> DazzleResult:
    """Bayesian-optimised cWGAN-GP oversampling.

    Each trial trains a GAN on ``train`` with the proposed hyperparameters,
    balances the classes, fits ``learner`` and scores it on ``validation``;
    the loss is ``1 - g/100``. ``trial_fn(hp, iteration) -> (g, dataset)``
    replaces that body (used to test the ranking rule). The minimal-loss
    trial wins, earliest first on ties; a successful trial outranks a failed
    one at equal loss.
    """
    if bo_iterations < 1:
        raise ValueError("bo_iterations must be >= 1")
    train.require_both_classes()
    validation.require_both_classes()
    learner = learner if isinstance(learner, LearnerKind) else LearnerKind(learner)
    counter = itertools.count()

    def default_trial(hp: GanHyperParams, i: int) -> tuple[float, Dataset]:
        with phase("resample"):
            data = oversample_with_gan(train, hp, hash64(seed, "gan", i), model_defaults)
        return _validation_g(learner, data, validation, seed), data

    body = trial_fn or default_trial

    def objective(assignment: dict):
        i = next(counter)
        g, data = body(hp_from_assignment(assignment), i)
        return 1.0 - g / 100.0, data

    config = tpe_config or TpeConfig(seed=hash64(seed, "tpe"))
    _, history = optimize(space or gan_search_space(), objective, bo_iterations, config)
    ok = [t for t in history if t.status == "ok"]
    if not ok:
        raise DazzleError(f"all {bo_iterations} trials failed; first error: {history[0].error}")
    best = min(ok, key=lambda t: (t.loss, t.iteration))
    return DazzleResult(best.payload, hp_from_assignment(best.assignment), history, best)


@dataclass(frozen=True)
class TreatmentOptions:
    bo_iterations: int = 30
    k: int = 5
    r: float = 2.0
    smotuned_bounds: SmotunedBounds = SmotunedBounds()
    de_population: int = 10
    de_generations: int = 10
    model_defaults: ModelDefaults | None = None


@dataclass
class TreatmentResult:
    data: Dataset
    wall_time: float
    hyperparameters: dict | None = None
    note: str | None = None


def _resample(treatment, train, validation, learner, seed, options) -> TreatmentResult:
    if treatment == "none":
        return TreatmentResult(train, 0.0)
    if treatment in OVERSAMPLERS:
        params = SmoteParams(k=options.k, r=options.r, seed=seed)
        try:
            return TreatmentResult(OVERSAMPLERS[treatment](train, params), 0.0)
        except DegenerateResampling as exc:
            return TreatmentResult(smote(train, params), 0.0, note=f"fell back to smote: {exc}")
    if treatment == "smotuned":
        config = DeConfig(options.de_population, generations=options.de_generations, seed=seed)
        data, best = smotuned(train, validation, options.smotuned_bounds, learner, config)
        return TreatmentResult(data, 0.0, {"k": best.k, "r": best.r, "m": best.m})
    if treatment == "cwgan_gp":
        hp = hp_from_assignment(sample_prior(gan_search_space(), seed))
        data = oversample_with_gan(train, hp, seed, options.model_defaults)
        return TreatmentResult(data, 0.0, hp.to_dict())
    if treatment == "dazzle":
        res = dazzle_train(train, validation, learner, options.bo_iterations, seed,
                           model_defaults=options.model_defaults)
        hp = {**res.best_hp.to_dict(), "validation_g_score": res.best_g}
        return TreatmentResult(res.resampled, 0.0, hp)
    raise ConfigError(f"unknown treatment {treatment!r}; expected one of {TREATMENTS}")


def run_treatment(
    treatment: str,
    train: Dataset,
    validation: Dataset,
    learner: LearnerKind | str = "knn",
    seed: int = 0,
    options: TreatmentOptions = TreatmentOptions(),
) -> TreatmentResult:
    """Resample ``train`` with one treatment, timing the oversampler on a monotone clock."""
    if treatment not in TREATMENTS:
        raise ConfigError(f"unknown treatment {treatment!r}; expected one of {TREATMENTS}")
    learner = learner if isinstance(learner, LearnerKind) else LearnerKind(learner)
    start = time.perf_counter()
    with phase("resample"):
        result = _resample(treatment, train, validation, learner, seed, options)
    result.wall_time = time.perf_counter() - start
    return result


@dataclass
class ExperimentConfig:
    data_path: str | None = None
    label_column: str = "label"
    treatments: tuple[str, ...] = DEFAULT_TREATMENTS
    learners: tuple[str, ...] = LEARNER_NAMES
    repeats: int = 10
    bo_iterations: int = 30
    split: SplitSpec = field(default_factory=SplitSpec)
    master_seed: int = 0
    out_dir: str | None = None
    dataset: Dataset | None = field(default=None, repr=False)
    dataset_name: str | None = None
    options: TreatmentOptions | None = None

    def __post_init__(self) -> None:
        self.treatments = tuple(self.treatments)
        try:
            self.learners = tuple(LearnerKind(name).kind for name in self.learners)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.bo_iterations < 1:
            raise ConfigError("bo_iterations must be >= 1")
        if not self.treatments or not self.learners:
            raise ConfigError("treatments and learners must be nonempty")
        unknown = [t for t in self.treatments if t not in TREATMENTS]
        if unknown:
            raise ConfigError(f"unknown treatments {unknown}; expected a subset of {TREATMENTS}")
        if len(set(self.treatments)) != len(self.treatments) or len(set(self.learners)) != len(self.learners):
            raise ConfigError("treatments and learners must not repeat")
        if self.dataset is None and self.data_path is None:
            raise ConfigError("either data_path or dataset is required")

    @property
    def name(self) -> str:
        if self.dataset_name:
            return self.dataset_name
        return Path(self.data_path).stem if self.data_path else "dataset"

    def treatment_options(self) -> TreatmentOptions:
        base = self.options or TreatmentOptions()
        return replace(base, bo_iterations=self.bo_iterations)


@dataclass
class RunRecord:
    dataset: str
    treatment: str
    learner: str
    repeat: int
    seed: int
    metrics: MetricReport | None
    wall_time: float
    hyperparameters: dict | None = None
    status: str = "ok"
    error: str | None = None
    note: str | None = None

    @property
    def key(self) -> tuple[int, str, str]:
        return (self.repeat, self.treatment, self.learner)

    def to_dict(self, wall_time: bool = True) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "treatment": self.treatment,
            "learner": self.learner,
            "repeat": self.repeat,
            "seed": self.seed,
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "hyperparameters": self.hyperparameters,
            "status": self.status,
            "error": self.error,
            "note": self.note,
        }
        if wall_time:
            d["wall_time"] = self.wall_time
        return d

    def to_json(self, wall_time: bool = True) -> str:
        return json.dumps(self.to_dict(wall_time), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported record schema_version {d.get('schema_version')!r}")
        m = d.get("metrics")
        return cls(
            d["dataset"], d["treatment"], d["learner"], int(d["repeat"]), int(d["seed"]),
            None if m is None else MetricReport.from_dict(m), float(d.get("wall_time", 0.0)),
            d.get("hyperparameters"), d.get("status", "ok"), d.get("error"), d.get("note"),
        )


def load_records(path: str | Path) -> list[RunRecord]:
    """Read a record store; a torn final line from an interrupted run is ignored."""
    path = Path(path)
    if path.is_dir():
        path = path / RECORDS_FILE
    if not path.exists():
        raise DataError(f"no record store at {path}")
    lines = path.read_text().splitlines()
    out = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(RunRecord.from_dict(json.loads(line)))
        except json.JSONDecodeError:
            if n == len(lines):
                break
            raise DataError(f"{path}:{n}: malformed record line")
    return out


def _append_record(path: Path, record: RunRecord) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(record.to_json() + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _write_records(path: Path, records: Sequence[RunRecord]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")
    os.replace(tmp, path)


def _canonical(records: Iterable[RunRecord], treatments, learners) -> list[RunRecord]:
    t_rank = {t: i for i, t in enumerate(treatments)}
    l_rank = {l: i for i, l in enumerate(learners)}
    return sorted(
        records,
        key=lambda r: (r.repeat, t_rank.get(r.treatment, len(t_rank)), r.treatment,
                       l_rank.get(r.learner, len(l_rank)), r.learner),
    )


def _run_cell(config, repeat, treatment, learner, train, validation, test) -> RunRecord:
    seed = hash64(config.master_seed, repeat, treatment, learner)
    try:
        res = run_treatment(treatment, train, validation, learner, seed, config.treatment_options())
        with phase("fit"):
            model = fit(learner, res.data, seed)
        with phase("score"):
            report = evaluate(test.labels, predict(model, test.features))
        return RunRecord(config.name, treatment, learner, repeat, seed, report, res.wall_time,
                         res.hyperparameters, note=res.note)
    except Exception as exc:  # a failed cell is recorded, never fatal
        return RunRecord(config.name, treatment, learner, repeat, seed, None, 0.0,
                         status="failed", error=f"{type(exc).__name__}: {exc}")


def run_experiment(config: ExperimentConfig, progress: Callable[[RunRecord], None] | None = None) -> list[RunRecord]:
    """Run every (repeat, treatment, learner) cell and score it on the test partition.

    With ``out_dir`` set, records are appended to ``records.jsonl`` as cells
    finish and cells already present there are skipped, so an interrupted run
    resumes; the store is rewritten in canonical order at the end.
    """
    data = config.dataset if config.dataset is not None else load_csv(config.data_path, config.label_column)
    data.require_both_classes()
    store = None
    done: dict[tuple, RunRecord] = {}
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        store = out / RECORDS_FILE
        if store.exists():
            done = {r.key: r for r in load_records(store)}
        # drop a torn tail so appends start on a clean line
        _write_records(store, _canonical(done.values(), config.treatments, config.learners))
    records = dict(done)
    for repeat in range(config.repeats):
        cells = [(t, l) for t in config.treatments for l in config.learners if (repeat, t, l) not in done]
        if not cells:
            continue
        split = replace(config.split, seed=hash64(config.master_seed, repeat))
        train, validation, test = stratified_split(data, split)
        test = _guard_test_partition(test)
        for treatment, learner in cells:
            rec = _run_cell(config, repeat, treatment, learner, train, validation, test)
            records[rec.key] = rec
            if store is not None:
                _append_record(store, rec)
            if progress is not None:
                progress(rec)
    wanted = {(r, t, l) for r in range(config.repeats) for t in config.treatments for l in config.learners}
    ordered = _canonical((rec for k, rec in records.items() if k in wanted), config.treatments, config.learners)
    if store is not None:
        extra = [rec for k, rec in records.items() if k not in wanted]
        _write_records(store, _canonical([*ordered, *extra], config.treatments, config.learners))
    return ordered


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def runtime_bucket(minutes: float) -> str:
    return f"< {int(math.floor(minutes)) + 1}"


@dataclass(frozen=True)
class CellSummary:
    dataset: str
    metric: str
    treatment: str
    learner: str
    median: float
    rendered: int
    best: bool


def summarize(records: Sequence[RunRecord], metrics: Sequence[str] = DEFAULT_REPORT_METRICS) -> list[CellSummary]:
    """Median over repeats per (dataset, metric, treatment, learner), with best flags.

    A cell is best when its rendered integer ties the best rendered value in
    its (dataset, metric, learner) column; every tie is marked.
    """
    groups: dict[tuple, list[float]] = {}
    for r in records:
        if r.status != "ok" or r.metrics is None:
            continue
        for m in metrics:
            groups.setdefault((r.dataset, m, r.treatment, r.learner), []).append(getattr(r.metrics, m))
    medians = {k: statistics.median(v) for k, v in groups.items()}
    columns: dict[tuple, list[int]] = {}
    for (ds, m, t, l), v in medians.items():
        columns.setdefault((ds, m, l), []).append(round_half_up(v))
    best = {k: (min(v) if k[1] in LOWER_IS_BETTER else max(v)) for k, v in columns.items()}
    out = []
    for (ds, m, t, l), v in medians.items():
        rv = round_half_up(v)
        out.append(CellSummary(ds, m, t, l, v, rv, rv == best[(ds, m, l)]))
    t_rank = {t: i for i, t in enumerate(TREATMENTS)}
    l_rank = {l: i for i, l in enumerate(LEARNER_NAMES)}
    m_rank = {m: i for i, m in enumerate(METRIC_NAMES)}
    out.sort(key=lambda c: (c.dataset, m_rank.get(c.metric, 99), t_rank.get(c.treatment, 99), c.treatment,
                            l_rank.get(c.learner, 99), c.learner))
    return out


def runtime_summary(records: Sequence[RunRecord]) -> dict[str, float]:
    """Median oversampler wall time per treatment, in minutes."""
    times: dict[str, list[float]] = {}
    for r in records:
        if r.status == "ok":
            times.setdefault(r.treatment, []).append(r.wall_time / 60.0)
    t_rank = {t: i for i, t in enumerate(TREATMENTS)}
    return {t: statistics.median(times[t]) for t in sorted(times, key=lambda t: (t_rank.get(t, 99), t))}


NOTES = (
    "Scores are on the 0-100 scale; ratios with a zero denominator are reported as 0.",
    "Values are medians over repeats, rounded half-up; the data are re-split for every repeat.",
    "Best values per column are marked; every tie for best is marked.",
)


def _render_runtime(minutes: float, runtime: str) -> str:
    return runtime_bucket(minutes) if runtime == "bucket" else f"{minutes:.4f}"


def report(
    records: Sequence[RunRecord],
    fmt: str = "markdown",
    runtime: str = "exact",
    metrics: Sequence[str] = DEFAULT_REPORT_METRICS,
) -> str:
    """Render medians per (metric, treatment, learner) as markdown, csv or json.

    ``runtime`` is ``exact`` (minutes), ``bucket`` ("< N" minutes) or
    ``none`` (omit the runtime summary, making the output independent of
    machine speed).
    """
    if not records:
        raise ValueError("cannot report on an empty record set")
    fmt = {"md": "markdown"}.get(fmt, fmt)
    if fmt not in ("markdown", "csv", "json"):
        raise ConfigError(f"unknown report format {fmt!r}")
    if runtime not in ("exact", "bucket", "none"):
        raise ConfigError(f"unknown runtime rendering {runtime!r}")
    unknown = [m for m in metrics if m not in METRIC_NAMES]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}")
    cells = summarize(records, metrics)
    times = runtime_summary(records) if runtime != "none" else {}
    failures = sum(r.status != "ok" for r in records)
    if fmt == "json":
        blob = {
            "schema_version": SCHEMA_VERSION,
            "cells": [c.__dict__ for c in cells],
            "runtime_minutes": {t: (_render_runtime(v, runtime) if runtime == "bucket" else v)
                                for t, v in times.items()},
            "failures": failures,
            "notes": list(NOTES),
        }
        return json.dumps(blob, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        lines = ["dataset,metric,treatment,learner,median,rendered,best"]
        lines += [f"{c.dataset},{c.metric},{c.treatment},{c.learner},{c.median!r},{c.rendered},{int(c.best)}"
                  for c in cells]
        if times:
            lines.append("")
            lines.append("treatment,wall_time_minutes")
            lines += [f"{t},{_render_runtime(v, runtime)}" for t, v in times.items()]
        return "\n".join(lines) + "\n"
    out: list[str] = []
    by_ds: dict[str, list[CellSummary]] = {}
    for c in cells:
        by_ds.setdefault(c.dataset, []).append(c)
    for ds, ds_cells in by_ds.items():
        learners = list(dict.fromkeys(c.learner for c in ds_cells))
        for m in dict.fromkeys(c.metric for c in ds_cells):
            arrow = "lower is better" if m in LOWER_IS_BETTER else "higher is better"
            out.append(f"### {ds}: {m} ({arrow})")
            out.append("")
            out.append("| treatment | " + " | ".join(learners) + " |")
            out.append("|---|" + "---|" * len(learners))
            rows: dict[str, dict[str, CellSummary]] = {}
            for c in ds_cells:
                if c.metric == m:
                    rows.setdefault(c.treatment, {})[c.learner] = c
            for t, row in rows.items():
                vals = []
                for l in learners:
                    c = row.get(l)
                    vals.append("" if c is None else (f"**{c.rendered}**" if c.best else str(c.rendered)))
                out.append(f"| {t} | " + " | ".join(vals) + " |")
            out.append("")
    if times:
        out.append("### Oversampler runtime (median minutes)")
        out.append("")
        out.append("| treatment | minutes |")
        out.append("|---|---|")
        out += [f"| {t} | {_render_runtime(v, runtime)} |" for t, v in times.items()]
        out.append("")
    if failures:
        out.append(f"{failures} cell(s) failed and are excluded.")
        out.append("")
    out += [f"- {n}" for n in NOTES]
    return "\n".join(out) + "\n"
