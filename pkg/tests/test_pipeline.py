import json

import numpy as np
import pytest

from rebalance import pipeline
from rebalance.cwgan_gp import GanHyperParams, ModelDefaults
from rebalance.data import Dataset, SplitSpec, make_synthetic_imbalanced, stratified_split
from rebalance.metrics import MetricReport
from rebalance.pipeline import (
    ConfigError,
    DazzleError,
    ExperimentConfig,
    RunRecord,
    TreatmentOptions,
    current_phase,
    dazzle_train,
    gan_search_space,
    load_records,
    report,
    round_half_up,
    run_experiment,
    run_treatment,
    runtime_bucket,
    summarize,
)

SMALL_GAN = ModelDefaults(hidden_widths=(8, 8, 8))


@pytest.fixture(scope="module")
def partitions():
    data = make_synthetic_imbalanced(60, 20, 2, 2.0, 0)
    return stratified_split(data, SplitSpec(seed=1))


def _planted_trial(data, planted=4):
    def trial(hp, i):
        return (100.0 if i == planted else 0.0), data
    return trial


def test_dazzle_returns_planted_trial(partitions):
    train, validation, _ = partitions
    res = dazzle_train(train, validation, "knn", 10, seed=5, trial_fn=_planted_trial(train))
    assert len(res.history) == 10
    assert res.best.iteration == 4
    assert res.best_hp == pipeline.hp_from_assignment(res.history[4].assignment)
    assert res.best_g == 100.0


def test_dazzle_ties_go_to_earliest_and_failures_lose(partitions):
    train, validation, _ = partitions

    def flaky(hp, i):
        if i == 0:
            raise FloatingPointError("diverged")
        return 0.0, train

    res = dazzle_train(train, validation, "knn", 5, seed=2, trial_fn=flaky)
    assert res.history[0].status == "failed" and res.history[0].loss == 1.0
    assert res.best.iteration == 1


def test_dazzle_all_failed_raises(partitions):
    train, validation, _ = partitions

    def boom(hp, i):
        raise FloatingPointError("diverged")

    with pytest.raises(DazzleError, match="all 3 trials failed"):
        dazzle_train(train, validation, "knn", 3, trial_fn=boom)
    with pytest.raises(ValueError):
        dazzle_train(train, validation, "knn", 0)


def test_dazzle_real_trials_balance_and_are_deterministic(partitions):
    train, validation, _ = partitions
    a = dazzle_train(train, validation, "knn", 2, seed=3, model_defaults=SMALL_GAN)
    b = dazzle_train(train, validation, "knn", 2, seed=3, model_defaults=SMALL_GAN)
    assert a.resampled.n_minority == a.resampled.n_majority == train.n_majority
    assert a.resampled.equals(b.resampled)
    assert a.best_hp == b.best_hp
    gan_search_space().validate(a.best.assignment)


def test_search_space_matches_hyperparameters():
    space = gan_search_space()
    assert {d.name for d in space.dimensions} == set(GanHyperParams().to_dict())


@pytest.mark.parametrize("treatment", pipeline.TREATMENTS)
def test_every_treatment_resamples(partitions, treatment):
    train, validation, _ = partitions
    opts = TreatmentOptions(bo_iterations=2, de_population=4, de_generations=2, model_defaults=SMALL_GAN)
    res = run_treatment(treatment, train, validation, "knn", 7, opts)
    assert res.wall_time >= 0
    if treatment == "none":
        assert res.data.equals(train)
    else:
        assert res.data.n_minority > train.n_minority
    if treatment in ("smotuned", "cwgan_gp", "dazzle"):
        assert res.hyperparameters
    np.testing.assert_array_equal(res.data.features[: train.n_rows], train.features)


def test_unknown_treatment(partitions):
    train, validation, _ = partitions
    with pytest.raises(ConfigError):
        run_treatment("tomek", train, validation)


def test_dazzle_takes_longer_than_one_gan(partitions):
    train, validation, _ = partitions
    opts = TreatmentOptions(bo_iterations=10, model_defaults=SMALL_GAN)
    single = run_treatment("cwgan_gp", train, validation, "knn", 1, opts)
    tuned = run_treatment("dazzle", train, validation, "knn", 1, opts)
    assert tuned.wall_time >= single.wall_time


def _config(tmp_path=None, **kw):
    base = dict(dataset=make_synthetic_imbalanced(60, 20, 2, 2.0, 4), dataset_name="toy",
                treatments=("none", "smote", "svm_smote"), learners=("knn", "decision_tree"),
                repeats=3, master_seed=9, out_dir=None if tmp_path is None else str(tmp_path))
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        _config(repeats=0)
    with pytest.raises(ConfigError):
        _config(treatments=("none", "nope"))
    with pytest.raises(ConfigError):
        _config(learners=("perceptron",))
    with pytest.raises(ConfigError):
        _config(treatments=("none", "none"))
    with pytest.raises(ConfigError):
        ExperimentConfig()


def test_cells_and_seeds():
    recs = run_experiment(_config())
    assert len(recs) == 3 * 3 * 2
    assert [r.key for r in recs[:6]] == [(0, t, l) for t in ("none", "smote", "svm_smote")
                                          for l in ("knn", "decision_tree")]
    assert len({r.seed for r in recs}) == len(recs)
    assert all(r.status == "ok" for r in recs)


def test_resume_reproduces_store(tmp_path):
    full = tmp_path / "full"
    part = tmp_path / "part"
    run_experiment(_config(full))

    class Stop(Exception):
        pass

    seen = []

    def stop_after_seven(rec):
        seen.append(rec)
        if len(seen) == 7:
            raise Stop

    with pytest.raises(Stop):
        run_experiment(_config(part), progress=stop_after_seven)
    with open(part / pipeline.RECORDS_FILE, "a") as fh:
        fh.write('{"schema_version": 1, "datas')  # torn final line
    resumed = []
    run_experiment(_config(part), progress=resumed.append)
    assert len(resumed) == 18 - 7

    def canon(path):
        return [r.to_json(wall_time=False) for r in load_records(path)]

    assert canon(full) == canon(part)
    assert report(load_records(full), runtime="none") == report(load_records(part), runtime="none")


def test_test_partition_read_only_while_scoring(monkeypatch):
    phases = []

    class Tripwire:
        def __init__(self, data):
            self._data = data

        def __getattr__(self, name):
            phases.append(current_phase())
            return getattr(self._data, name)

    monkeypatch.setattr(pipeline, "_guard_test_partition", Tripwire)
    opts = TreatmentOptions(de_population=4, de_generations=2, model_defaults=SMALL_GAN)
    recs = run_experiment(_config(treatments=pipeline.TREATMENTS, learners=("knn",), repeats=1,
                                  bo_iterations=2, options=opts))
    assert all(r.status == "ok" for r in recs), [r.error for r in recs]
    assert phases and set(phases) == {"score"}


def test_failed_cell_is_recorded(monkeypatch):
    def broken(*a, **kw):
        raise FloatingPointError("bad cell")

    monkeypatch.setattr(pipeline, "fit", broken)
    recs = run_experiment(_config(repeats=1))
    assert all(r.status == "failed" and "bad cell" in r.error for r in recs)
    with pytest.raises(ValueError):
        report([r for r in recs if r.status == "ok"])


def _rec(treatment, learner, repeat, g, wall=0.0, dataset="d"):
    m = MetricReport(pd=g, pf=100 - g, prec=g, acc=g, f1=g, g_score=g)
    return RunRecord(dataset, treatment, learner, repeat, repeat, m, wall)


def test_round_half_up_and_buckets():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.49)] == [1, 2, 3, 2]
    assert runtime_bucket(0.2) == "< 1" and runtime_bucket(4.9) == "< 5" and runtime_bucket(24.0) == "< 25"


def test_summary_medians_and_ties():
    recs = [_rec("none", "knn", i, g) for i, g in enumerate((10, 70, 40))]
    recs += [_rec("smote", "knn", i, g) for i, g in enumerate((69.6, 70.2, 71))]
    recs += [_rec("adasyn", "knn", i, g) for i, g in enumerate((70.4, 0, 90))]
    cells = {(c.metric, c.treatment): c for c in summarize(recs)}
    assert cells[("g_score", "none")].median == 40 and not cells[("g_score", "none")].best
    assert cells[("g_score", "smote")].rendered == 70 and cells[("g_score", "smote")].best
    assert cells[("g_score", "adasyn")].rendered == 70 and cells[("g_score", "adasyn")].best
    # lower is better for pf (pf = 100 - g here)
    assert cells[("pf", "smote")].best and cells[("pf", "adasyn")].best and not cells[("pf", "none")].best


def test_report_formats():
    recs = [_rec(t, l, i, 50 + 10 * j + i, wall=60.0 * (j + 1))
            for j, t in enumerate(("none", "dazzle")) for l in ("knn", "svm") for i in range(3)]
    md = report(recs)
    assert "### d: g_score (higher is better)" in md and "| dazzle | **61** | **61** |" in md
    assert "| dazzle | 2.0000 |" in md
    assert "| dazzle | < 3 |" in report(recs, runtime="bucket")
    assert "runtime" not in report(recs, runtime="none")
    csv = report(recs, "csv").splitlines()
    assert csv[0] == "dataset,metric,treatment,learner,median,rendered,best"
    blob = json.loads(report(recs, "json"))
    assert blob["runtime_minutes"] == {"none": 1.0, "dazzle": 2.0}
    assert len(blob["cells"]) == 4 * 2 * 2
    for bad in (dict(fmt="xml"), dict(runtime="hours"), dict(metrics=("auc",))):
        with pytest.raises(ConfigError):
            report(recs, **bad)


def test_report_counts_failures():
    recs = [_rec("none", "knn", 0, 50),
            RunRecord("d", "smote", "knn", 0, 0, None, 0.0, status="failed", error="x")]
    assert "1 cell(s) failed" in report(recs)


def test_record_round_trip_and_schema(tmp_path):
    rec = _rec("none", "knn", 0, 50, wall=1.5)
    assert RunRecord.from_dict(json.loads(rec.to_json())) == rec
    assert "wall_time" not in json.loads(rec.to_json(wall_time=False))
    bad = tmp_path / "records.jsonl"
    bad.write_text(json.dumps({**rec.to_dict(), "schema_version": 99}) + "\n")
    with pytest.raises(pipeline.DataError):
        load_records(tmp_path)
