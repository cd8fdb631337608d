import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rebalance.data import (
    Dataset,
    DataError,
    MinMaxScaler,
    SplitSpec,
    apply_scaler,
    fit_minmax,
    load_csv,
    make_synthetic_imbalanced,
    stratified_split,
    write_csv,
)


def _csv(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_csv_moodle_shape(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.zeros(2942, dtype=int)
    labels[rng.choice(2942, 24, replace=False)] = 1
    header = ",".join([f"m{j}" for j in range(13)] + ["vuln"])
    rows = [",".join(f"{v:.3f}" for v in rng.normal(size=13)) + f",{y}" for y in labels]
    data = load_csv(_csv(tmp_path, header + "\n" + "\n".join(rows) + "\n"), "vuln")
    assert (data.n_rows, data.n_features, data.n_minority) == (2942, 13, 24)
    assert data.feature_names == tuple(f"m{j}" for j in range(13))
    np.testing.assert_array_equal(data.labels, labels)


def test_load_csv_header_only_is_empty(tmp_path):
    with pytest.raises(DataError, match="empty dataset"):
        load_csv(_csv(tmp_path, "a,b,label\n"), "label")


def test_load_csv_label_aliases(tmp_path):
    data = load_csv(_csv(tmp_path, "x,label\n1,yes\n2,No\n3,YES\n"), "label")
    assert data.labels.tolist() == [1, 0, 1]
    data = load_csv(_csv(tmp_path, "x,label\n1,true\n2,False\n", "b.csv"), "label")
    assert data.labels.tolist() == [1, 0]


@pytest.mark.parametrize(
    "text, label, fragment",
    [
        ("x,y\n1,0\n", "label", "label column"),
        ("x,label\n1,0\nabc,1\n", "label", "row 3"),
        ("x,label\n1,0\n2,maybe\n", "label", "row 3"),
        ("x,label\n1,0\nnan,1\n", "label", "row 3"),
    ],
)
def test_load_csv_errors_locate_the_cell(tmp_path, text, label, fragment):
    with pytest.raises(DataError, match=fragment):
        load_csv(_csv(tmp_path, text), label)


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        load_csv(tmp_path / "absent.csv", "label")


def test_write_csv_round_trip(tmp_path):
    data = make_synthetic_imbalanced(20, 5, 3, 2.0, 1)
    write_csv(data, tmp_path / "out.csv", "target")
    back = load_csv(tmp_path / "out.csv", "target")
    assert back.equals(data)


def test_split_moodle_counts():
    data = make_synthetic_imbalanced(2942 - 24, 24, 2, 1.0, 0)
    train, val, test = stratified_split(data, SplitSpec(0.64, 0.16, 0.20, seed=3))
    assert test.n_rows in (588, 589)
    assert 4 <= test.n_minority <= 5
    assert train.n_rows + val.n_rows + test.n_rows == 2942


def test_split_small_exact():
    data = make_synthetic_imbalanced(5, 5, 1, 1.0, 0)
    parts = stratified_split(data, SplitSpec(0.6, 0.2, 0.2, seed=7))
    assert [p.n_rows for p in parts] == [6, 2, 2]
    assert [p.n_minority for p in parts] == [3, 1, 1]


def test_split_deterministic():
    data = make_synthetic_imbalanced(100, 20, 3, 1.0, 4)
    a = stratified_split(data, SplitSpec(seed=11))
    b = stratified_split(data, SplitSpec(seed=11))
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_split_rejects_tiny_class():
    data = make_synthetic_imbalanced(10, 2, 1, 1.0, 0)
    with pytest.raises(DataError, match="stratify"):
        stratified_split(data, SplitSpec())


def test_splitspec_fractions_must_sum_to_one():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.2, 0.2)


@settings(max_examples=60, deadline=None)
@given(
    n_maj=st.integers(3, 200),
    n_min=st.integers(3, 60),
    seed=st.integers(0, 2**32 - 1),
)
def test_split_partition_properties(n_maj, n_min, seed):
    data = make_synthetic_imbalanced(n_maj, n_min, 2, 1.0, seed % 1000)
    spec = SplitSpec(seed=seed)
    parts = stratified_split(data, spec)
    fracs = (spec.train_fraction, spec.validation_fraction, spec.test_fraction)
    for part, f in zip(parts, fracs):
        assert part.n_minority >= 1
        assert abs(part.n_minority - f * n_min) <= 1 + 1e-9
        assert abs(part.n_majority - f * n_maj) <= 1 + 1e-9
    merged = np.vstack([p.features for p in parts])
    key = lambda x: x[np.lexsort(x.T[::-1])]
    np.testing.assert_array_equal(key(merged), key(data.features))


def test_fit_minmax_examples():
    s = fit_minmax(Dataset(np.array([[2.0], [4.0], [6.0]]), [0, 1, 0]))
    assert s.minimum.tolist() == [2.0] and s.maximum.tolist() == [6.0]
    s = fit_minmax(Dataset(np.array([[5.0], [5.0]]), [0, 1]))
    assert s.minimum.tolist() == [5.0] and s.maximum.tolist() == [5.0]
    s = fit_minmax(Dataset(np.array([[0.0, 10.0], [1.0, 20.0]]), [0, 1]))
    assert s.minimum.tolist() == [0.0, 10.0] and s.maximum.tolist() == [1.0, 20.0]


def test_scaler_forward_values():
    s = MinMaxScaler(np.array([2.0, 5.0]), np.array([6.0, 5.0]))
    np.testing.assert_array_equal(s.transform(np.array([[6.0, 5.0]])), [[1.0, 0.0]])


def test_scaler_rejects_bad_bounds_and_width():
    with pytest.raises(ValueError):
        MinMaxScaler(np.array([1.0]), np.array([0.0]))
    s = MinMaxScaler(np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        s.transform(np.zeros((1, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 40), d=st.integers(1, 6))
def test_scaler_round_trip_and_range(seed, n, d):
    rng = np.random.default_rng(seed)
    data = Dataset(rng.normal(scale=100, size=(n, d)), rng.integers(0, 2, n))
    s = fit_minmax(data)
    fwd = apply_scaler(s, data, "forward")
    assert fwd.features.min() >= 0.0 and fwd.features.max() <= 1.0
    back = apply_scaler(s, fwd, "inverse")
    np.testing.assert_allclose(back.features, data.features, rtol=0, atol=1e-12 * max(1, np.abs(data.features).max()))
    np.testing.assert_array_equal(back.labels, data.labels)


def test_synthetic_fixture():
    data = make_synthetic_imbalanced(900, 100, 2, 4.0, 7)
    assert data.n_rows == 1000 and data.n_minority / data.n_rows == pytest.approx(0.10)
    again = make_synthetic_imbalanced(900, 100, 2, 4.0, 7)
    assert again.equals(data)
    gap = data.minority[:, 0].mean() - data.majority[:, 0].mean()
    assert gap == pytest.approx(4.0, abs=3 / np.sqrt(100))


def test_synthetic_zero_separation_means_agree():
    data = make_synthetic_imbalanced(2000, 2000, 3, 0.0, 5)
    diff = np.abs(data.minority.mean(axis=0) - data.majority.mean(axis=0))
    assert np.all(diff < 3 / np.sqrt(2000))


def test_dataset_is_immutable_and_validated():
    data = Dataset(np.zeros((2, 2)), [0, 1])
    with pytest.raises(ValueError):
        data.features[0, 0] = 1.0
    with pytest.raises(DataError):
        Dataset(np.array([[np.inf]]), [0])
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), [0, 2])
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), [0])
