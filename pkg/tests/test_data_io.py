import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapeformer.data_io import (NormStats, normalize, parse_ts_file, split_train_val, write_csv_file,
                                 write_ts_file)
from shapeformer.errors import ContractViolation, DataError, ParseError

from conftest import make_dataset

TWO = """# comment
@problemName Toy
@timeStamps false
@univariate false
@dimensions 2
@equalLength true
@seriesLength 4
@classLabel true a b
@data
1,2,3,4:5,6,7,8:a
0.5,0.25,0,-1:1,1,1,1:b
"""


def write(tmp_path, text, name="toy.ts"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_two_instances(tmp_path):
    ds = parse_ts_file(write(tmp_path, TWO))
    assert (len(ds), ds.num_variables, ds.series_length) == (2, 2, 4)
    assert ds.classes == ("a", "b")
    assert ds.name == "Toy"
    np.testing.assert_array_equal(ds.X[0], [[1, 2, 3, 4], [5, 6, 7, 8]])
    np.testing.assert_array_equal(ds.y, [0, 1])
    series, label = ds.instances[1]
    assert label == "b" and series.values.shape == (2, 4)


def test_basic_motions_shape(basic_motions):
    train, test = basic_motions
    assert (len(train), train.num_variables, train.series_length, train.num_classes) == (40, 6, 100, 4)
    assert train.split == "train" and test.split == "test"
    assert not np.isnan(train.X).any()


def test_unequal_lengths_padded_with_last_value(tmp_path):
    text = TWO.replace("@equalLength true", "@equalLength false").replace("@seriesLength 4\n", "")
    text = text.replace("0.5,0.25,0,-1:1,1,1,1:b", "0.5,0.25,7:1,2,3:b")
    ds = parse_ts_file(write(tmp_path, text))
    assert ds.series_length == 4
    np.testing.assert_array_equal(ds.X[1], [[0.5, 0.25, 7, 7], [1, 2, 3, 3]])
    assert list(ds.lengths) == [4, 3]


def test_missing_values_interpolated(tmp_path):
    text = TWO.replace("1,2,3,4:5,6,7,8:a", "?,2,?,4:5,6,7,?:a")
    ds = parse_ts_file(write(tmp_path, text))
    np.testing.assert_array_equal(ds.X[0], [[2, 2, 3, 4], [5, 6, 7, 7]])


def test_malformed_header_reports_line(tmp_path):
    text = TWO.replace("@dimensions 2", "@dimensions two")
    with pytest.raises(ParseError) as err:
        parse_ts_file(write(tmp_path, text))
    assert err.value.line == 5


def test_unknown_label_is_data_error(tmp_path):
    with pytest.raises(DataError):
        parse_ts_file(write(tmp_path, TWO.replace(":b\n", ":zzz\n")))


def test_wrong_dimension_count(tmp_path):
    with pytest.raises(ParseError):
        parse_ts_file(write(tmp_path, TWO.replace("1,2,3,4:5,6,7,8:a", "1,2,3,4:a")))


def test_test_split_tag_from_filename(tmp_path):
    ds = parse_ts_file(write(tmp_path, TWO, "Toy_TEST.ts"))
    assert ds.split == "test"


def test_ts_round_trip(tmp_path, basic_motions):
    train, _ = basic_motions
    out = tmp_path / "rt.ts"
    write_ts_file(train, out)
    back = parse_ts_file(out)
    assert back.classes == train.classes
    np.testing.assert_array_equal(back.y, train.y)
    np.testing.assert_array_equal(back.X, train.X)


def test_csv_round_trip(tmp_path, basic_motions):
    train, _ = basic_motions
    out = tmp_path / "rt.csv"
    write_csv_file(train, out)
    back = parse_ts_file(out)
    np.testing.assert_array_equal(back.X, train.X)
    np.testing.assert_array_equal(back.y, train.y)


def test_normalize_examples():
    ds = make_dataset([[[5, 5, 5], [0, 2, 1]]], [0])
    out, stats = normalize(ds)
    np.testing.assert_allclose(out.X[0, 0], [0, 0, 0])
    assert stats.std[0] == 0
    two = make_dataset([[[0, 2]]], [0])
    out, stats = normalize(two)
    np.testing.assert_allclose(out.X[0, 0], [-1, 1])
    assert stats.mean[0] == 1 and stats.std[0] == 1


def test_normalize_with_train_stats_differs_from_self():
    train = make_dataset([[[0, 2]], [[4, 6]]], [0, 1])
    test = make_dataset([[[10, 12]], [[1, 3]]], [0, 1])
    _, stats = normalize(train)
    with_train, _ = normalize(test, stats)
    with_own, _ = normalize(test)
    assert not np.allclose(with_train.X, with_own.X)
    with pytest.raises(ContractViolation):
        normalize(make_dataset(np.zeros((1, 3, 2)), [0]), stats)


def test_norm_stats_serialise():
    s = NormStats(np.array([1.0, 2.0]), np.array([0.5, 0.0]))
    back = NormStats.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.mean, s.mean)
    np.testing.assert_array_equal(back.std, s.std)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6), st.integers(1, 5))
def test_normalize_idempotent(values, scale):
    X = np.array(values).reshape(3, 1, 2) * scale
    ds = make_dataset(X, [0, 1, 0])
    once, _ = normalize(ds)
    twice, _ = normalize(once)
    np.testing.assert_allclose(twice.X, once.X, atol=1e-9)


def test_split_exact_stratification():
    ds = make_dataset(np.arange(10.0).reshape(10, 1, 1).repeat(2, axis=2), [0] * 5 + [1] * 5)
    tr, va = split_train_val(ds, 0.8, seed=3)
    assert (len(tr), len(va)) == (8, 2)
    assert list(tr.class_counts()) == [4, 4] and list(va.class_counts()) == [1, 1]
    assert tr.split == "train" and va.split == "val"
    tr2, va2 = split_train_val(ds, 0.8, seed=3)
    assert tr.ids == tr2.ids and va.ids == va2.ids
    assert set(tr.ids).isdisjoint(va.ids)


def test_split_singleton_class_goes_to_train():
    ds = make_dataset(np.zeros((7, 1, 2)), [0, 0, 0, 1, 1, 1, 2])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        tr, va = split_train_val(ds, 0.8, seed=0)
    assert "i6" in tr.ids and "i6" not in va.ids
    assert caught


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=6, max_size=40), st.integers(0, 1000))
def test_split_preserves_proportions(labels, seed):
    y = np.array(labels)
    y = np.searchsorted(np.unique(y), y)
    ds = make_dataset(np.zeros((len(y), 1, 2)), y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tr, va = split_train_val(ds, 0.8, seed=seed)
    assert len(tr) + len(va) == len(ds)
    expected = ds.class_counts() * 0.2
    assert np.all(np.abs(va.class_counts() - expected) <= 1 + 1e-9)


def test_dataset_is_read_only(basic_motions):
    train, _ = basic_motions
    with pytest.raises(ValueError):
        train.X[0, 0, 0] = 1.0
