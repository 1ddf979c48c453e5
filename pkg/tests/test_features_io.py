import gzip
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hotcalib.errors import (
    CovarianceUndefined,
    EmptyFile,
    LogOfNonPositive,
    NegativeInput,
    ParseError,
    SchemaMismatch,
)
from hotcalib.features_io import (
    FeatureTable,
    base_statistics,
    check_stats_dim,
    load_features,
    load_stats,
    save_features,
    save_stats,
    tukey_transform,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadFeatures:
    def test_three_rows(self, tmp_path):
        p = write(tmp_path / "f.csv", "label,f0,f1\na,1,2\na,3,4\nb,5,6\n")
        table = load_features(p)
        assert table.dim == 2 and len(table) == 3
        assert table.label_index == {"a": 0, "b": 1}
        np.testing.assert_array_equal(table.vectors[2], [5.0, 6.0])

    def test_short_row_names_line(self, tmp_path):
        p = write(tmp_path / "f.csv", "label,f0,f1\na,1,2\na,3\n")
        with pytest.raises(ParseError) as err:
            load_features(p)
        assert err.value.line == 3
        assert "line 3" in str(err.value)

    def test_bad_number(self, tmp_path):
        p = write(tmp_path / "f.csv", "label,f0\na,1\nb,oops\n")
        with pytest.raises(ParseError) as err:
            load_features(p)
        assert err.value.line == 3

    def test_nonfinite_value(self, tmp_path):
        p = write(tmp_path / "f.csv", "label,f0\na,nan\n")
        with pytest.raises(ParseError):
            load_features(p)

    def test_bad_header(self, tmp_path):
        with pytest.raises(ParseError):
            load_features(write(tmp_path / "f.csv", "name,f0\na,1\n"))
        with pytest.raises(ParseError):
            load_features(write(tmp_path / "g.csv", "label,x,y\na,1,2\n"))

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyFile):
            load_features(write(tmp_path / "f.csv", ""))
        with pytest.raises(EmptyFile):
            load_features(write(tmp_path / "g.csv", "label,f0\n"))

    def test_gzip_and_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        table = FeatureTable(rng.random((6, 3)), ("x", "y", "x", "z", "y", "x"))
        save_features(table, tmp_path / "t.csv.gz")
        with gzip.open(tmp_path / "t.csv.gz", "rt") as fh:
            assert fh.readline().strip() == "label,f0,f1,f2"
        back = load_features(tmp_path / "t.csv.gz")
        np.testing.assert_array_equal(back.vectors, table.vectors)
        assert back.labels == table.labels
        assert back.class_labels == ["x", "y", "z"]

    def test_min_entry_recorded(self, tmp_path):
        table = load_features(write(tmp_path / "f.csv", "label,f0\na,-0.5\nb,2\n"))
        assert table.min_entry == -0.5


class TestBaseStatistics:
    def test_two_sample_class(self):
        stats = base_statistics(FeatureTable([[1.0, 1.0], [3.0, 3.0]], ("a", "a")))
        np.testing.assert_array_equal(stats[0].mean, [2.0, 2.0])
        np.testing.assert_array_equal(stats[0].cov, [[2.0, 2.0], [2.0, 2.0]])
        assert stats[0].count == 2

    def test_identical_rows_zero_cov(self):
        stats = base_statistics(FeatureTable(np.tile([1.5, -2.0, 3.0], (5, 1)), ("c",) * 5))
        np.testing.assert_array_equal(stats[0].cov, np.zeros((3, 3)))

    def test_singleton_class(self):
        with pytest.raises(CovarianceUndefined):
            base_statistics(FeatureTable([[1.0], [2.0], [3.0]], ("a", "a", "b")))

    def test_matches_numpy_cov(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 4))
        labels = tuple("ab"[i % 2] for i in range(40))
        stats = base_statistics(FeatureTable(x, labels))
        np.testing.assert_allclose(stats[1].cov, np.cov(x[1::2], rowvar=False), atol=1e-12)
        np.testing.assert_allclose(stats[1].cov, stats[1].cov.T, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_row_shuffle_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(12, 3))
        labels = tuple("abc"[i % 3] for i in range(12))
        perm = rng.permutation(12)
        s1 = base_statistics(FeatureTable(x, labels))
        s2 = base_statistics(FeatureTable(x[perm], tuple(labels[i] for i in perm)))
        by_label = {s.label: s for s in s2}
        for s in s1:
            np.testing.assert_allclose(by_label[s.label].mean, s.mean, atol=1e-12)
            np.testing.assert_allclose(by_label[s.label].cov, s.cov, atol=1e-12)


class TestStatsFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        stats = base_statistics(FeatureTable(rng.random((9, 3)), tuple("aab" "bcc" "abc")))
        save_stats(stats, tmp_path / "s.json")
        back = load_stats(tmp_path / "s.json")
        for s, r in zip(stats, back):
            assert r.label == s.label and r.count == s.count
            np.testing.assert_array_equal(r.mean, s.mean)
            np.testing.assert_allclose(r.cov, s.cov, atol=1e-12)

    def test_schema(self, tmp_path):
        stats = base_statistics(FeatureTable([[1.0, 2.0], [2.0, 0.0]], ("a", "a")))
        save_stats(stats, tmp_path / "s.json")
        payload = json.loads((tmp_path / "s.json").read_text())
        assert payload["dim"] == 2
        assert set(payload["classes"][0]) == {"label", "count", "mean", "cov_rows"}

    def test_empty_list(self, tmp_path):
        save_stats([], tmp_path / "s.json")
        assert load_stats(tmp_path / "s.json") == []

    def test_dim_mismatch_at_use(self, tmp_path):
        stats = base_statistics(FeatureTable([[1.0, 2.0], [2.0, 0.0]], ("a", "a")))
        save_stats(stats, tmp_path / "s.json")
        with pytest.raises(SchemaMismatch):
            check_stats_dim(load_stats(tmp_path / "s.json"), 3)

    def test_corrupt_file(self, tmp_path):
        with pytest.raises(SchemaMismatch):
            load_stats(write(tmp_path / "s.json", "{not json"))
        with pytest.raises(SchemaMismatch):
            load_stats(write(tmp_path / "t.json", '{"dim": 2, "classes": [{"label": "a", "count": 2,'
                                                  ' "mean": [1], "cov_rows": [[1]]}]}'))

    def test_f32_storage(self, tmp_path):
        stats = base_statistics(FeatureTable([[1.0, 2.0], [2.0, 0.0]], ("a", "a")), dtype=np.float32)
        assert stats[0].cov.dtype == np.float32
        save_stats(stats, tmp_path / "s.json")
        assert load_stats(tmp_path / "s.json", dtype=np.float32)[0].mean.dtype == np.float32


class TestTukey:
    def test_square_root(self):
        np.testing.assert_array_equal(tukey_transform([4.0, 9.0], 0.5), [2.0, 3.0])

    def test_identity_is_bit_exact(self):
        x = np.random.default_rng(3).random(7)
        out = tukey_transform(x, 1.0)
        np.testing.assert_array_equal(out, x)
        assert out is not x

    def test_log(self):
        np.testing.assert_allclose(tukey_transform([1.0, np.e], 0.0), [0.0, 1.0], atol=1e-15)

    def test_errors(self):
        with pytest.raises(NegativeInput):
            tukey_transform([1.0, -0.1], 0.5)
        with pytest.raises(LogOfNonPositive):
            tukey_transform([1.0, 0.0], 0.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(0, 1e6)), st.floats(0.01, 1.0))
    def test_monotone(self, x, lam):
        order = np.argsort(x, kind="stable")
        y = tukey_transform(x, lam)[order]
        assert np.all(np.diff(y) >= 0)
