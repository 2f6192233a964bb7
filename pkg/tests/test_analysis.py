import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from studentnmf.analysis import (
    LOG_FLOOR, cluster_report, membership_distribution, membership_timeseries, read_cluster_table,
    write_cluster_report, write_report,
)
from studentnmf.errors import ValidationError
from studentnmf.wnmf import FactorModel


def model(U, V, row_labels=None, col_labels=None):
    V = np.asarray(V, float)
    return FactorModel(U=np.asarray(U, float), V=V, k=V.shape[0], objective_trace=(0.0,), seed=0,
                       converged=True, iterations=0, row_labels=row_labels, col_labels=col_labels)


class TestClusterReport:
    V = [[0.5, 0.499, 0.001], [0.0, 0.25, 0.75]]

    def test_linear_is_v(self):
        r = cluster_report(model([[1, 1]], self.V), ["a", "b", "c"])
        np.testing.assert_array_equal(r.table, self.V)
        np.testing.assert_allclose(r.table.sum(axis=1), 1.0)
        assert r.cluster_ids == ["c1", "c2"]

    def test_log_scale(self):
        r = cluster_report(model([[1, 1]], self.V), scale="log10")
        assert r.table[0, 2] == pytest.approx(-3.0)
        assert r.table[1, 0] == LOG_FLOOR and r.floored[1, 0]
        assert r.floored.sum() == 1

    def test_default_names_from_col_labels(self):
        r = cluster_report(model([[1, 1]], self.V, col_labels=[6, 7, 8]))
        assert r.feature_names == ["f6", "f7", "f8"]

    def test_unnormalized_rejected(self):
        with pytest.raises(ValidationError, match="normalize_clusters"):
            cluster_report(model([[1]], [[2.0, 2.0]]))

    def test_bad_scale_and_names(self):
        with pytest.raises(ValidationError):
            cluster_report(model([[1, 1]], self.V), scale="ln")
        with pytest.raises(ValidationError):
            cluster_report(model([[1, 1]], self.V), ["a"])

    def test_csv_roundtrip_bit_exact(self, rng):
        V = rng.dirichlet(np.ones(7), 4)
        r = cluster_report(model(np.ones((1, 4)), V))
        buf = io.StringIO()
        write_cluster_report(r, buf)
        names, table = read_cluster_table(io.StringIO(buf.getvalue()))
        assert names == r.feature_names
        np.testing.assert_array_equal(table, V)


class TestDistribution:
    def test_hand_binned_example(self):
        d = membership_distribution(np.array([[0.5, 0.5], [0.9, 0.1], [0.2, 0.8], [0.5, 0.5]]))
        expected = np.zeros(10)
        expected[[2, 5, 9]] = [0.25, 0.5, 0.25]
        np.testing.assert_allclose(d.bins[0], expected)
        assert d.n_rows_used == 4

    def test_one_hot(self):
        d = membership_distribution(np.array([[1.0, 0.0, 0.0]]))
        assert d.bins[0, 9] == 1.0 and d.bins[1, 0] == 1.0 and d.bins[2, 0] == 1.0

    def test_zero_rows_skipped(self):
        d = membership_distribution(np.array([[0.0, 0.0], [3.0, 1.0]]))
        assert (d.n_rows_used, d.n_rows_skipped) == (1, 1)
        np.testing.assert_allclose(d.bins.sum(axis=1), 1.0)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (8, 3), elements=st.floats(0, 100)), st.integers(0, 7), st.floats(1e-3, 1e3))
    def test_row_scaling_invariance(self, U, row, factor):
        base = membership_distribution(U)
        U2 = U.copy()
        U2[row] *= factor
        np.testing.assert_allclose(membership_distribution(U2).bins, base.bins)
        if base.n_rows_used:
            np.testing.assert_allclose(base.bins.sum(axis=1), 1.0, atol=1e-9)

    def test_accepts_model(self):
        d = membership_distribution(model([[1.0, 3.0]], [[1.0], [1.0]]))
        assert d.bins[1, 7] == 1.0


class TestTimeseries:
    def test_identical_rows(self):
        s = membership_timeseries(model([[0.2, 0.4]] * 3, [[1.0], [1.0]], row_labels=[("a", 0), ("b", 0), ("c", 0)]))
        np.testing.assert_allclose(s.means, [[0.2, 0.4]])

    def test_two_point_mean_and_empty_period(self):
        s = membership_timeseries(model([[1, 0], [0, 1]], [[1.0], [1.0]]), [("a", 2), ("b", 2)])
        assert s.period_count == 3
        np.testing.assert_allclose(s.means[2], [0.5, 0.5])
        np.testing.assert_array_equal(s.empty, [True, True, False])
        np.testing.assert_array_equal(s.means[:2], 0.0)

    def test_single_period_is_column_mean(self, rng):
        U = rng.random((9, 3))
        s = membership_timeseries(model(U, np.ones((3, 1))), [(str(i), 0) for i in range(9)])
        np.testing.assert_allclose(s.means[0], U.mean(axis=0))

    def test_label_mismatch(self):
        with pytest.raises(ValidationError):
            membership_timeseries(model([[1.0]], [[1.0]]), [("a", 0), ("b", 0)])
        with pytest.raises(ValidationError):
            membership_timeseries(model([[1.0]], [[1.0]]))


def test_write_report_sidecar(tmp_path):
    r = cluster_report(model([[1, 1]], [[0.0, 1.0], [0.5, 0.5]]), scale="log10")
    csv_path, meta_path = write_report("clusters", r, str(tmp_path / "out"), {"seed": 3})
    meta = json.loads(open(meta_path).read())
    assert meta == {"report": "clusters", "seed": 3, "scale": "log10", "floor": LOG_FLOOR, "floored_cells": [[0, 0]]}
    assert open(csv_path).readline().strip() == "cluster,x1,x2"
