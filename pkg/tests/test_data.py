"""Dataset: ingestion with segmentation, windowing, scaling, RMSE."""

from __future__ import annotations

import numpy as np
import pytest

from mixprec.data import (
    MinMaxScaler,
    TimeSeries,
    bundled_synthetic_csv,
    ingest,
    inverse_transform,
    make_synthetic,
    rmse,
    window,
)


def csv_of(rows: list[str], header="a,b,target") -> str:
    return "\n".join([header] + rows) + "\n"


class TestIngest:
    def test_gapless_single_segment(self):
        rows = [f"{i},{i * 2},{i * 3}" for i in range(100)]
        ts = ingest(csv_of(rows), target_column="target")
        assert len(ts.segments) == 1
        assert ts.segments[0].shape == (100, 3)
        assert ts.columns == ["a", "b", "target"]

    def test_missing_value_row_splits(self):
        rows = ["1,1,1", "2,2,2", "3,,3", "4,4,4", "5,5,5"]
        ts = ingest(csv_of(rows), target_column="target")
        assert [len(s) for s in ts.segments] == [2, 2]

    def test_non_numeric_cell_is_error(self):
        rows = ["1,1,1", "2,oops,2"]
        with pytest.raises(ValueError, match="row 3, column 'b'"):
            ingest(csv_of(rows), target_column="target")

    def test_unknown_target(self):
        with pytest.raises(ValueError, match="unknown target"):
            ingest(csv_of(["1,1,1"]), target_column="nope")

    def test_timestamp_gap_splits(self):
        header = "ts,a,target"
        rows = [f"2024-01-01T00:{m:02d}:00,{m},{m}" for m in range(5)]
        rows += [f"2024-01-01T00:{m:02d}:00,{m},{m}" for m in range(10, 15)]
        ts = ingest(csv_of(rows, header), target_column="target", timestamp_column="ts")
        assert [len(s) for s in ts.segments] == [5, 5]
        assert ts.columns == ["a", "target"]

    def test_numeric_timestamps(self):
        header = "ts,a,target"
        rows = [f"{t},{t},{t}" for t in (0, 1, 2, 3, 10, 11, 12)]
        ts = ingest(csv_of(rows, header), target_column="target", timestamp_column="ts")
        assert [len(s) for s in ts.segments] == [4, 3]

    def test_ragged_row_is_error(self):
        with pytest.raises(ValueError, match="expected 3 cells"):
            ingest(csv_of(["1,1,1", "2,2"]), target_column="target")

    def test_path_source(self, tmp_path):
        p = tmp_path / "data.csv"
        p.write_text(csv_of(["1,2,3", "4,5,6"]))
        ts = ingest(p, target_column="target")
        assert ts.total_rows == 2


class TestWindow:
    def make_series(self, lengths, m=2):
        rng = np.random.default_rng(0)
        cols = [f"c{i}" for i in range(m - 1)] + ["target"]
        segments = [rng.uniform(0, 10, size=(length, m)) for length in lengths]
        return TimeSeries(columns=cols, target_column="target", segments=segments)

    def test_single_pair_when_length_is_n_plus_1(self):
        ds = window(self.make_series([13]), n=12, split=0)
        assert len(ds.X) == 1
        assert ds.X.shape == (1, 12, 2)

    def test_pair_count_formula(self):
        for L in (8, 20, 45):
            n = 5
            ds = window(self.make_series([L]), n=n, split=0)
            assert len(ds.X) == L - n

    def test_pairs_per_segment_sum(self):
        ds = window(self.make_series([20, 9, 30]), n=6, split=0)
        assert len(ds.X) == (20 - 6) + (9 - 6) + (30 - 6)

    def test_short_segments_skipped(self):
        ds = window(self.make_series([4, 20]), n=6, split=0)
        assert len(ds.X) == 14

    def test_all_segments_too_short(self):
        with pytest.raises(ValueError, match="no pairs"):
            window(self.make_series([5, 6]), n=6)

    def test_minmax_midpoint(self):
        seg = np.array([[10.0], [30.0], [20.0], [15.0]])
        series = TimeSeries(columns=["target"], target_column="target", segments=[seg])
        ds = window(series, n=1, split=0)
        scaled = ds.scaler.transform(np.array([[20.0]]))
        assert scaled[0, 0] == pytest.approx(0.5)

    def test_split_fraction_and_count(self):
        series = self.make_series([106])
        ds_frac = window(series, n=6, split=0.1)
        assert len(ds_frac.test_X) == 10
        ds_count = window(series, n=6, split=25)
        assert len(ds_count.test_X) == 25
        assert len(ds_count.train_X) == 75

    def test_chronological_split(self):
        seg = np.arange(40, dtype=np.float64).reshape(-1, 1)
        series = TimeSeries(columns=["target"], target_column="target", segments=[seg])
        ds = window(series, n=3, split=0.25)
        train_targets = inverse_transform(ds, ds.train_y)
        test_targets = inverse_transform(ds, ds.test_y)
        assert train_targets.max() < test_targets.min()

    def test_scaler_sees_only_training_rows(self):
        seg = np.arange(40, dtype=np.float64).reshape(-1, 1)
        series = TimeSeries(columns=["target"], target_column="target", segments=[seg])
        ds = window(series, n=3, split=0.25)
        mutated = seg.copy()
        mutated[-5:] = 1e9  # test-only rows
        series2 = TimeSeries(columns=["target"], target_column="target", segments=[mutated])
        ds2 = window(series2, n=3, split=0.25)
        assert np.array_equal(ds.scaler.mins, ds2.scaler.mins)
        assert np.array_equal(ds.scaler.maxs, ds2.scaler.maxs)

    def test_windows_never_cross_segments(self):
        # constant-per-segment values: a crossing window would mix them
        segs = [np.full((10, 1), 1.0), np.full((10, 1), 2.0)]
        series = TimeSeries(columns=["target"], target_column="target", segments=segs)
        ds = window(series, n=4, split=0)
        raw = ds.scaler.inverse_transform(ds.X.reshape(-1, 1)).reshape(ds.X.shape)
        for w in raw:
            assert len(np.unique(w)) == 1


class TestScalerAndRmse:
    def dataset(self):
        seg = np.linspace(10, 30, 50).reshape(-1, 1)
        series = TimeSeries(columns=["target"], target_column="target", segments=[seg])
        return window(series, n=4, split=0.2)

    def test_inverse_round_trip(self):
        ds = self.dataset()
        values = np.array([0.1, 0.5, 0.93])
        raw = inverse_transform(ds, values)
        again = ds.scaler.transform_column(raw, ds.target_index)
        assert np.allclose(again, values, atol=1e-12)

    def test_rmse_zero_on_equal(self):
        ds = self.dataset()
        assert rmse(ds.test_y, ds.test_y, ds) == 0.0

    def test_rmse_constant_offset(self):
        ds = self.dataset()
        span = ds.scaler.spans[ds.target_index]
        delta_norm = 1.5 / span  # +1.5 real units
        assert rmse(ds.test_y + delta_norm, ds.test_y, ds) == pytest.approx(1.5)

    def test_rmse_shape_mismatch(self):
        ds = self.dataset()
        with pytest.raises(ValueError, match="shape"):
            rmse(ds.test_y[:3], ds.test_y, ds)

    def test_degenerate_column(self):
        scaler = MinMaxScaler().fit(np.full((5, 2), 7.0))
        out = scaler.transform(np.full((3, 2), 7.0))
        assert np.all(out == 0.0)
        back = scaler.inverse_transform(out)
        assert np.all(back == 7.0)

    def test_unfitted_scaler(self):
        with pytest.raises(ValueError, match="not fitted"):
            MinMaxScaler().transform(np.zeros((2, 2)))


class TestSynthetic:
    def test_deterministic(self):
        assert make_synthetic(rows=100, seed=7) == make_synthetic(rows=100, seed=7)
        assert make_synthetic(rows=100, seed=7) != make_synthetic(rows=100, seed=8)

    def test_bundled_asset_matches_generator(self):
        assert bundled_synthetic_csv() == make_synthetic(rows=2000, seed=7)

    def test_usable_for_windowing(self):
        ts = ingest(bundled_synthetic_csv(), target_column="target")
        ds = window(ts, n=12, split=0.1)
        assert len(ts.segments) == 1
        assert len(ds.X) == 2000 - 12
        assert ds.X.shape[2] == 3
