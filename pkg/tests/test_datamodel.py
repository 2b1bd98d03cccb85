"""Domain types, ingestion, aggregation, and feature selection."""

import numpy as np
import pytest

from sirakit import (AtmosphericSeries, FeatureVector, GeoLocation,
                     IsotopeVector, Sample, aggregate_features,
                     delta_notation, drop_sparse_variables, ingest_samples,
                     read_atmospheric_csv, select_features,
                     write_atmospheric_csv, write_samples_csv)
from sirakit.datamodel import apply_selection, features_for_schema
from sirakit.errors import CoverageError, ParseError, SiraError


class TestDeltaNotation:
    def test_sample_equals_standard(self):
        assert delta_notation(0.0020052, 0.0020052) == 0.0

    def test_derived_value(self):
        # direct arithmetic: (1/1.001 - 1) * 1000
        expected = (1.0 / 1.001 - 1.0) * 1000.0
        got = delta_notation(0.0020052, 0.0020052 * 1.001)
        assert abs(got - expected) < 1e-9
        assert abs(got - (-0.999000999)) < 1e-6

    def test_doubled_ratio(self):
        assert delta_notation(2 * 0.011, 0.011) == pytest.approx(1000.0)

    def test_nonpositive_standard_rejected(self):
        with pytest.raises(ValueError):
            delta_notation(1.0, 0.0)
        with pytest.raises(ValueError):
            delta_notation(1.0, -0.5)

    def test_scale_invariance(self, rng):
        # delta(r*s, s) depends only on r
        for _ in range(200):
            r = rng.uniform(0.1, 10.0)
            s1, s2 = rng.uniform(1e-6, 1e3, 2)
            d1 = delta_notation(r * s1, s1)
            d2 = delta_notation(r * s2, s2)
            assert abs(d1 - d2) < 1e-6 * max(1.0, abs(d1))


class TestGeoLocation:
    def test_bounds(self):
        with pytest.raises(ValueError):
            GeoLocation(91.0, 0.0)
        with pytest.raises(ValueError):
            GeoLocation(-90.5, 0.0)

    def test_lon_normalized(self):
        assert GeoLocation(0.0, 190.0).lon == pytest.approx(-170.0)
        assert GeoLocation(0.0, 180.0).lon == -180.0
        assert GeoLocation(0.0, -180.0).lon == -180.0


class TestIsotopeVector:
    def test_needs_one_value(self):
        with pytest.raises(ValueError):
            IsotopeVector()

    def test_present_tasks_and_array(self):
        iso = IsotopeVector(d18O=25.0, d2H=-40.0)
        assert iso.present_tasks() == ("d18O", "d2H")
        assert iso.task_count == 2
        arr = iso.as_array()
        assert arr[0] == 25.0 and np.isnan(arr[1])


class TestIngestion:
    def test_single_row(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("lat,lon,d18O,d13C,d2H,d34S\n10.5,20.25,25.0,,-40.0,\n")
        samples = ingest_samples(p)
        assert len(samples) == 1
        assert samples[0].isotopes.d13C is None
        assert samples[0].location.lat == 10.5

    def test_out_of_range_lat(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("lat,lon,d18O,d13C,d2H,d34S\n91.0,0.0,25.0,,,\n")
        with pytest.raises(ParseError) as err:
            ingest_samples(p)
        assert err.value.line == 2

    def test_malformed_row_reports_line(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("lat,lon,d18O,d13C,d2H,d34S\n"
                     "10,20,25.0,,,1.0\n10,20,xyz,,,1.0\n")
        with pytest.raises(ParseError) as err:
            ingest_samples(p)
        assert err.value.line == 3

    def test_missing_cell_counts(self, tmp_path, rng):
        rows = ["lat,lon,d18O,d13C,d2H,d34S"]
        for i in range(10):
            d34s = "" if i in (3, 7) else "5.0"
            rows.append(f"{40 + i}.0,10.0,25.0,-26.0,-40.0,{d34s}")
        p = tmp_path / "s.csv"
        p.write_text("\n".join(rows) + "\n")
        samples = ingest_samples(p)
        assert len(samples) == 10
        missing = sum(1 for s in samples if s.isotopes.d34S is None)
        assert missing == 2

    def test_csv_round_trip_bytes(self, tmp_path):
        samples = [
            Sample(GeoLocation(10.25, -3.5),
                   IsotopeVector(d18O=25.125, d2H=-40.0)),
            Sample(GeoLocation(-5.0, 177.75),
                   IsotopeVector(d13C=-26.5, d34S=4.25)),
        ]
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        write_samples_csv(p1, samples)
        write_samples_csv(p2, ingest_samples(p1))
        assert p1.read_bytes() == p2.read_bytes()


def _series_from_grid(variable, cells, years, fill):
    """Build a series where fill(cell_idx, year_idx, month_idx) gives values."""
    records = []
    for ci, (lat, lon) in enumerate(cells):
        for yi, year in enumerate(years):
            for m in range(12):
                v = fill(ci, yi, m)
                if v is not None:
                    records.append((lat, lon, year, m + 1, v))
    return AtmosphericSeries.from_records(variable, records)


GRID = [(40.0, 10.0), (40.0, 12.0), (42.0, 10.0), (42.0, 12.0)]
YEARS = [2000, 2001]


class TestAtmosphericCsv:
    def test_duplicate_key_rejected(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("variable,lat,lon,year,month,value\n"
                     "t,40,10,2000,1,1.0\nt,40,10,2000,1,2.0\n")
        with pytest.raises(ParseError) as err:
            read_atmospheric_csv(p)
        assert err.value.line == 3

    def test_month_range(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("variable,lat,lon,year,month,value\nt,40,10,2000,13,1.0\n")
        with pytest.raises(ParseError):
            read_atmospheric_csv(p)

    def test_round_trip_bytes(self, tmp_path):
        series = _series_from_grid("temp", GRID, YEARS,
                                   lambda c, y, m: 10.0 + c + 0.5 * m + 0.25 * y)
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        write_atmospheric_csv(p1, [series])
        write_atmospheric_csv(p2, read_atmospheric_csv(p1))
        assert p1.read_bytes() == p2.read_bytes()


def _samples_at(cells):
    return [Sample(GeoLocation(lat, lon), IsotopeVector(d18O=25.0))
            for lat, lon in cells]


class TestDropSparseVariables:
    def test_paper_count_25_to_19(self, rng):
        samples = _samples_at(GRID)
        series = []
        for i in range(19):
            series.append(_series_from_grid(f"full_{i:02d}", GRID, YEARS,
                                            lambda c, y, m: 1.0))
        for i in range(6):
            # 60% of (cell, year, month) entries missing
            mask = rng.random((len(GRID), len(YEARS), 12)) < 0.6
            series.append(_series_from_grid(
                f"sparse_{i}", GRID, YEARS,
                lambda c, y, m, mk=mask: None if mk[c, y, m] else 1.0))
        kept = drop_sparse_variables(series, samples, 0.5)
        assert len(kept) == 19
        assert all(s.variable.startswith("full") for s in kept)

    def test_all_complete_identity(self):
        samples = _samples_at(GRID)
        series = [_series_from_grid("t", GRID, YEARS, lambda c, y, m: 1.0)]
        assert drop_sparse_variables(series, samples, 0.5) == series

    def test_boundary_is_strict(self):
        samples = _samples_at(GRID)
        # exactly half of the months missing at every cell
        series = [_series_from_grid(
            "half", GRID, YEARS,
            lambda c, y, m: None if m < 6 else 1.0)]
        kept = drop_sparse_variables(series, samples, 0.5)
        assert kept == series

    def test_idempotent(self, rng):
        samples = _samples_at(GRID)
        series = []
        for i in range(4):
            frac = 0.7 if i == 0 else 0.1
            mask = rng.random((len(GRID), len(YEARS), 12)) < frac
            series.append(_series_from_grid(
                f"v{i}", GRID, YEARS,
                lambda c, y, m, mk=mask: None if mk[c, y, m] else float(c)))
        once = drop_sparse_variables(series, samples, 0.5)
        twice = drop_sparse_variables(once, samples, 0.5)
        assert [s.variable for s in once] == [s.variable for s in twice]

    def test_empty_survivors(self):
        samples = _samples_at(GRID)
        series = [_series_from_grid(
            "gone", GRID, YEARS,
            lambda c, y, m: None if m > 0 else 1.0)]
        with pytest.raises(SiraError):
            drop_sparse_variables(series, samples, 0.5)


class TestAggregateFeatures:
    def test_constant_series(self):
        series = [_series_from_grid("c", GRID, YEARS, lambda c, y, m: 3.25)]
        fv = aggregate_features(series, GeoLocation(40.1, 10.1), "mean")
        assert fv.names == ("c",)
        assert fv.values[0] == pytest.approx(3.25)

    def test_month_index_mean(self):
        series = [_series_from_grid("m", GRID, YEARS,
                                    lambda c, y, m: float(m + 1))]
        fv = aggregate_features(series, GeoLocation(41.0, 11.0), "mean")
        assert fv.values[0] == pytest.approx(6.5)

    def test_seasonal_amplitude(self):
        series = [_series_from_grid("m", GRID, YEARS,
                                    lambda c, y, m: float(m + 1))]
        fv = aggregate_features(series, GeoLocation(41.0, 11.0),
                                "mean+seasonal-amplitude")
        assert fv.names == ("m", "m:seasonal_amplitude")
        assert tuple(fv.values) == pytest.approx((6.5, 11.0))

    def test_interannual_std(self):
        series = [_series_from_grid("m", GRID, YEARS,
                                    lambda c, y, m: float(YEARS[y]))]
        fv = aggregate_features(series, GeoLocation(41.0, 11.0),
                                "mean+interannual-std")
        # yearly means are 2000 and 2001 -> sample std = sqrt(0.5)
        assert fv.values[1] == pytest.approx(np.sqrt(0.5))

    def test_outside_coverage(self):
        series = [_series_from_grid("c", GRID, YEARS, lambda c, y, m: 1.0)]
        with pytest.raises(CoverageError):
            aggregate_features(series, GeoLocation(70.0, 10.0), "mean")

    def test_unknown_mode(self):
        series = [_series_from_grid("c", GRID, YEARS, lambda c, y, m: 1.0)]
        with pytest.raises(ValueError):
            aggregate_features(series, GeoLocation(41.0, 11.0), "median")

    def test_deterministic_ordering_and_reingest(self, tmp_path):
        series = [
            _series_from_grid("zeta", GRID, YEARS, lambda c, y, m: 1.0 + c),
            _series_from_grid("alpha", GRID, YEARS, lambda c, y, m: 2.0 + m),
        ]
        loc = GeoLocation(41.0, 11.0)
        fv = aggregate_features(series, loc, "mean")
        assert fv.names == ("alpha", "zeta")
        p = tmp_path / "a.csv"
        write_atmospheric_csv(p, series)
        fv2 = aggregate_features(read_atmospheric_csv(p), loc, "mean")
        assert fv2.names == fv.names
        assert np.array_equal(fv.values, fv2.values)

    def test_missing_cells_filled_with_spatial_mean(self):
        # cell 0 misses January; other cells carry 10, 20, 30 that month
        def fill(c, y, m):
            if m == 0:
                return None if c == 0 else 10.0 * c
            return 5.0
        series = [_series_from_grid("v", GRID, YEARS, fill)]
        fv = aggregate_features(series, GeoLocation(40.0, 10.0), "mean")
        exp_jan = (10.0 + 20.0 + 30.0) / 3.0
        expected = (exp_jan + 11 * 5.0) / 12.0
        assert fv.values[0] == pytest.approx(expected)

    def test_schema_rebuild_matches(self):
        series = [
            _series_from_grid("b", GRID, YEARS, lambda c, y, m: 2.0 * c),
            _series_from_grid("a", GRID, YEARS, lambda c, y, m: 1.0 + m),
        ]
        loc = GeoLocation(42.0, 12.0)
        fv = aggregate_features(series, loc, "mean")
        rebuilt = features_for_schema(series, loc, fv.names)
        assert np.array_equal(rebuilt, fv.values)

    def test_schema_missing_variable(self):
        series = [_series_from_grid("a", GRID, YEARS, lambda c, y, m: 1.0)]
        with pytest.raises(SiraError):
            features_for_schema(series, GeoLocation(41.0, 11.0), ("ghost",))


def _make_feature_samples(feat, iso_values):
    names = tuple(f"f{j}" for j in range(feat.shape[1]))
    out = []
    for i in range(len(feat)):
        out.append(Sample(
            GeoLocation(0.0, float(i % 179)),
            IsotopeVector(d18O=float(iso_values[i])),
            FeatureVector(names=names, values=feat[i])))
    return out


class TestSelectFeatures:
    def test_identical_feature_selected(self, rng):
        y = rng.normal(0, 1, 40)
        feat = np.column_stack([rng.normal(0, 1, 40), y.copy()])
        samples = _make_feature_samples(feat, y)
        assert select_features(samples, 1) == (1,)

    def test_informative_beats_noise_monte_carlo(self):
        hits = 0
        for seed in range(100):
            r = np.random.default_rng(seed)
            y = r.normal(0, 1, 60)
            feat = np.column_stack([r.normal(0, 1, 60),
                                    y + 0.3 * r.normal(0, 1, 60)])
            samples = _make_feature_samples(feat, y)
            hits += select_features(samples, 1) == (1,)
        assert hits >= 95

    def test_k_at_least_dimension(self, rng):
        feat = rng.normal(0, 1, (20, 3))
        samples = _make_feature_samples(feat, rng.normal(0, 1, 20))
        assert select_features(samples, 3) == (0, 1, 2)
        assert select_features(samples, 10) == (0, 1, 2)

    def test_order_invariance(self, rng):
        feat = rng.normal(0, 1, (50, 6))
        y = feat[:, 2] + 0.5 * feat[:, 4] + 0.2 * rng.normal(0, 1, 50)
        samples = _make_feature_samples(feat, y)
        sel = select_features(samples, 2)
        perm = list(rng.permutation(len(samples)))
        sel_perm = select_features([samples[i] for i in perm], 2)
        assert sel == sel_perm

    def test_apply_selection(self, rng):
        feat = rng.normal(0, 1, (10, 4))
        samples = _make_feature_samples(feat, rng.normal(0, 1, 10))
        sub = apply_selection(samples, (1, 3))
        assert sub[0].features.names == ("f1", "f3")
        assert np.array_equal(sub[0].features.values, feat[0, [1, 3]])
