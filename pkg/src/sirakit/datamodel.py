"""Core domain types, sample and atmospheric ingestion, and feature building.

Input formats
-------------
Sample CSV: header ``lat,lon,d18O,d13C,d2H,d34S``, UTF-8, ``.`` decimal
separator, empty cell = missing isotope value.

Atmospheric long CSV: header ``variable,lat,lon,year,month,value``. Each
(variable, lat, lon, year, month) key must be unique; a missing key simply
means that cell/month has no observation.

Feature vectors are built by temporal aggregation of atmospheric series at
the nearest grid cell, with a fixed, total feature ordering: variables
sorted by name, statistics in the order mean, seasonal amplitude,
interannual std. Re-ingesting the same files yields bit-identical vectors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _sstats

from .errors import CoverageError, ParseError, SiraError

ISOTOPE_NAMES = ("d18O", "d13C", "d2H", "d34S")

SAMPLE_HEADER = ["lat", "lon", "d18O", "d13C", "d2H", "d34S"]
ATMOS_HEADER = ["variable", "lat", "lon", "year", "month", "value"]

AGGREGATION_MODES = ("mean", "mean+seasonal-amplitude", "mean+interannual-std")

# Statistic suffixes in canonical order; the plain mean carries no suffix so
# that a feature named after a variable alone denotes its long-term mean.
_STAT_ORDER = ("", ":seasonal_amplitude", ":interannual_std")


def normalize_lon(lon: float) -> float:
    """Map a longitude in degrees into [-180, 180)."""
    return (lon + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class GeoLocation:
    """A point on the globe in decimal degrees, lon normalized to [-180, 180)."""

    lat: float
    lon: float

    def __post_init__(self):
        if not math.isfinite(self.lat) or not math.isfinite(self.lon):
            raise ValueError(f"non-finite coordinates ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lon", normalize_lon(self.lon))


@dataclass(frozen=True)
class IsotopeVector:
    """Measured per-mil isotope values; None marks a missing measurement."""

    d18O: float | None = None
    d13C: float | None = None
    d2H: float | None = None
    d34S: float | None = None

    def __post_init__(self):
        values = [getattr(self, name) for name in ISOTOPE_NAMES]
        if all(v is None for v in values):
            raise ValueError("isotope vector needs at least one present value")
        for name, v in zip(ISOTOPE_NAMES, values):
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{name} is not finite: {v}")

    def present_tasks(self) -> tuple[str, ...]:
        return tuple(n for n in ISOTOPE_NAMES if getattr(self, n) is not None)

    @property
    def task_count(self) -> int:
        return len(self.present_tasks())

    def as_array(self, tasks: tuple[str, ...] = ISOTOPE_NAMES) -> np.ndarray:
        """Values for the given tasks, NaN where missing."""
        return np.array(
            [v if (v := getattr(self, t)) is not None else np.nan for t in tasks],
            dtype=float,
        )


@dataclass(frozen=True)
class FeatureVector:
    """Ordered, dense (name, value) pairs shared schema-wide."""

    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.shape != (len(self.names),):
            raise ValueError("feature names and values length mismatch")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature vector contains non-finite entries")

    @property
    def dimension(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class Sample:
    """One geolocated measurement with optional attached features."""

    location: GeoLocation
    isotopes: IsotopeVector
    features: FeatureVector | None = None


class AtmosphericSeries:
    """One atmospheric variable on a sparse (cell, year, month) grid.

    Cells are stored sorted by (lat, lon); values live in a dense
    (n_cells, n_years, 12) array with NaN for missing observations.
    """

    def __init__(self, variable: str, cells: np.ndarray, years: list[int],
                 values: np.ndarray, units: str = ""):
        self.variable = variable
        self.units = units
        self.cells = np.asarray(cells, dtype=float)
        self.years = list(years)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (len(self.cells), len(self.years), 12):
            raise ValueError("values shape does not match cells/years layout")
        self._coverage = self._compute_coverage()
        self._cache: dict[str, np.ndarray] = {}

    def _compute_coverage(self):
        lats = np.unique(self.cells[:, 0])
        lons = np.unique(self.cells[:, 1])
        margin_lat = _half_pitch(lats)
        margin_lon = _half_pitch(lons)
        return (lats.min() - margin_lat, lats.max() + margin_lat,
                lons.min() - margin_lon, lons.max() + margin_lon)

    @classmethod
    def from_records(cls, variable, records, units=""):
        """Build from an iterable of (lat, lon, year, month, value) tuples."""
        seen = {}
        for lat, lon, year, month, value in records:
            key = (lat, lon, year, month)
            if key in seen:
                raise SiraError(
                    f"duplicate atmospheric key {variable} @ {key}")
            seen[key] = value
        cell_keys = sorted({(lat, lon) for lat, lon, _, _ in seen})
        years = sorted({year for _, _, year, _ in seen})
        cell_index = {c: i for i, c in enumerate(cell_keys)}
        year_index = {y: i for i, y in enumerate(years)}
        values = np.full((len(cell_keys), len(years), 12), np.nan)
        for (lat, lon, year, month), value in seen.items():
            values[cell_index[(lat, lon)], year_index[year], month - 1] = value
        return cls(variable, np.array(cell_keys, dtype=float), years, values,
                   units=units)

    def covers(self, location: GeoLocation) -> bool:
        lat_lo, lat_hi, lon_lo, lon_hi = self._coverage
        return lat_lo <= location.lat <= lat_hi and lon_lo <= location.lon <= lon_hi

    def nearest_cell(self, location: GeoLocation) -> int:
        """Index of the nearest cell center (squared-degree metric, first wins)."""
        d2 = (self.cells[:, 0] - location.lat) ** 2 + (self.cells[:, 1] - location.lon) ** 2
        return int(np.argmin(d2))

    def missing_fraction(self, locations) -> float:
        """Fraction of missing (location, year, month) lookups."""
        total = 0
        missing = 0
        for loc in locations:
            cell = self.nearest_cell(loc)
            vals = self.values[cell]
            total += vals.size
            missing += int(np.isnan(vals).sum())
        return missing / total if total else 1.0

    def _spatial_monthly_mean(self) -> np.ndarray:
        """Mean over cells per (year, month), used to fill missing cells."""
        if "spatial_mean" not in self._cache:
            with np.errstate(invalid="ignore"):
                sm = np.nanmean(self.values, axis=0)
            self._cache["spatial_mean"] = sm
        return self._cache["spatial_mean"]

    def filled_cell_values(self, cell: int) -> np.ndarray:
        """(n_years, 12) values at a cell with missing entries imputed.

        Missing entries take the variable's spatial mean for that same
        (year, month); months missing everywhere fall back to the variable's
        overall mean.
        """
        vals = self.values[cell].copy()
        mask = np.isnan(vals)
        if mask.any():
            spatial = self._spatial_monthly_mean()
            vals[mask] = spatial[mask]
            still = np.isnan(vals)
            if still.any():
                overall = np.nanmean(self.values)
                if np.isnan(overall):
                    raise SiraError(
                        f"variable {self.variable!r} has no data anywhere")
                vals[still] = overall
        return vals


def _half_pitch(coords: np.ndarray) -> float:
    """Half the typical spacing of sorted unique grid coordinates."""
    if len(coords) < 2:
        return 0.5
    return float(np.median(np.diff(coords))) / 2.0


def delta_notation(ratio_sample: float, ratio_standard: float) -> float:
    """Per-mil deviation of an isotope ratio from a reference standard."""
    if ratio_standard <= 0:
        raise ValueError(f"standard ratio must be positive, got {ratio_standard}")
    return (ratio_sample / ratio_standard - 1.0) * 1000.0


def _parse_float(text, path, line, column):
    try:
        return float(text)
    except ValueError:
        raise ParseError(path, line, f"bad {column} value {text!r}") from None


def ingest_samples(path) -> list[Sample]:
    """Read a sample CSV into Samples (features left unset)."""
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if [h.strip() for h in header] != SAMPLE_HEADER:
            raise ParseError(path, 1,
                             f"expected header {','.join(SAMPLE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(SAMPLE_HEADER):
                raise ParseError(path, lineno,
                                 f"expected {len(SAMPLE_HEADER)} fields, got {len(row)}")
            lat = _parse_float(row[0], path, lineno, "lat")
            lon = _parse_float(row[1], path, lineno, "lon")
            try:
                location = GeoLocation(lat, lon)
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            iso_kwargs = {}
            for name, cell in zip(ISOTOPE_NAMES, row[2:]):
                cell = cell.strip()
                iso_kwargs[name] = (None if cell == ""
                                    else _parse_float(cell, path, lineno, name))
            try:
                isotopes = IsotopeVector(**iso_kwargs)
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            samples.append(Sample(location=location, isotopes=isotopes))
    return samples


def write_samples_csv(path, samples) -> None:
    """Write samples in the ingestion CSV format (canonical float text)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SAMPLE_HEADER)
        for s in samples:
            row = [str(s.location.lat), str(s.location.lon)]
            for name in ISOTOPE_NAMES:
                v = getattr(s.isotopes, name)
                row.append("" if v is None else str(v))
            writer.writerow(row)


def read_atmospheric_csv(path) -> list[AtmosphericSeries]:
    """Read a long-format atmospheric CSV into one series per variable."""
    records: dict[str, list] = {}
    keys_seen: set = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        if [h.strip() for h in header] != ATMOS_HEADER:
            raise ParseError(path, 1,
                             f"expected header {','.join(ATMOS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(ATMOS_HEADER):
                raise ParseError(path, lineno,
                                 f"expected {len(ATMOS_HEADER)} fields, got {len(row)}")
            variable = row[0].strip()
            if not variable:
                raise ParseError(path, lineno, "empty variable name")
            lat = _parse_float(row[1], path, lineno, "lat")
            lon = _parse_float(row[2], path, lineno, "lon")
            try:
                year = int(row[3])
                month = int(row[4])
            except ValueError:
                raise ParseError(path, lineno,
                                 f"bad year/month {row[3]!r},{row[4]!r}") from None
            if not 1 <= month <= 12:
                raise ParseError(path, lineno, f"month {month} outside 1..12")
            value = _parse_float(row[5], path, lineno, "value")
            key = (variable, lat, lon, year, month)
            if key in keys_seen:
                raise ParseError(path, lineno, f"duplicate key {key}")
            keys_seen.add(key)
            records.setdefault(variable, []).append((lat, lon, year, month, value))
    return [AtmosphericSeries.from_records(var, recs)
            for var, recs in sorted(records.items())]


def write_atmospheric_csv(path, series_list) -> None:
    """Write series back out in the long CSV format (observed cells only)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ATMOS_HEADER)
        for series in series_list:
            for ci, (lat, lon) in enumerate(series.cells):
                for yi, year in enumerate(series.years):
                    for month in range(12):
                        v = series.values[ci, yi, month]
                        if np.isnan(v):
                            continue
                        writer.writerow([series.variable, str(lat), str(lon),
                                         year, month + 1, str(v)])


def drop_sparse_variables(series_list, samples, threshold: float = 0.5):
    """Drop variables missing in more than `threshold` of sample lookups."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    locations = [s.location for s in samples]
    kept = [s for s in series_list
            if s.missing_fraction(locations) <= threshold]
    if not kept:
        raise SiraError("all atmospheric variables exceeded the missing-value "
                        f"threshold {threshold}")
    return kept


def _statistics_for_mode(mode: str) -> tuple[str, ...]:
    if mode == "mean":
        return ("",)
    if mode == "mean+seasonal-amplitude":
        return ("", ":seasonal_amplitude")
    if mode == "mean+interannual-std":
        return ("", ":interannual_std")
    raise ValueError(f"unknown aggregation mode {mode!r}; "
                     f"choose from {AGGREGATION_MODES}")


def _cell_statistic(filled: np.ndarray, suffix: str) -> float:
    if suffix == "":
        return float(filled.mean())
    if suffix == ":seasonal_amplitude":
        climatology = filled.mean(axis=0)
        return float(climatology.max() - climatology.min())
    if suffix == ":interannual_std":
        yearly = filled.mean(axis=1)
        if len(yearly) < 2:
            return 0.0
        return float(yearly.std(ddof=1))
    raise ValueError(f"unknown statistic {suffix!r}")


def aggregate_features(series_list, location: GeoLocation,
                       mode: str = "mean") -> FeatureVector:
    """Temporal aggregation of every variable at the nearest grid cell."""
    stats = _statistics_for_mode(mode)
    if not series_list:
        raise SiraError("no atmospheric series supplied")
    names = []
    values = []
    for series in sorted(series_list, key=lambda s: s.variable):
        if not series.covers(location):
            raise CoverageError(
                f"location ({location.lat}, {location.lon}) outside coverage "
                f"of variable {series.variable!r}")
        cell = series.nearest_cell(location)
        filled = series.filled_cell_values(cell)
        for suffix in stats:
            names.append(series.variable + suffix)
            values.append(_cell_statistic(filled, suffix))
    return FeatureVector(names=tuple(names), values=np.array(values))


def features_for_schema(series_list, location: GeoLocation,
                        schema: tuple[str, ...]) -> np.ndarray:
    """Feature values at a location for an existing schema (model reuse path)."""
    by_name = {s.variable: s for s in series_list}
    out = np.empty(len(schema))
    for i, entry in enumerate(schema):
        variable, _, suffix = entry.partition(":")
        suffix = ":" + suffix if suffix else ""
        series = by_name.get(variable)
        if series is None:
            raise SiraError(f"schema variable {variable!r} absent from "
                            "the supplied atmospheric data")
        if not series.covers(location):
            raise CoverageError(
                f"location ({location.lat}, {location.lon}) outside coverage "
                f"of variable {variable!r}")
        filled = series.filled_cell_values(series.nearest_cell(location))
        out[i] = _cell_statistic(filled, suffix)
    return out


def attach_features(samples, series_list, mode: str = "mean") -> list[Sample]:
    """Return samples with aggregated FeatureVectors attached."""
    return [Sample(location=s.location, isotopes=s.isotopes,
                   features=aggregate_features(series_list, s.location, mode))
            for s in samples]


def _spearman_abs(x: np.ndarray, y: np.ndarray) -> float:
    """|Spearman rho|; 0 when either input is constant or too short."""
    if len(x) < 3 or np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    rx = _sstats.rankdata(x)
    ry = _sstats.rankdata(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        return 0.0
    return abs(float(rx @ ry) / denom)


def select_features(samples, k: int) -> tuple[int, ...]:
    """Union over tasks of the top-k features by |Spearman| with each task.

    Ties break by feature name. Returns sorted feature indices; if k is at
    least the dimension, every index is returned.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not samples:
        raise ValueError("no samples supplied")
    schema = samples[0].features
    if schema is None:
        raise ValueError("samples carry no features; aggregate first")
    names = schema.names
    dim = len(names)
    if k >= dim:
        return tuple(range(dim))
    feat = np.array([s.features.values for s in samples])
    iso = np.array([s.isotopes.as_array() for s in samples])
    selected: set[int] = set()
    for t in range(len(ISOTOPE_NAMES)):
        present = ~np.isnan(iso[:, t])
        if present.sum() < 3:
            continue
        target = iso[present, t]
        scores = [
            (-_spearman_abs(feat[present, d], target), names[d], d)
            for d in range(dim)
        ]
        scores.sort()
        selected.update(d for _, _, d in scores[:k])
    if not selected:
        return tuple(range(dim))
    return tuple(sorted(selected))


def apply_selection(samples, indices) -> list[Sample]:
    """Restrict every sample's FeatureVector to the given feature indices."""
    indices = tuple(indices)
    out = []
    for s in samples:
        fv = s.features
        sub = FeatureVector(names=tuple(fv.names[i] for i in indices),
                            values=fv.values[list(indices)])
        out.append(Sample(location=s.location, isotopes=s.isotopes, features=sub))
    return out


def feature_matrix(samples) -> np.ndarray:
    """(n, D) feature matrix; raises if any sample lacks features."""
    rows = []
    for s in samples:
        if s.features is None:
            raise ValueError("sample without features")
        rows.append(s.features.values)
    return np.array(rows)


def location_matrix(samples) -> np.ndarray:
    """(n, 2) matrix of (lat, lon) in degrees."""
    return np.array([[s.location.lat, s.location.lon] for s in samples])


def isotope_matrix(samples, tasks=ISOTOPE_NAMES) -> np.ndarray:
    """(n, M) isotope values with NaN for missing entries."""
    return np.array([s.isotopes.as_array(tuple(tasks)) for s in samples])
