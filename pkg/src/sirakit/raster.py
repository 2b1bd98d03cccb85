"""Grid-wise isoscape prediction and ESRI ASCII grid files.

Grids store cell values row-major from the northernmost row down. Files
use the ASCII grid header (ncols, nrows, xllcorner, yllcorner, cellsize,
NODATA_value) with values printed to 6 significant digits, which makes
write -> read -> write byte-stable.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datamodel import GeoLocation, features_for_schema
from .errors import CoverageError, ParseError, SiraError

NODATA = -9999.0


@dataclass
class RasterGrid:
    lat_min: float
    lon_min: float
    cell_size: float
    values: np.ndarray          # (nrows, ncols), row 0 is the northern edge
    nodata: float = NODATA

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("raster values must be 2-D")
        if self.cell_size <= 0:
            raise ValueError("cell size must be positive")

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def lat_max(self) -> float:
        return self.lat_min + self.nrows * self.cell_size

    @property
    def lon_max(self) -> float:
        return self.lon_min + self.ncols * self.cell_size

    def cell_center(self, row: int, col: int) -> GeoLocation:
        lat = self.lat_max - (row + 0.5) * self.cell_size
        lon = self.lon_min + (col + 0.5) * self.cell_size
        return GeoLocation(lat, lon)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_ascii_grid(grid: RasterGrid, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"ncols {grid.ncols}\n")
        fh.write(f"nrows {grid.nrows}\n")
        fh.write(f"xllcorner {_fmt(grid.lon_min)}\n")
        fh.write(f"yllcorner {_fmt(grid.lat_min)}\n")
        fh.write(f"cellsize {_fmt(grid.cell_size)}\n")
        fh.write(f"NODATA_value {_fmt(grid.nodata)}\n")
        for row in grid.values:
            fh.write(" ".join(_fmt(v) for v in row))
            fh.write("\n")


def read_ascii_grid(path) -> RasterGrid:
    def header_line(lineno, line, key):
        parts = line.split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise ParseError(path, lineno, f"expected '{key} <value>'")
        return parts[1]

    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 6:
        raise ParseError(path, 1, "truncated header")
    try:
        ncols = int(header_line(1, lines[0], "ncols"))
        nrows = int(header_line(2, lines[1], "nrows"))
        xll = float(header_line(3, lines[2], "xllcorner"))
        yll = float(header_line(4, lines[3], "yllcorner"))
        cell = float(header_line(5, lines[4], "cellsize"))
        nodata = float(header_line(6, lines[5], "nodata_value"))
    except ValueError as exc:
        raise ParseError(path, 1, f"bad header value: {exc}") from None
    if len(lines) < 6 + nrows:
        raise ParseError(path, len(lines), f"expected {nrows} data rows")
    values = np.empty((nrows, ncols))
    for i in range(nrows):
        lineno = 7 + i
        parts = lines[6 + i].split()
        if len(parts) != ncols:
            raise ParseError(path, lineno,
                             f"expected {ncols} values, got {len(parts)}")
        try:
            values[i] = [float(p) for p in parts]
        except ValueError:
            raise ParseError(path, lineno, "non-numeric cell value") from None
    return RasterGrid(lat_min=yll, lon_min=xll, cell_size=cell,
                      values=values, nodata=nodata)


def _predict_cell(model, series_list, task, loc):
    features = features_for_schema(series_list, loc, model.feature_names)
    if hasattr(model, "predict_batch"):          # multi-task model
        means, covs = model.predict_batch(features[None, :])
        t = model.tasks.index(task)
        return float(means[0][t]), float(np.sqrt(max(covs[0][t, t], 0.0)))
    if task != model.task:
        raise SiraError(f"model predicts task {model.task!r}, not {task!r}")
    dist = model.predict(np.array([[loc.lat, loc.lon]]), features[None, :])
    return float(dist.mean[0]), float(np.sqrt(max(dist.variance[0], 0.0)))


def render_isoscape(model, series_list, bounds, cell_size: float, task: str,
                    threads: int = 1):
    """Mean and standard-deviation rasters over a (lat, lon) bounding box.

    bounds = (lat_min, lat_max, lon_min, lon_max). Cells outside
    atmospheric coverage receive the NODATA sentinel.
    """
    lat_min, lat_max, lon_min, lon_max = bounds
    if lat_max <= lat_min or lon_max <= lon_min:
        raise ValueError(f"degenerate bounds {bounds}")
    if hasattr(model, "tasks") and task not in model.tasks:
        raise SiraError(f"task {task!r} not among model tasks {model.tasks}")
    nrows = max(1, int(round((lat_max - lat_min) / cell_size)))
    ncols = max(1, int(round((lon_max - lon_min) / cell_size)))
    mean_vals = np.full((nrows, ncols), NODATA)
    std_vals = np.full((nrows, ncols), NODATA)
    grid = RasterGrid(lat_min=lat_min, lon_min=lon_min, cell_size=cell_size,
                      values=mean_vals)

    def render_row(i):
        covered = 0
        for j in range(ncols):
            loc = grid.cell_center(i, j)
            try:
                m, s = _predict_cell(model, series_list, task, loc)
            except CoverageError:
                continue
            mean_vals[i, j] = m
            std_vals[i, j] = s
            covered += 1
        return covered

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            covered = sum(pool.map(render_row, range(nrows)))
    else:
        covered = sum(render_row(i) for i in range(nrows))
    if covered == 0:
        raise SiraError("no raster cell falls inside atmospheric coverage")
    mean_grid = RasterGrid(lat_min=lat_min, lon_min=lon_min,
                           cell_size=cell_size, values=mean_vals)
    std_grid = RasterGrid(lat_min=lat_min, lon_min=lon_min,
                          cell_size=cell_size, values=std_vals)
    return mean_grid, std_grid
