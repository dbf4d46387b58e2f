"""Grid, raster, hexagon-tessellation, and plot-footprint geometry primitives.

All geometry lives in one planar Cartesian CRS (meters). Rasters are
row-major with the north row first, matching the ASCII grid interchange
format. Polygon/pixel intersection areas are computed by exact polygon
clipping (shapely), not by point sampling, so results are bit-stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Point, Polygon, box
from shapely.prepared import prep

Extent = tuple[float, float, float, float]  # xmin, ymin, xmax, ymax

SUBPLOT_RADIUS = 7.32
SUBPLOT_OFFSET = 36.6
SUBPLOT_AZIMUTHS = (360.0, 120.0, 240.0)

#: Segments used when a circle is approximated as a polygon for exact
#: clipping. A 720-gon keeps the relative area error below 1e-5.
CIRCLE_SEGMENTS = 720


@dataclass(frozen=True)
class GridSpec:
    """Pixel-aligned grid geometry shared by all rasters in a run."""

    origin_x: float
    origin_y: float
    n_cols: int
    n_rows: int
    cell_size: float = 30.0
    nodata: float = -9999.0

    def __post_init__(self) -> None:
        if self.cell_size <= 0:
            raise ValueError("cell_size must be > 0")
        if self.n_cols < 1 or self.n_rows < 1:
            raise ValueError("grid must have at least one row and column")

    @property
    def extent(self) -> Extent:
        return (
            self.origin_x,
            self.origin_y,
            self.origin_x + self.n_cols * self.cell_size,
            self.origin_y + self.n_rows * self.cell_size,
        )

    @property
    def cell_area_ha(self) -> float:
        return self.cell_size * self.cell_size / 10_000.0

    def cell_index(self, x, y):
        """Row/col of the cell containing (x, y); row 0 is the north row."""
        col = np.floor((np.asarray(x) - self.origin_x) / self.cell_size).astype(np.int64)
        row_from_bottom = np.floor((np.asarray(y) - self.origin_y) / self.cell_size).astype(np.int64)
        row = self.n_rows - 1 - row_from_bottom
        return row, col

    def contains(self, x, y):
        xmin, ymin, xmax, ymax = self.extent
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= xmin) & (x < xmax) & (y >= ymin) & (y < ymax)

    def cell_center(self, row, col):
        x = self.origin_x + (np.asarray(col) + 0.5) * self.cell_size
        y = self.origin_y + (self.n_rows - np.asarray(row) - 0.5) * self.cell_size
        return x, y

    def cell_polygon(self, row: int, col: int) -> Polygon:
        x0 = self.origin_x + col * self.cell_size
        y1 = self.origin_y + (self.n_rows - row) * self.cell_size
        return box(x0, y1 - self.cell_size, x0 + self.cell_size, y1)


@dataclass
class Raster:
    """Single-band raster; values shape (n_rows, n_cols), north row first."""

    spec: GridSpec
    values: np.ndarray
    band_name: str = "band"

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.spec.n_rows, self.spec.n_cols):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid "
                f"({self.spec.n_rows}, {self.spec.n_cols})"
            )

    @property
    def nodata_mask(self) -> np.ndarray:
        return self.values == self.spec.nodata

    def filled(self, fill=np.nan) -> np.ndarray:
        out = self.values.copy()
        out[self.nodata_mask] = fill
        return out

    def copy(self, values: np.ndarray | None = None, band_name: str | None = None) -> "Raster":
        return Raster(
            self.spec,
            self.values.copy() if values is None else values,
            self.band_name if band_name is None else band_name,
        )


def constant_raster(spec: GridSpec, value: float, band_name: str = "band") -> Raster:
    return Raster(spec, np.full((spec.n_rows, spec.n_cols), value, dtype=np.float64), band_name)


# ---------------------------------------------------------------------------
# ASCII grid interchange format


def write_ascii_grid(raster: Raster, path) -> None:
    spec = raster.spec
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"ncols {spec.n_cols}\n")
        fh.write(f"nrows {spec.n_rows}\n")
        fh.write(f"xllcorner {spec.origin_x!r}\n")
        fh.write(f"yllcorner {spec.origin_y!r}\n")
        fh.write(f"cellsize {spec.cell_size!r}\n")
        fh.write(f"NODATA_value {spec.nodata!r}\n")
        for row in raster.values:
            fh.write(" ".join(repr(v) for v in row.tolist()))
            fh.write("\n")


def read_ascii_grid(path, band_name: str = "band") -> Raster:
    with open(path, "r", encoding="utf-8") as fh:
        header = {}
        for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value"):
            name, value = fh.readline().split()
            if name != key:
                raise ValueError(f"expected header line '{key}', got '{name}'")
            header[key] = value
        spec = GridSpec(
            origin_x=float(header["xllcorner"]),
            origin_y=float(header["yllcorner"]),
            n_cols=int(header["ncols"]),
            n_rows=int(header["nrows"]),
            cell_size=float(header["cellsize"]),
            nodata=float(header["NODATA_value"]),
        )
        values = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    return Raster(spec, values, band_name)


def write_polygon_csv(polygon: Polygon, path) -> None:
    """Minimal CSV polygon encoding: header ``x,y`` then exterior vertices."""
    coords = list(polygon.exterior.coords)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y\n")
        for x, y in coords:
            fh.write(f"{x!r},{y!r}\n")


def read_polygon_csv(path) -> Polygon:
    xs, ys = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "x,y":
            raise ValueError(f"expected polygon CSV header 'x,y', got {header!r}")
        for line in fh:
            if not line.strip():
                continue
            a, b = line.split(",")
            xs.append(float(a))
            ys.append(float(b))
    return Polygon(zip(xs, ys))


# ---------------------------------------------------------------------------
# Plot footprints


def circle_polygon(cx: float, cy: float, radius: float, segments: int = CIRCLE_SEGMENTS) -> Polygon:
    """Regular polygon approximation of a circle, used for exact clipping."""
    ang = np.linspace(0.0, 2.0 * math.pi, segments, endpoint=False)
    return Polygon(np.column_stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)]))


@dataclass(frozen=True)
class PlotFootprint:
    """Four-subplot field plot: one central circle plus three satellites.

    Azimuth 0/360 points grid north (+y) and runs clockwise, so subplot k
    sits at center + offset * (sin az, cos az).
    """

    center: tuple[float, float]
    subplot_radius: float = SUBPLOT_RADIUS
    subplot_offset: float = SUBPLOT_OFFSET
    azimuths: tuple[float, ...] = SUBPLOT_AZIMUTHS

    @property
    def subplot_centers(self) -> list[tuple[float, float]]:
        cx, cy = self.center
        centers = [(cx, cy)]
        for az in self.azimuths:
            rad = math.radians(az)
            centers.append(
                (cx + self.subplot_offset * math.sin(rad), cy + self.subplot_offset * math.cos(rad))
            )
        return centers

    @property
    def area(self) -> float:
        return 4.0 * math.pi * self.subplot_radius**2

    def polygon(self) -> Polygon:
        parts = [circle_polygon(cx, cy, self.subplot_radius) for cx, cy in self.subplot_centers]
        out = parts[0]
        for part in parts[1:]:
            out = out.union(part)
        return out


def build_plot_footprint(center: tuple[float, float]) -> PlotFootprint:
    cx, cy = center
    if not (math.isfinite(cx) and math.isfinite(cy)):
        raise ValueError("plot center coordinates must be finite")
    return PlotFootprint((float(cx), float(cy)))


# ---------------------------------------------------------------------------
# Hexagon tessellation

_SQRT3 = math.sqrt(3.0)


def hexagon_area(spacing_d: float) -> float:
    """Area of one cell of a hex tessellation with centroid spacing d."""
    return (_SQRT3 / 2.0) * spacing_d**2


@dataclass
class HexTessellation:
    """Flat-topped hexagon lattice covering an extent, seeded random offset."""

    spacing_d: float
    extent: Extent
    cells: list[tuple[int, Polygon]]
    _axial_to_id: dict = field(repr=False, default_factory=dict)
    _offset: tuple[float, float] = (0.0, 0.0)

    @property
    def circumradius(self) -> float:
        return self.spacing_d / _SQRT3

    def cell_id_at(self, x: float, y: float) -> int:
        """Id of the unique cell containing (x, y); total on the extent interior."""
        r_hex = self.circumradius
        ox, oy = self._offset
        px = (x - ox) / r_hex
        py = (y - oy) / r_hex
        q = (2.0 / 3.0) * px
        r = (-1.0 / 3.0) * px + (_SQRT3 / 3.0) * py
        qi, ri = _axial_round(q, r)
        key = (qi, ri)
        if key not in self._axial_to_id:
            raise KeyError(f"point ({x}, {y}) outside tessellated area")
        return self._axial_to_id[key]

    def centroid(self, cell_id: int) -> tuple[float, float]:
        poly = dict(self.cells)[cell_id]
        c = poly.centroid
        return (c.x, c.y)


def _axial_round(q: float, r: float) -> tuple[int, int]:
    s = -q - r
    qi, ri, si = round(q), round(r), round(s)
    dq, dr, ds = abs(qi - q), abs(ri - r), abs(si - s)
    if dq > dr and dq > ds:
        qi = -ri - si
    elif dr > ds:
        ri = -qi - si
    return int(qi), int(ri)


def _hex_vertices(cx: float, cy: float, r_hex: float) -> np.ndarray:
    ang = np.radians(np.arange(0, 360, 60, dtype=np.float64))
    return np.column_stack([cx + r_hex * np.cos(ang), cy + r_hex * np.sin(ang)])


def tessellate_hexagons(extent: Extent, spacing_d: float, seed: int) -> HexTessellation:
    """Tile ``extent`` with flat-topped hexagons at centroid spacing ``spacing_d``.

    The lattice origin gets a random offset drawn uniformly from one lattice
    cell using ``seed``, so placement is random but a pure function of
    (extent, spacing, seed).
    """
    if spacing_d <= 0:
        raise ValueError("spacing_d must be > 0")
    xmin, ymin, xmax, ymax = extent
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("degenerate extent")

    r_hex = spacing_d / _SQRT3
    rng = np.random.default_rng(seed)
    # one lattice cell: 1.5 R horizontally, sqrt(3) R vertically
    ox = xmin + rng.uniform(0.0, 1.5 * r_hex)
    oy = ymin + rng.uniform(0.0, _SQRT3 * r_hex)

    # axial -> cartesian for flat-topped hexes: x = 1.5 R q, y = sqrt(3) R (r + q/2)
    pad = 2.0 * r_hex
    q_lo = math.floor((xmin - pad - ox) / (1.5 * r_hex)) - 1
    q_hi = math.ceil((xmax + pad - ox) / (1.5 * r_hex)) + 1
    cells: list[tuple[int, Polygon]] = []
    axial_to_id: dict[tuple[int, int], int] = {}
    next_id = 0
    for q in range(q_lo, q_hi + 1):
        cx = ox + 1.5 * r_hex * q
        if cx < xmin - pad or cx > xmax + pad:
            continue
        r_lo = math.floor((ymin - pad - oy) / (_SQRT3 * r_hex) - q / 2.0) - 1
        r_hi = math.ceil((ymax + pad - oy) / (_SQRT3 * r_hex) - q / 2.0) + 1
        for r in range(r_lo, r_hi + 1):
            cy = oy + _SQRT3 * r_hex * (r + q / 2.0)
            if cy < ymin - pad or cy > ymax + pad:
                continue
            axial_to_id[(q, r)] = next_id
            cells.append((next_id, Polygon(_hex_vertices(cx, cy, r_hex))))
            next_id += 1
    return HexTessellation(
        spacing_d=spacing_d,
        extent=extent,
        cells=cells,
        _axial_to_id=axial_to_id,
        _offset=(ox, oy),
    )


# ---------------------------------------------------------------------------
# Zonal / resampling operations


def area_weighted_mean(raster: Raster, polygon: Polygon) -> float | None:
    """Area-weighted mean of non-nodata pixel values under ``polygon``.

    Returns None (distinct from 0) when no non-nodata pixel intersects.
    """
    spec = raster.spec
    pxmin, pymin, pxmax, pymax = polygon.bounds
    xmin, ymin, xmax, ymax = spec.extent
    if pxmax <= xmin or pxmin >= xmax or pymax <= ymin or pymin >= ymax:
        return None

    col_lo = max(0, int(math.floor((pxmin - spec.origin_x) / spec.cell_size)))
    col_hi = min(spec.n_cols - 1, int(math.floor((pxmax - spec.origin_x) / spec.cell_size)))
    rb_lo = max(0, int(math.floor((pymin - spec.origin_y) / spec.cell_size)))
    rb_hi = min(spec.n_rows - 1, int(math.floor((pymax - spec.origin_y) / spec.cell_size)))

    prepared = prep(polygon)
    total_weight = 0.0
    total_value = 0.0
    for rb in range(rb_lo, rb_hi + 1):
        row = spec.n_rows - 1 - rb
        for col in range(col_lo, col_hi + 1):
            value = raster.values[row, col]
            if value == spec.nodata:
                continue
            pixel = spec.cell_polygon(row, col)
            if not prepared.intersects(pixel):
                continue
            area = polygon.intersection(pixel).area
            if area <= 0.0:
                continue
            total_weight += area
            total_value += value * area
    if total_weight == 0.0:
        return None
    return total_value / total_weight


def resample_nearest(raster: Raster, target: GridSpec) -> Raster:
    """Nearest-neighbor resample: each target cell takes the value of the
    source cell containing its center; no overlap yields nodata."""
    rows = np.arange(target.n_rows)
    cols = np.arange(target.n_cols)
    cgrid, rgrid = np.meshgrid(cols, rows)
    x, y = target.cell_center(rgrid, cgrid)
    src = raster.spec
    inside = src.contains(x, y)
    out = np.full((target.n_rows, target.n_cols), target.nodata, dtype=np.float64)
    srow, scol = src.cell_index(x[inside], y[inside])
    vals = raster.values[srow, scol]
    vals = np.where(vals == src.nodata, target.nodata, vals)
    out[inside] = vals
    return Raster(target, out, raster.band_name)
