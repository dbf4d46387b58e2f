"""Point-cloud parsing, ground modeling, height normalization, and clipping.

Clouds are stored as parallel numpy arrays rather than per-record objects;
operations are pure and return new clouds. The text interchange format (PCX)
is a simple whitespace-separated table with a one-line header.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from shapely.geometry import MultiPoint

from .geodata import GridSpec, Raster, circle_polygon

GROUND_CLASS = 2

_PCX_COLUMNS = ("x", "y", "z", "return_number", "num_returns", "classification")


@dataclass
class PointCloud:
    """Immutable-by-convention column store of LiDAR returns."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    return_number: np.ndarray
    num_returns: np.ndarray
    classification: np.ndarray
    height_normalized: bool = False

    def __post_init__(self) -> None:
        n = len(self.x)
        for name in ("y", "z", "return_number", "num_returns", "classification"):
            if len(getattr(self, name)) != n:
                raise ValueError("point attribute arrays must share one length")

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def from_arrays(cls, x, y, z, return_number=None, num_returns=None,
                    classification=None, height_normalized=False) -> "PointCloud":
        x = np.asarray(x, dtype=np.float64)
        n = len(x)
        if return_number is None:
            return_number = np.ones(n, dtype=np.int32)
        if num_returns is None:
            num_returns = np.maximum(np.asarray(return_number, dtype=np.int32), 1)
        if classification is None:
            classification = np.ones(n, dtype=np.int32)
        return cls(
            x=x,
            y=np.asarray(y, dtype=np.float64),
            z=np.asarray(z, dtype=np.float64),
            return_number=np.asarray(return_number, dtype=np.int32),
            num_returns=np.asarray(num_returns, dtype=np.int32),
            classification=np.asarray(classification, dtype=np.int32),
            height_normalized=height_normalized,
        )

    def select(self, mask_or_index) -> "PointCloud":
        return PointCloud(
            x=self.x[mask_or_index],
            y=self.y[mask_or_index],
            z=self.z[mask_or_index],
            return_number=self.return_number[mask_or_index],
            num_returns=self.num_returns[mask_or_index],
            classification=self.classification[mask_or_index],
            height_normalized=self.height_normalized,
        )


def concat_clouds(clouds: list[PointCloud]) -> PointCloud:
    if not clouds:
        return PointCloud.from_arrays([], [], [])
    flag = clouds[0].height_normalized
    return PointCloud(
        x=np.concatenate([c.x for c in clouds]),
        y=np.concatenate([c.y for c in clouds]),
        z=np.concatenate([c.z for c in clouds]),
        return_number=np.concatenate([c.return_number for c in clouds]),
        num_returns=np.concatenate([c.num_returns for c in clouds]),
        classification=np.concatenate([c.classification for c in clouds]),
        height_normalized=flag,
    )


class PCXError(ValueError):
    pass


def parse_pcx(stream) -> PointCloud:
    """Parse the PCX text format.

    UTF-8 text; '#' comment lines ignored; header line ``PCX 1``; data lines
    ``x y z return_number num_returns classification`` separated by single
    spaces. Malformed lines raise PCXError naming the 1-based line number.
    """
    if isinstance(stream, (str, bytes)):
        raw = stream.decode("utf-8") if isinstance(stream, bytes) else stream
    else:
        raw = stream.read()
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")

    lines = raw.splitlines()
    header_lineno = None
    for lineno, line in enumerate(lines, start=1):
        if line.startswith("#") or not line.strip():
            continue
        if line.strip() != "PCX 1":
            raise PCXError(f"line {lineno}: expected header 'PCX 1', got {line.strip()!r}")
        header_lineno = lineno
        break
    if header_lineno is None:
        raise PCXError("missing 'PCX 1' header line")

    data_lines = []
    data_linenos = []
    for lineno, line in enumerate(lines[header_lineno:], start=header_lineno + 1):
        if line.startswith("#") or not line.strip():
            continue
        data_lines.append(line)
        data_linenos.append(lineno)
    if not data_lines:
        return PointCloud.from_arrays([], [], [])

    try:
        frame = pd.read_csv(
            io.StringIO("\n".join(data_lines)),
            sep=" ",
            header=None,
            names=_PCX_COLUMNS,
            dtype={"x": np.float64, "y": np.float64, "z": np.float64,
                   "return_number": np.int32, "num_returns": np.int32,
                   "classification": np.int32},
        )
    except (ValueError, pd.errors.ParserError):
        frame = None
    if frame is None or frame.isna().any().any():
        # slow path only to localize the offending line
        for line, lineno in zip(data_lines, data_linenos):
            fields = line.split(" ")
            if len(fields) != 6:
                raise PCXError(f"line {lineno}: expected 6 fields, got {len(fields)}")
            try:
                float(fields[0]), float(fields[1]), float(fields[2])
                int(fields[3]), int(fields[4]), int(fields[5])
            except ValueError as exc:
                raise PCXError(f"line {lineno}: {exc}") from exc
        raise PCXError("malformed PCX data")

    bad = frame["return_number"].values > frame["num_returns"].values
    if bad.any():
        lineno = data_linenos[int(np.argmax(bad))]
        raise PCXError(f"line {lineno}: return_number exceeds num_returns")
    low = frame["return_number"].values < 1
    if low.any():
        lineno = data_linenos[int(np.argmax(low))]
        raise PCXError(f"line {lineno}: return_number must be >= 1")
    coords = frame[["x", "y", "z"]].values
    if not np.isfinite(coords).all():
        bad_rows = ~np.isfinite(coords).all(axis=1)
        lineno = data_linenos[int(np.argmax(bad_rows))]
        raise PCXError(f"line {lineno}: non-finite coordinate")

    return PointCloud.from_arrays(
        frame["x"].values, frame["y"].values, frame["z"].values,
        frame["return_number"].values, frame["num_returns"].values,
        frame["classification"].values,
    )


def write_pcx(cloud: PointCloud, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("PCX 1\n")
        frame = pd.DataFrame({
            "x": cloud.x, "y": cloud.y, "z": cloud.z,
            "rn": cloud.return_number, "nr": cloud.num_returns,
            "cl": cloud.classification,
        })
        frame.to_csv(fh, sep=" ", header=False, index=False, float_format="%.6f",
                     lineterminator="\n")


# ---------------------------------------------------------------------------
# Ground model and normalization


@dataclass
class GroundModel:
    """Per-cell mean ground elevation with nearest-cell fill."""

    spec: GridSpec
    ground_elevation: Raster = field(repr=False, default=None)

    def interpolate(self, x, y):
        """Bilinear interpolation of ground elevation at query points."""
        spec = self.spec
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        # fractional position in the cell-center lattice (col-major x, row 0 north)
        fx = (x - spec.origin_x) / spec.cell_size - 0.5
        fy = (y - spec.origin_y) / spec.cell_size - 0.5
        fx = np.clip(fx, 0.0, spec.n_cols - 1.0)
        fy = np.clip(fy, 0.0, spec.n_rows - 1.0)
        c0 = np.clip(np.floor(fx).astype(np.int64), 0, spec.n_cols - 2 if spec.n_cols > 1 else 0)
        rb0 = np.clip(np.floor(fy).astype(np.int64), 0, spec.n_rows - 2 if spec.n_rows > 1 else 0)
        tx = fx - c0
        ty = fy - rb0
        vals = self.ground_elevation.values
        r0 = spec.n_rows - 1 - rb0            # bottom row of the 2x2 patch
        r1 = np.maximum(r0 - 1, 0)            # row above
        c1 = np.minimum(c0 + 1, spec.n_cols - 1)
        v00 = vals[r0, c0]
        v10 = vals[r0, c1]
        v01 = vals[r1, c0]
        v11 = vals[r1, c1]
        return (v00 * (1 - tx) * (1 - ty) + v10 * tx * (1 - ty)
                + v01 * (1 - tx) * ty + v11 * tx * ty)


def build_ground_model(cloud: PointCloud, spec: GridSpec) -> GroundModel:
    """Mean class-2 elevation per cell; empty cells filled from the nearest
    non-empty cell (Euclidean center distance, ties to the lowest cell index)."""
    if cloud.height_normalized:
        raise ValueError("cloud is already height-normalized")
    ground = cloud.classification == GROUND_CLASS
    if not ground.any():
        raise ValueError("no ground (class 2) returns in cloud")
    gx, gy, gz = cloud.x[ground], cloud.y[ground], cloud.z[ground]

    row, col = spec.cell_index(gx, gy)
    row = np.clip(row, 0, spec.n_rows - 1)
    col = np.clip(col, 0, spec.n_cols - 1)
    flat = row * spec.n_cols + col
    n_cells = spec.n_rows * spec.n_cols
    sums = np.bincount(flat, weights=gz, minlength=n_cells)
    counts = np.bincount(flat, minlength=n_cells)
    values = np.full(n_cells, np.nan)
    nonempty = counts > 0
    values[nonempty] = sums[nonempty] / counts[nonempty]

    if not nonempty.all():
        rows = np.arange(n_cells) // spec.n_cols
        cols = np.arange(n_cells) % spec.n_cols
        cx, cy = spec.cell_center(rows, cols)
        src_idx = np.flatnonzero(nonempty)
        empty_idx = np.flatnonzero(~nonempty)
        # argmin over the distance matrix picks the lowest source cell index on ties
        for start in range(0, len(empty_idx), 4096):
            chunk = empty_idx[start:start + 4096]
            d2 = (cx[chunk, None] - cx[src_idx][None, :]) ** 2 \
                + (cy[chunk, None] - cy[src_idx][None, :]) ** 2
            values[chunk] = values[src_idx[np.argmin(d2, axis=1)]]

    elev = Raster(spec, values.reshape(spec.n_rows, spec.n_cols), "ground_elevation")
    return GroundModel(spec=spec, ground_elevation=elev)


def normalize_heights(cloud: PointCloud, ground: GroundModel) -> PointCloud:
    """Subtract interpolated ground elevation, clamping below-ground returns to 0."""
    if cloud.height_normalized:
        raise ValueError("cloud is already height-normalized")
    inside = ground.spec.contains(cloud.x, cloud.y)
    if not inside.all():
        offenders = np.flatnonzero(~inside)
        raise ValueError(
            f"{offenders.size} points outside ground-model extent, "
            f"first indices {offenders[:10].tolist()}"
        )
    z = np.maximum(0.0, cloud.z - ground.interpolate(cloud.x, cloud.y))
    return PointCloud(
        x=cloud.x, y=cloud.y, z=z,
        return_number=cloud.return_number,
        num_returns=cloud.num_returns,
        classification=cloud.classification,
        height_normalized=True,
    )


# ---------------------------------------------------------------------------
# Clipping and coverage


_INDEX_MIN_POINTS = 100_000


def clip_circle(cloud: PointCloud, center: tuple[float, float], radius: float) -> PointCloud:
    """Boundary-inclusive circular clip preserving record order.

    Large clouds get a lazily-built x-sorted index so repeated small clips
    (one per subplot) cost a binary search instead of a full scan.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    cx, cy = center
    if len(cloud) >= _INDEX_MIN_POINTS:
        order = getattr(cloud, "_x_order", None)
        if order is None:
            order = np.argsort(cloud.x, kind="stable")
            cloud._x_order = order
            cloud._x_sorted = cloud.x[order]
        xs = cloud._x_sorted
        lo = np.searchsorted(xs, cx - radius, side="left")
        hi = np.searchsorted(xs, cx + radius, side="right")
        cand = order[lo:hi]
        dx = cloud.x[cand] - cx
        dy = cloud.y[cand] - cy
        keep = cand[dx * dx + dy * dy <= radius * radius]
        keep.sort()
        return cloud.select(keep)
    keep = (cloud.x - cx) ** 2 + (cloud.y - cy) ** 2 <= radius * radius
    return cloud.select(keep)


def convex_hull_coverage(cloud: PointCloud, center: tuple[float, float], radius: float) -> float:
    """Fraction of the clip circle covered by the convex hull of the returns.

    Fewer than 3 non-collinear points give coverage 0. The hull is clipped
    exactly against a 720-gon circle approximation.
    """
    if len(cloud) < 3:
        return 0.0
    hull = MultiPoint(np.column_stack([cloud.x, cloud.y])).convex_hull
    if hull.area == 0.0:
        return 0.0
    circle = circle_polygon(center[0], center[1], radius)
    return hull.intersection(circle).area / circle.area
