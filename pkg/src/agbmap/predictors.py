"""Canopy-metric predictor computation at plot and pixel support, auxiliary
raster sampling, and tax-parcel indicator encoding.

The metric set is computed by one shared kernel so the scalar (plot) and
rasterized (pixel) paths agree bit-for-bit; the pixel path parallelizes over
cells with numba and is deterministic regardless of thread count because each
cell writes only its own output row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geodata import GridSpec, PlotFootprint, Raster
from .pointcloud import PointCloud, clip_circle, concat_clouds

CANOPY_CUTOFF = 2.5  # meters; "above" is strict (z > cutoff)

LIDAR_METRIC_NAMES: tuple[str, ...] = (
    "H0", "H10", "H20", "H30", "H40", "H50", "H60", "H70", "H80", "H90", "H100",
    "H95", "H99",
    "D10", "D20", "D30", "D40", "D50", "D60", "D70", "D80", "D90",
    "ZMEAN", "ZMEAN_C", "Z_KURT", "Z_SKEW",
    "QUAD_MEAN", "QUAD_MEAN_C", "CV", "CV_C",
    "L2", "L3", "L4", "L_CV", "L_SKEW", "L_KURT",
    "CANCOV", "HVOL", "RPC1",
)

AUX_NAMES: tuple[str, ...] = ("TMIN", "TMAX", "PRECIP", "ELEV", "SLOPE", "ASPECT", "TWI")

N_LIDAR_METRICS = len(LIDAR_METRIC_NAMES)

_H_FRACTIONS = np.array([0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.95, 0.99])


@numba.njit(cache=True)
def _percentile_sorted(zs, frac):
    n = zs.size
    if n == 1:
        return zs[0]
    pos = (n - 1) * frac
    lo = int(np.floor(pos))
    if lo >= n - 1:
        return zs[n - 1]
    t = pos - lo
    return zs[lo] + (zs[lo + 1] - zs[lo]) * t


@numba.njit(cache=True)
def _metrics_from_sorted(zs, n_first, out):
    """Fill one metric row from ascending heights and a first-return count."""
    n = zs.size
    # decile heights plus 95th/99th percentiles
    for k in range(13):
        out[k] = _percentile_sorted(zs, _H_FRACTIONS[k])
    h100 = zs[n - 1]

    # density above each of 9 equal-height breakpoints; degenerate max -> 0
    if h100 <= 0.0:
        for k in range(9):
            out[13 + k] = 0.0
    else:
        for k in range(9):
            cutoff = (k + 1) * h100 / 10.0
            cnt = 0
            for i in range(n):
                if zs[i] >= cutoff:
                    cnt += 1
            out[13 + k] = cnt / n

    mean = 0.0
    sumsq = 0.0
    for i in range(n):
        mean += zs[i]
        sumsq += zs[i] * zs[i]
    mean /= n
    quad_mean = np.sqrt(sumsq / n)

    m2 = 0.0
    m3 = 0.0
    m4 = 0.0
    for i in range(n):
        d = zs[i] - mean
        m2 += d * d
        m3 += d * d * d
        m4 += d * d * d * d
    m2 /= n
    m3 /= n
    m4 /= n
    skew = m3 / m2**1.5 if m2 > 0.0 else 0.0
    kurt = m4 / (m2 * m2) if m2 > 0.0 else 0.0

    if n > 1 and mean != 0.0:
        var_s = 0.0
        for i in range(n):
            d = zs[i] - mean
            var_s += d * d
        cv = np.sqrt(var_s / (n - 1)) / mean
    else:
        cv = 0.0

    # conditional (canopy) subset: strictly above the cutoff
    c_n = 0
    c_sum = 0.0
    c_sumsq = 0.0
    for i in range(n):
        if zs[i] > CANOPY_CUTOFF:
            c_n += 1
            c_sum += zs[i]
            c_sumsq += zs[i] * zs[i]
    if c_n > 0:
        c_mean = c_sum / c_n
        c_quad = np.sqrt(c_sumsq / c_n)
        if c_n > 1 and c_mean != 0.0:
            c_var = 0.0
            for i in range(n):
                if zs[i] > CANOPY_CUTOFF:
                    d = zs[i] - c_mean
                    c_var += d * d
            c_cv = np.sqrt(c_var / (c_n - 1)) / c_mean
        else:
            c_cv = 0.0
    else:
        c_mean = 0.0
        c_quad = 0.0
        c_cv = 0.0

    # L-moments from unbiased probability-weighted moments (ascending order)
    b0 = mean
    b1 = 0.0
    b2 = 0.0
    b3 = 0.0
    if n > 1:
        for i in range(1, n):          # 0-based; weight (i)/(n-1)
            w1 = i / (n - 1.0)
            b1 += w1 * zs[i]
        b1 /= n
    if n > 2:
        for i in range(2, n):
            w2 = (i * (i - 1.0)) / ((n - 1.0) * (n - 2.0))
            b2 += w2 * zs[i]
        b2 /= n
    if n > 3:
        for i in range(3, n):
            w3 = (i * (i - 1.0) * (i - 2.0)) / ((n - 1.0) * (n - 2.0) * (n - 3.0))
            b3 += w3 * zs[i]
        b3 /= n
    l1 = b0
    l2 = 2.0 * b1 - b0 if n > 1 else 0.0
    l3 = 6.0 * b2 - 6.0 * b1 + b0 if n > 2 else 0.0
    l4 = 20.0 * b3 - 30.0 * b2 + 12.0 * b1 - b0 if n > 3 else 0.0
    l_cv = l2 / l1 if l1 != 0.0 else 0.0
    l_skew = l3 / l2 if l2 != 0.0 else 0.0
    l_kurt = l4 / l2 if l2 != 0.0 else 0.0

    cancov = c_n / n
    rpc1 = n_first / n

    out[22] = mean
    out[23] = c_mean
    out[24] = kurt
    out[25] = skew
    out[26] = quad_mean
    out[27] = c_quad
    out[28] = cv
    out[29] = c_cv
    out[30] = l2
    out[31] = l3
    out[32] = l4
    out[33] = l_cv
    out[34] = l_skew
    out[35] = l_kurt
    out[36] = cancov
    out[37] = cancov * mean
    out[38] = rpc1


@numba.njit(cache=True, parallel=True)
def _metrics_by_group(z_sorted, first_sorted, starts, ends, out):
    for g in numba.prange(starts.size):
        s, e = starts[g], ends[g]
        if e > s:
            zs = np.sort(z_sorted[s:e])
            n_first = 0
            for i in range(s, e):
                if first_sorted[i] == 1:
                    n_first += 1
            _metrics_from_sorted(zs, n_first, out[g])


def lidar_metrics(cloud: PointCloud) -> dict[str, float]:
    """Full canopy metric set for one height-normalized cloud."""
    if not cloud.height_normalized:
        raise ValueError("cloud must be height-normalized")
    if len(cloud) == 0:
        raise ValueError("cannot compute metrics on an empty cloud")
    zs = np.sort(cloud.z.astype(np.float64))
    out = np.empty(N_LIDAR_METRICS, dtype=np.float64)
    _metrics_from_sorted(zs, int(np.sum(cloud.return_number == 1)), out)
    return dict(zip(LIDAR_METRIC_NAMES, out.tolist()))


def pixel_predictors(cloud: PointCloud, spec: GridSpec, n_threads: int | None = None) -> dict[str, Raster]:
    """Per-cell metric bands on ``spec``; cells with no returns are nodata."""
    if not cloud.height_normalized:
        raise ValueError("cloud must be height-normalized")
    if n_threads is not None:
        # requests beyond the machine's core budget are clamped; output is
        # identical for any thread count, so this only affects wall time
        numba.set_num_threads(min(numba.config.NUMBA_NUM_THREADS, max(1, n_threads)))

    inside = spec.contains(cloud.x, cloud.y)
    row, col = spec.cell_index(cloud.x[inside], cloud.y[inside])
    flat = (row * spec.n_cols + col).astype(np.int64)
    z = cloud.z[inside].astype(np.float64)
    is_first = (cloud.return_number[inside] == 1).astype(np.int8)

    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    z_sorted = z[order]
    first_sorted = is_first[order]

    n_cells = spec.n_rows * spec.n_cols
    boundaries = np.searchsorted(flat_sorted, np.arange(n_cells + 1))
    starts = boundaries[:-1]
    ends = boundaries[1:]

    out = np.full((n_cells, N_LIDAR_METRICS), spec.nodata, dtype=np.float64)
    _metrics_by_group(z_sorted, first_sorted, starts, ends, out)

    bands = {}
    for k, name in enumerate(LIDAR_METRIC_NAMES):
        bands[name] = Raster(spec, out[:, k].reshape(spec.n_rows, spec.n_cols).copy(), name)
    return bands


# ---------------------------------------------------------------------------
# Tax parcel indicators

DEFAULT_TAX_CODE = 1000
NYC_TAX_CODE = 2000
CODE_RETENTION_FRACTION = 0.01
CATEGORY_RETENTION_FRACTION = 0.05


def tax_category(code: int) -> int:
    """Broad grouping of a tax code; sentinel codes map to themselves."""
    if code in (DEFAULT_TAX_CODE, NYC_TAX_CODE):
        return code
    return (code // 100) * 100


@dataclass(frozen=True)
class TaxEncoding:
    """Indicator layout learned from the training plots only."""

    retained_codes: tuple[int, ...]
    retained_categories: tuple[int, ...]
    nyc_codes: frozenset[int] = frozenset()

    @property
    def indicator_names(self) -> tuple[str, ...]:
        return tuple(
            [f"TAX_CODE_{c}" for c in self.retained_codes]
            + [f"TAX_CATEGORY_{c}" for c in self.retained_categories]
        )

    def normalize(self, code) -> int:
        if code is None:
            return DEFAULT_TAX_CODE
        code = int(code)
        if code in self.nyc_codes:
            return NYC_TAX_CODE
        return code


def fit_tax_encoding(training_codes, nyc_codes=frozenset()) -> TaxEncoding:
    """Choose retained code/category indicators from training-plot frequencies.

    Missing codes fall back to the default sentinel and NYC specials are
    remapped before thresholding; codes seen on < 1% of plots and categories
    seen on < 5% are dropped.
    """
    nyc_codes = frozenset(int(c) for c in nyc_codes)
    codes = []
    for code in training_codes:
        if code is None:
            codes.append(DEFAULT_TAX_CODE)
        elif int(code) in nyc_codes:
            codes.append(NYC_TAX_CODE)
        else:
            codes.append(int(code))
    if not codes:
        raise ValueError("training codes must be non-empty")
    n = len(codes)
    code_counts: dict[int, int] = {}
    cat_counts: dict[int, int] = {}
    for code in codes:
        code_counts[code] = code_counts.get(code, 0) + 1
        cat = tax_category(code)
        cat_counts[cat] = cat_counts.get(cat, 0) + 1
    retained_codes = tuple(sorted(c for c, k in code_counts.items()
                                  if k / n >= CODE_RETENTION_FRACTION))
    retained_cats = tuple(sorted(c for c, k in cat_counts.items()
                                 if k / n >= CATEGORY_RETENTION_FRACTION))
    return TaxEncoding(retained_codes, retained_cats, nyc_codes)


def encode_tax(code, encoding: TaxEncoding) -> dict[str, bool]:
    """Boolean indicator set for one plot/pixel tax code."""
    norm = encoding.normalize(code)
    cat = tax_category(norm)
    out = {}
    for c in encoding.retained_codes:
        out[f"TAX_CODE_{c}"] = c == norm
    for c in encoding.retained_categories:
        out[f"TAX_CATEGORY_{c}"] = c == cat
    return out


# ---------------------------------------------------------------------------
# Assembled predictor vectors


def predictor_names(encoding: TaxEncoding) -> tuple[str, ...]:
    """Canonical ordered predictor list shared by every vector in a dataset."""
    return LIDAR_METRIC_NAMES + AUX_NAMES + encoding.indicator_names


def _sample_at_center(raster: Raster, x: float, y: float):
    spec = raster.spec
    if not spec.contains(x, y):
        raise ValueError(f"point ({x}, {y}) outside raster extent")
    row, col = spec.cell_index(x, y)
    value = raster.values[int(row), int(col)]
    return None if value == spec.nodata else float(value)


def plot_predictors(
    cloud: PointCloud,
    footprint: PlotFootprint,
    aux: dict[str, Raster],
    encoding: TaxEncoding,
    parcel_raster: Raster,
) -> dict[str, float]:
    """Predictor vector for one plot: returns pooled over the four subplot
    circles, metrics computed once on the pooled set, auxiliary and tax
    values sampled at the plot-center pixel."""
    if not cloud.height_normalized:
        raise ValueError("cloud must be height-normalized")
    pooled = concat_clouds([
        clip_circle(cloud, c, footprint.subplot_radius) for c in footprint.subplot_centers
    ])
    if len(pooled) == 0:
        raise ValueError("no returns inside any subplot circle")
    vec: dict[str, float] = lidar_metrics(pooled)
    cx, cy = footprint.center
    for name in AUX_NAMES:
        value = _sample_at_center(aux[name], cx, cy)
        if value is None:
            raise ValueError(f"auxiliary raster {name} is nodata at plot center")
        vec[name] = value
    code = _sample_at_center(parcel_raster, cx, cy)
    tax = encode_tax(None if code is None else int(code), encoding)
    for name, flag in tax.items():
        vec[name] = float(flag)
    return vec
