"""Map-agreement battery: point metrics with standard errors, GMFR trend
lines, multi-scale hexagon assessment, residual choropleth summaries,
design-based hexagon comparison, density-filtered mean error, and global
Moran's I with permutation envelopes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geodata import Raster, area_weighted_mean, hexagon_area, tessellate_hexagons
from .plotselect import AssessmentPlot
from .seeds import mix_seed, rng_for

BOOTSTRAP_REPLICATES = 1000
MORAN_PERMUTATIONS = 1000
MIN_PLOT_DENSITY_HA = 1.0 / 24_000.0   # plots per hectare


@dataclass
class MetricBundle:
    rmse: float
    mae: float
    me: float
    r2: float
    pct_rmse: float | None         # None when the reference mean is 0
    pct_mae: float | None
    se_rmse: float | None = None
    se_r2: float | None = None
    se_mae: float | None = None
    se_me: float | None = None
    n: int = 0


@dataclass
class GMFRLine:
    slope: float
    intercept: float


@dataclass
class MoranResult:
    radius: float
    i: float | None                # None when undefined at this radius
    envelope_low: float | None = None
    envelope_high: float | None = None
    n_points: int = 0


@dataclass
class ScaleResult:
    scale: str                     # "plot_pixel" or the centroid spacing in meters
    spacing: float | None
    n_units: int
    plots_per_hex: float | None
    metrics: MetricBundle
    gmfr: GMFRLine | None
    pairs: np.ndarray = field(repr=False, default=None)   # (reference, map) columns


def accuracy_metrics(y, y_hat) -> MetricBundle:
    """Point agreement metrics; percent forms are None when mean(y) = 0."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size < 2:
        raise ValueError("need equal-length vectors with n >= 2")
    err = y - y_hat
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    me = float(np.mean(err))
    ss_res = float(np.sum(err**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -np.inf)
    ybar = float(y.mean())
    pct_rmse = 100.0 * rmse / ybar if ybar > 0 else None
    pct_mae = 100.0 * mae / ybar if ybar > 0 else None
    return MetricBundle(rmse=rmse, mae=mae, me=me, r2=r2,
                        pct_rmse=pct_rmse, pct_mae=pct_mae, n=y.size)


def bootstrap_se(y, y_hat, b: int = BOOTSTRAP_REPLICATES, seed: int = 0) -> tuple[float, float]:
    """Bootstrap standard errors for RMSE and R^2: sqrt(Var_boot / n) over
    ``b`` resamples of the (y, y_hat) pairs."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    n = y.size
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(b, n))
    ys = y[idx]
    ps = y_hat[idx]
    err = ys - ps
    rmses = np.sqrt(np.mean(err**2, axis=1))
    ss_res = np.sum(err**2, axis=1)
    ss_tot = np.sum((ys - ys.mean(axis=1, keepdims=True)) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2s = np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, 1.0)
    se_rmse = float(np.sqrt(np.var(rmses) / n))
    se_r2 = float(np.sqrt(np.var(r2s) / n))
    return se_rmse, se_r2


def analytic_se(errors) -> float:
    """Sample standard deviation of the per-plot errors (as printed; divide
    by sqrt(n) only when the caller's config asks for it)."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size < 2:
        raise ValueError("need n >= 2")
    return float(np.sqrt(np.sum((errors - errors.mean()) ** 2) / (errors.size - 1)))


def full_metrics(y, y_hat, seed: int = 0, b: int = BOOTSTRAP_REPLICATES,
                 se_divide_sqrt_n: bool = False) -> MetricBundle:
    """Metrics plus all four standard errors."""
    bundle = accuracy_metrics(y, y_hat)
    err = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    bundle.se_rmse, bundle.se_r2 = bootstrap_se(y, y_hat, b=b, seed=seed)
    scale = 1.0 / math.sqrt(err.size) if se_divide_sqrt_n else 1.0
    bundle.se_me = analytic_se(err) * scale
    bundle.se_mae = analytic_se(np.abs(err)) * scale
    return bundle


def gmfr(x, y) -> GMFRLine:
    """Geometric mean functional relationship line, symmetric in x and y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sx = np.sum((x - x.mean()) ** 2)
    sy = np.sum((y - y.mean()) ** 2)
    if sx == 0 or sy == 0:
        raise ValueError("GMFR undefined for zero-variance inputs")
    corr = np.corrcoef(x, y)[0, 1]
    slope = float(np.sign(corr) if corr != 0 else 1.0) * float(np.sqrt(sy / sx))
    return GMFRLine(slope=slope, intercept=float(y.mean() - slope * x.mean()))


# ---------------------------------------------------------------------------
# Plot-level extraction and the multi-scale protocol


def extract_plot_values(plots: list[AssessmentPlot], agb_masked: Raster) -> tuple[list, np.ndarray]:
    """Area-weighted mean of mapped pixels over each plot footprint; plots
    touching any masked pixel are dropped."""
    kept = []
    values = []
    masked = agb_masked.values == agb_masked.spec.nodata
    for plot in plots:
        poly = plot.footprint.polygon()
        if _polygon_touches_masked(poly, masked, agb_masked):
            continue
        value = area_weighted_mean(agb_masked, poly)
        if value is None:
            continue
        kept.append(plot)
        values.append(value)
    return kept, np.asarray(values, dtype=np.float64)


def _polygon_touches_masked(poly, masked: np.ndarray, raster: Raster) -> bool:
    from shapely.prepared import prep
    spec = raster.spec
    xmin, ymin, xmax, ymax = poly.bounds
    gx0, gy0, gx1, gy1 = spec.extent
    if xmin < gx0 or ymin < gy0 or xmax > gx1 or ymax > gy1:
        return True
    col_lo = max(0, int(math.floor((xmin - spec.origin_x) / spec.cell_size)))
    col_hi = min(spec.n_cols - 1, int(math.floor((xmax - spec.origin_x) / spec.cell_size)))
    rb_lo = max(0, int(math.floor((ymin - spec.origin_y) / spec.cell_size)))
    rb_hi = min(spec.n_rows - 1, int(math.floor((ymax - spec.origin_y) / spec.cell_size)))
    prepared = prep(poly)
    for rb in range(rb_lo, rb_hi + 1):
        row = spec.n_rows - 1 - rb
        for col in range(col_lo, col_hi + 1):
            if masked[row, col] and prepared.intersects(spec.cell_polygon(row, col)):
                return True
    return False


def _hex_groups(plots: list[AssessmentPlot], extent, spacing: float, seed: int) -> dict[int, list[int]]:
    """Group plot indices by the hexagon containing each plot center."""
    tess = tessellate_hexagons(extent, spacing, seed)
    groups: dict[int, list[int]] = {}
    for i, plot in enumerate(plots):
        cid = tess.cell_id_at(*plot.footprint.center)
        groups.setdefault(cid, []).append(i)
    return groups


def riemann_assessment(
    plots: list[AssessmentPlot],
    agb_masked: Raster,
    spacings: list[float],
    seed: int,
    se_divide_sqrt_n: bool = False,
) -> list[ScaleResult]:
    """Agreement at plot-pixel support and within hexagons at each spacing.

    Each hexagon scale gets its own seeded tessellation; per-hex pairs are
    (mean plot reference AGB, mean extracted map AGB) over hexes containing
    at least one plot.
    """
    if not plots:
        raise ValueError("no assessment plots")
    kept, extracted = extract_plot_values(plots, agb_masked)
    if not kept:
        raise ValueError("every plot intersects a masked pixel")
    reference = np.array([p.agb for p in kept])

    results = []
    bundle = full_metrics(reference, extracted, seed=mix_seed(seed, 0),
                          se_divide_sqrt_n=se_divide_sqrt_n)
    line = _gmfr_or_none(reference, extracted)
    results.append(ScaleResult(
        scale="plot_pixel", spacing=None, n_units=len(kept), plots_per_hex=None,
        metrics=bundle, gmfr=line, pairs=np.column_stack([reference, extracted]),
    ))

    extent = agb_masked.spec.extent
    for si, spacing in enumerate(spacings):
        groups = _hex_groups(kept, extent, spacing, mix_seed(seed, 0x4E8, si))
        ref_means = []
        map_means = []
        for cid in sorted(groups):
            idx = groups[cid]
            ref_means.append(float(reference[idx].mean()))
            map_means.append(float(extracted[idx].mean()))
        ref_means = np.asarray(ref_means)
        map_means = np.asarray(map_means)
        pph = len(kept) / len(groups)
        bundle = full_metrics(ref_means, map_means, seed=mix_seed(seed, 1 + si),
                              se_divide_sqrt_n=se_divide_sqrt_n)
        results.append(ScaleResult(
            scale=f"hex_{spacing:g}", spacing=spacing, n_units=len(groups),
            plots_per_hex=pph, metrics=bundle,
            gmfr=_gmfr_or_none(ref_means, map_means),
            pairs=np.column_stack([ref_means, map_means]),
        ))
    return results


def _gmfr_or_none(x, y) -> GMFRLine | None:
    try:
        return gmfr(x, y)
    except ValueError:
        return None


def choropleth_residuals(
    plots: list[AssessmentPlot],
    agb_masked: Raster,
    spacing: float = 50_000.0,
    seed: int = 0,
) -> dict[int, dict[str, float]]:
    """Per-hexagon plot-to-pixel residual summaries at one spacing; hexes
    with fewer than 2 plots are dropped. Mean reference AGB rides along for
    residual-vs-biomass regressions."""
    kept, extracted = extract_plot_values(plots, agb_masked)
    reference = np.array([p.agb for p in kept])
    groups = _hex_groups(kept, agb_masked.spec.extent, spacing, mix_seed(seed, 0x50))
    out: dict[int, dict[str, float]] = {}
    for cid in sorted(groups):
        idx = groups[cid]
        if len(idx) < 2:
            continue
        err = reference[idx] - extracted[idx]
        out[cid] = {
            "n": len(idx),
            "rmse": float(np.sqrt(np.mean(err**2))),
            "mae": float(np.mean(np.abs(err))),
            "me": float(np.mean(err)),
            "mean_reference_agb": float(reference[idx].mean()),
        }
    return out


# ---------------------------------------------------------------------------
# Design-based hexagon comparison


@dataclass(frozen=True)
class HexEstimate:
    """FIA-style design-based AGB estimate for one hexagon: total live AGB
    in Mg with its 95% CI bounds."""

    hex_id: int
    polygon: object
    agb_total: float
    ci_low: float
    ci_high: float


MIN_MAPPED_FRACTION = 0.10


def menlove_compare(
    hex_estimates: list[HexEstimate],
    agb_masked: Raster,
    landcover: Raster,
) -> dict:
    """Compare intersection-weighted mapped AGB means to area-adjusted
    design-based densities per hexagon.

    Hexes with <= 10% mapped area are dropped. The design-based total is
    divided by the vegetated-pixel area inside the hex to get a density
    comparable to the map mean; the CI bounds are adjusted identically.
    """
    from .mapper import landcover_exclusion_mask

    spec = agb_masked.spec
    cell_ha = spec.cell_area_ha
    mapped = agb_masked.values != spec.nodata
    vegetated = ~landcover_exclusion_mask(landcover)

    rows = []
    for est in hex_estimates:
        weights, cells = _intersection_weights(est.polygon, spec)
        if not cells:
            continue
        hex_area_ha = est.polygon.area / 10_000.0
        r_idx = np.array([c[0] for c in cells])
        c_idx = np.array([c[1] for c in cells])
        w = np.asarray(weights)
        mapped_sel = mapped[r_idx, c_idx]
        mapped_area = float(np.sum(w[mapped_sel])) * cell_ha
        if hex_area_ha <= 0 or mapped_area / hex_area_ha <= MIN_MAPPED_FRACTION:
            continue
        veg_area = float(np.sum(w[vegetated[r_idx, c_idx]])) * cell_ha
        if veg_area <= 0:
            continue
        map_estimate = float(
            np.sum(w[mapped_sel] * agb_masked.values[r_idx[mapped_sel], c_idx[mapped_sel]])
            / np.sum(w[mapped_sel])
        )
        fia_density = est.agb_total / veg_area
        ci_low = est.ci_low / veg_area
        ci_high = est.ci_high / veg_area
        rows.append({
            "hex_id": est.hex_id,
            "map_estimate": map_estimate,
            "fia_density": fia_density,
            "ci_low": ci_low,
            "ci_high": ci_high,
            "within_ci": ci_low <= map_estimate <= ci_high,
        })
    frac = float(np.mean([r["within_ci"] for r in rows])) if rows else float("nan")
    return {"rows": rows, "fraction_within_ci": frac}


def _intersection_weights(polygon, spec) -> tuple[list[float], list[tuple[int, int]]]:
    """Fractional pixel areas intersecting ``polygon`` (units of one pixel)."""
    from shapely.prepared import prep
    xmin, ymin, xmax, ymax = polygon.bounds
    col_lo = max(0, int(math.floor((xmin - spec.origin_x) / spec.cell_size)))
    col_hi = min(spec.n_cols - 1, int(math.floor((xmax - spec.origin_x) / spec.cell_size)))
    rb_lo = max(0, int(math.floor((ymin - spec.origin_y) / spec.cell_size)))
    rb_hi = min(spec.n_rows - 1, int(math.floor((ymax - spec.origin_y) / spec.cell_size)))
    prepared = prep(polygon)
    cell_area = spec.cell_size * spec.cell_size
    weights: list[float] = []
    cells: list[tuple[int, int]] = []
    for rb in range(rb_lo, rb_hi + 1):
        row = spec.n_rows - 1 - rb
        for col in range(col_lo, col_hi + 1):
            pixel = spec.cell_polygon(row, col)
            if not prepared.intersects(pixel):
                continue
            if prepared.contains(pixel):
                frac = 1.0
            else:
                frac = polygon.intersection(pixel).area / cell_area
            if frac > 0:
                weights.append(frac)
                cells.append((row, col))
    return weights, cells


# ---------------------------------------------------------------------------
# Spatial autocorrelation


def morans_i(
    points: np.ndarray,
    residuals: np.ndarray,
    radius: float,
    b: int = MORAN_PERMUTATIONS,
    seed: int = 0,
) -> MoranResult:
    """Global Moran's I over a binary distance-band neighbor graph with a
    seeded permutation envelope (2.5th/97.5th percentiles)."""
    points = np.asarray(points, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    n = residuals.size
    if n < 3:
        raise ValueError("need at least 3 points")
    tree = cKDTree(points)
    pairs = tree.query_pairs(r=radius, output_type="ndarray")
    if pairs.size == 0:
        return MoranResult(radius=radius, i=None, n_points=n)

    z = residuals - residuals.mean()
    denom = float(np.sum(z**2))
    if denom == 0.0:
        return MoranResult(radius=radius, i=None, n_points=n)
    w_total = 2.0 * pairs.shape[0]     # symmetric binary weights

    def statistic(zv: np.ndarray) -> float:
        cross = 2.0 * float(np.sum(zv[pairs[:, 0]] * zv[pairs[:, 1]]))
        return (n / w_total) * cross / float(np.sum(zv**2))

    i_obs = statistic(z)
    rng = rng_for(seed, int(round(radius)))
    sims = np.empty(b)
    for s in range(b):
        perm = rng.permutation(n)
        sims[s] = statistic(z[perm])
    low, high = np.percentile(sims, [2.5, 97.5])
    return MoranResult(radius=radius, i=i_obs, envelope_low=float(low),
                       envelope_high=float(high), n_points=n)


# ---------------------------------------------------------------------------
# Density-filtered mean error


def density_filtered_me(
    plots: list[AssessmentPlot],
    agb_masked: Raster,
    spacings: list[float],
    seed: int = 0,
    min_density: float = MIN_PLOT_DENSITY_HA,
) -> list[dict[str, float]]:
    """Per-scale ME with and without dropping hexagons whose plot density
    falls below the threshold (plots per hectare)."""
    kept, extracted = extract_plot_values(plots, agb_masked)
    reference = np.array([p.agb for p in kept])
    extent = agb_masked.spec.extent
    out = []
    for si, spacing in enumerate(spacings):
        hex_ha = hexagon_area(spacing) / 10_000.0
        groups = _hex_groups(kept, extent, spacing, mix_seed(seed, 0xDE2, si))
        me_all = []
        me_kept = []
        for cid in sorted(groups):
            idx = groups[cid]
            me = float(np.mean(reference[idx] - extracted[idx]))
            me_all.append(me)
            if len(idx) / hex_ha >= min_density:
                me_kept.append(me)
        out.append({
            "spacing": spacing,
            "me_unfiltered": float(np.mean(me_all)) if me_all else float("nan"),
            "me_filtered": float(np.mean(me_kept)) if me_kept else float("nan"),
            "n_hex_unfiltered": len(me_all),
            "n_hex_filtered": len(me_kept),
        })
    return out


# ---------------------------------------------------------------------------
# CSV export


def write_scale_results_csv(results: list[ScaleResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scale", "spacing_m", "n", "plots_per_hex",
                         "pct_rmse", "rmse", "se_rmse", "mae", "se_mae",
                         "me", "se_me", "r2", "se_r2",
                         "gmfr_slope", "gmfr_intercept"])
        for r in results:
            m = r.metrics
            writer.writerow([
                r.scale,
                "" if r.spacing is None else repr(r.spacing),
                m.n,
                "" if r.plots_per_hex is None else repr(r.plots_per_hex),
                "" if m.pct_rmse is None else repr(m.pct_rmse),
                repr(m.rmse), repr(m.se_rmse), repr(m.mae), repr(m.se_mae),
                repr(m.me), repr(m.se_me), repr(m.r2), repr(m.se_r2),
                "" if r.gmfr is None else repr(r.gmfr.slope),
                "" if r.gmfr is None else repr(r.gmfr.intercept),
            ])


def write_scatter_csv(result: ScaleResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["reference_agb", "map_agb"])
        for ref, mapped in result.pairs:
            writer.writerow([repr(float(ref)), repr(float(mapped))])
