"""Model and assessment dataset assembly from inventories and LiDAR coverages.

The model dataset combines exact-year plot/acquisition matches with
growth-adjusted bracketed plots, then applies exclusion rules for vegetated
structural zeros, poor LiDAR coverage of subplots, and duplicates across
overlapping coverages. The assessment dataset keeps plots inventoried near,
but not in, the acquisition year and outside no masked area.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.prepared import prep

from .geodata import PlotFootprint, Raster, build_plot_footprint
from .pointcloud import PointCloud, clip_circle, concat_clouds, convex_hull_coverage

DISTURBANCE_DECREASE = 0.05      # relative AGB decrease marking a disturbance
HULL_COVERAGE_MIN = 0.90         # minimum subplot convex-hull coverage
MAX_RETURN_ZERO_AGB = 1.0        # meters; vegetated structural-zero cutoff
ASSESSMENT_WINDOW = 2            # years, inclusive


@dataclass(frozen=True)
class InventoryRecord:
    plot_id: str
    x: float
    y: float
    inventory_year: int
    agb: float
    all_subplots_measured: bool = True
    uniform_condition: bool = True
    forested: bool = True
    tax_code: int | None = None

    def __post_init__(self) -> None:
        if self.agb < 0:
            raise ValueError("agb must be >= 0")
        if not self.forested and self.agb != 0:
            raise ValueError("nonforest records carry a structural zero (agb = 0)")


@dataclass(frozen=True)
class CoverageInfo:
    coverage_id: int
    acquisition_year: int
    footprint: Polygon


@dataclass(frozen=True)
class ModelPlot:
    plot_id: str
    coverage_id: int
    agb_at_lidar: float
    source: str                      # "measured" | "growth_adjusted"
    footprint: PlotFootprint
    inventory_year: int              # year of the measurement used (post year if adjusted)
    pre_year: int | None = None
    post_year: int | None = None
    tax_code: int | None = None


@dataclass(frozen=True)
class AssessmentPlot:
    plot_id: str
    coverage_id: int
    agb: float
    inventory_year: int
    footprint: PlotFootprint
    tax_code: int | None = None


@dataclass
class SelectionReport:
    """Per-criterion inclusion/exclusion counts; keys are criterion labels."""

    counts: dict[str, int] = field(default_factory=dict)

    def bump(self, key: str, by: int = 1) -> None:
        self.counts[key] = self.counts.get(key, 0) + by

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["criterion", "count"])
            for key in sorted(self.counts):
                writer.writerow([key, self.counts[key]])


def growth_adjust(pre: tuple[int, float], post: tuple[int, float], lidar_year: int) -> float | None:
    """Linearly interpolate AGB to the acquisition year, or None when the
    bracketing pair shows a >= 5% relative decrease (disturbance)."""
    pre_year, pre_agb = pre
    post_year, post_agb = post
    if not (pre_year < lidar_year < post_year):
        raise ValueError("lidar_year must lie strictly between the bracketing years")
    if pre_agb > 0 and (post_agb - pre_agb) / pre_agb <= -DISTURBANCE_DECREASE:
        return None
    return pre_agb + (post_agb - pre_agb) * (lidar_year - pre_year) / (post_year - pre_year)


def _pooled_subplot_cloud(cloud: PointCloud, footprint: PlotFootprint) -> PointCloud:
    return concat_clouds([
        clip_circle(cloud, c, footprint.subplot_radius) for c in footprint.subplot_centers
    ])


def select_model_plots(
    inventories: list[InventoryRecord],
    coverages: list[CoverageInfo],
    clouds: dict[int, PointCloud],
) -> tuple[list[ModelPlot], SelectionReport]:
    """Assemble the model dataset.

    Inclusion: (1) exact-year inventory/acquisition matches; (2) bracketed
    plots growth-adjusted to the acquisition year. Exclusion: (3) zero-AGB
    plots whose pooled max return exceeds 1 m; (4) plots with any subplot
    convex-hull coverage < 0.90; (5) duplicates across overlapping coverages,
    preferring exact temporal matches, then inventory recency, then the
    larger coverage id.
    """
    report = SelectionReport()
    by_plot: dict[str, list[InventoryRecord]] = {}
    for rec in inventories:
        if not (rec.all_subplots_measured and rec.uniform_condition):
            report.bump("not_candidate")
            continue
        by_plot.setdefault(rec.plot_id, []).append(rec)
    for recs in by_plot.values():
        recs.sort(key=lambda r: r.inventory_year)

    candidates: list[ModelPlot] = []
    for plot_id, recs in sorted(by_plot.items()):
        x, y = recs[0].x, recs[0].y
        point = Point(x, y)
        containing = [cov for cov in coverages if cov.footprint.contains(point)]
        if not containing:
            report.bump("unmatched")
            continue
        report.bump("candidates")
        footprint = build_plot_footprint((x, y))
        for cov in containing:
            year = cov.acquisition_year
            exact = [r for r in recs if r.inventory_year == year]
            if exact:
                rec = exact[-1]
                candidates.append(ModelPlot(
                    plot_id=plot_id, coverage_id=cov.coverage_id,
                    agb_at_lidar=rec.agb, source="measured",
                    footprint=footprint, inventory_year=year,
                    tax_code=rec.tax_code,
                ))
                continue
            pre = [r for r in recs if r.inventory_year < year]
            post = [r for r in recs if r.inventory_year > year]
            if not pre or not post:
                report.bump("no_temporal_match")
                continue
            pre_rec, post_rec = pre[-1], post[0]
            agb = growth_adjust(
                (pre_rec.inventory_year, pre_rec.agb),
                (post_rec.inventory_year, post_rec.agb),
                year,
            )
            if agb is None:
                report.bump("disturbance_excluded")
                continue
            candidates.append(ModelPlot(
                plot_id=plot_id, coverage_id=cov.coverage_id,
                agb_at_lidar=agb, source="growth_adjusted",
                footprint=footprint, inventory_year=post_rec.inventory_year,
                pre_year=pre_rec.inventory_year, post_year=post_rec.inventory_year,
                tax_code=post_rec.tax_code,
            ))

    # criterion 3: vegetated structural zeros; criterion 4: hull coverage
    kept: list[ModelPlot] = []
    for plot in candidates:
        cloud = clouds[plot.coverage_id]
        pooled = _pooled_subplot_cloud(cloud, plot.footprint)
        if plot.agb_at_lidar == 0 and len(pooled) > 0 and pooled.z.max() > MAX_RETURN_ZERO_AGB:
            report.bump("excluded_criterion_3")
            continue
        bad_hull = False
        for center in plot.footprint.subplot_centers:
            sub = clip_circle(cloud, center, plot.footprint.subplot_radius)
            if convex_hull_coverage(sub, center, plot.footprint.subplot_radius) < HULL_COVERAGE_MIN:
                bad_hull = True
                break
        if bad_hull:
            report.bump("excluded_criterion_4")
            continue
        kept.append(plot)

    # criterion 5: deduplicate across overlapping coverages
    best: dict[str, ModelPlot] = {}
    for plot in kept:
        rank = (plot.source == "measured", plot.inventory_year, plot.coverage_id)
        prev = best.get(plot.plot_id)
        if prev is None:
            best[plot.plot_id] = plot
            continue
        prev_rank = (prev.source == "measured", prev.inventory_year, prev.coverage_id)
        if rank > prev_rank:
            best[plot.plot_id] = plot
        report.bump("excluded_criterion_5")

    selected = sorted(best.values(), key=lambda p: p.plot_id)
    report.bump("included_criterion_1", sum(1 for p in selected if p.source == "measured"))
    report.bump("included_criterion_2", sum(1 for p in selected if p.source == "growth_adjusted"))
    return selected, report


def _footprint_hits_masked(footprint: PlotFootprint, masked: np.ndarray, raster: Raster) -> bool:
    """True when any pixel intersecting the footprint is masked (or the
    footprint leaves the raster extent)."""
    spec = raster.spec
    poly = footprint.polygon()
    xmin, ymin, xmax, ymax = poly.bounds
    gx0, gy0, gx1, gy1 = spec.extent
    if xmin < gx0 or ymin < gy0 or xmax > gx1 or ymax > gy1:
        return True
    col_lo = int(math.floor((xmin - spec.origin_x) / spec.cell_size))
    col_hi = int(math.floor((xmax - spec.origin_x) / spec.cell_size))
    rb_lo = int(math.floor((ymin - spec.origin_y) / spec.cell_size))
    rb_hi = int(math.floor((ymax - spec.origin_y) / spec.cell_size))
    prepared = prep(poly)
    for rb in range(rb_lo, min(rb_hi, spec.n_rows - 1) + 1):
        row = spec.n_rows - 1 - rb
        for col in range(max(col_lo, 0), min(col_hi, spec.n_cols - 1) + 1):
            if not masked[row, col]:
                continue
            if prepared.intersects(spec.cell_polygon(row, col)):
                return True
    return False


def select_assessment_plots(
    inventories: list[InventoryRecord],
    coverages: list[CoverageInfo],
    landcover_mask: Raster,
    aoa_mask: Raster,
) -> tuple[list[AssessmentPlot], SelectionReport]:
    """Assemble the assessment dataset.

    Inclusion: plots inventoried within +/-2 years of the acquisition year
    but not in the acquisition year itself. Exclusion: any part of the plot
    footprint touching a masked pixel of the landcover mask (value 1 =
    removed) or falling outside the applicability mask (value 1 = inside).
    """
    report = SelectionReport()
    lc_masked = (landcover_mask.values == 1) | (landcover_mask.values == landcover_mask.spec.nodata)
    aoa_outside = aoa_mask.values != 1

    by_plot: dict[str, list[InventoryRecord]] = {}
    for rec in inventories:
        if not rec.all_subplots_measured:
            report.bump("not_candidate")
            continue
        by_plot.setdefault(rec.plot_id, []).append(rec)

    selected: list[AssessmentPlot] = []
    for plot_id, recs in sorted(by_plot.items()):
        x, y = recs[0].x, recs[0].y
        point = Point(x, y)
        matches: list[tuple[int, int, InventoryRecord, CoverageInfo]] = []
        for cov in coverages:
            if not cov.footprint.contains(point):
                continue
            for rec in recs:
                lag = abs(rec.inventory_year - cov.acquisition_year)
                if lag == 0 or lag > ASSESSMENT_WINDOW:
                    continue
                matches.append((lag, rec.inventory_year, rec, cov))
        if not matches:
            report.bump("no_match")
            continue
        report.bump("eligible_criterion_1")
        # one entry per plot: smallest lag, then most recent inventory, then larger coverage id
        matches.sort(key=lambda m: (m[0], -m[1], -m[3].coverage_id))
        _, _, rec, cov = matches[0]
        footprint = build_plot_footprint((x, y))
        if _footprint_hits_masked(footprint, lc_masked, landcover_mask):
            report.bump("excluded_criterion_2")
            continue
        if _footprint_hits_masked(footprint, aoa_outside, aoa_mask):
            report.bump("excluded_criterion_3")
            continue
        selected.append(AssessmentPlot(
            plot_id=plot_id, coverage_id=cov.coverage_id, agb=rec.agb,
            inventory_year=rec.inventory_year, footprint=footprint,
            tax_code=rec.tax_code,
        ))
    report.bump("included", len(selected))
    return selected, report


def split_train_test(model_plots: list, fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Seeded disjoint/exhaustive split; train size = round(fraction * n)."""
    n = len(model_plots)
    if n < 5:
        raise ValueError("need at least 5 plots to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(fraction * n))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return [model_plots[i] for i in train_idx], [model_plots[i] for i in test_idx]


# ---------------------------------------------------------------------------
# CSV interchange


def read_inventory_csv(path) -> list[InventoryRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            tax = row.get("tax_code", "")
            records.append(InventoryRecord(
                plot_id=row["plot_id"],
                x=float(row["x"]),
                y=float(row["y"]),
                inventory_year=int(row["inventory_year"]),
                agb=float(row["agb"]),
                all_subplots_measured=row["all_subplots_measured"].strip().lower() in ("1", "true"),
                uniform_condition=row["uniform_condition"].strip().lower() in ("1", "true"),
                forested=row["forested"].strip().lower() in ("1", "true"),
                tax_code=int(tax) if tax not in ("", None) else None,
            ))
    return records


def write_inventory_csv(records: list[InventoryRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["plot_id", "x", "y", "inventory_year", "agb",
                        "all_subplots_measured", "uniform_condition", "forested", "tax_code"])
        for r in records:
            writer.writerow([r.plot_id, repr(r.x), repr(r.y), r.inventory_year, repr(r.agb),
                             int(r.all_subplots_measured), int(r.uniform_condition),
                             int(r.forested), "" if r.tax_code is None else r.tax_code])
