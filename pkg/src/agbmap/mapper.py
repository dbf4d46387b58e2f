"""Wall-to-wall prediction surfaces, newest-wins mosaicking, landcover and
applicability masking, and per-class tabulation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .ensemble import StackedEnsemble
from .geodata import GridSpec, Raster

LANDCOVER_CLASSES = {
    1: "TreeCover",
    2: "GrassShrub",
    3: "Cropland",
    4: "Wetland",
    5: "Developed",
    6: "Water",
    7: "Barren",
}
LANDCOVER_CODES = {name: code for code, name in LANDCOVER_CLASSES.items()}
MASKED_CLASSES = ("Developed", "Water", "Barren")
VEGETATED_CLASSES = ("TreeCover", "GrassShrub", "Cropland", "Wetland")


def predict_surface(
    predictor_stack: dict[str, Raster],
    band_order: tuple[str, ...],
    ens: StackedEnsemble,
    chunk_size: int = 65536,
) -> Raster:
    """Per-pixel ensemble prediction floored at 0; nodata wherever any
    predictor band is nodata."""
    first = predictor_stack[band_order[0]]
    spec: GridSpec = first.spec
    n_cells = spec.n_rows * spec.n_cols
    stack = np.empty((n_cells, len(band_order)), dtype=np.float64)
    valid = np.ones(n_cells, dtype=bool)
    for k, name in enumerate(band_order):
        flat = predictor_stack[name].values.reshape(-1)
        stack[:, k] = flat
        valid &= flat != predictor_stack[name].spec.nodata

    out = np.full(n_cells, spec.nodata, dtype=np.float64)
    rows = np.flatnonzero(valid)
    for start in range(0, rows.size, chunk_size):
        chunk = rows[start:start + chunk_size]
        pred = ens.predict(stack[chunk])
        out[chunk] = np.maximum(pred, 0.0)
    return Raster(spec, out.reshape(spec.n_rows, spec.n_cols), "agb")


@dataclass
class CoverageMosaic:
    agb: Raster
    provenance: Raster             # coverage id per pixel, nodata where none
    years: dict[int, int]


def mosaic(per_coverage: dict[int, Raster], years: dict[int, int]) -> CoverageMosaic:
    """Newest coverage wins per pixel; year ties go to the larger coverage id."""
    if not per_coverage:
        raise ValueError("no coverages to mosaic")
    ids = list(per_coverage)
    spec = per_coverage[ids[0]].spec
    for cid in ids:
        if per_coverage[cid].spec != spec:
            raise ValueError("all coverages must share one GridSpec")
    agb = np.full((spec.n_rows, spec.n_cols), spec.nodata, dtype=np.float64)
    prov = np.full((spec.n_rows, spec.n_cols), spec.nodata, dtype=np.float64)
    rank = np.full((spec.n_rows, spec.n_cols, 2), -np.inf)
    for cid in sorted(ids):
        values = per_coverage[cid].values
        has = values != spec.nodata
        newer = has & (
            (years[cid] > rank[:, :, 0])
            | ((years[cid] == rank[:, :, 0]) & (cid > rank[:, :, 1]))
        )
        agb[newer] = values[newer]
        prov[newer] = cid
        rank[newer, 0] = years[cid]
        rank[newer, 1] = cid
    return CoverageMosaic(
        agb=Raster(spec, agb, "agb"),
        provenance=Raster(spec, prov, "coverage_id"),
        years=dict(years),
    )


def landcover_exclusion_mask(landcover: Raster) -> np.ndarray:
    """Boolean array: True where the landcover mask removes the pixel
    (Developed/Water/Barren or nodata)."""
    masked = landcover.values == landcover.spec.nodata
    for name in MASKED_CLASSES:
        masked |= landcover.values == LANDCOVER_CODES[name]
    return masked


def apply_masks(agb: Raster, landcover: Raster, aoa_mask: Raster) -> Raster:
    """Set nodata where landcover excludes the pixel or the AOA mask marks it
    outside (mask value != 1)."""
    spec = agb.spec
    if landcover.spec != spec or aoa_mask.spec != spec:
        raise ValueError("masks must share the AGB GridSpec")
    out = agb.values.copy()
    out[landcover_exclusion_mask(landcover)] = spec.nodata
    out[aoa_mask.values != 1] = spec.nodata
    return Raster(spec, out, agb.band_name)


@dataclass
class ClassSummary:
    """Per-vegetated-class mapped AGB tabulation."""

    rows: dict[str, dict[str, float]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["landcover", "pixel_count", "area_ha", "mean_agb",
                             "total_agb_mt", "pct_area", "pct_agb"])
            for name in VEGETATED_CLASSES:
                r = self.rows[name]
                writer.writerow([name, int(r["pixel_count"]), repr(r["area_ha"]),
                                 repr(r["mean_agb"]), repr(r["total_agb_mt"]),
                                 repr(r["pct_area"]), repr(r["pct_agb"])])


def tabulate_by_class(agb_masked: Raster, landcover: Raster) -> ClassSummary:
    """Area, mean, total (Mt), and percentage shares per vegetated class."""
    spec = agb_masked.spec
    if landcover.spec != spec:
        raise ValueError("landcover must share the AGB GridSpec")
    valid = agb_masked.values != spec.nodata
    cell_ha = spec.cell_area_ha
    rows: dict[str, dict[str, float]] = {}
    totals = {"area": 0.0, "agb": 0.0}
    for name in VEGETATED_CLASSES:
        sel = valid & (landcover.values == LANDCOVER_CODES[name])
        count = int(sel.sum())
        area = count * cell_ha
        mean = float(agb_masked.values[sel].mean()) if count else 0.0
        total_mt = mean * area * 1e-6
        rows[name] = {
            "pixel_count": count, "area_ha": area, "mean_agb": mean,
            "total_agb_mt": total_mt,
        }
        totals["area"] += area
        totals["agb"] += total_mt
    for name in VEGETATED_CLASSES:
        r = rows[name]
        r["pct_area"] = 100.0 * r["area_ha"] / totals["area"] if totals["area"] else 0.0
        r["pct_agb"] = 100.0 * r["total_agb_mt"] / totals["agb"] if totals["agb"] else 0.0
    return ClassSummary(rows=rows)
