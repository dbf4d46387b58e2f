"""Deterministic synthetic scenes: a smooth biomass field with blocky
landcover, a gentle terrain model, simulated point clouds whose canopy
heights track biomass, and repeat inventories with growth and seeded
disturbance. Everything is a pure function of (params, seed)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geodata import Extent, GridSpec, Raster
from .mapper import LANDCOVER_CODES
from .plotselect import InventoryRecord
from .pointcloud import PointCloud
from .seeds import mix_seed, rng_for


@dataclass(frozen=True)
class SceneParams:
    cell_size: float = 30.0
    n_bumps: int = 40
    bump_amplitude: tuple[float, float] = (60.0, 220.0)
    bump_sigma: tuple[float, float] = (300.0, 1500.0)
    tree_base_agb: float = 30.0
    dem_base: float = 300.0
    dem_relief: float = 60.0
    n_patches: int = 12            # non-forest landcover rectangles
    patch_size: tuple[float, float] = (100.0, 500.0)
    canopy_height_scale: float = 0.6    # h_top = scale * agb ** exponent
    canopy_height_exponent: float = 0.5


#: Class frequencies for the blocky landcover patches (TreeCover is the matrix).
_PATCH_CLASSES = ("Cropland", "GrassShrub", "Wetland", "Developed", "Water", "Barren")
_PATCH_WEIGHTS = (0.35, 0.15, 0.2, 0.12, 0.1, 0.08)
_CLASS_AGB_FACTOR = {"TreeCover": 1.0, "Wetland": 0.6, "GrassShrub": 0.2, "Cropland": 0.1}


@dataclass
class SyntheticScene:
    spec: GridSpec
    true_agb: Raster
    ground_dem: Raster
    landcover: Raster
    seed: int
    params: SceneParams = field(default_factory=SceneParams)


def gen_scene(extent: Extent, seed: int, params: SceneParams | None = None) -> SyntheticScene:
    params = params or SceneParams()
    xmin, ymin, xmax, ymax = extent
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("invalid extent")
    n_cols = int(round((xmax - xmin) / params.cell_size))
    n_rows = int(round((ymax - ymin) / params.cell_size))
    spec = GridSpec(origin_x=xmin, origin_y=ymin, n_cols=n_cols, n_rows=n_rows,
                    cell_size=params.cell_size)

    rows = np.arange(n_rows)
    cols = np.arange(n_cols)
    cgrid, rgrid = np.meshgrid(cols, rows)
    cx, cy = spec.cell_center(rgrid, cgrid)

    rng = rng_for(seed, 0x5CE)
    bumps = np.zeros((n_rows, n_cols))
    for _ in range(params.n_bumps):
        bx = rng.uniform(xmin, xmax)
        by = rng.uniform(ymin, ymax)
        amp = rng.uniform(*params.bump_amplitude)
        sig = rng.uniform(*params.bump_sigma)
        bumps += amp * np.exp(-((cx - bx) ** 2 + (cy - by) ** 2) / (2 * sig * sig))
    np.clip(bumps, 0.0, None, out=bumps)
    # overlapping bumps otherwise stack with n_bumps; rescale so the field
    # peaks at the top of the amplitude range regardless of bump count
    peak = bumps.max()
    if peak > 0:
        bumps *= params.bump_amplitude[1] / peak

    # gentle terrain: low-frequency sinusoids
    dem_rng = rng_for(seed, 0xDE3)
    phase = dem_rng.uniform(0, 2 * np.pi, size=4)
    wave = (
        np.sin(2 * np.pi * (cx - xmin) / (xmax - xmin) + phase[0])
        + np.cos(2 * np.pi * (cy - ymin) / (ymax - ymin) + phase[1])
        + 0.5 * np.sin(4 * np.pi * (cx - xmin) / (xmax - xmin) + phase[2])
        + 0.5 * np.cos(4 * np.pi * (cy - ymin) / (ymax - ymin) + phase[3])
    )
    dem = params.dem_base + params.dem_relief * wave / 3.0

    lc_rng = rng_for(seed, 0x1C)
    landcover = np.full((n_rows, n_cols), LANDCOVER_CODES["TreeCover"], dtype=np.float64)
    for _ in range(params.n_patches):
        name = _PATCH_CLASSES[lc_rng.choice(len(_PATCH_CLASSES), p=np.array(_PATCH_WEIGHTS))]
        px = lc_rng.uniform(xmin, xmax)
        py = lc_rng.uniform(ymin, ymax)
        w = lc_rng.uniform(*params.patch_size)
        h = lc_rng.uniform(*params.patch_size)
        sel = (cx >= px - w / 2) & (cx <= px + w / 2) & (cy >= py - h / 2) & (cy <= py + h / 2)
        landcover[sel] = LANDCOVER_CODES[name]

    agb = np.zeros((n_rows, n_cols))
    for name, factor in _CLASS_AGB_FACTOR.items():
        sel = landcover == LANDCOVER_CODES[name]
        agb[sel] = factor * bumps[sel]
        if name == "TreeCover":
            agb[sel] += params.tree_base_agb

    return SyntheticScene(
        spec=spec,
        true_agb=Raster(spec, agb, "true_agb"),
        ground_dem=Raster(spec, dem, "dem"),
        landcover=Raster(spec, landcover, "landcover"),
        seed=seed,
        params=params,
    )


def gen_cloud(scene: SyntheticScene, density: float, seed: int) -> PointCloud:
    """Simulated un-normalized point cloud at ``density`` pulses per m^2.

    Every pulse yields a classified ground return; pulses over vegetated
    pixels add a canopy first return whose per-pixel maximum height tracks
    scale * agb ** exponent.
    """
    if density <= 0:
        raise ValueError("density must be > 0")
    spec = scene.spec
    xmin, ymin, xmax, ymax = spec.extent
    area = (xmax - xmin) * (ymax - ymin)
    rng = rng_for(seed, 0xC10D)
    n_pulses = int(rng.poisson(density * area))
    x = rng.uniform(xmin, xmax, size=n_pulses)
    y = rng.uniform(ymin, ymax, size=n_pulses)

    row, col = spec.cell_index(x, y)
    row = np.clip(row, 0, spec.n_rows - 1)
    col = np.clip(col, 0, spec.n_cols - 1)
    agb = scene.true_agb.values[row, col]
    ground_z = scene.ground_dem.values[row, col]

    h_top = scene.params.canopy_height_scale * np.power(
        np.maximum(agb, 0.0), scene.params.canopy_height_exponent)
    canopy = (agb > 0) & (h_top > 0.5)
    n_canopy = int(canopy.sum())
    canopy_h = h_top[canopy] * rng.uniform(0.3, 1.0, size=n_canopy) \
        + rng.normal(0.0, 0.25, size=n_canopy)
    canopy_h = np.maximum(canopy_h, 0.1)

    n_total = n_pulses + n_canopy
    xs = np.empty(n_total)
    ys = np.empty(n_total)
    zs = np.empty(n_total)
    rn = np.empty(n_total, dtype=np.int32)
    nr = np.empty(n_total, dtype=np.int32)
    cl = np.empty(n_total, dtype=np.int32)

    # ground returns for every pulse
    xs[:n_pulses] = x
    ys[:n_pulses] = y
    zs[:n_pulses] = ground_z + rng.normal(0.0, 0.03, size=n_pulses)
    rn[:n_pulses] = np.where(canopy, 2, 1)
    nr[:n_pulses] = np.where(canopy, 2, 1)
    cl[:n_pulses] = 2

    # canopy first returns; beam spread offsets them slightly from the pulse axis
    eps = 1e-6
    cx = np.clip(x[canopy] + rng.normal(0.0, 0.35, size=n_canopy), xmin, xmax - eps)
    cy = np.clip(y[canopy] + rng.normal(0.0, 0.35, size=n_canopy), ymin, ymax - eps)
    xs[n_pulses:] = cx
    ys[n_pulses:] = cy
    # elevation referenced to the landing cell's ground, so the height above
    # ground stays consistent when beam spread crosses a cell boundary
    c_row, c_col = spec.cell_index(cx, cy)
    zs[n_pulses:] = scene.ground_dem.values[c_row, c_col] + canopy_h
    rn[n_pulses:] = 1
    nr[n_pulses:] = 2
    cl[n_pulses:] = 1

    return PointCloud.from_arrays(xs, ys, zs, rn, nr, cl)


def gen_inventory(
    scene: SyntheticScene,
    plot_spacing: float,
    years: list[int],
    lidar_year: int,
    growth_rate: float = 0.02,
    disturbed_fraction: float = 0.05,
    seed: int = 0,
) -> list[InventoryRecord]:
    """Repeat inventories on a jittered grid: scene truth is the state at
    ``lidar_year``; other years scale by compound growth, with a seeded
    fraction of plots dropped sharply at a seeded year to exercise the
    disturbance exclusion."""
    if len(years) < 2:
        raise ValueError("need at least 2 inventory years")
    spec = scene.spec
    xmin, ymin, xmax, ymax = spec.extent
    margin = 60.0
    rng = rng_for(seed, 0x14F)
    records: list[InventoryRecord] = []
    plot_num = 0
    gx = np.arange(xmin + margin, xmax - margin, plot_spacing)
    gy = np.arange(ymin + margin, ymax - margin, plot_spacing)
    for px in gx:
        for py in gy:
            x = px + rng.uniform(-plot_spacing / 4, plot_spacing / 4)
            y = py + rng.uniform(-plot_spacing / 4, plot_spacing / 4)
            x = min(max(x, xmin + margin), xmax - margin)
            y = min(max(y, ymin + margin), ymax - margin)
            row, col = spec.cell_index(x, y)
            base_agb = float(scene.true_agb.values[int(row), int(col)])
            lc = float(scene.landcover.values[int(row), int(col)])
            # measured wherever woody biomass exists under a forest-compatible
            # land use; agricultural and built land uses record structural
            # zeros even when the canopy carries returns
            measurable = lc in (LANDCOVER_CODES["TreeCover"],
                                LANDCOVER_CODES["Wetland"],
                                LANDCOVER_CODES["GrassShrub"])
            forested = measurable and base_agb > 0
            disturbed = rng.uniform() < disturbed_fraction
            disturb_year = int(rng.choice(years[1:])) if disturbed else None
            tax_code = _tax_code_for(lc, rng)
            plot_id = f"P{plot_num:05d}"
            plot_num += 1
            for year in sorted(years):
                agb = base_agb * (1.0 + growth_rate) ** (year - lidar_year) if forested else 0.0
                if disturbed and disturb_year is not None and year >= disturb_year:
                    agb *= 0.5      # one-time loss well past the 5% exclusion cutoff
                records.append(InventoryRecord(
                    plot_id=plot_id, x=float(x), y=float(y), inventory_year=int(year),
                    agb=float(agb), forested=bool(forested), tax_code=tax_code,
                ))
    return records


def _tax_code_for(landcover_code: float, rng: np.random.Generator) -> int:
    if landcover_code == LANDCOVER_CODES["TreeCover"]:
        return int(rng.choice([910, 911, 912, 930]))
    if landcover_code == LANDCOVER_CODES["Cropland"]:
        return int(rng.choice([105, 120]))
    if landcover_code == LANDCOVER_CODES["GrassShrub"]:
        return int(rng.choice([314, 323]))
    return int(rng.choice([210, 240, 260]))
