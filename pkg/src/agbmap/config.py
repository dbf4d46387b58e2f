"""Run configuration and manifest.

Config format: flat ``key = value`` lines under ``[section]`` headers,
lists comma-separated. Every key is declared here; an unknown key or
section is a validation error naming the offender. The manifest records
the config hash, input digests, and per-stage seeds so that identical
manifests imply identical outputs (timestamps are off by default for
byte-stable reruns).
"""

from __future__ import annotations

import configparser
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .learners import GBTParams, Hyperparams, RFParams, SVRParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    output_dir: str = "out"
    inventories: str = ""
    coverages: str = ""
    clouds_dir: str = ""
    landcover: str = ""
    aux_dir: str = ""
    parcels: str = ""
    hex_estimates: str = ""


@dataclass(frozen=True)
class SceneConfig:
    extent: tuple[float, float, float, float] = (0.0, 0.0, 3200.0, 3200.0)
    cell_size: float = 30.0
    n_bumps: int = 40
    tree_base_agb: float = 30.0
    canopy_height_scale: float = 0.6
    canopy_height_exponent: float = 0.5
    density: float = 2.0
    plot_spacing: float = 150.0
    n_patches: int = 12
    patch_min: float = 100.0
    patch_max: float = 500.0
    years: tuple[int, ...] = (2013, 2015, 2019)
    lidar_year: int = 2016
    growth_rate: float = 0.02
    disturbed_fraction: float = 0.05
    n_coverages: int = 2


@dataclass(frozen=True)
class ThresholdsConfig:
    hull_coverage: float = 0.90
    disturbance_decrease: float = 0.05
    aoa_quantile: float = 0.75
    aoa_iqr_multiplier: float = 1.5
    mapped_area_fraction: float = 0.10
    density_filter_ha_per_plot: float = 24000.0
    train_fraction: float = 0.8

    def __post_init__(self) -> None:
        checks = [
            ("hull_coverage", self.hull_coverage, 0.0, 1.0),
            ("disturbance_decrease", self.disturbance_decrease, 0.0, 1.0),
            ("aoa_quantile", self.aoa_quantile, 0.0, 1.0),
            ("aoa_iqr_multiplier", self.aoa_iqr_multiplier, 0.0, 100.0),
            ("mapped_area_fraction", self.mapped_area_fraction, 0.0, 1.0),
            ("train_fraction", self.train_fraction, 0.0, 1.0),
        ]
        for name, value, lo, hi in checks:
            if not (lo <= value <= hi):
                raise ConfigError(f"{name} = {value} outside [{lo}, {hi}]")
        if self.density_filter_ha_per_plot <= 0:
            raise ConfigError("density_filter_ha_per_plot must be positive")


@dataclass(frozen=True)
class LearnersConfig:
    rf_n_trees: int = 500
    rf_mtry: int | None = None
    rf_min_leaf: int = 5
    gbt_n_rounds: int = 500
    gbt_learning_rate: float = 0.05
    gbt_max_depth: int = 3
    gbt_subsample_fraction: float = 0.75
    svr_c: float = 10.0
    svr_epsilon: float | None = None
    svr_gamma: float | None = None
    grid_search: bool = False
    cv_folds: int = 5
    # small per-parameter neighborhoods around the defaults
    rf_mtry_grid: tuple[int, ...] = ()
    gbt_learning_rate_grid: tuple[float, ...] = (0.02, 0.05, 0.1)
    svr_c_grid: tuple[float, ...] = (1.0, 10.0, 100.0)
    loo_rf_n_trees: int = 100
    loo_gbt_n_rounds: int = 100
    importance_max_rows: int | None = None

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            rf=RFParams(n_trees=self.rf_n_trees, mtry=self.rf_mtry,
                        min_leaf=self.rf_min_leaf),
            gbt=GBTParams(n_rounds=self.gbt_n_rounds, learning_rate=self.gbt_learning_rate,
                          max_depth=self.gbt_max_depth,
                          subsample_fraction=self.gbt_subsample_fraction),
            svr=SVRParams(C=self.svr_c, epsilon=self.svr_epsilon, gamma=self.svr_gamma),
        )

    def loo_hyperparams(self) -> Hyperparams:
        hp = self.hyperparams()
        return Hyperparams(
            rf=RFParams(n_trees=self.loo_rf_n_trees, mtry=hp.rf.mtry,
                        min_leaf=hp.rf.min_leaf),
            gbt=GBTParams(n_rounds=self.loo_gbt_n_rounds, learning_rate=hp.gbt.learning_rate,
                          max_depth=hp.gbt.max_depth,
                          subsample_fraction=hp.gbt.subsample_fraction),
            svr=hp.svr,
        )


@dataclass(frozen=True)
class AssessmentConfig:
    spacings: tuple[float, ...] = (2000.0, 4000.0, 8000.0, 16000.0, 32000.0)
    choropleth_spacing: float = 50000.0
    moran_radii: tuple[float, ...] = (500.0, 1000.0, 2000.0, 4000.0)
    bootstrap_replicates: int = 1000
    moran_permutations: int = 1000


@dataclass(frozen=True)
class FlagsConfig:
    se_divide_sqrt_n: bool = False
    lcmap_vintage_mode: str = "mosaic"     # "mosaic" | "per_coverage"
    loo_reduced_fits: bool = False
    manifest_timestamps: bool = False
    di_distance_mode: str = "pairwise"     # "pairwise" | "nearest" (alternative reading)

    def __post_init__(self) -> None:
        if self.lcmap_vintage_mode not in ("mosaic", "per_coverage"):
            raise ConfigError(f"lcmap_vintage_mode = {self.lcmap_vintage_mode!r} "
                              "(expected 'mosaic' or 'per_coverage')")
        if self.di_distance_mode not in ("pairwise", "nearest"):
            raise ConfigError(f"di_distance_mode = {self.di_distance_mode!r} "
                              "(expected 'pairwise' or 'nearest')")


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    master_seed: int = 42
    scene: SceneConfig = field(default_factory=SceneConfig)
    thresholds: ThresholdsConfig = field(default_factory=ThresholdsConfig)
    learners: LearnersConfig = field(default_factory=LearnersConfig)
    assessment: AssessmentConfig = field(default_factory=AssessmentConfig)
    flags: FlagsConfig = field(default_factory=FlagsConfig)

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Parsing

def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got {s!r}")


def _parse_list(elem):
    def parse(s: str):
        parts = [p.strip() for p in s.split(",") if p.strip()]
        return tuple(elem(p) for p in parts)
    return parse


def _parse_optional(elem):
    def parse(s: str):
        return None if s.strip().lower() in ("", "none") else elem(s)
    return parse


_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "paths": {
        "output_dir": ("output_dir", str), "inventories": ("inventories", str),
        "coverages": ("coverages", str), "clouds_dir": ("clouds_dir", str),
        "landcover": ("landcover", str), "aux_dir": ("aux_dir", str),
        "parcels": ("parcels", str), "hex_estimates": ("hex_estimates", str),
    },
    "seeds": {"master_seed": ("master_seed", int)},
    "scene": {
        "extent": ("extent", _parse_list(float)), "cell_size": ("cell_size", float),
        "n_bumps": ("n_bumps", int), "tree_base_agb": ("tree_base_agb", float),
        "canopy_height_scale": ("canopy_height_scale", float),
        "canopy_height_exponent": ("canopy_height_exponent", float),
        "density": ("density", float), "plot_spacing": ("plot_spacing", float),
        "n_patches": ("n_patches", int), "patch_min": ("patch_min", float),
        "patch_max": ("patch_max", float),
        "years": ("years", _parse_list(int)), "lidar_year": ("lidar_year", int),
        "growth_rate": ("growth_rate", float),
        "disturbed_fraction": ("disturbed_fraction", float),
        "n_coverages": ("n_coverages", int),
    },
    "thresholds": {
        "hull_coverage": ("hull_coverage", float),
        "disturbance_decrease": ("disturbance_decrease", float),
        "aoa_quantile": ("aoa_quantile", float),
        "aoa_iqr_multiplier": ("aoa_iqr_multiplier", float),
        "mapped_area_fraction": ("mapped_area_fraction", float),
        "density_filter_ha_per_plot": ("density_filter_ha_per_plot", float),
        "train_fraction": ("train_fraction", float),
    },
    "learners": {
        "rf_n_trees": ("rf_n_trees", int), "rf_mtry": ("rf_mtry", _parse_optional(int)),
        "rf_min_leaf": ("rf_min_leaf", int),
        "gbt_n_rounds": ("gbt_n_rounds", int),
        "gbt_learning_rate": ("gbt_learning_rate", float),
        "gbt_max_depth": ("gbt_max_depth", int),
        "gbt_subsample_fraction": ("gbt_subsample_fraction", float),
        "svr_c": ("svr_c", float), "svr_epsilon": ("svr_epsilon", _parse_optional(float)),
        "svr_gamma": ("svr_gamma", _parse_optional(float)),
        "grid_search": ("grid_search", _parse_bool), "cv_folds": ("cv_folds", int),
        "rf_mtry_grid": ("rf_mtry_grid", _parse_list(int)),
        "gbt_learning_rate_grid": ("gbt_learning_rate_grid", _parse_list(float)),
        "svr_c_grid": ("svr_c_grid", _parse_list(float)),
        "loo_rf_n_trees": ("loo_rf_n_trees", int),
        "loo_gbt_n_rounds": ("loo_gbt_n_rounds", int),
        "importance_max_rows": ("importance_max_rows", _parse_optional(int)),
    },
    "assessment": {
        "spacings": ("spacings", _parse_list(float)),
        "choropleth_spacing": ("choropleth_spacing", float),
        "moran_radii": ("moran_radii", _parse_list(float)),
        "bootstrap_replicates": ("bootstrap_replicates", int),
        "moran_permutations": ("moran_permutations", int),
    },
    "flags": {
        "se_divide_sqrt_n": ("se_divide_sqrt_n", _parse_bool),
        "lcmap_vintage_mode": ("lcmap_vintage_mode", str),
        "loo_reduced_fits": ("loo_reduced_fits", _parse_bool),
        "manifest_timestamps": ("manifest_timestamps", _parse_bool),
        "di_distance_mode": ("di_distance_mode", str),
    },
}

_SECTION_CLASS = {
    "paths": ("paths", PathsConfig),
    "scene": ("scene", SceneConfig),
    "thresholds": ("thresholds", ThresholdsConfig),
    "learners": ("learners", LearnersConfig),
    "assessment": ("assessment", AssessmentConfig),
    "flags": ("flags", FlagsConfig),
}


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    text = Path(path).read_text()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    kwargs: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        schema = _SCHEMA[section]
        values: dict = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"unknown config key '{key}' in section [{section}]")
            attr, conv = schema[key]
            try:
                values[attr] = conv(raw)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for '{key}' in [{section}]: {exc}") from exc
        if section == "seeds":
            kwargs.update(values)
        else:
            field_name, cls = _SECTION_CLASS[section]
            kwargs[field_name] = cls(**values)
    return RunConfig(**kwargs)


def write_default_config(path) -> None:
    cfg = RunConfig()
    lines = []
    for section, schema in _SCHEMA.items():
        lines.append(f"[{section}]")
        holder = cfg if section == "seeds" else getattr(cfg, _SECTION_CLASS[section][0])
        for key, (attr, _) in schema.items():
            value = getattr(holder, attr)
            if isinstance(value, tuple):
                text = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


# ---------------------------------------------------------------------------
# Manifest

MODULE_VERSION = "1.0.0"


@dataclass
class RunManifest:
    config_hash: str
    module_version: str = MODULE_VERSION
    input_digests: dict = field(default_factory=dict)
    stage_seeds: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)

    def record_stage(self, stage: str, seed: int, with_timestamp: bool) -> None:
        self.stage_seeds[stage] = int(seed)
        if with_timestamp:
            self.timestamps[stage] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())

    def record_input(self, label: str, path) -> None:
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.input_digests[label] = digest

    def write(self, path) -> None:
        payload = {
            "config_hash": self.config_hash,
            "module_version": self.module_version,
            "input_digests": dict(sorted(self.input_digests.items())),
            "stage_seeds": dict(sorted(self.stage_seeds.items())),
            "timestamps": dict(sorted(self.timestamps.items())),
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        payload = json.loads(Path(path).read_text())
        return cls(
            config_hash=payload["config_hash"],
            module_version=payload.get("module_version", MODULE_VERSION),
            input_digests=payload.get("input_digests", {}),
            stage_seeds=payload.get("stage_seeds", {}),
            timestamps=payload.get("timestamps", {}),
        )
