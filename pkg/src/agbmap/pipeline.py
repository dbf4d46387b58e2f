"""Stage driver for the mapping workflow.

Each stage is a method on :class:`Pipeline`; stages talk through typed
artifacts kept in memory and mirrored to the output directory, so the CLI
can run one stage per invocation (reloading upstream artifacts from disk)
while tests run the whole chain in-process. Everything downstream of the
config is deterministic.
"""

from __future__ import annotations

import csv
import dataclasses
import shutil
import warnings
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from shapely.geometry import box

from . import assess
from .aoa import (
    DIStats,
    ImportanceWeights,
    aoa_mask,
    aoa_threshold,
    cluster_predictors,
    dissimilarity_index_batch,
    fit_di_stats,
    permutation_importance,
)
from .config import ConfigError, RunConfig, RunManifest
from .ensemble import StackedEnsemble, fit_stacked_ensemble
from .geodata import (
    GridSpec,
    Raster,
    read_ascii_grid,
    read_polygon_csv,
    write_ascii_grid,
    write_polygon_csv,
)
from .learners import Dataset, Hyperparams, grid_search_cv
from .mapper import (
    LANDCOVER_CODES,
    landcover_exclusion_mask,
    mosaic,
    predict_surface,
    tabulate_by_class,
)
from .modelio import load_ensemble, save_ensemble
from .plotselect import (
    CoverageInfo,
    ModelPlot,
    build_plot_footprint,
    read_inventory_csv,
    select_assessment_plots,
    select_model_plots,
    split_train_test,
    write_inventory_csv,
)
from .pointcloud import (
    PointCloud,
    build_ground_model,
    normalize_heights,
    parse_pcx,
    write_pcx,
)
from .predictors import (
    AUX_NAMES,
    TaxEncoding,
    encode_tax,
    fit_tax_encoding,
    pixel_predictors,
    plot_predictors,
    predictor_names,
)
from .seeds import mix_seed, rng_for
from .synth import SceneParams, SyntheticScene, gen_cloud, gen_inventory, gen_scene

STAGES = ("synth", "normalize", "metrics", "select", "train", "aoa",
          "predict", "assess", "moran", "report")


class PipelineError(RuntimeError):
    pass


def _f(x: float) -> str:
    return repr(float(x))


class Pipeline:
    """Holds the config, the output tree, and every in-memory artifact."""

    def __init__(self, cfg: RunConfig, n_threads: int | None = None,
                 write_clouds: bool = True):
        self.cfg = cfg
        self.n_threads = n_threads
        self.write_clouds = write_clouds
        self.outdir = Path(cfg.paths.output_dir)
        self.manifest = self._load_manifest()

        self.scene: SyntheticScene | None = None
        self.aux: dict[str, Raster] | None = None
        self.parcels: Raster | None = None
        self.coverages: list[CoverageInfo] | None = None
        self.inventories = None
        self.raw_clouds: dict[int, PointCloud] | None = None
        self.norm_clouds: dict[int, PointCloud] | None = None
        self.lidar_stacks: dict[int, dict[str, Raster]] | None = None
        self.model_plots: list[ModelPlot] | None = None
        self.train_plots: list[ModelPlot] | None = None
        self.test_plots: list[ModelPlot] | None = None
        self.encoding: TaxEncoding | None = None
        self.band_order: tuple[str, ...] | None = None
        self.train_ds: Dataset | None = None
        self.test_ds: Dataset | None = None
        self.ensemble: StackedEnsemble | None = None
        self.weights: ImportanceWeights | None = None
        self.di_stats: DIStats | None = None
        self.threshold: float | None = None
        self.aoa_masks: dict[int, Raster] | None = None
        self.agb_mosaic = None
        self.aoa_combined: Raster | None = None
        self.agb_masked: Raster | None = None
        self.landcover_removed: Raster | None = None
        self.assessment_plots = None
        self.scale_results = None

    # ------------------------------------------------------------------
    # plumbing

    def _load_manifest(self) -> RunManifest:
        path = self.outdir / "manifest.json"
        if path.exists():
            m = RunManifest.read(path)
            if m.config_hash != self.cfg.digest():
                m = RunManifest(config_hash=self.cfg.digest())
            return m
        return RunManifest(config_hash=self.cfg.digest())

    def _stage_dir(self, stage: str) -> Path:
        d = self.outdir / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _finish_stage(self, stage: str, seed: int) -> None:
        self.manifest.record_stage(stage, seed, self.cfg.flags.manifest_timestamps)
        self.manifest.write(self.outdir / "manifest.json")

    def run_stage(self, stage: str) -> None:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        method = getattr(self, f"stage_{stage}")
        out = self.outdir / stage
        try:
            method()
        except Exception:
            if out.exists():
                shutil.rmtree(out, ignore_errors=True)
            raise

    def run_all(self) -> None:
        for stage in STAGES:
            self.run_stage(stage)

    def _stage_seed(self, stage: str) -> int:
        return mix_seed(self.cfg.master_seed, STAGES.index(stage))

    # ------------------------------------------------------------------
    # synth

    def stage_synth(self) -> None:
        cfg = self.cfg
        seed = self._stage_seed("synth")
        params = SceneParams(
            cell_size=cfg.scene.cell_size,
            n_bumps=cfg.scene.n_bumps,
            tree_base_agb=cfg.scene.tree_base_agb,
            canopy_height_scale=cfg.scene.canopy_height_scale,
            canopy_height_exponent=cfg.scene.canopy_height_exponent,
            n_patches=cfg.scene.n_patches,
            patch_size=(cfg.scene.patch_min, cfg.scene.patch_max),
        )
        scene = gen_scene(tuple(cfg.scene.extent), mix_seed(seed, 0), params)
        self.scene = scene
        self.aux = synth_aux_rasters(scene)
        self.parcels = synth_parcel_raster(scene, mix_seed(seed, 1))
        self.coverages = synth_coverages(scene.spec, cfg.scene.n_coverages,
                                         cfg.scene.lidar_year)
        self.inventories = gen_inventory(
            scene, cfg.scene.plot_spacing, list(cfg.scene.years),
            lidar_year=cfg.scene.lidar_year, growth_rate=cfg.scene.growth_rate,
            disturbed_fraction=cfg.scene.disturbed_fraction, seed=mix_seed(seed, 2),
        )
        self.raw_clouds = {}
        for cov in self.coverages:
            sub = crop_scene(scene, cov.footprint.bounds)
            self.raw_clouds[cov.coverage_id] = gen_cloud(
                sub, cfg.scene.density, mix_seed(seed, 3, cov.coverage_id))

        out = self._stage_dir("synth")
        write_ascii_grid(scene.true_agb, out / "true_agb.asc")
        write_ascii_grid(scene.ground_dem, out / "dem.asc")
        write_ascii_grid(scene.landcover, out / "landcover.asc")
        write_ascii_grid(self.parcels, out / "parcels.asc")
        for name, rast in self.aux.items():
            write_ascii_grid(rast, out / f"aux_{name}.asc")
        write_inventory_csv(self.inventories, out / "inventories.csv")
        with open(out / "coverages.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["coverage_id", "year", "footprint_file"])
            for cov in self.coverages:
                fname = f"footprint_{cov.coverage_id}.csv"
                write_polygon_csv(cov.footprint, out / fname)
                writer.writerow([cov.coverage_id, cov.acquisition_year, fname])
        if self.write_clouds:
            for cid, cloud in self.raw_clouds.items():
                write_pcx(cloud, out / f"coverage_{cid}.pcx")
        self._finish_stage("synth", seed)

    def _require_synth(self) -> None:
        if self.scene is not None:
            return
        out = self.outdir / "synth"
        if not out.exists():
            raise PipelineError("synth outputs missing; run the synth stage first")
        true_agb = read_ascii_grid(out / "true_agb.asc", "true_agb")
        dem = read_ascii_grid(out / "dem.asc", "dem")
        lc = read_ascii_grid(out / "landcover.asc", "landcover")
        self.scene = SyntheticScene(spec=true_agb.spec, true_agb=true_agb,
                                    ground_dem=dem, landcover=lc,
                                    seed=self.cfg.master_seed)
        self.parcels = read_ascii_grid(out / "parcels.asc", "parcels")
        self.aux = {name: read_ascii_grid(out / f"aux_{name}.asc", name)
                    for name in AUX_NAMES}
        self.inventories = read_inventory_csv(out / "inventories.csv")
        self.coverages = []
        with open(out / "coverages.csv", newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                self.coverages.append(CoverageInfo(
                    coverage_id=int(rec["coverage_id"]),
                    acquisition_year=int(rec["year"]),
                    footprint=read_polygon_csv(out / rec["footprint_file"]),
                ))

    def _require_raw_clouds(self) -> None:
        self._require_synth()
        if self.raw_clouds is not None:
            return
        out = self.outdir / "synth"
        self.raw_clouds = {}
        for cov in self.coverages:
            path = out / f"coverage_{cov.coverage_id}.pcx"
            if not path.exists():
                raise PipelineError(f"point cloud missing: {path}")
            with open(path, encoding="utf-8") as fh:
                self.raw_clouds[cov.coverage_id] = parse_pcx(fh)

    # ------------------------------------------------------------------
    # normalize

    def stage_normalize(self) -> None:
        self._require_raw_clouds()
        seed = self._stage_seed("normalize")
        self.norm_clouds = {}
        out = self._stage_dir("normalize")
        for cov in self.coverages:
            cloud = self.raw_clouds[cov.coverage_id]
            ground = build_ground_model(cloud, self.scene.spec)
            norm = normalize_heights(cloud, ground)
            self.norm_clouds[cov.coverage_id] = norm
            if self.write_clouds:
                write_pcx(norm, out / f"coverage_{cov.coverage_id}.pcx")
        self._finish_stage("normalize", seed)

    def _require_norm_clouds(self) -> None:
        self._require_synth()
        if self.norm_clouds is not None:
            return
        out = self.outdir / "normalize"
        self.norm_clouds = {}
        for cov in self.coverages:
            path = out / f"coverage_{cov.coverage_id}.pcx"
            if not path.exists():
                raise PipelineError(f"normalized cloud missing: {path}")
            with open(path, encoding="utf-8") as fh:
                cloud = parse_pcx(fh)
            self.norm_clouds[cov.coverage_id] = dataclasses.replace(
                cloud, height_normalized=True)

    # ------------------------------------------------------------------
    # metrics

    def stage_metrics(self) -> None:
        self._require_norm_clouds()
        seed = self._stage_seed("metrics")
        out = self._stage_dir("metrics")
        self.lidar_stacks = {}
        for cov in self.coverages:
            bands = pixel_predictors(self.norm_clouds[cov.coverage_id],
                                     self.scene.spec, n_threads=self.n_threads)
            self.lidar_stacks[cov.coverage_id] = bands
            for name, rast in bands.items():
                write_ascii_grid(rast, out / f"cov{cov.coverage_id}_{name}.asc")
        self._finish_stage("metrics", seed)

    def _require_lidar_stacks(self) -> None:
        self._require_synth()
        if self.lidar_stacks is not None:
            return
        from .predictors import LIDAR_METRIC_NAMES
        out = self.outdir / "metrics"
        self.lidar_stacks = {}
        for cov in self.coverages:
            bands = {}
            for name in LIDAR_METRIC_NAMES:
                path = out / f"cov{cov.coverage_id}_{name}.asc"
                if not path.exists():
                    raise PipelineError(f"metric band missing: {path}")
                bands[name] = read_ascii_grid(path, name)
            self.lidar_stacks[cov.coverage_id] = bands

    # ------------------------------------------------------------------
    # select

    def stage_select(self) -> None:
        self._require_norm_clouds()
        seed = self._stage_seed("select")
        plots, report = select_model_plots(self.inventories, self.coverages,
                                           self.norm_clouds)
        self.model_plots = plots
        out = self._stage_dir("select")
        report.write_csv(out / "selection_report.csv")
        write_model_plots_csv(plots, out / "model_plots.csv")
        self._finish_stage("select", seed)

    def _require_model_plots(self) -> None:
        if self.model_plots is not None:
            return
        path = self.outdir / "select" / "model_plots.csv"
        if not path.exists():
            raise PipelineError("model plots missing; run the select stage first")
        self.model_plots = read_model_plots_csv(path)

    # ------------------------------------------------------------------
    # train

    def _plot_dataset(self, plots: list[ModelPlot]) -> Dataset:
        names = self.band_order
        X = np.empty((len(plots), len(names)))
        y = np.empty(len(plots))
        for i, plot in enumerate(plots):
            vec = plot_predictors(self.norm_clouds[plot.coverage_id], plot.footprint,
                                  self.aux, self.encoding, self.parcels)
            X[i] = [vec[name] for name in names]
            y[i] = plot.agb_at_lidar
        return Dataset(X, y, names)

    def stage_train(self) -> None:
        cfg = self.cfg
        self._require_norm_clouds()
        self._require_model_plots()
        seed = self._stage_seed("train")
        if len(self.model_plots) < 5:
            raise PipelineError(f"only {len(self.model_plots)} model plots; need >= 5")
        self.train_plots, self.test_plots = split_train_test(
            self.model_plots, cfg.thresholds.train_fraction, mix_seed(seed, 0))
        self.encoding = fit_tax_encoding([p.tax_code for p in self.train_plots])
        self.band_order = predictor_names(self.encoding)
        self.train_ds = self._plot_dataset(self.train_plots)
        self.test_ds = self._plot_dataset(self.test_plots)

        hps = cfg.learners.hyperparams()
        if cfg.learners.grid_search:
            grids = {
                "rf": [dataclasses.replace(hps.rf, mtry=m)
                       for m in (cfg.learners.rf_mtry_grid or (hps.rf.mtry,))],
                "gbt": [dataclasses.replace(hps.gbt, learning_rate=r)
                        for r in (cfg.learners.gbt_learning_rate_grid
                                  or (hps.gbt.learning_rate,))],
                "svr": [dataclasses.replace(hps.svr, C=c)
                        for c in (cfg.learners.svr_c_grid or (hps.svr.C,))],
            }
            hps, _ = grid_search_cv(self.train_ds, grids, k=cfg.learners.cv_folds,
                                    seed=mix_seed(seed, 1))
        loo_hps = cfg.learners.loo_hyperparams() if cfg.flags.loo_reduced_fits else None
        self.ensemble = fit_stacked_ensemble(self.train_ds, hps, mix_seed(seed, 2),
                                             loo_hps=loo_hps)

        out = self._stage_dir("train")
        save_ensemble(self.ensemble, out / "ensemble.pagb")
        write_split_csv(self.train_plots, self.test_plots, out / "split.csv")
        with open(out / "encoding.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kind", "value"])
            for c in self.encoding.retained_codes:
                writer.writerow(["code", c])
            for c in self.encoding.retained_categories:
                writer.writerow(["category", c])

        test_pred = self.ensemble.predict(self.test_ds.X)
        bundle = assess.full_metrics(self.test_ds.y, test_pred, seed=mix_seed(seed, 3),
                                     b=cfg.assessment.bootstrap_replicates,
                                     se_divide_sqrt_n=cfg.flags.se_divide_sqrt_n)
        with open(out / "test_metrics.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for key in ("n", "rmse", "pct_rmse", "mae", "me", "r2"):
                value = getattr(bundle, key)
                writer.writerow([key, "" if value is None else
                                 (value if key == "n" else _f(value))])
        self._finish_stage("train", seed)

    def _require_train(self) -> None:
        if self.ensemble is not None:
            return
        self._require_norm_clouds()
        self._require_model_plots()
        out = self.outdir / "train"
        if not (out / "ensemble.pagb").exists():
            raise PipelineError("trained model missing; run the train stage first")
        self.ensemble = load_ensemble(out / "ensemble.pagb")
        codes, cats = [], []
        with open(out / "encoding.csv", newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                (codes if rec["kind"] == "code" else cats).append(int(rec["value"]))
        self.encoding = TaxEncoding(tuple(codes), tuple(cats))
        self.band_order = predictor_names(self.encoding)
        train_ids, test_ids = read_split_csv(out / "split.csv")
        by_id = {(p.plot_id, p.coverage_id): p for p in self.model_plots}
        self.train_plots = [by_id[k] for k in train_ids]
        self.test_plots = [by_id[k] for k in test_ids]
        self.train_ds = self._plot_dataset(self.train_plots)
        self.test_ds = self._plot_dataset(self.test_plots)

    # ------------------------------------------------------------------
    # aoa

    def _coverage_stack(self, coverage_id: int) -> dict[str, Raster]:
        """Full predictor stack for one coverage on the scene grid."""
        stack = dict(self.lidar_stacks[coverage_id])
        for name in AUX_NAMES:
            stack[name] = self.aux[name]
        stack.update(tax_indicator_bands(self.parcels, self.encoding))
        return stack

    def stage_aoa(self) -> None:
        cfg = self.cfg
        self._require_model_plots()
        self._require_train()
        self._require_lidar_stacks()
        seed = self._stage_seed("aoa")
        clusters = cluster_predictors(self.train_ds.X)
        importance_hps = (cfg.learners.loo_hyperparams() if cfg.flags.loo_reduced_fits
                          else self.ensemble.hyperparams)
        self.weights = permutation_importance(
            self.train_ds, clusters, mix_seed(seed, 0), hps=importance_hps,
            max_rows=cfg.learners.importance_max_rows)
        stats = fit_di_stats(self.train_ds.X, self.weights)
        if cfg.flags.di_distance_mode == "nearest":
            stats = _with_nearest_normalizer(stats)
        self.di_stats = stats
        test_dis = dissimilarity_index_batch(self.test_ds.X, stats)
        self.threshold = aoa_threshold(test_dis)

        self.aoa_masks = {}
        out = self._stage_dir("aoa")
        for cov in self.coverages:
            mask = aoa_mask(self._coverage_stack(cov.coverage_id), self.band_order,
                            stats, self.threshold)
            self.aoa_masks[cov.coverage_id] = mask
            write_ascii_grid(mask, out / f"aoa_cov{cov.coverage_id}.asc")
        with open(out / "importance.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["predictor", "cluster", "weight"])
            for name, cl, w in zip(self.weights.names, clusters, self.weights.weights):
                writer.writerow([name, int(cl), _f(w)])
        with open(out / "threshold.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["quantity", "value"])
            writer.writerow(["di_threshold", _f(self.threshold)])
            writer.writerow(["mean_train_distance", _f(stats.mean_train_distance)])
        self._finish_stage("aoa", seed)

    def _require_aoa(self) -> None:
        if self.aoa_masks is not None:
            return
        self._require_train()
        out = self.outdir / "aoa"
        self.aoa_masks = {}
        for cov in self.coverages:
            path = out / f"aoa_cov{cov.coverage_id}.asc"
            if not path.exists():
                raise PipelineError(f"applicability mask missing: {path}")
            self.aoa_masks[cov.coverage_id] = read_ascii_grid(path, "aoa_mask")

    # ------------------------------------------------------------------
    # predict

    def stage_predict(self) -> None:
        self._require_train()
        self._require_lidar_stacks()
        self._require_aoa()
        seed = self._stage_seed("predict")
        per_cov = {}
        years = {}
        for cov in self.coverages:
            per_cov[cov.coverage_id] = predict_surface(
                self._coverage_stack(cov.coverage_id), self.band_order, self.ensemble)
            years[cov.coverage_id] = cov.acquisition_year
        self.agb_mosaic = mosaic(per_cov, years)

        # applicability travels with the coverage that won each mosaic pixel
        spec = self.scene.spec
        prov = self.agb_mosaic.provenance.values
        combined = np.zeros((spec.n_rows, spec.n_cols))
        for cid, mask in self.aoa_masks.items():
            sel = prov == cid
            combined[sel] = mask.values[sel]
        self.aoa_combined = Raster(spec, combined, "aoa_mask")

        self.agb_masked = self._apply_masks()
        out = self._stage_dir("predict")
        write_ascii_grid(self.agb_mosaic.agb, out / "agb_mosaic.asc")
        write_ascii_grid(self.agb_mosaic.provenance, out / "provenance.asc")
        write_ascii_grid(self.aoa_combined, out / "aoa_mask.asc")
        write_ascii_grid(self.agb_masked, out / "agb_masked.asc")
        summary = tabulate_by_class(self.agb_masked, self.scene.landcover)
        summary.write_csv(out / "class_summary.csv")
        self._finish_stage("predict", seed)

    def _apply_masks(self) -> Raster:
        from .mapper import apply_masks
        return apply_masks(self.agb_mosaic.agb, self.scene.landcover, self.aoa_combined)

    def _require_predict(self) -> None:
        if self.agb_masked is not None:
            return
        self._require_synth()
        out = self.outdir / "predict"
        for attr, fname in (("agb_masked", "agb_masked.asc"),
                            ("aoa_combined", "aoa_mask.asc")):
            path = out / fname
            if not path.exists():
                raise PipelineError(f"prediction output missing: {path}")
            setattr(self, attr, read_ascii_grid(path, Path(fname).stem))

    # ------------------------------------------------------------------
    # assess

    def _removed_raster(self) -> Raster:
        spec = self.scene.spec
        removed = landcover_exclusion_mask(self.scene.landcover).astype(np.float64)
        return Raster(spec, removed, "landcover_removed")

    def _require_assessment_plots(self) -> None:
        if self.assessment_plots is not None:
            return
        self._require_predict()
        self.landcover_removed = self._removed_raster()
        plots, report = select_assessment_plots(
            self.inventories, self.coverages, self.landcover_removed,
            self.aoa_combined)
        self.assessment_plots = plots
        self._assessment_report = report

    def stage_assess(self) -> None:
        cfg = self.cfg
        self._require_predict()
        seed = self._stage_seed("assess")
        self._require_assessment_plots()
        if not self.assessment_plots:
            raise PipelineError("no assessment plots survived selection")
        out = self._stage_dir("assess")
        self._assessment_report.write_csv(out / "assessment_selection.csv")

        results = assess.riemann_assessment(
            self.assessment_plots, self.agb_masked,
            list(cfg.assessment.spacings), mix_seed(seed, 0),
            se_divide_sqrt_n=cfg.flags.se_divide_sqrt_n)
        self.scale_results = results
        assess.write_scale_results_csv(results, out / "scale_metrics.csv")
        assess.write_scatter_csv(results[0], out / "scatter_plot_pixel.csv")

        choro = assess.choropleth_residuals(
            self.assessment_plots, self.agb_masked,
            spacing=cfg.assessment.choropleth_spacing, seed=mix_seed(seed, 1))
        with open(out / "choropleth.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["hex_id", "n", "rmse", "mae", "me", "mean_reference_agb"])
            for cid in sorted(choro):
                r = choro[cid]
                writer.writerow([cid, int(r["n"]), _f(r["rmse"]), _f(r["mae"]),
                                 _f(r["me"]), _f(r["mean_reference_agb"])])

        dens = assess.density_filtered_me(
            self.assessment_plots, self.agb_masked, list(cfg.assessment.spacings),
            seed=mix_seed(seed, 2),
            min_density=1.0 / cfg.thresholds.density_filter_ha_per_plot)
        with open(out / "density_me.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["spacing_m", "me_unfiltered", "me_filtered",
                             "n_hex_unfiltered", "n_hex_filtered"])
            for row in dens:
                writer.writerow([_f(row["spacing"]), _f(row["me_unfiltered"]),
                                 _f(row["me_filtered"]), row["n_hex_unfiltered"],
                                 row["n_hex_filtered"]])

        estimates = truth_hex_estimates(
            self.scene, spacing=max(cfg.assessment.spacings), seed=mix_seed(seed, 3))
        if estimates:
            comparison = assess.menlove_compare(estimates, self.agb_masked,
                                                self.scene.landcover)
            with open(out / "design_comparison.csv", "w", newline="",
                      encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["hex_id", "map_mean", "design_density",
                                 "ci_low_density", "ci_high_density", "within_ci"])
                for row in comparison["rows"]:
                    writer.writerow([row["hex_id"], _f(row["map_estimate"]),
                                     _f(row["fia_density"]), _f(row["ci_low"]),
                                     _f(row["ci_high"]), int(row["within_ci"])])
                writer.writerow(["fraction_within_ci", _f(comparison["fraction_within_ci"]),
                                 "", "", "", ""])
        self._finish_stage("assess", seed)

    # ------------------------------------------------------------------
    # moran

    def stage_moran(self) -> None:
        cfg = self.cfg
        self._require_predict()
        seed = self._stage_seed("moran")
        self._require_assessment_plots()
        kept, extracted = assess.extract_plot_values(self.assessment_plots,
                                                     self.agb_masked)
        if len(kept) < 3:
            raise PipelineError("too few assessment plots for autocorrelation")
        points = np.array([p.footprint.center for p in kept])
        residuals = np.array([p.agb for p in kept]) - extracted
        out = self._stage_dir("moran")
        with open(out / "moran.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["radius_m", "n_pairs", "moran_i",
                             "envelope_low", "envelope_high"])
            for ri, radius in enumerate(cfg.assessment.moran_radii):
                res = assess.morans_i(points, residuals, radius,
                                      b=cfg.assessment.moran_permutations,
                                      seed=mix_seed(seed, ri))
                writer.writerow([
                    _f(radius), res.n_points,
                    "" if res.i is None else _f(res.i),
                    "" if res.envelope_low is None else _f(res.envelope_low),
                    "" if res.envelope_high is None else _f(res.envelope_high),
                ])
        self._finish_stage("moran", seed)

    # ------------------------------------------------------------------
    # report

    def stage_report(self) -> None:
        seed = self._stage_seed("report")
        out = self._stage_dir("report")
        collated = []
        for stage, fname in (("select", "selection_report.csv"),
                             ("train", "test_metrics.csv"),
                             ("assess", "scale_metrics.csv"),
                             ("assess", "density_me.csv"),
                             ("predict", "class_summary.csv"),
                             ("moran", "moran.csv")):
            src = self.outdir / stage / fname
            if src.exists():
                shutil.copyfile(src, out / fname)
                collated.append(fname)
        with open(out / "index.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["file"])
            for fname in collated:
                writer.writerow([fname])
        self._finish_stage("report", seed)


# ---------------------------------------------------------------------------
# synthetic-input helpers (aux rasters, parcels, coverages)


def synth_aux_rasters(scene: SyntheticScene) -> dict[str, Raster]:
    """Deterministic auxiliary bands: terrain derivatives from the scene DEM
    plus smooth climate fields tied to position and elevation."""
    spec = scene.spec
    dem = scene.ground_dem.values
    dzdy, dzdx = np.gradient(dem, -spec.cell_size, spec.cell_size)
    slope = np.degrees(np.arctan(np.hypot(dzdx, dzdy)))
    aspect = np.degrees(np.arctan2(-dzdx, dzdy)) % 360.0
    xmin, ymin, xmax, ymax = spec.extent
    rows = np.arange(spec.n_rows)
    cols = np.arange(spec.n_cols)
    cgrid, rgrid = np.meshgrid(cols, rows)
    cx, cy = spec.cell_center(rgrid, cgrid)
    fx = (cx - xmin) / max(xmax - xmin, 1.0)
    fy = (cy - ymin) / max(ymax - ymin, 1.0)
    return {
        "ELEV": Raster(spec, dem.copy(), "ELEV"),
        "SLOPE": Raster(spec, slope, "SLOPE"),
        "ASPECT": Raster(spec, aspect, "ASPECT"),
        "TWI": Raster(spec, 8.0 - 0.5 * slope + 2.0 * np.sin(2 * np.pi * fx), "TWI"),
        "TMIN": Raster(spec, -8.0 + 4.0 * fy - 0.006 * dem, "TMIN"),
        "TMAX": Raster(spec, 26.0 - 3.0 * fy - 0.006 * dem, "TMAX"),
        "PRECIP": Raster(spec, 900.0 + 300.0 * fx + 0.1 * dem, "PRECIP"),
    }


_PARCEL_CODES = {
    "TreeCover": (910, 911, 912, 930),
    "Cropland": (105, 120),
    "GrassShrub": (314, 323),
    "Wetland": (910, 960),
    "Developed": (210, 240, 260),
    "Water": (315,),
    "Barren": (330,),
}


def synth_parcel_raster(scene: SyntheticScene, seed: int) -> Raster:
    """Per-pixel parcel-style land-use code raster consistent with landcover."""
    spec = scene.spec
    rng = rng_for(seed, 0x9A2)
    out = np.full((spec.n_rows, spec.n_cols), 0.0)
    lc = scene.landcover.values
    for name, codes in _PARCEL_CODES.items():
        sel = lc == LANDCOVER_CODES[name]
        out[sel] = rng.choice(codes, size=int(sel.sum()))
    return Raster(spec, out, "parcels")


def synth_coverages(spec: GridSpec, n_coverages: int, year: int,
                    overlap_cells: int = 4) -> list[CoverageInfo]:
    """Vertical acquisition strips spanning the grid with a small overlap."""
    xmin, ymin, xmax, ymax = spec.extent
    n_coverages = max(1, n_coverages)
    strip = spec.n_cols // n_coverages
    coverages = []
    for i in range(n_coverages):
        c0 = i * strip
        c1 = spec.n_cols if i == n_coverages - 1 else (i + 1) * strip + overlap_cells
        x0 = xmin + c0 * spec.cell_size
        x1 = min(xmin + c1 * spec.cell_size, xmax)
        coverages.append(CoverageInfo(coverage_id=i + 1, acquisition_year=year,
                                      footprint=box(x0, ymin, x1, ymax)))
    return coverages


def crop_scene(scene: SyntheticScene, bounds) -> SyntheticScene:
    """Cell-aligned crop used to simulate one acquisition strip."""
    spec = scene.spec
    xmin, ymin, xmax, ymax = bounds
    c0 = max(0, int(np.floor((xmin - spec.origin_x) / spec.cell_size)))
    c1 = min(spec.n_cols, int(np.ceil((xmax - spec.origin_x) / spec.cell_size)))
    sub = GridSpec(origin_x=spec.origin_x + c0 * spec.cell_size, origin_y=spec.origin_y,
                   n_cols=c1 - c0, n_rows=spec.n_rows, cell_size=spec.cell_size,
                   nodata=spec.nodata)
    return SyntheticScene(
        spec=sub,
        true_agb=Raster(sub, scene.true_agb.values[:, c0:c1].copy(), "true_agb"),
        ground_dem=Raster(sub, scene.ground_dem.values[:, c0:c1].copy(), "dem"),
        landcover=Raster(sub, scene.landcover.values[:, c0:c1].copy(), "landcover"),
        seed=scene.seed,
        params=scene.params,
    )


def tax_indicator_bands(parcels: Raster, encoding: TaxEncoding) -> dict[str, Raster]:
    """Indicator rasters for every retained code/category, mapped from the
    parcel-code raster (nodata treated as missing -> default sentinel)."""
    spec = parcels.spec
    values = parcels.values
    bands = {name: np.zeros((spec.n_rows, spec.n_cols))
             for name in encoding.indicator_names}
    for code in np.unique(values):
        code_key = None if code == spec.nodata else int(code)
        flags = encode_tax(code_key, encoding)
        sel = values == code
        for name, flag in flags.items():
            if flag:
                bands[name][sel] = 1.0
    return {name: Raster(spec, arr, name) for name, arr in bands.items()}


def truth_hex_estimates(scene: SyntheticScene, spacing: float, seed: int,
                        ci_fraction: float = 0.15) -> list:
    """Design-style hexagon AGB totals derived from scene truth with a
    symmetric CI, for exercising the map-vs-design comparison."""
    from .geodata import tessellate_hexagons

    spec = scene.spec
    tess = tessellate_hexagons(spec.extent, spacing, seed)
    vegetated = ~landcover_exclusion_mask(scene.landcover)
    cell_ha = spec.cell_area_ha
    estimates = []
    for cid, poly in tess.cells:
        clipped = poly.intersection(box(*spec.extent))
        if clipped.is_empty:
            continue
        total = 0.0
        any_cells = False
        minx, miny, maxx, maxy = clipped.bounds
        r0, c0 = spec.cell_index(minx, maxy - 1e-9)
        r1, c1 = spec.cell_index(maxx - 1e-9, miny)
        r0 = int(np.clip(r0, 0, spec.n_rows - 1)); r1 = int(np.clip(r1, 0, spec.n_rows - 1))
        c0 = int(np.clip(c0, 0, spec.n_cols - 1)); c1 = int(np.clip(c1, 0, spec.n_cols - 1))
        for row in range(min(r0, r1), max(r0, r1) + 1):
            for col in range(min(c0, c1), max(c0, c1) + 1):
                if not vegetated[row, col]:
                    continue
                cell = spec.cell_polygon(row, col)
                frac = cell.intersection(clipped).area / cell.area
                if frac <= 0:
                    continue
                any_cells = True
                total += scene.true_agb.values[row, col] * cell_ha * frac
        if not any_cells:
            continue
        estimates.append(assess.HexEstimate(
            hex_id=cid, polygon=poly, agb_total=total,
            ci_low=total * (1 - ci_fraction), ci_high=total * (1 + ci_fraction)))
    return estimates


def _with_nearest_normalizer(stats: DIStats) -> DIStats:
    """Alternative DI normalizer: mean nearest-neighbor training distance."""
    tree = cKDTree(stats.scaled_train)
    d, _ = tree.query(stats.scaled_train, k=2)
    mean_nn = float(np.mean(d[:, 1]))
    if mean_nn == 0:
        warnings.warn("degenerate training set; keeping pairwise normalizer")
        return stats
    return dataclasses.replace(stats, mean_train_distance=mean_nn)


# ---------------------------------------------------------------------------
# small CSV helpers for stage handoff


def write_model_plots_csv(plots: list[ModelPlot], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["plot_id", "coverage_id", "x", "y", "agb_at_lidar",
                         "source", "inventory_year", "pre_year", "post_year",
                         "tax_code"])
        for p in plots:
            cx, cy = p.footprint.center
            writer.writerow([p.plot_id, p.coverage_id, _f(cx), _f(cy),
                             _f(p.agb_at_lidar), p.source, p.inventory_year,
                             "" if p.pre_year is None else p.pre_year,
                             "" if p.post_year is None else p.post_year,
                             "" if p.tax_code is None else p.tax_code])


def read_model_plots_csv(path) -> list[ModelPlot]:
    plots = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            plots.append(ModelPlot(
                plot_id=rec["plot_id"], coverage_id=int(rec["coverage_id"]),
                agb_at_lidar=float(rec["agb_at_lidar"]), source=rec["source"],
                footprint=build_plot_footprint((float(rec["x"]), float(rec["y"]))),
                inventory_year=int(rec["inventory_year"]),
                pre_year=int(rec["pre_year"]) if rec["pre_year"] else None,
                post_year=int(rec["post_year"]) if rec["post_year"] else None,
                tax_code=int(rec["tax_code"]) if rec["tax_code"] else None,
            ))
    return plots


def write_split_csv(train_plots, test_plots, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["plot_id", "coverage_id", "partition"])
        for part, plots in (("train", train_plots), ("test", test_plots)):
            for p in plots:
                writer.writerow([p.plot_id, p.coverage_id, part])


def read_split_csv(path) -> tuple[list, list]:
    train_ids, test_ids = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            key = (rec["plot_id"], int(rec["coverage_id"]))
            (train_ids if rec["partition"] == "train" else test_ids).append(key)
    return train_ids, test_ids
