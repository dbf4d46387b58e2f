"""Agreement metrics, GMFR, multi-scale assessment, hexagon comparisons,
Moran's I, and the density-filtered mean error."""

import math

import numpy as np
import pytest
from shapely.geometry import box

from agbmap.assess import (
    HexEstimate,
    accuracy_metrics,
    analytic_se,
    bootstrap_se,
    choropleth_residuals,
    density_filtered_me,
    extract_plot_values,
    full_metrics,
    gmfr,
    menlove_compare,
    morans_i,
    riemann_assessment,
)
from agbmap.geodata import GridSpec, Raster, build_plot_footprint, hexagon_area
from agbmap.mapper import LANDCOVER_CODES
from agbmap.plotselect import AssessmentPlot


def make_plot(pid, x, y, agb):
    return AssessmentPlot(plot_id=pid, coverage_id=1, agb=agb,
                          inventory_year=2016, footprint=build_plot_footprint((x, y)))


def const_raster(spec, value):
    return Raster(spec, np.full((spec.n_rows, spec.n_cols), float(value)), "agb")


class TestAccuracyMetrics:
    def test_perfect_fit(self, rng):
        y = rng.uniform(0, 100, 20)
        m = accuracy_metrics(y, y)
        assert m.rmse == 0 and m.mae == 0 and m.me == 0 and m.r2 == 1.0

    def test_hand_case(self):
        m = accuracy_metrics([0.0, 2.0], [1.0, 1.0])
        assert m.rmse == 1.0
        assert m.mae == 1.0
        assert m.me == 0.0
        assert m.r2 == 0.0
        assert m.pct_rmse == pytest.approx(100.0)

    def test_percent_identity_at_reported_scale(self, rng):
        # a 40.93 RMSE reported as 44.87% implies a reference mean near 91.2;
        # the percent identity must reproduce that mean exactly
        ybar = 100.0 * 40.93 / 44.87
        assert ybar == pytest.approx(91.2, abs=0.05)
        y = rng.normal(ybar, 30, 400)
        y_hat = y + rng.normal(0, 10, 400)
        m = accuracy_metrics(y, y_hat)
        assert m.pct_rmse == pytest.approx(100.0 * m.rmse / np.mean(y), abs=1e-12)

    def test_me_sign_convention(self):
        # ME = mean(reference - prediction): overprediction gives negative ME
        m = accuracy_metrics([10.0, 10.0], [12.0, 12.0])
        assert m.me == -2.0

    def test_inequalities(self, rng):
        y = rng.uniform(0, 200, 50)
        y_hat = y + rng.normal(0, 20, 50)
        m = accuracy_metrics(y, y_hat)
        assert m.rmse >= m.mae >= abs(m.me)

    def test_zero_mean_flags_percent(self):
        m = accuracy_metrics([0.0, 0.0, 0.0], [1.0, -1.0, 0.0])
        assert m.pct_rmse is None and m.pct_mae is None

    def test_r2_can_be_negative(self, rng):
        y = rng.uniform(0, 10, 30)
        m = accuracy_metrics(y, y + 100.0)
        assert m.r2 < 0

    def test_rmse_squared_identity(self, rng):
        y = rng.uniform(0, 100, 25)
        y_hat = rng.uniform(0, 100, 25)
        m = accuracy_metrics(y, y_hat)
        sse = float(np.sum((y - y_hat) ** 2))
        assert m.rmse**2 * 25 == pytest.approx(sse, rel=1e-12)


class TestBootstrapSe:
    def test_perfect_fit_zero_se_rmse(self, rng):
        y = rng.uniform(0, 100, 30)
        se_rmse, _ = bootstrap_se(y, y, b=200, seed=1)
        assert se_rmse == 0.0

    def test_seeded_reproducibility(self, rng):
        y = rng.uniform(0, 100, 40)
        y_hat = y + rng.normal(0, 10, 40)
        assert bootstrap_se(y, y_hat, seed=7) == bootstrap_se(y, y_hat, seed=7)

    def test_matches_high_b_oracle(self, rng):
        n = 100
        y = rng.uniform(20, 150, n)
        y_hat = y + rng.normal(0, 15, n)
        se_rmse, se_r2 = bootstrap_se(y, y_hat, b=1000, seed=3)

        oracle_rng = np.random.default_rng(987654)
        b_oracle = 100_000
        rmses = np.empty(b_oracle)
        r2s = np.empty(b_oracle)
        for start in range(0, b_oracle, 10_000):
            idx = oracle_rng.integers(0, n, size=(10_000, n))
            ys, ps = y[idx], y_hat[idx]
            err = ys - ps
            rmses[start:start + 10_000] = np.sqrt(np.mean(err**2, axis=1))
            ss_res = np.sum(err**2, axis=1)
            ss_tot = np.sum((ys - ys.mean(axis=1, keepdims=True)) ** 2, axis=1)
            r2s[start:start + 10_000] = 1.0 - ss_res / ss_tot
        oracle_se_rmse = math.sqrt(np.var(rmses) / n)
        oracle_se_r2 = math.sqrt(np.var(r2s) / n)
        assert se_rmse == pytest.approx(oracle_se_rmse, rel=0.15)
        assert se_r2 == pytest.approx(oracle_se_r2, rel=0.15)


class TestAnalyticSe:
    def test_constant_errors(self):
        assert analytic_se([3.0, 3.0, 3.0]) == 0.0

    def test_hand_case(self):
        assert analytic_se([0.0, 2.0]) == pytest.approx(math.sqrt(2.0))

    def test_scale_equivariance(self, rng):
        e = rng.normal(0, 5, 40)
        assert analytic_se(7.0 * e) == pytest.approx(7.0 * analytic_se(e), rel=1e-12)

    def test_sqrt_n_flag(self, rng):
        y = rng.uniform(0, 100, 25)
        y_hat = y + rng.normal(0, 10, 25)
        plain = full_metrics(y, y_hat, b=50, se_divide_sqrt_n=False)
        scaled = full_metrics(y, y_hat, b=50, se_divide_sqrt_n=True)
        assert scaled.se_me == pytest.approx(plain.se_me / math.sqrt(25), rel=1e-12)


class TestGmfr:
    def test_identity_line(self, rng):
        x = rng.uniform(0, 100, 30)
        line = gmfr(x, x)
        assert line.slope == pytest.approx(1.0)
        assert line.intercept == pytest.approx(0.0, abs=1e-10)

    def test_affine_line(self, rng):
        x = rng.uniform(0, 100, 30)
        line = gmfr(x, 2.0 * x + 3.0)
        assert line.slope == pytest.approx(2.0)
        assert line.intercept == pytest.approx(3.0, abs=1e-9)

    def test_reciprocity(self, rng):
        x = rng.uniform(0, 100, 40)
        y = 1.5 * x + rng.normal(0, 10, 40)
        assert gmfr(x, y).slope == pytest.approx(1.0 / gmfr(y, x).slope, rel=1e-10)

    def test_passes_through_means(self, rng):
        x = rng.uniform(0, 100, 40)
        y = rng.uniform(0, 100, 40)
        line = gmfr(x, y)
        assert line.intercept + line.slope * x.mean() == pytest.approx(y.mean(), abs=1e-10)

    def test_negative_correlation_negative_slope(self, rng):
        x = rng.uniform(0, 100, 40)
        y = -2.0 * x + rng.normal(0, 5, 40)
        assert gmfr(x, y).slope < 0

    def test_zero_variance_errors(self):
        with pytest.raises(ValueError):
            gmfr([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


class TestRiemannAssessment:
    def test_constant_scene_zero_errors(self):
        spec = GridSpec(0, 0, 40, 40, cell_size=30.0)
        raster = const_raster(spec, 80.0)
        plots = [make_plot(f"P{i}", 150.0 + 200.0 * i, 400.0, 80.0) for i in range(4)]
        results = riemann_assessment(plots, raster, [600.0], seed=1)
        for res in results:
            assert res.metrics.rmse == pytest.approx(0.0, abs=1e-9)
            assert res.metrics.me == pytest.approx(0.0, abs=1e-9)

    def test_plot_pixel_extraction_is_area_weighted(self):
        spec = GridSpec(0, 0, 40, 40, cell_size=30.0)
        raster = const_raster(spec, 55.0)
        plots = [make_plot("P1", 600.0, 600.0, 50.0), make_plot("P2", 300.0, 300.0, 60.0)]
        results = riemann_assessment(plots, raster, [], seed=1)
        assert results[0].scale == "plot_pixel"
        np.testing.assert_allclose(results[0].pairs[:, 1], 55.0, atol=1e-9)

    def test_tiny_spacing_reproduces_plot_pixel(self, rng):
        spec = GridSpec(0, 0, 60, 60, cell_size=30.0)
        raster = Raster(spec, rng.uniform(20, 120, (60, 60)), "agb")
        plots = [make_plot(f"P{i}", 150.0 + 300.0 * (i % 5), 150.0 + 300.0 * (i // 5),
                           float(rng.uniform(20, 120))) for i in range(20)]
        results = riemann_assessment(plots, raster, [80.0], seed=2)
        pp, hexed = results
        assert hexed.n_units == pp.n_units         # all plots in distinct hexes
        assert hexed.metrics.rmse == pytest.approx(pp.metrics.rmse, rel=1e-12)
        assert hexed.metrics.r2 == pytest.approx(pp.metrics.r2, rel=1e-12)

    def test_aggregation_reduces_rmse_with_unbiased_noise(self):
        worse = 0
        for seed in range(10):
            rng = np.random.default_rng(300 + seed)
            spec = GridSpec(0, 0, 70, 70, cell_size=30.0)
            raster = const_raster(spec, 100.0)
            plots = [make_plot(f"P{i}", 120.0 + 90.0 * (i % 21), 120.0 + 90.0 * (i // 21),
                               float(100.0 + rng.normal(0, 20)))
                     for i in range(400)]
            results = riemann_assessment(plots, raster, [1000.0], seed=seed)
            if results[1].metrics.rmse > results[0].metrics.rmse:
                worse += 1
        assert worse == 0

    def test_masked_pixel_drops_plot(self):
        spec = GridSpec(0, 0, 40, 40, cell_size=30.0)
        vals = np.full((40, 40), 80.0)
        row, col = spec.cell_index(600.0, 600.0)
        vals[int(row), int(col)] = spec.nodata
        raster = Raster(spec, vals, "agb")
        plots = [make_plot("P1", 600.0, 600.0, 80.0), make_plot("P2", 200.0, 200.0, 80.0)]
        kept, _ = extract_plot_values(plots, raster)
        assert [p.plot_id for p in kept] == ["P2"]

    def test_no_plots_errors(self):
        spec = GridSpec(0, 0, 10, 10, cell_size=30.0)
        with pytest.raises(ValueError):
            riemann_assessment([], const_raster(spec, 10.0), [1000.0], seed=0)


class TestChoroplethResiduals:
    def test_single_plot_hex_dropped(self):
        spec = GridSpec(0, 0, 40, 40, cell_size=30.0)
        raster = const_raster(spec, 50.0)
        plots = [make_plot("P1", 600.0, 600.0, 55.0)]
        out = choropleth_residuals(plots, raster, spacing=50_000.0, seed=0)
        assert out == {}

    def test_zero_residuals(self):
        spec = GridSpec(0, 0, 40, 40, cell_size=30.0)
        raster = const_raster(spec, 50.0)
        plots = [make_plot(f"P{i}", 200.0 + 150.0 * i, 500.0, 50.0) for i in range(4)]
        out = choropleth_residuals(plots, raster, spacing=50_000.0, seed=0)
        assert len(out) == 1
        (row,) = out.values()
        assert row["rmse"] == pytest.approx(0.0, abs=1e-9)
        assert row["n"] == 4

    def test_rmse_bounds_me(self, rng):
        spec = GridSpec(0, 0, 40, 40, cell_size=30.0)
        raster = const_raster(spec, 60.0)
        plots = [make_plot(f"P{i}", 200.0 + 120.0 * i, 500.0,
                           float(rng.uniform(30, 90))) for i in range(6)]
        out = choropleth_residuals(plots, raster, spacing=50_000.0, seed=0)
        for row in out.values():
            assert row["rmse"] >= abs(row["me"]) - 1e-12


class TestMenloveCompare:
    def _scene(self, value=70.0):
        spec = GridSpec(0, 0, 30, 30, cell_size=30.0)
        agb = const_raster(spec, value)
        lc = Raster(spec, np.full((30, 30), float(LANDCOVER_CODES["TreeCover"])), "lc")
        return spec, agb, lc

    def test_truthful_cis_give_full_coverage(self):
        spec, agb, lc = self._scene(70.0)
        hexes = []
        for i, bounds in enumerate([(0, 0, 450, 900), (450, 0, 900, 900)]):
            poly = box(*bounds)
            veg_area_ha = poly.area / 10_000.0
            truth_total = 70.0 * veg_area_ha
            hexes.append(HexEstimate(hex_id=i, polygon=poly, agb_total=truth_total,
                                     ci_low=0.85 * truth_total, ci_high=1.15 * truth_total))
        out = menlove_compare(hexes, agb, lc)
        assert len(out["rows"]) == 2
        assert out["fraction_within_ci"] == 1.0
        for row in out["rows"]:
            assert row["map_estimate"] == pytest.approx(70.0, abs=1e-9)
            assert row["fia_density"] == pytest.approx(70.0, rel=1e-9)

    def test_low_mapped_fraction_excluded(self):
        spec, agb, lc = self._scene(70.0)
        # hexagon mostly outside the mapped raster: ~5% of its area overlaps
        poly = box(855, 0, 1755, 900)
        est = HexEstimate(hex_id=9, polygon=poly, agb_total=1.0, ci_low=0.5, ci_high=2.0)
        out = menlove_compare([est], agb, lc)
        assert out["rows"] == []

    def test_ci_midpoint_within(self):
        spec, agb, lc = self._scene(50.0)
        poly = box(0, 0, 900, 900)
        veg_area_ha = poly.area / 10_000.0
        mid = 50.0 * veg_area_ha
        est = HexEstimate(hex_id=1, polygon=poly, agb_total=mid,
                          ci_low=mid - 1.0, ci_high=mid + 1.0)
        out = menlove_compare([est], agb, lc)
        assert out["rows"][0]["within_ci"]


class TestMoransI:
    def test_paired_opposites_hand_case(self):
        # two tight pairs far apart, residuals (+a, -a) within each pair:
        # zero mean, W = 4, cross-sum = -4a^2, denominator 4a^2 -> I = -1
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [1000.0, 0.0], [1001.0, 0.0]])
        res = np.array([3.0, -3.0, 3.0, -3.0])
        out = morans_i(pts, res, radius=5.0, b=50, seed=1)
        assert out.i == pytest.approx(-1.0, abs=1e-12)

    def test_constant_residuals_undefined(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        out = morans_i(pts, np.full(3, 2.0), radius=5.0)
        assert out.i is None

    def test_no_pairs_undefined(self, rng):
        pts = rng.uniform(0, 1000, (5, 2))
        out = morans_i(pts, rng.normal(size=5), radius=0.001)
        assert out.i is None

    def test_shift_invariance(self, rng):
        pts = rng.uniform(0, 100, (20, 2))
        res = rng.normal(size=20)
        a = morans_i(pts, res, radius=30.0, b=100, seed=4)
        b = morans_i(pts, res + 42.0, radius=30.0, b=100, seed=4)
        assert a.i == pytest.approx(b.i, abs=1e-12)
        assert a.envelope_low == pytest.approx(b.envelope_low, abs=1e-12)

    def test_envelope_deterministic(self, rng):
        pts = rng.uniform(0, 100, (15, 2))
        res = rng.normal(size=15)
        a = morans_i(pts, res, radius=40.0, b=200, seed=9)
        b = morans_i(pts, res, radius=40.0, b=200, seed=9)
        assert (a.i, a.envelope_low, a.envelope_high) == (b.i, b.envelope_low, b.envelope_high)

    def test_iid_null_mostly_within_envelope(self):
        rng = np.random.default_rng(20240817)
        pts = rng.uniform(0, 50_000, (60, 2))
        res = rng.normal(size=60)
        radii = np.linspace(1_000, 50_000, 50)
        inside = 0
        evaluated = 0
        for radius in radii:
            out = morans_i(pts, res, radius=float(radius), b=1000, seed=11)
            if out.i is None:
                continue
            evaluated += 1
            if out.envelope_low <= out.i <= out.envelope_high:
                inside += 1
        assert evaluated >= 45
        assert inside / evaluated >= 0.9


class TestDensityFilteredMe:
    def test_density_thresholds_by_hex_area(self):
        # one plot in an 8,660 ha hexagon exceeds 1/24,000 per ha; five plots
        # in a 216,506 ha hexagon do not
        assert 1.0 / (hexagon_area(10_000.0) / 1e4) >= 1.0 / 24_000.0
        assert 5.0 / (hexagon_area(50_000.0) / 1e4) < 1.0 / 24_000.0

    def test_filter_counts(self):
        spec = GridSpec(0, 0, 40, 40, cell_size=30.0)
        raster = const_raster(spec, 50.0)
        plots = [make_plot(f"P{i}", 200.0 + 120.0 * i, 500.0, 50.0) for i in range(5)]
        out = density_filtered_me(plots, raster, [10_000.0, 50_000.0], seed=0)
        by_spacing = {row["spacing"]: row for row in out}
        assert by_spacing[10_000.0]["n_hex_filtered"] == by_spacing[10_000.0]["n_hex_unfiltered"]
        assert by_spacing[50_000.0]["n_hex_filtered"] == 0
        assert by_spacing[50_000.0]["n_hex_unfiltered"] >= 1

    def test_unbiased_scene_me_near_zero(self, rng):
        spec = GridSpec(0, 0, 50, 50, cell_size=30.0)
        raster = const_raster(spec, 90.0)
        plots = [make_plot(f"P{i}", 150.0 + 100.0 * (i % 12), 150.0 + 100.0 * (i // 12),
                           float(90.0 + rng.normal(0, 15))) for i in range(120)]
        out = density_filtered_me(plots, raster, [1_500.0], seed=1)
        assert abs(out[0]["me_unfiltered"]) < 10.0
