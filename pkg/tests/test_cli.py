"""Command-line driver: exit codes, stage wiring, and byte-stable reruns."""

import json

import pytest

from agbmap.cli import main

CFG_BODY = """\
[seeds]
master_seed = 11

[scene]
extent = 0, 0, 900, 900
cell_size = 30.0
density = 2.0
plot_spacing = 120.0
n_bumps = 12
n_patches = 4

[learners]
rf_n_trees = 15
gbt_n_rounds = 25
loo_rf_n_trees = 10
loo_gbt_n_rounds = 10

[assessment]
spacings = 150.0, 300.0
choropleth_spacing = 450.0
moran_radii = 200.0, 400.0
bootstrap_replicates = 100
moran_permutations = 100

[flags]
loo_reduced_fits = true
"""


def write_cfg(dirpath, outdir, name="run.cfg"):
    path = dirpath / name
    path.write_text(f"[paths]\noutput_dir = {outdir}\n" + CFG_BODY)
    return path


def tree_bytes(root, skip=("manifest.json",)):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """One complete pipeline run shared by the inspection tests."""
    base = tmp_path_factory.mktemp("cli_run")
    out = base / "out"
    cfg = write_cfg(base, out)
    rc = main(["--config", str(cfg), "run"])
    assert rc == 0
    return cfg, out


class TestExitCodes:
    def test_no_command_is_an_error(self, capsys):
        assert main([]) == 1
        capsys.readouterr()

    def test_missing_config_flag(self, capsys):
        assert main(["run"]) == 1
        assert "--config" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["--config", str(tmp_path / "absent.cfg"), "run"]) == 1
        capsys.readouterr()

    def test_unknown_config_key_names_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[learners]\nrf_ntrees = 100\n")
        assert main(["--config", str(cfg), "run"]) == 1
        err = capsys.readouterr().err
        assert "rf_ntrees" in err and "learners" in err

    def test_bad_threads_env(self, tmp_path, capsys, monkeypatch):
        cfg = write_cfg(tmp_path, tmp_path / "out")
        monkeypatch.setenv("PAGB_THREADS", "many")
        assert main(["--config", str(cfg), "synth"]) == 1
        assert "PAGB_THREADS" in capsys.readouterr().err

    def test_stage_without_upstream_outputs(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, tmp_path / "out")
        assert main(["--config", str(cfg), "train"]) == 1
        assert "synth" in capsys.readouterr().err


class TestInitConfig:
    def test_written_default_is_loadable_and_rerunnable(self, tmp_path):
        from agbmap.config import RunConfig, load_config
        path = tmp_path / "default.cfg"
        assert main(["init-config", str(path)]) == 0
        assert load_config(path) == RunConfig()


class TestFullRun:
    def test_all_stage_outputs_present(self, full_run):
        _, out = full_run
        for rel in ("manifest.json", "synth/true_agb.asc", "select/model_plots.csv",
                    "train/ensemble.pagb", "aoa/threshold.csv",
                    "predict/agb_masked.asc", "assess/scale_metrics.csv",
                    "moran/moran.csv", "report/index.csv"):
            assert (out / rel).exists(), rel

    def test_manifest_records_every_stage(self, full_run):
        _, out = full_run
        payload = json.loads((out / "manifest.json").read_text())
        assert set(payload["stage_seeds"]) == {
            "synth", "normalize", "metrics", "select", "train", "aoa",
            "predict", "assess", "moran", "report"}
        assert payload["timestamps"] == {}

    def test_enough_model_plots_selected(self, full_run):
        _, out = full_run
        lines = (out / "select" / "model_plots.csv").read_text().splitlines()
        assert len(lines) - 1 >= 5

    def test_single_stage_rerun_reproduces_outputs(self, full_run, tmp_path):
        cfg, out = full_run
        before = (out / "predict" / "agb_masked.asc").read_bytes()
        assert main(["--config", str(cfg), "predict"]) == 0
        assert (out / "predict" / "agb_masked.asc").read_bytes() == before


class TestDeterminism:
    def test_independent_runs_are_byte_identical(self, full_run, tmp_path):
        _, out1 = full_run
        out2 = tmp_path / "out2"
        cfg2 = write_cfg(tmp_path, out2)
        assert main(["--config", str(cfg2), "run"]) == 0
        t1, t2 = tree_bytes(out1), tree_bytes(out2)
        assert sorted(t1) == sorted(t2)
        diff = [k for k in t1 if t1[k] != t2[k]]
        assert diff == []
        # manifests agree except for the config hash (output dirs differ)
        m1 = json.loads((out1 / "manifest.json").read_text())
        m2 = json.loads((out2 / "manifest.json").read_text())
        m1.pop("config_hash"), m2.pop("config_hash")
        assert m1 == m2
