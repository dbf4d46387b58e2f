#!/usr/bin/env python3
"""Run the full synthetic-scene pipeline into an output directory.

Writes a config (default-sized scene unless --config is given), runs every
stage, and prints the headline test-partition metrics and the mapped-area
summary. Two invocations with the same config produce byte-identical
outputs.

Usage:
    python3 scripts/run_synthetic_pipeline.py out/ [--config run.cfg]
        [--seed 42] [--small]
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

from agbmap.cli import main as cli_main
from agbmap.config import write_default_config

SMALL_OVERRIDES = """
[scene]
extent = 0, 0, 900, 900
plot_spacing = 120.0
n_bumps = 12
n_patches = 4

[learners]
rf_n_trees = 25
gbt_n_rounds = 50
loo_rf_n_trees = 10
loo_gbt_n_rounds = 10

[assessment]
spacings = 150.0, 300.0
choropleth_spacing = 450.0
moran_radii = 200.0, 400.0
bootstrap_replicates = 200
moran_permutations = 200

[flags]
loo_reduced_fits = true
"""


def build_config(outdir: Path, seed: int, small: bool) -> Path:
    cfg_path = outdir / "run.cfg"
    if small:
        text = f"[paths]\noutput_dir = {outdir}\n[seeds]\nmaster_seed = {seed}\n"
        text += SMALL_OVERRIDES
        cfg_path.write_text(text)
    else:
        write_default_config(cfg_path)
        text = cfg_path.read_text()
        text = text.replace("output_dir = out", f"output_dir = {outdir}")
        text = text.replace("master_seed = 42", f"master_seed = {seed}")
        cfg_path.write_text(text)
    return cfg_path


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("outdir", type=Path)
    parser.add_argument("--config", type=Path, default=None,
                        help="use an existing config instead of generating one")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--small", action="store_true",
                        help="small fast scene (about a minute)")
    args = parser.parse_args(argv)

    args.outdir.mkdir(parents=True, exist_ok=True)
    cfg_path = args.config or build_config(args.outdir, args.seed, args.small)
    t0 = time.time()
    rc = cli_main(["--config", str(cfg_path), "--verbose", "run"])
    if rc != 0:
        return rc
    print(f"\npipeline finished in {time.time() - t0:.1f} s")

    metrics_csv = args.outdir / "train" / "test_metrics.csv"
    if metrics_csv.exists():
        print("test-partition metrics:")
        for rec in csv.DictReader(open(metrics_csv, encoding="utf-8")):
            print(f"  {rec['metric']:>10s} = {rec['value']}")
    summary_csv = args.outdir / "predict" / "class_summary.csv"
    if summary_csv.exists():
        print("mapped-area summary:", summary_csv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
