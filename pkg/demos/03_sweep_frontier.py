"""
Unlearn / retain trade-off from a seeded sweep
===============================================

Samples CRISP and RMU configurations from the default search spaces, trains
and evaluates each one against the small run, and extracts the per-bucket
best-retain envelope.  Writes points, frontier CSVs and an SVG overlay with
the ideal point (chance-level U, unchanged R).

    python demos/03_sweep_frontier.py [out_dir] [n_per_method]
"""

import sys
from pathlib import Path

from crisp.config import load_config
from crisp.pipeline import RunDir, run_pipeline, run_sweeps
from crisp.sweep import default_jobs, pareto_envelope

cfg = load_config(Path(__file__).with_name("small.ini"))
if len(sys.argv) > 1:
    cfg.out = sys.argv[1]
n = int(sys.argv[2]) if len(sys.argv) > 2 else 6
run_pipeline(cfg)
rd = RunDir(cfg)

out = rd.path("sweep")
points = run_sweeps(rd, out, n=n, jobs=default_jobs())
for method, pts in points.items():
    print(f"\n{method}: {sum(p.ok for p in pts)}/{len(pts)} runs ok")
    for p in pareto_envelope(pts, cfg.sweep.bucket_width):
        cfg_txt = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in p.config.items())
        print(f"  U {p.u:6.2f}  R {p.r:6.2f}  M {p.m:6.2f}  F {p.f:.2f}  ({cfg_txt})")
print(f"\nplot: {out / 'frontier.svg'}")
