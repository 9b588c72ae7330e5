"""
Which SAE features belong to the target concept?
=================================================

Trains the small configuration up to the selection stage, then looks at the
feature statistics directly: activation counts on target and retain text,
the salient set picked by count difference plus activation ratio, and the
target / shared / benign / inactive grouping behind the scatter plots.

    python demos/01_feature_groups.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from crisp.config import load_config
from crisp.pipeline import RunDir, run_pipeline
from crisp.selection import activation_ratio, classify_features, count_diff, select_salient

cfg = load_config(Path(__file__).with_name("small.ini"))
if len(sys.argv) > 1:
    cfg.out = sys.argv[1]

# everything up to selection; reruns are skipped when outputs are current
print(run_pipeline(cfg, ["gen-corpus", "train-lm", "dump-acts", "train-sae", "select"]))
rd = RunDir(cfg)

for layer, stats in sorted(rd.stats().items()):
    dphi = count_diff(stats)
    rho = activation_ratio(stats)
    order = np.lexsort((np.arange(len(dphi)), -dphi))[:5]
    print(f"\nlayer {layer}: {stats.tokens_seen_target} target / {stats.tokens_seen_retain} retain tokens")
    print(" feature  count_t  count_r   delta    ratio")
    for i in order:
        print(f" {i:7d} {stats.count_target[i]:8d} {stats.count_retain[i]:8d} {dphi[i]:7d} {rho[i]:8.2f}")

    # the ratio filter can only remove features from the top-k cut
    loose = select_salient(stats, cfg.selection.k, 1e-12)
    strict = select_salient(stats, cfg.selection.k, cfg.selection.tau)
    print(f" top-{cfg.selection.k} by count difference: {loose}")
    print(f" after ratio >= {cfg.selection.tau}: {strict}")

    labels, n = np.unique(classify_features(stats, cfg.selection.theta_hi, cfg.selection.theta_lo), return_counts=True)
    print(" groups:", dict(zip(labels.tolist(), n.tolist())))

print(f"\nscatter plots: {sorted(str(p) for p in rd.root.glob('scatter_L*.svg'))}")
