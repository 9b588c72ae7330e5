"""
Suppress a concept, then keep only the merged weights
=====================================================

Runs the small configuration end to end, compares the adapted model with the
original, checks that salient features went quiet on target text while
benign features held still on retain text, and confirms the merged
checkpoint alone reproduces the metrics.  Finishes with the RMU baseline on
the same model.

    python demos/02_unlearn_and_persist.py [out_dir]
"""

import json
import sys
from pathlib import Path

from crisp import io as cio
from crisp.config import load_config
from crisp.evaluate import evaluate
from crisp.pipeline import RunDir, run_pipeline
from crisp.unlearn import train_rmu

cfg = load_config(Path(__file__).with_name("small.ini"))
if len(sys.argv) > 1:
    cfg.out = sys.argv[1]
print(run_pipeline(cfg))
rd = RunDir(cfg)


def show(name, m):
    print(f"{name:>10}: U {m['u']:6.2f}  R {m['r']:6.2f}  M {m['m']:6.2f}  F {m['f']:.3f}  C {m['c']:.3f}"
          f"  overall {m['overall']:6.2f}")


show("original", json.loads(rd.path("eval_orig.json").read_text()))
show("crisp", json.loads(rd.path("eval.json").read_text()))

sel = json.loads(rd.path("selectivity.json").read_text())
print(f"\nsalient features on held-out target text: {sel['salient_before']:.4f} -> {sel['salient_after']:.4f}"
      f" ({100 * sel['salient_drop']:.1f}% drop)")
print(f"benign features on held-out retain text: {sel['benign_before']:.4f} -> {sel['benign_after']:.4f}"
      f" ({100 * sel['benign_change']:.2f}% change, {sel['n_benign']} features)")

# the edit lives in the weights: drop the adapter and evaluate the merged model
adapter = cio.load_adapter(rd.path("adapter.crla"))
merged = cio.load_lm(rd.path("merged.crlm"))
a = evaluate(rd.lm(), adapter, rd.corpora(), n_concept_prompts=cfg.eval.n_concept_prompts).metrics()
b = evaluate(merged, None, rd.corpora(), lm_orig=rd.lm(), n_concept_prompts=cfg.eval.n_concept_prompts).metrics()
print("\nmax metric drift adapter vs merged:", max(abs(a[k] - b[k]) for k in ("u", "r", "m")))

edited, _ = train_rmu(rd.lm(), cfg.rmu, rd.corpora())
show("rmu", evaluate(edited, None, rd.corpora(), lm_orig=rd.lm(),
                     n_concept_prompts=cfg.eval.n_concept_prompts).metrics())
