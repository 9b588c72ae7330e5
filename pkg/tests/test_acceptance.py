"""The eight acceptance criteria, each printing one PASS/FAIL line.

Criteria 4-8 train the full default fixture (a few minutes) and run two
24-point sweeps (tens of minutes on one core); they are marked ``slow``.
"""

import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, fd_check
from crisp import cli
from crisp import io as cio
from crisp.config import RunConfig
from crisp.evaluate import evaluate, overall_score
from crisp.lm import LmConfig, LoraAdapter, init_lm
from crisp.pipeline import STAGE_NAMES, RunDir, run_pipeline, run_sweeps
from crisp.sae import SaeTrainConfig, init_sae, sae_loss
from crisp.selection import FeatureStats, SalientSet, select_salient
from crisp.sweep import default_jobs, read_points
from crisp.unlearn import (LossWeights, _masked_acts, coherence_loss, retain_loss, total_loss, unlearn_loss)
from oracles import brute_envelope, brute_salient
from reference_rows import REFERENCE_ROWS


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


# -- fast criteria ------------------------------------------------------------------


def test_criterion_1_overall_score():
    t0 = time.perf_counter()
    errs = [abs(overall_score(u, r, m, f, c) - o) for _, o, u, r, m, f, c in REFERENCE_ROWS]
    dt = time.perf_counter() - t0
    ok = len(errs) == 16 and max(errs) <= 0.01 and dt < 1.0
    verdict(1, "overall score reproduces 16 reference rows", ok, f"max |err| {max(errs):.4f}, {dt * 1e3:.1f} ms")
    assert ok


def test_criterion_2_selection_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        tokens = int(rng.integers(1, 1000))
        ct, cr = rng.integers(0, tokens + 1, n), rng.integers(0, tokens + 1, n)
        mt = np.where(ct > 0, rng.random(n) * ct * 3, 0.0)
        mr = np.where(cr > 0, rng.random(n) * cr * 3, 0.0)
        k, tau = int(rng.integers(1, 9)), float(rng.choice([0.5, 1.0, 3.0, 10.0]))
        got = select_salient(FeatureStats(0, ct, cr, mt, mr, tokens, tokens), k, tau)
        mismatches += set(got) != set(brute_salient(ct, cr, mt, mr, k, tau))
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 10.0
    verdict(2, "salient selection equals brute force on 1000 tables", ok, f"{mismatches} mismatches, {dt:.2f} s")
    assert ok


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    cfg = LmConfig(vocab_size=512, d_model=16, n_layers=3, n_heads=2, d_ff=32, context_len=24)
    lm = init_lm(cfg).double()
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in lm.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.05)
    adapter = LoraAdapter(cfg, (0, 1), rank=3, seed=2, dtype=torch.float64)
    with torch.no_grad():
        for p in adapter.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.1)
    saes = {}
    for l in (1, 2):
        saes[l] = init_sae(16, SaeTrainConfig(d_sae=48, activation="relu", l1_coeff=5e-3, seed=l), l,
                          dtype=torch.float64)
        with torch.no_grad():
            saes[l].b_enc.add_(0.3)
    target = torch.randint(1, 512, (3, 12), generator=gen)
    retain = torch.randint(1, 512, (3, 12), generator=gen)
    target[:, 0] = retain[:, 0] = 0
    salient = SalientSet({1: [0, 3, 7, 11], 2: [2, 5, 19]}, k=10)
    w = LossWeights(beta=0.7, gamma=0.2, lambda_mean=10.0)
    h = torch.randn(40, 16, generator=gen, dtype=torch.float64)

    def l_u():
        return unlearn_loss(saes, salient, _masked_acts(lm, target, adapter, [1, 2]), w.lambda_mean)

    def l_r():
        return retain_loss(lm, adapter, lm, retain, [1, 2])

    def l_c():
        return coherence_loss(lm, adapter, lm, retain)

    checks = {
        "L_SAE": (lambda: sae_loss(saes[1], h), saes[1].parameters()),
        "L_unlearn": (l_u, adapter.parameters()),
        "L_retain": (l_r, adapter.parameters()),
        "L_coherence": (l_c, adapter.parameters()),
        "L_total": (lambda: total_loss((l_u(), l_r(), l_c()), w), adapter.parameters()),
    }
    results = {name: fd_check(f, params, n_coords=120, h=1e-6) for name, (f, params) in checks.items()}
    dt = time.perf_counter() - t0
    ok = all(err < 1e-3 and n >= 100 for err, n in results.values()) and dt < 120
    detail = ", ".join(f"{k} {e:.1e}/{n}" for k, (e, n) in results.items())
    verdict(3, "analytic gradients match central differences", ok, f"{detail}; {dt:.1f} s")
    assert ok


# -- desk-scale run ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept") / "run"
    cfg = RunConfig(out=str(root))
    t0 = time.perf_counter()
    run_pipeline(cfg)
    return cfg, root, time.perf_counter() - t0


def _json(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


@pytest.mark.slow
def test_criterion_4_end_to_end(default_run):
    _, root, dt = default_run
    o, e = _json(root / "eval_orig.json"), _json(root / "eval.json")
    ok = (o["u"] >= 90 and e["u"] <= 40 and e["r"] >= 0.85 * o["r"] and e["m"] >= 0.9 * o["m"]
          and e["f"] >= 1.5 and dt < 15 * 60)
    verdict(4, "default pipeline unlearns the target concept", ok,
            f"U {o['u']:.1f}->{e['u']:.1f}, R {o['r']:.1f}->{e['r']:.1f}, M {o['m']:.1f}->{e['m']:.1f}, "
            f"F {e['f']:.3f}, C {e['c']:.2f}, overall {e['overall']:.2f}; {dt / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_5_selectivity(default_run):
    _, root, _ = default_run
    s = _json(root / "selectivity.json")
    ok = s["salient_drop"] >= 0.8 and s["n_benign"] > 0 and abs(s["benign_change"]) < 0.1
    verdict(5, "suppression is selective", ok,
            f"salient drop {100 * s['salient_drop']:.1f}%, benign change {100 * s['benign_change']:.2f}% "
            f"over {s['n_benign']} benign features")
    assert ok


@pytest.mark.slow
def test_criterion_7_persistence(default_run, tmp_path):
    cfg, root, _ = default_run
    rd = RunDir(cfg)
    adapter = cio.load_adapter(root / "adapter.crla")
    via_adapter = evaluate(rd.lm(), adapter, rd.corpora(), n_concept_prompts=cfg.eval.n_concept_prompts).metrics()
    copy = tmp_path / "run"
    shutil.copytree(root, copy)
    (copy / "adapter.crla").unlink()
    report = tmp_path / "merged.json"
    code = cli.main(["eval", "--out", str(copy), "--model", str(copy / "merged.crlm"), "--report", str(report)])
    merged = _json(report)
    drift = max(abs(merged[k] - via_adapter[k]) for k in ("u", "r", "m"))
    drift = max(drift, 50 * abs(merged["f"] - via_adapter["f"]), 50 * abs(merged["c"] - via_adapter["c"]))
    ok = code == 0 and drift <= 0.1
    verdict(7, "merged weights alone reproduce the metrics", ok, f"max drift {drift:.4f} points")
    assert ok


@pytest.mark.slow
def test_criterion_6_tradeoff_envelope(default_run):
    cfg, root, _ = default_run
    rd = RunDir(cfg)
    out = root / "sweep"
    jobs = default_jobs()
    t0 = time.perf_counter()
    run_sweeps(rd, out, n=24, jobs=jobs, methods=("crisp", "rmu"))
    dt = time.perf_counter() - t0
    r_orig = _json(root / "eval_orig.json")["r"]
    crisp = read_points(out / "points_crisp.json")
    rmu = read_points(out / "points_rmu.json")
    inside = [p for p in crisp if p.ok and p.u <= 40 and p.r >= 0.9 * r_orig]

    def frontier_rows(method, points):
        ref = brute_envelope([(p.u, p.r, p.digest) for p in points if p.ok], cfg.sweep.bucket_width)
        rows = (out / f"frontier_{method}.csv").read_text().splitlines()
        got = [(r.split(",")[1]) for r in rows if not r.startswith("#")][1:]
        return got == [d for _, _, d in ref]

    ok = (len(crisp) == 24 and len(rmu) == 24 and bool(inside) and frontier_rows("crisp", crisp)
          and frontier_rows("rmu", rmu) and (out / "frontier.svg").exists())
    best = min(inside, key=lambda p: p.u) if inside else None
    rmu_ok = [p for p in rmu if p.ok]
    rmu_best = min(rmu_ok, key=lambda p: (p.u, -p.r)) if rmu_ok else None
    chance = 100.0 / (1 + rd.corpora().spec.n_distractors)
    verdict(6, "24-point sweep reaches the target rectangle", ok,
            f"{len(inside)} CRISP points inside (best U {best.u:.1f} R {best.r:.1f})" if best else "no CRISP point inside")
    print(f"  crisp ok {sum(p.ok for p in crisp)}/24; rmu ok {len(rmu_ok)}/24"
          + (f", lowest-U RMU point U {rmu_best.u:.1f} R {rmu_best.r:.1f}" if rmu_best else "")
          + f"; points below chance+10 ({chance + 10:.0f}) with R >= 0.9 R_orig: "
          f"{sum(p.u < chance + 10 for p in inside)}; {dt / 60:.1f} min at jobs={jobs}")
    ACCEPTANCE_LINES.append(f"  sweep detail: crisp ok {sum(p.ok for p in crisp)}/24, rmu ok {len(rmu_ok)}/24, "
                            f"{dt / 60:.1f} min at jobs={jobs}")
    assert ok


@pytest.mark.slow
def test_criterion_8_determinism(default_run, tmp_path):
    cfg, root, _ = default_run
    other = tmp_path / "again"
    cfg2 = RunConfig(out=str(other))
    run_pipeline(cfg2)

    def artifacts(d: Path) -> dict:
        return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*"))
                if p.suffix in (".json", ".csv", ".jsonl") and p.name != "MANIFEST.json"
                and "sweep" not in p.relative_to(d).parts}

    a, b = artifacts(root), artifacts(other)
    differ = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = bool(a) and not differ
    verdict(8, "identical config and seed give byte-identical outputs", ok,
            f"{len(a)} files compared, {len(differ)} differ" + (f": {differ[:4]}" if differ else ""))
    assert ok
