"""Stage graph, content-hashed MANIFEST and sweep runners over a run directory."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch

from crisp import io as cio
from crisp import sweep as sw
from crisp.config import RunConfig
from crisp.corpus import Corpora, gen_corpora, read_corpora, write_corpora
from crisp.evaluate import evaluate, probe_accuracy, summary_csv
from crisp.lm import TinyLM, capture_activations, init_lm, merge_lora, train_lm
from crisp.sae import SaeParams, train_sae
from crisp.selection import (FeatureStats, SalientSet, accumulate_stats, build_salient_set, classify_features,
                             export_scatter, read_stats_csv, top_benign, write_stats_csv)
from crisp.unlearn import (RmuConfig, UnlearnConfig, _docs_tensor, _masked_acts, mean_feature_activation,
                           residual_drift, run_log_jsonl, train_crisp, train_rmu)

log = logging.getLogger(__name__)

MANIFEST = "MANIFEST.json"
CORPUS_FILES = ("target.txt", "retain.txt", "general.txt", "coherence.txt", "heldout_target.txt",
                "heldout_retain.txt", "heldout_general.txt", "probes_unlearn.json", "probes_retain.json",
                "probes_general.json", "corpus.json")
ACT_SPLITS = ("train", "target", "retain")


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"stage {stage}: {msg}")
        self.stage = stage


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _params_hash(d) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _comment(cfg: RunConfig) -> str:
    m = cfg.meta()
    return f"crisp {m['tool_version']} config={m['config_hash']} seed={m['seed']}"


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    name: str
    sections: tuple[str, ...]
    inputs: Callable[[RunConfig], list[str]]
    outputs: Callable[[RunConfig], list[str]]
    run: Callable[["RunDir"], None]


def _sae_files(cfg: RunConfig) -> list[str]:
    return [f"sae_L{l}.crsa" for l in cfg.sae_layers]


class RunDir:
    """Lazy access to the artifacts of one run directory."""

    def __init__(self, cfg: RunConfig, root: str | Path | None = None):
        self.cfg = cfg
        self.root = Path(root if root is not None else cfg.out)
        self._cache: dict = {}

    def path(self, rel: str) -> Path:
        return self.root / rel

    def corpora(self) -> Corpora:
        if "corpora" not in self._cache:
            self._cache["corpora"] = read_corpora(self.path("corpus"))
        return self._cache["corpora"]

    def lm(self) -> TinyLM:
        if "lm" not in self._cache:
            self._cache["lm"] = cio.load_lm(self.path("lm.crlm"))
        return self._cache["lm"]

    def saes(self) -> dict[int, SaeParams]:
        if "saes" not in self._cache:
            self._cache["saes"] = {l: cio.load_sae(self.path(f"sae_L{l}.crsa")) for l in self.cfg.sae_layers}
        return self._cache["saes"]

    def stats(self) -> dict[int, FeatureStats]:
        if "stats" not in self._cache:
            self._cache["stats"] = read_stats_csv(self.path("stats.csv"))
        return self._cache["stats"]

    def salient(self) -> SalientSet:
        return SalientSet.from_json(self.path("salient.json").read_text(encoding="utf-8"))


def _stage_corpus(rd: RunDir) -> None:
    write_corpora(gen_corpora(rd.cfg.corpus), rd.path("corpus"))


def _stage_lm(rd: RunDir) -> None:
    cfg = rd.cfg
    lm = init_lm(cfg.lm)
    tcfg = cfg.lm_train
    tcfg.history = []
    train_lm(lm, rd.corpora().training_docs(), tcfg)
    cio.save_lm(lm, rd.path("lm.crlm"), cfg.meta())
    rows = [{"step": i, "loss": float(v)} for i, v in enumerate(tcfg.history)]
    text = f"# {_comment(cfg)}\n" + summary_csv(rows, ("step", "loss"))
    rd.path("lm_train.csv").write_text(text, encoding="utf-8")


def _split_docs(c: Corpora, split: str):
    return c.training_docs() if split == "train" else getattr(c, split)


def _stage_dump(rd: RunDir) -> None:
    lm, c = rd.lm(), rd.corpora()
    for split in ACT_SPLITS:
        acts = capture_activations(lm, _split_docs(c, split), rd.cfg.sae_layers)
        cio.write_acts(rd.path(f"acts_{split}.crad"), acts, lm.cfg.d_model)


def _stage_sae(rd: RunDir) -> None:
    acts, _ = cio.read_acts(rd.path("acts_train.crad"))
    reports = {}
    for l in rd.cfg.sae_layers:
        sae, rep = train_sae(l, acts[l], rd.cfg.sae)
        cio.save_sae(sae, rd.path(f"sae_L{l}.crsa"), rd.cfg.meta())
        reports[str(l)] = {k: v for k, v in rep.__dict__.items() if k != "history"}
    _write_json(rd.path("sae_report.json"), {"meta": rd.cfg.meta(), "layers": reports})


def benign_features(stats: dict[int, FeatureStats], n: int, theta_hi: float, theta_lo: float) -> dict[int, list[int]]:
    """The ``n`` benign features with the highest retain firing rate, pooled over layers."""
    pool = []
    for l, s in sorted(stats.items()):
        fr = s.freq_retain()
        pool += [(-fr[i], l, i) for i in top_benign(s, s.n_features, theta_hi=theta_hi, theta_lo=theta_lo)]
    out: dict[int, list[int]] = {l: [] for l in stats}
    for _, l, i in sorted(pool)[:n]:
        out[l].append(int(i))
    return out


def _stage_select(rd: RunDir) -> None:
    cfg, sel = rd.cfg, rd.cfg.selection
    at, _ = cio.read_acts(rd.path("acts_target.crad"))
    ar, _ = cio.read_acts(rd.path("acts_retain.crad"))
    saes = rd.saes()
    stats = {l: accumulate_stats(saes[l], at, "target").merge(accumulate_stats(saes[l], ar, "retain"))
             for l in cfg.sae_layers}
    write_stats_csv([stats[l] for l in cfg.sae_layers], rd.path("stats.csv"), _comment(cfg))
    salient = build_salient_set(stats, sel.k, sel.tau)
    salient.meta = cfg.meta()
    rd.path("salient.json").write_text(salient.to_json(), encoding="utf-8")
    groups = {}
    for l in cfg.sae_layers:
        labels = classify_features(stats[l], sel.theta_hi, sel.theta_lo)
        groups[str(l)] = {g: int((labels == g).sum()) for g in ("target", "benign", "shared", "inactive")}
        export_scatter(stats[l], labels, rd.path(f"scatter_L{l}"), salient.layers[l], _comment(cfg))
    benign = benign_features(stats, sel.n_benign, sel.theta_hi, sel.theta_lo)
    _write_json(rd.path("groups.json"), {"meta": cfg.meta(), "counts": groups,
                                         "top_benign": {str(l): v for l, v in benign.items()}})
    rd._cache["stats"] = stats


def _stage_unlearn(rd: RunDir) -> None:
    cfg = rd.cfg
    lm = rd.lm()
    res = train_crisp(lm, rd.saes(), rd.salient(), cfg.unlearn, rd.corpora())
    cio.save_adapter(res.adapter, lm.cfg, rd.path("adapter.crla"), cfg.meta())
    cio.save_lm(merge_lora(lm, res.adapter), rd.path("merged.crlm"), cfg.meta())
    rd.path("unlearn_log.jsonl").write_text(run_log_jsonl(res.log), encoding="utf-8")
    _write_json(rd.path("unlearn_summary.json"), {"meta": cfg.meta(), "config": cfg.unlearn.to_dict(),
                                                  "summary": res.summary})


def selectivity(lm: TinyLM, adapter, saes, salient: SalientSet, benign: dict[int, list[int]],
                corpora: Corpora, lm_edited: TinyLM | None = None) -> dict:
    """Relative change of salient activations on held-out target text and of
    benign activations on held-out retain text, plus relative retain drift."""
    edited = lm_edited if lm_edited is not None else lm
    ht, hr = corpora.heldout["target"], corpora.heldout["retain"]
    s0 = mean_feature_activation(lm, None, saes, salient.layers, ht)
    s1 = mean_feature_activation(edited, adapter, saes, salient.layers, ht)
    b0 = mean_feature_activation(lm, None, saes, benign, hr)
    b1 = mean_feature_activation(edited, adapter, saes, benign, hr)
    layers = sorted(saes)
    data = _docs_tensor(hr)
    with torch.no_grad():
        ref = _masked_acts(lm, data, None, layers)
        cur = _masked_acts(edited, data, adapter, layers)
        drift = float(residual_drift(cur, ref, layers))
        norm = float(torch.stack([ref[l].pow(2).sum(-1).mean() for l in layers]).mean())
    return {
        "salient_before": s0, "salient_after": s1,
        "salient_drop": 1.0 - s1 / s0 if s0 > 0 else 0.0,
        "n_benign": sum(len(v) for v in benign.values()),
        "benign_before": b0, "benign_after": b1,
        "benign_change": abs(b1 - b0) / b0 if b0 > 0 else float("nan"),
        "retain_drift": drift, "retain_drift_rel": drift / norm if norm > 0 else 0.0,
    }


def _stage_eval(rd: RunDir) -> None:
    # the edited model is always evaluated from merged weights
    cfg = rd.cfg
    lm, c = rd.lm(), rd.corpora()
    merged = cio.load_lm(rd.path("merged.crlm"))
    kw = dict(n_concept_prompts=cfg.eval.n_concept_prompts, general_head=cfg.eval.general_head)
    orig = evaluate(lm, None, c, **kw)
    edit = evaluate(merged, None, c, lm_orig=lm, **kw)
    rd.path("eval_orig.json").write_text(orig.to_json(cfg.meta()), encoding="utf-8")
    rd.path("eval.json").write_text(edit.to_json(cfg.meta()), encoding="utf-8")
    groups = json.loads(rd.path("groups.json").read_text(encoding="utf-8"))
    benign = {int(l): v for l, v in groups["top_benign"].items()}
    sel = selectivity(lm, None, rd.saes(), rd.salient(), benign, c, lm_edited=merged)
    _write_json(rd.path("selectivity.json"), {"meta": cfg.meta(), **{k: round(v, 10) for k, v in sel.items()}})
    rows = [{"model": "original", **orig.metrics()}, {"model": "crisp", **edit.metrics()}]
    text = f"# {_comment(cfg)}\n" + summary_csv(rows, ("model", "u", "r", "m", "f", "c", "overall"))
    rd.path("summary.csv").write_text(text, encoding="utf-8")


def _sweep_outputs(cfg: RunConfig) -> list[str]:
    out = [f"sweep/points_{m}.json" for m in cfg.sweep.methods]
    out += [f"sweep/frontier_{m}.csv" for m in cfg.sweep.methods]
    return out + ["sweep/frontier.svg", "sweep/ideal.json"]


def _stage_sweep(rd: RunDir) -> None:
    run_sweeps(rd, rd.path("sweep"))


STAGES: tuple[Stage, ...] = (
    Stage("gen-corpus", ("run", "corpus"), lambda c: [], lambda c: [f"corpus/{f}" for f in CORPUS_FILES],
          _stage_corpus),
    Stage("train-lm", ("lm", "lm_train"), lambda c: ["corpus/corpus.json", "corpus/target.txt",
                                                     "corpus/retain.txt", "corpus/general.txt"],
          lambda c: ["lm.crlm", "lm_train.csv"], _stage_lm),
    Stage("dump-acts", ("run",), lambda c: ["lm.crlm", "corpus/corpus.json"],
          lambda c: [f"acts_{s}.crad" for s in ACT_SPLITS], _stage_dump),
    Stage("train-sae", ("sae",), lambda c: ["acts_train.crad"], lambda c: _sae_files(c) + ["sae_report.json"],
          _stage_sae),
    Stage("select", ("selection",), lambda c: _sae_files(c) + ["acts_target.crad", "acts_retain.crad"],
          lambda c: ["stats.csv", "salient.json", "groups.json"]
          + [f"scatter_L{l}.{e}" for l in c.sae_layers for e in ("csv", "svg")], _stage_select),
    Stage("unlearn", ("unlearn",), lambda c: ["lm.crlm", "salient.json"] + _sae_files(c),
          lambda c: ["adapter.crla", "merged.crlm", "unlearn_log.jsonl", "unlearn_summary.json"], _stage_unlearn),
    Stage("eval", ("eval",), lambda c: ["lm.crlm", "merged.crlm", "groups.json", "salient.json"] + _sae_files(c),
          lambda c: ["eval_orig.json", "eval.json", "selectivity.json", "summary.csv"], _stage_eval),
    Stage("sweep", ("sweep", "unlearn", "rmu", "eval"), lambda c: ["lm.crlm", "stats.csv", "eval_orig.json"]
          + _sae_files(c), _sweep_outputs, _stage_sweep),
)
STAGE_NAMES = tuple(s.name for s in STAGES)


def get_stage(name: str) -> Stage:
    for s in STAGES:
        if s.name == name:
            return s
    raise KeyError(name)


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


def read_manifest(root: Path) -> dict:
    p = root / MANIFEST
    if not p.exists():
        return {"stages": {}}
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return {"stages": {}}


def write_manifest(root: Path, manifest: dict) -> None:
    _write_json(root / MANIFEST, manifest)


def _hashes(root: Path, rels: Sequence[str]) -> dict[str, str | None]:
    return {r: sha256_file(root / r) if (root / r).exists() else None for r in rels}


def stage_params(cfg: RunConfig, stage: Stage) -> str:
    return _params_hash({s: cfg.section(s) for s in stage.sections})


def up_to_date(rd: RunDir, stage: Stage, record: dict | None) -> bool:
    if not record or record.get("status") != "complete":
        return False
    if record.get("params") != stage_params(rd.cfg, stage):
        return False
    if record.get("inputs") != _hashes(rd.root, stage.inputs(rd.cfg)):
        return False
    outs = _hashes(rd.root, stage.outputs(rd.cfg))
    return None not in outs.values() and record.get("outputs") == outs


def run_stage(rd: RunDir, stage: Stage, manifest: dict) -> float:
    missing = [r for r in stage.inputs(rd.cfg) if not rd.path(r).exists()]
    if missing:
        raise StageError(stage.name, f"missing inputs {missing}")
    rec = {"status": "running", "params": stage_params(rd.cfg, stage),
           "inputs": _hashes(rd.root, stage.inputs(rd.cfg))}
    manifest["stages"][stage.name] = rec
    write_manifest(rd.root, manifest)
    t0 = time.perf_counter()
    try:
        stage.run(rd)
    except StageError:
        rec["status"] = "failed"
        write_manifest(rd.root, manifest)
        raise
    except Exception as e:
        rec["status"] = "failed"
        rec["error"] = f"{type(e).__name__}: {e}"
        write_manifest(rd.root, manifest)
        raise StageError(stage.name, rec["error"]) from e
    rec["outputs"] = _hashes(rd.root, stage.outputs(rd.cfg))
    absent = [k for k, v in rec["outputs"].items() if v is None]
    if absent:
        rec["status"] = "failed"
        write_manifest(rd.root, manifest)
        raise StageError(stage.name, f"did not produce {absent}")
    rec["status"] = "complete"
    write_manifest(rd.root, manifest)
    return time.perf_counter() - t0


def run_pipeline(cfg: RunConfig, stages: Sequence[str] | None = None, force: bool | Sequence[str] = False
                 ) -> dict[str, str]:
    """Run stages in order, skipping up-to-date ones; once a stage reruns, every
    later stage reruns too.  ``force`` is a bool or a list of stage names to
    rerun regardless.  Returns ``{stage: "ran" | "skipped"}``."""
    if stages is None:
        stages = [s for s in STAGE_NAMES if s != "sweep" or cfg.sweep.in_pipeline]
    rd = RunDir(cfg)
    rd.root.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(rd.root)
    manifest.setdefault("stages", {})
    manifest["meta"] = cfg.meta()
    forced = set(stages) if force is True else set(force or ())
    status, dirty, timings = {}, False, []
    for name in stages:
        stage = get_stage(name)
        dirty = dirty or name in forced
        if not dirty and up_to_date(rd, stage, manifest["stages"].get(name)):
            status[name] = "skipped"
            log.info("stage %s: up to date", name)
            continue
        log.info("stage %s: running", name)
        dt = run_stage(rd, stage, manifest)
        timings.append(f"{name} {dt:.1f}s")
        status[name] = "ran"
        dirty = True
    # wall times are not part of the reproducible outputs
    if timings:
        with open(rd.path("timings.log"), "a", encoding="utf-8") as fh:
            fh.write("\n".join(timings) + "\n")
    return status


# --------------------------------------------------------------------------
# sweeps over a completed run directory
# --------------------------------------------------------------------------

_CONTEXT: dict = {}


def _context(root: str, cfg: RunConfig) -> RunDir:
    key = (root, cfg.digest())
    if key not in _CONTEXT:
        _CONTEXT.clear()
        _CONTEXT[key] = RunDir(cfg, root)
    return _CONTEXT[key]


def _metrics(lm, adapter, rd: RunDir) -> dict:
    c = rd.corpora()
    rep = evaluate(lm, adapter, c, lm_orig=rd.lm(), n_concept_prompts=rd.cfg.eval.n_concept_prompts,
                   general_head=rd.cfg.eval.general_head)
    d = rep.metrics()
    d["m_select"] = probe_accuracy(lm, adapter, c.probes["general"].head(10))
    return d


@dataclass
class CrispRunner:
    """Train and evaluate one CRISP configuration against a run directory."""

    root: str
    cfg: RunConfig

    def __call__(self, config: dict, seed: int) -> dict:
        rd = _context(self.root, self.cfg)
        base = self.cfg.unlearn.to_dict()
        weights = dict(base.pop("weights"))
        weights.pop("alpha", None)
        for k in ("beta", "gamma", "lambda_mean"):
            if k in config:
                weights[k] = config[k]
        base.update({k: v for k, v in config.items() if k not in weights and k != "tau"})
        base.update(weights=weights, seed=seed, tau=config.get("tau", self.cfg.selection.tau))
        ucfg = UnlearnConfig.from_dict(base)
        salient = build_salient_set(rd.stats(), ucfg.k, ucfg.tau)
        res = train_crisp(rd.lm(), rd.saes(), salient, ucfg, rd.corpora())
        out = _metrics(rd.lm(), res.adapter, rd)
        out["salient_drop"] = res.summary["salient_drop"]
        return out


@dataclass
class RmuRunner:
    root: str
    cfg: RunConfig

    def __call__(self, config: dict, seed: int) -> dict:
        rd = _context(self.root, self.cfg)
        d = self.cfg.rmu.to_dict()
        d.update(config)
        d["seed"] = seed
        model, _ = train_rmu(rd.lm(), RmuConfig(**d), rd.corpora())
        return _metrics(model, None, rd)


def load_space(path: str | Path | None, method: str) -> dict:
    if not path:
        return sw.DEFAULT_SPACES[method]
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if method in d and isinstance(d[method], dict):
        return d[method]
    if set(d) & set(sw.METHODS):
        raise ValueError(f"space file has no entry for {method}")
    return d


def run_sweeps(rd: RunDir, out: Path, n: int | None = None, jobs: int | None = None,
               space_path: str | None = None, methods: Sequence[str] | None = None) -> dict:
    """Sweep every method against ``rd`` and write points, frontiers, ideal point and SVG."""
    cfg = rd.cfg
    out.mkdir(parents=True, exist_ok=True)
    n = n or cfg.sweep.n
    jobs = jobs or cfg.jobs
    methods = tuple(methods or cfg.sweep.methods)
    orig = json.loads(rd.path("eval_orig.json").read_text(encoding="utf-8"))
    spec = rd.corpora().spec
    ideal = sw.ideal_point(100.0 / (1 + spec.n_distractors), orig["r"])
    runners = {"crisp": CrispRunner, "rmu": RmuRunner}
    points, fronts, result = {}, {}, {}
    meta = cfg.meta()
    timings = []
    for m in methods:
        space = load_space(space_path or cfg.sweep.space, m)
        pts = sw.run_sweep(space, n, cfg.seed, runners[m](str(rd.root), cfg), m, jobs)
        points[m], fronts[m] = pts, sw.pareto_envelope(pts, cfg.sweep.bucket_width)
        sw.write_points(pts, out / f"points_{m}.json", {**meta, "method": m, "space": space, "n": n})
        sw.write_frontier_csv(fronts[m], out / f"frontier_{m}.csv", _comment(cfg))
        timings += [f"{m} {p.digest} {p.wall_time:.1f}s" for p in pts]
        result[m] = pts
    _write_json(out / "ideal.json", {"meta": meta, "u": ideal[0], "r": ideal[1]})
    (out / "frontier.svg").write_text(sw.frontier_svg(points, fronts, ideal), encoding="utf-8")
    with open(out / "timings.log", "a", encoding="utf-8") as fh:
        fh.write("\n".join(timings) + "\n")
    return result
