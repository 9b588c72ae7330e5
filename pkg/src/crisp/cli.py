"""``crisp`` command line: pipeline stages, RMU baseline, sweeps and reports."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from crisp import io as cio
from crisp import pipeline as pl
from crisp import sweep as sw
from crisp.config import ConfigError, RunConfig, __version__, dump_config, load_config
from crisp.corpus import read_corpora
from crisp.evaluate import evaluate
from crisp.lm import TrainingError, capture_activations
from crisp.sae import SaeTrainConfig, train_sae
from crisp.selection import build_salient_set, read_stats_csv
from crisp.unlearn import ConfigError as UnlearnConfigError
from crisp.unlearn import train_rmu

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("crisp")


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "jobs", None):
        cfg.jobs = args.jobs
    return cfg


def _stages_through(name: str) -> list[str]:
    names = [s for s in pl.STAGE_NAMES if s != "sweep"]
    return names[:names.index(name) + 1]


def _print_status(status: dict) -> None:
    for name, st in status.items():
        print(f"{name}: {st}")


def cmd_stage(args) -> int:
    cfg = _load(args)
    force = [args.command] if args.force else False
    _print_status(pl.run_pipeline(cfg, _stages_through(args.command), force=force))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _load(args)
    status = pl.run_pipeline(cfg, force=args.force)
    _print_status(status)
    rd = pl.RunDir(cfg)
    print(rd.path("summary.csv").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_dump_acts(args) -> int:
    if args.model is None:
        return cmd_stage(args)
    lm = cio.load_lm(args.model)
    corpora = read_corpora(args.corpus)
    docs = corpora.training_docs() if args.split == "train" else getattr(corpora, args.split)
    layers = [int(x) for x in args.layers.split(",")]
    if any(not 0 <= l < lm.cfg.n_layers for l in layers):
        raise ConfigError(f"layers {layers} outside model depth {lm.cfg.n_layers}")
    cio.write_acts(args.dump_out, capture_activations(lm, docs, layers), lm.cfg.d_model)
    print(f"wrote {args.dump_out}")
    return EXIT_OK


def cmd_train_sae(args) -> int:
    if args.acts is None:
        return cmd_stage(args)
    cfg = load_config(args.config).sae if args.config else SaeTrainConfig()
    acts, _ = cio.read_acts(args.acts)
    if args.layer not in acts:
        raise ConfigError(f"layer {args.layer} not in dump (has {sorted(acts)})")
    sae, rep = train_sae(args.layer, acts[args.layer], cfg)
    cio.save_sae(sae, args.sae_out, {"tool_version": __version__, "seed": cfg.seed})
    print(f"layer {args.layer}: explained variance {rep.explained_variance:.4f}, L0 {rep.mean_l0:.1f}")
    return EXIT_OK


def cmd_select(args) -> int:
    if args.stats is None:
        return cmd_stage(args)
    if not args.salient_out:
        raise ConfigError("standalone select needs --salient-out")
    salient = build_salient_set(read_stats_csv(args.stats), args.k, args.tau)
    Path(args.salient_out).write_text(salient.to_json(), encoding="utf-8")
    print(f"wrote {args.salient_out}: " + ", ".join(f"layer {l}: {len(v)}" for l, v in sorted(salient.layers.items())))
    return EXIT_OK


def cmd_rmu(args) -> int:
    cfg = _load(args)
    pl.run_pipeline(cfg, _stages_through("eval"))
    rd = pl.RunDir(cfg)
    model, records = train_rmu(rd.lm(), cfg.rmu, rd.corpora())
    cio.save_lm(model, rd.path("rmu.crlm"), cfg.meta())
    rep = evaluate(model, None, rd.corpora(), lm_orig=rd.lm(), n_concept_prompts=cfg.eval.n_concept_prompts,
                   general_head=cfg.eval.general_head)
    rd.path("eval_rmu.json").write_text(rep.to_json({**cfg.meta(), "rmu": cfg.rmu.to_dict()}), encoding="utf-8")
    print(json.dumps({k: round(v, 4) for k, v in rep.metrics().items()}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.model is None:
        return cmd_stage(args)
    cfg = _load(args)
    pl.run_pipeline(cfg, _stages_through("gen-corpus") + ["train-lm"])
    rd = pl.RunDir(cfg)
    model = cio.load_lm(args.model)
    adapter = cio.load_adapter(args.adapter) if args.adapter else None
    rep = evaluate(model, adapter, rd.corpora(), lm_orig=rd.lm(), n_concept_prompts=cfg.eval.n_concept_prompts,
                   general_head=cfg.eval.general_head)
    text = rep.to_json(cfg.meta())
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    pl.run_pipeline(cfg, _stages_through("eval"))
    rd = pl.RunDir(cfg)
    out = Path(args.sweep_out) if args.sweep_out else rd.path("sweep")
    methods = sw.METHODS if args.method == "both" else (args.method,) if args.method else None
    res = pl.run_sweeps(rd, out, n=args.n, jobs=cfg.jobs, space_path=args.space, methods=methods)
    for m, pts in res.items():
        ok = [p for p in pts if p.ok]
        print(f"{m}: {len(ok)}/{len(pts)} runs ok; frontier -> {out / f'frontier_{m}.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Plain-text summary of a run directory (markdown, stdout and ``report.md``)."""
    cfg = _load(args)
    rd = pl.RunDir(cfg)
    if not rd.path("eval.json").exists():
        raise pl.StageError("report", f"no eval.json in {rd.root}; run the pipeline first")
    rows = []
    for name, f in (("original", "eval_orig.json"), ("crisp", "eval.json"), ("rmu", "eval_rmu.json")):
        if rd.path(f).exists():
            rows.append({"model": name, **json.loads(rd.path(f).read_text(encoding="utf-8"))})
    cols = ("model", "u", "r", "m", "f", "c", "overall")
    lines = [f"# crisp run report ({cfg.meta()['config_hash']}, seed {cfg.seed})", "",
             "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(r["model"] if c == "model" else f"{r[c]:.2f}" for c in cols) + " |")
    sel = json.loads(rd.path("selectivity.json").read_text(encoding="utf-8"))
    lines += ["", f"salient activation drop on held-out target text: {100 * sel['salient_drop']:.1f}%",
              f"benign activation change on held-out retain text: {100 * sel['benign_change']:.2f}% "
              f"({sel['n_benign']} features)"]
    groups = json.loads(rd.path("groups.json").read_text(encoding="utf-8"))["counts"]
    for l, g in sorted(groups.items()):
        lines.append(f"layer {l} feature groups: " + ", ".join(f"{k} {v}" for k, v in g.items()))
    for m in sw.METHODS:
        f = rd.path(f"sweep/frontier_{m}.csv")
        if f.exists():
            lines += ["", f"## {m} frontier", "", "```", f.read_text(encoding="utf-8").rstrip(), "```"]
    text = "\n".join(lines) + "\n"
    rd.path("report.md").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_config(args) -> int:
    print(dump_config(_load(args)), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crisp", description="Concept unlearning by SAE feature suppression.")
    p.add_argument("--version", action="version", version=f"crisp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, out=True):
        sp = sub.add_parser(name, help=help_)
        flags = ("--config", "--spec") if name == "gen-corpus" else ("--config",)
        sp.add_argument(*flags, dest="config", help="INI run configuration")
        if out:
            sp.add_argument("--out", help="run directory (overrides [run] out)")
        sp.set_defaults(fn=fn)
        return sp

    for name, help_ in (("gen-corpus", "generate corpora and probes"), ("train-lm", "train the language model"),
                        ("select", "feature statistics, salient set, groups and scatter plots"),
                        ("unlearn", "train the suppression adapter"), ("eval", "evaluate the adapted model")):
        fn = {"eval": cmd_eval, "select": cmd_select}.get(name, cmd_stage)
        sp = add(name, fn, help_)
        sp.add_argument("--force", action="store_true", help="rerun this stage even if up to date")
        if name == "eval":
            sp.add_argument("--model", help="evaluate this CRLM checkpoint instead of the run's adapter")
            sp.add_argument("--adapter", help="optional CRLA adapter applied to --model")
            sp.add_argument("--report", help="also write the report JSON here")
        if name == "select":
            sp.add_argument("--stats", help="stats CSV (standalone mode: write a salient set)")
            sp.add_argument("--k", type=int, default=10)
            sp.add_argument("--tau", type=float, default=3.0)
            sp.add_argument("--salient-out", help="output JSON (standalone mode)")

    sp = add("dump-acts", cmd_dump_acts, "write a CRAD residual activation dump")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--model", help="CRLM checkpoint (standalone mode)")
    sp.add_argument("--corpus", help="corpus directory (standalone mode)")
    sp.add_argument("--layers", default="1,2")
    sp.add_argument("--split", choices=("train", "target", "retain"), default="train")
    sp.add_argument("--dump-out", help="output CRAD file (standalone mode)")

    sp = add("train-sae", cmd_train_sae, "train SAEs")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--layer", type=int, help="layer to train (standalone mode)")
    sp.add_argument("--acts", help="CRAD dump (standalone mode)")
    sp.add_argument("--sae-out", help="output CRSA file (standalone mode)")

    add("rmu", cmd_rmu, "train and evaluate the RMU baseline")

    sp = add("sweep", cmd_sweep, "seeded hyperparameter sweep and frontier export")
    sp.add_argument("--space", help="JSON search space (per method or flat)")
    sp.add_argument("--n", type=int, help="configurations per method")
    sp.add_argument("--jobs", type=int, default=sw.default_jobs(), help="worker processes (default $CRISP_JOBS)")
    sp.add_argument("--method", choices=("crisp", "rmu", "both"))
    sp.add_argument("--sweep-out", help="output directory (default <run>/sweep)")

    add("report", cmd_report, "summarise a run directory")

    sp = add("pipeline", cmd_pipeline, "run every stage, skipping up-to-date ones")
    sp.add_argument("--force", action="store_true", help="rerun every stage")

    add("config", cmd_config, "print the fully resolved configuration")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    if args.command == "dump-acts" and args.model is not None and not (args.corpus and args.dump_out):
        parser.error("standalone dump-acts needs --model, --corpus and --dump-out")
    if args.command == "train-sae" and args.acts is not None and (args.layer is None or not args.sae_out):
        parser.error("standalone train-sae needs --layer, --acts and --sae-out")
    try:
        return args.fn(args)
    except (ConfigError, UnlearnConfigError) as e:
        print(f"crisp: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as e:
        print(f"crisp: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (TrainingError, OSError, ValueError, RuntimeError) as e:
        print(f"crisp: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
