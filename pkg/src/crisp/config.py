"""Run configuration: flat ``key = value`` sections in one INI file."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from crisp.corpus import CorpusSpec
from crisp.lm import LmConfig, LmTrainConfig
from crisp.sae import SaeTrainConfig
from crisp.selection import THETA_HI, THETA_LO
from crisp.unlearn import LossWeights, RmuConfig, UnlearnConfig

__version__ = "0.1.0"

SECTIONS = ("run", "corpus", "lm", "lm_train", "sae", "selection", "unlearn", "rmu", "eval", "sweep")


class ConfigError(ValueError):
    pass


@dataclass
class SelectionConfig:
    k: int = 10
    tau: float = 3.0
    theta_hi: float = THETA_HI
    theta_lo: float = THETA_LO
    n_benign: int = 10


@dataclass
class EvalConfig:
    n_concept_prompts: int = 32
    general_head: int | None = None


@dataclass
class SweepConfig:
    n: int = 24
    bucket_width: float = 2.0
    methods: tuple[str, ...] = ("crisp", "rmu")
    space: str = ""
    in_pipeline: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    jobs: int = 1
    sae_layers: tuple[int, ...] = (1, 2)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    lm: LmConfig = field(default_factory=LmConfig)
    lm_train: LmTrainConfig = field(default_factory=LmTrainConfig)
    sae: SaeTrainConfig = field(default_factory=SaeTrainConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    rmu: RmuConfig = field(default_factory=RmuConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def section(self, name: str) -> dict:
        """Canonical JSON-ready dict of one section (stage parameter hashing)."""
        if name == "run":
            return {"seed": self.seed, "sae_layers": list(self.sae_layers)}
        obj = getattr(self, name)
        d = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
        d.pop("history", None)
        return json.loads(json.dumps(d, sort_keys=True))

    def to_dict(self) -> dict:
        d = {name: self.section(name) for name in SECTIONS}
        d["run"]["jobs"] = self.jobs
        return d

    def digest(self) -> str:
        # output location and parallelism do not change results
        d = self.to_dict()
        d["run"].pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def meta(self) -> dict:
        return {"tool_version": __version__, "config_hash": self.digest(), "seed": self.seed}


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def _coerce(raw: str, hint, key: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, args[0], key)
    if origin is tuple:
        args = typing.get_args(hint)
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(_coerce(s, args[0], key) for s in items)
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {hint.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _build(cls, items: dict[str, str], section: str, fixed: dict, skip: tuple = ()):
    hints = typing.get_type_hints(cls)
    kwargs = dict(fixed)
    names = {f.name for f in dataclasses.fields(cls)} - set(skip) - set(fixed)
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _coerce(raw, hints[key], f"[{section}] {key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def parse_config(text: str, base_dir: str | Path | None = None) -> RunConfig:
    """Parse INI text.  Every stage seed is the root ``[run] seed``; each stage
    derives its own named random streams from it."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown sections {unknown}")
    sec = {s: dict(cp[s]) if cp.has_section(s) else {} for s in SECTIONS}

    run = sec["run"]
    extra = set(run) - {"seed", "out", "jobs", "sae_layers"}
    if extra:
        raise ConfigError(f"[run] unknown keys {sorted(extra)}")
    seed = _coerce(run.get("seed", "0"), int, "[run] seed")
    out = run.get("out", "run").strip()
    if base_dir is not None and not Path(out).is_absolute():
        out = str(Path(base_dir) / out)
    jobs = _coerce(run.get("jobs", "1"), int, "[run] jobs")
    sae_layers = _coerce(run.get("sae_layers", "1,2"), tuple[int, ...], "[run] sae_layers")
    if jobs < 1:
        raise ConfigError("[run] jobs must be >= 1")

    corpus = _build(CorpusSpec, sec["corpus"], "corpus", {"seed": seed})
    lm = _build(LmConfig, sec["lm"], "lm", {"seed": seed})
    lm_train = _build(LmTrainConfig, sec["lm_train"], "lm_train", {"seed": seed}, skip=("history",))
    sae = _build(SaeTrainConfig, sec["sae"], "sae", {"seed": seed})
    selection = _build(SelectionConfig, sec["selection"], "selection", {})

    un = dict(sec["unlearn"])
    wkeys = {f.name for f in dataclasses.fields(LossWeights)} - {"alpha"}
    w_items = {k: un.pop(k) for k in list(un) if k in wkeys}
    weights = _build(LossWeights, w_items, "unlearn", {})
    unlearn = _build(UnlearnConfig, un, "unlearn",
                     {"seed": seed, "sae_layers": sae_layers, "k": selection.k, "tau": selection.tau,
                      "weights": weights})
    rmu = _build(RmuConfig, sec["rmu"], "rmu", {"seed": seed})
    ev = _build(EvalConfig, sec["eval"], "eval", {})
    sweep = _build(SweepConfig, sec["sweep"], "sweep", {})

    if corpus.vocab_size != lm.vocab_size:
        raise ConfigError(f"corpus vocab_size {corpus.vocab_size} != lm vocab_size {lm.vocab_size}")
    if any(not 0 <= l < lm.n_layers for l in sae_layers) or not sae_layers:
        raise ConfigError(f"sae_layers {sae_layers} outside model depth {lm.n_layers}")
    if sae.d_sae <= lm.d_model:
        raise ConfigError("sae d_sae must exceed lm d_model")
    if any(m not in ("crisp", "rmu") for m in sweep.methods):
        raise ConfigError(f"[sweep] unknown methods {sweep.methods}")
    return RunConfig(seed, out, jobs, tuple(sorted(sae_layers)), corpus, lm, lm_train, sae, selection,
                     unlearn, rmu, ev, sweep)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, base_dir=path.parent)


def dump_config(cfg: RunConfig) -> str:
    """INI text that parses back to an equal configuration."""
    d = cfg.to_dict()
    lines = ["[run]", f"seed = {cfg.seed}", f"out = {cfg.out}", f"jobs = {cfg.jobs}",
             f"sae_layers = {_fmt(list(cfg.sae_layers))}"]
    for name in SECTIONS[1:]:
        items = dict(d[name])
        for k in ("seed", "history"):
            items.pop(k, None)
        if name == "unlearn":
            for k in ("sae_layers", "k", "tau"):
                items.pop(k)
            w = items.pop("weights")
            items.update({k: w[k] for k in ("beta", "gamma", "lambda_mean")})
        lines += ["", f"[{name}]"] + [f"{k} = {_fmt(v)}" for k, v in sorted(items.items())]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)
