"""Probe accuracy, fluency/concept proxies and the harmonic-mean overall score."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from crisp.corpus import Corpora, ProbeSet, TokenizedDoc, concept_prompts
from crisp.lm import LoraAdapter, TinyLM, _stack, generate, perplexity

METRIC_KEYS = ("u", "r", "m", "f", "c", "overall")


def _choice_scores(lm: TinyLM, adapter: LoraAdapter | None, probes: ProbeSet, batch_size: int = 256) -> list[np.ndarray]:
    seqs, spans = [], []
    for item in probes.items:
        for choice in item.choices:
            seqs.append(np.array(item.prompt + choice))
            spans.append((len(item.prompt), len(choice)))
    scores = np.empty(len(seqs))
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            batch = _stack(seqs[i:i + batch_size])
            lp = lm.run(batch, adapter)[0].double().log_softmax(-1)
            for j, (start, n) in enumerate(spans[i:i + batch_size]):
                pos = torch.arange(start - 1, start - 1 + n)
                tok = batch[j, start:start + n]
                scores[i + j] = float(lp[j, pos, tok].sum())
    out, k = [], 0
    for item in probes.items:
        n = len(item.choices)
        s = scores[k:k + n].copy()
        lengths = np.array([len(c) for c in item.choices])
        if len(set(lengths)) > 1:
            s /= lengths
        out.append(s)
        k += n
    return out


def probe_accuracy(lm: TinyLM, adapter: LoraAdapter | None, probes: ProbeSet) -> float:
    """Percent of items whose answer out-scores every distractor by log-likelihood."""
    if len(probes) == 0:
        raise ValueError("empty probe set")
    correct = sum(bool(s[0] > s[1:].max()) for s in _choice_scores(lm, adapter, probes))
    return 100.0 * correct / len(probes)


def fluency_from_ppl(ppl_orig: float, ppl_edited: float) -> float:
    return 2.0 * min(1.0, ppl_orig / ppl_edited)


def fluency_proxy(lm_orig: TinyLM, lm_edited: TinyLM, docs: Sequence[TokenizedDoc],
                  adapter_orig: LoraAdapter | None = None, adapter_edited: LoraAdapter | None = None) -> float:
    """``2 * min(1, PPL_orig / PPL_edited)`` on held-out benign documents."""
    return fluency_from_ppl(perplexity(lm_orig, adapter_orig, docs), perplexity(lm_edited, adapter_edited, docs))


def concept_fraction(generations: Sequence[Sequence[int]], vocab: tuple[int, int]) -> float:
    lo, hi = vocab
    return 2.0 * sum(any(lo <= t < hi for t in g) for g in generations) / len(generations)


def concept_proxy(lm: TinyLM, adapter: LoraAdapter | None, prompts: Sequence[Sequence[int]],
                  vocab: tuple[int, int], n_tokens: int = 20) -> float:
    """Twice the fraction of greedy generations that use the domain vocabulary."""
    if len(prompts) < 20:
        raise ValueError("concept proxy needs at least 20 prompts")
    return concept_fraction([generate(lm, adapter, p, n_tokens) for p in prompts], vocab)


def overall_score(u: float, r: float, m: float, f: float, c: float) -> float:
    """Harmonic mean of (100 - U, R, M, 50 F, 50 C); zero if any component is zero."""
    parts = (100.0 - u, r, m, 50.0 * f, 50.0 * c)
    if min(parts) <= 0:
        return 0.0
    return len(parts) / sum(1.0 / x for x in parts)


def selection_score(orig: Mapping[str, float], edit: Mapping[str, float], mode: str = "ratio") -> float:
    """Geometric mean of unlearning, retention and general scores.

    ``orig``/``edit`` map ``unlearn``, ``retain``, ``general`` to accuracies.
    Unlearning scores ``1 - (edit - orig) / orig``.  Retention and general
    score ``edit / orig`` in ``"ratio"`` mode or the literal relative change
    ``(edit - orig) / orig`` in ``"formula"`` mode.  Factors are clamped at 0.
    """
    if mode not in ("ratio", "formula"):
        raise ValueError(f"unknown selection mode {mode!r}")
    for k in ("unlearn", "retain", "general"):
        if orig[k] <= 0:
            raise ValueError(f"original {k} accuracy must be positive")
    factors = [1.0 - (edit["unlearn"] - orig["unlearn"]) / orig["unlearn"]]
    for k in ("retain", "general"):
        rel = (edit[k] - orig[k]) / orig[k]
        factors.append(rel + 1.0 if mode == "ratio" else rel)
    factors = [max(0.0, x) for x in factors]
    return float(np.prod(factors) ** (1.0 / 3.0))


@dataclass
class EvalReport:
    u: float
    r: float
    m: float
    f: float
    c: float
    overall: float = field(default=float("nan"))
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("u", "r", "m"):
            if not 0.0 <= getattr(self, name) <= 100.0:
                raise ValueError(f"{name}={getattr(self, name)} outside [0, 100]")
        for name in ("f", "c"):
            if not 0.0 <= getattr(self, name) <= 2.0:
                raise ValueError(f"{name}={getattr(self, name)} outside [0, 2]")
        self.overall = overall_score(self.u, self.r, self.m, self.f, self.c)

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, meta: dict | None = None) -> str:
        d = self.to_dict()
        if meta is not None:
            d["meta"] = meta
        return json.dumps(_round_floats(d), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{k: d[k] for k in ("u", "r", "m", "f", "c")}, details=d.get("details", {}))


def _round_floats(x, nd: int = 10):
    if isinstance(x, float):
        return round(x, nd)
    if isinstance(x, dict):
        return {k: _round_floats(v, nd) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round_floats(v, nd) for v in x]
    return x


def evaluate(lm: TinyLM, adapter: LoraAdapter | None, corpora: Corpora,
             lm_orig: TinyLM | None = None, n_concept_prompts: int = 32,
             general_head: int | None = None) -> EvalReport:
    """Full metric suite for an (optionally adapted) model against ``lm_orig``."""
    lm_orig = lm_orig if lm_orig is not None else lm
    general = corpora.probes["general"]
    if general_head is not None:
        general = general.head(general_head)
    u = probe_accuracy(lm, adapter, corpora.probes["unlearn"])
    r = probe_accuracy(lm, adapter, corpora.probes["retain"])
    m = probe_accuracy(lm, adapter, general)
    benign = corpora.heldout["retain"] + corpora.heldout["general"]
    ppl_o = perplexity(lm_orig, None, benign)
    ppl_e = perplexity(lm, adapter, benign)
    spec = corpora.spec
    c = concept_proxy(lm, adapter, concept_prompts(spec, corpora.facts["target"], n_concept_prompts), spec.target_vocab)
    return EvalReport(
        u=u, r=r, m=m, f=fluency_from_ppl(ppl_o, ppl_e), c=c,
        details={
            "ppl_orig": ppl_o,
            "ppl_edited": ppl_e,
            "n_probes": {
                "unlearn": len(corpora.probes["unlearn"]),
                "retain": len(corpora.probes["retain"]),
                "general": len(general),
            },
        },
    )


def summary_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v
