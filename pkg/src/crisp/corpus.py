"""Synthetic corpora with planted concept vocabularies, text cleanup, and cloze probes.

Vocabulary layout (defaults, vocab_size 512)::

    0            BOS
    [1, 128)     shared: relation tokens first (one block per fact domain), then filler
    [128, 256)   target concept
    [256, 384)   retain concept
    [384, 512)   general knowledge

Each concept range is split in half: subjects, then objects.  A fact is the
three-token template ``SUBJ REL OBJ`` and documents are streams of facts
interleaved with shared filler.  Each fact domain draws its relations from
its own block of the shared range, the way topical text favours its own
connecting words while still sharing the function words.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from crisp._seeding import derive_rng

BOS = 0

CORPUS_TAGS = ("target", "retain", "coherence", "probe", "general")
PROBE_DOMAINS = ("unlearn", "retain", "general")
FACT_DOMAINS = ("target", "retain", "general")
# probe domain -> vocabulary whose facts it tests
DOMAIN_VOCAB = {"unlearn": "target", "retain": "retain", "general": "general"}


class DocumentRejected(ValueError):
    """Raised when a document is empty after cleaning."""


class InsufficientVocabulary(ValueError):
    pass


# --------------------------------------------------------------------------
# text preprocessing
# --------------------------------------------------------------------------

_HEADER = re.compile(r"^#{1,6}(?:[ \t][^\n]*)?(?:\n|$)", re.MULTILINE)
_IMAGE = re.compile(r"!\[[^\]\n]*\]\([^)\n]*\)")
_CITATION = re.compile(r"\[\d+(?:\s*[,-]\s*\d+)*\]")


def _clean_once(text: str) -> str:
    text = text.encode("ascii", errors="ignore").decode("ascii")
    text = _IMAGE.sub("", text)
    text = _CITATION.sub("", text)
    return _HEADER.sub("", text)


def preprocess_document(text: str, max_chars: int = 1000) -> str:
    """Strip markdown headers, numeric citations, image links and non-ASCII
    characters, then right-truncate to ``max_chars`` characters.

    Cleanup runs to a fixed point so the function is idempotent.  Raises
    `DocumentRejected` if nothing is left.
    """
    if max_chars <= 0:
        raise ValueError("max_chars must be positive")
    while True:
        cleaned = _clean_once(text)[:max_chars]
        if cleaned == text:
            break
        text = cleaned
    if not text.strip():
        raise DocumentRejected("document rejected: empty after cleaning")
    return text


# --------------------------------------------------------------------------
# corpus layout
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 512
    shared_vocab: tuple[int, int] = (1, 128)
    target_vocab: tuple[int, int] = (128, 256)
    retain_vocab: tuple[int, int] = (256, 384)
    general_vocab: tuple[int, int] = (384, 512)
    n_relations: int = 4
    n_docs_per_corpus: int = 200
    n_heldout_docs: int = 32
    n_coherence_docs: int = 20
    doc_len: int = 128
    n_facts_per_concept: int = 32
    probe_repeats: int = 2
    n_distractors: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("shared_vocab", "target_vocab", "retain_vocab", "general_vocab"):
            lo, hi = getattr(self, name)
            if not (0 <= lo < hi <= self.vocab_size):
                raise ValueError(f"{name}={lo, hi} outside [0, {self.vocab_size})")
            if lo <= BOS < hi:
                raise ValueError(f"{name} overlaps the BOS token")
        ranges = [self.shared_vocab, self.target_vocab, self.retain_vocab, self.general_vocab]
        for i, a in enumerate(ranges):
            for b in ranges[i + 1:]:
                if a[0] < b[1] and b[0] < a[1]:
                    raise ValueError(f"vocabulary ranges {a} and {b} overlap")
        if self.doc_len < 4:
            raise ValueError("doc_len must hold at least BOS plus one fact")
        if self.n_relations < 1:
            raise ValueError("n_relations must be >= 1")
        if len(FACT_DOMAINS) * self.n_relations >= self.shared_vocab[1] - self.shared_vocab[0]:
            raise ValueError("shared vocabulary needs filler tokens beyond the relations")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        for k in ("shared_vocab", "target_vocab", "retain_vocab", "general_vocab"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def vocab(self, name: str) -> tuple[int, int]:
        return getattr(self, f"{name}_vocab")

    def relations(self, name: str | None = None) -> np.ndarray:
        """Relation tokens of one fact domain, or of all domains when ``name`` is None."""
        lo = self.shared_vocab[0]
        if name is None:
            return np.arange(lo, lo + len(FACT_DOMAINS) * self.n_relations)
        i = FACT_DOMAINS.index(name)
        return np.arange(lo + i * self.n_relations, lo + (i + 1) * self.n_relations)

    def filler(self) -> np.ndarray:
        lo, hi = self.shared_vocab
        return np.arange(lo + len(FACT_DOMAINS) * self.n_relations, hi)

    def subjects(self, name: str) -> np.ndarray:
        lo, hi = self.vocab(name)
        return np.arange(lo, lo + (hi - lo) // 2)

    def objects(self, name: str) -> np.ndarray:
        lo, hi = self.vocab(name)
        return np.arange(lo + (hi - lo) // 2, hi)


@dataclass
class TokenizedDoc:
    tokens: np.ndarray
    corpus_tag: str

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.size == 0:
            raise ValueError("empty document")
        if self.corpus_tag not in CORPUS_TAGS:
            raise ValueError(f"unknown corpus tag {self.corpus_tag!r}")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class Fact:
    subj: int
    rel: int
    obj: int


@dataclass(frozen=True)
class ProbeItem:
    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    distractors: tuple[tuple[int, ...], ...]

    @property
    def choices(self) -> tuple[tuple[int, ...], ...]:
        return (self.answer,) + self.distractors


@dataclass
class ProbeSet:
    items: list[ProbeItem]
    domain_tag: str
    vocab_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.domain_tag not in PROBE_DOMAINS:
            raise ValueError(f"unknown probe domain {self.domain_tag!r}")
        for item in self.items:
            validate_probe_item(item, self.vocab_range)

    def __len__(self):
        return len(self.items)

    def head(self, n: int) -> "ProbeSet":
        return ProbeSet(self.items[:n], self.domain_tag, self.vocab_range)


def validate_probe_item(item: ProbeItem, vocab_range: tuple[int, int] | None = None) -> None:
    choices = item.choices
    if len(set(choices)) != len(choices):
        raise ValueError("probe answer and distractors must be distinct")
    if vocab_range is not None:
        lo, hi = vocab_range
        if any(not (lo <= t < hi) for c in choices for t in c):
            raise ValueError("probe choices must come from the probe's domain vocabulary")


@dataclass
class Corpora:
    spec: CorpusSpec
    facts: dict[str, list[Fact]]
    target: list[TokenizedDoc]
    retain: list[TokenizedDoc]
    general: list[TokenizedDoc]
    coherence: list[TokenizedDoc]
    heldout: dict[str, list[TokenizedDoc]] = field(default_factory=dict)
    probes: dict[str, ProbeSet] = field(default_factory=dict)

    def training_docs(self) -> list[TokenizedDoc]:
        """Documents the language model is pretrained on."""
        return self.target + self.retain + self.general


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _plant_facts(spec: CorpusSpec, name: str, rng: np.random.Generator) -> list[Fact]:
    """Each subject gets one fact per domain relation, with distinct objects,
    so recalling an object needs both the subject and the relation."""
    subjects = spec.subjects(name)
    objects = spec.objects(name)
    n = spec.n_facts_per_concept
    n_subj = -(-n // spec.n_relations)
    if n_subj > len(subjects) or len(objects) < max(spec.n_relations, spec.n_distractors + 1):
        raise InsufficientVocabulary(
            f"insufficient vocabulary: {name} range holds {len(subjects)} subjects and "
            f"{len(objects)} objects, need {n_subj} subjects and "
            f"{max(spec.n_relations, spec.n_distractors + 1)} objects"
        )
    facts = []
    for s in rng.choice(subjects, size=n_subj, replace=False):
        objs = rng.choice(objects, size=spec.n_relations, replace=False)
        facts += [Fact(int(s), int(r), int(o)) for r, o in zip(spec.relations(name), objs)]
    return facts[:n]


def _fact_doc(spec: CorpusSpec, facts: list[Fact], tag: str, rng: np.random.Generator) -> TokenizedDoc:
    filler = spec.filler()
    toks = [BOS]
    while len(toks) < spec.doc_len:
        f = facts[rng.integers(len(facts))]
        toks += [f.subj, f.rel, f.obj]
        toks += rng.choice(filler, size=int(rng.integers(1, 4))).tolist()
    return TokenizedDoc(np.array(toks[: spec.doc_len]), tag)


def _coherence_doc(spec: CorpusSpec, rng: np.random.Generator) -> TokenizedDoc:
    # target subjects in benign context: no relation token, so no fact completion
    filler = spec.filler()
    subjects = spec.subjects("target")
    toks = [BOS]
    while len(toks) < spec.doc_len:
        toks.append(int(rng.choice(subjects)))
        toks += rng.choice(filler, size=int(rng.integers(2, 5))).tolist()
    return TokenizedDoc(np.array(toks[: spec.doc_len]), "coherence")


def _probe_set(spec: CorpusSpec, facts: list[Fact], domain: str, rng: np.random.Generator) -> ProbeSet:
    """Cloze items ``[BOS, filler*, SUBJ, REL] -> OBJ``.  Distractors are the
    subject's objects under its other relations, topped up from the domain."""
    vocab_name = DOMAIN_VOCAB[domain]
    objects = spec.objects(vocab_name)
    filler = spec.filler()
    siblings: dict[int, list[int]] = {}
    for f in facts:
        siblings.setdefault(f.subj, []).append(f.obj)
    items = []
    for rep in range(spec.probe_repeats):
        for f in facts:
            near = [o for o in siblings[f.subj] if o != f.obj]
            near = rng.permutation(near).tolist()[: spec.n_distractors]
            pool = objects[~np.isin(objects, near + [f.obj])]
            far = rng.choice(pool, size=spec.n_distractors - len(near), replace=False).tolist()
            # repeat r puts r filler tokens between BOS and the fact
            prefix = [BOS] + rng.choice(filler, size=rep).tolist()
            items.append(ProbeItem(
                prompt=tuple(int(t) for t in prefix + [f.subj, f.rel]),
                answer=(f.obj,),
                distractors=tuple((int(d),) for d in near + far),
            ))
    return ProbeSet(items, domain, spec.vocab(vocab_name))


def gen_corpora(spec: CorpusSpec) -> Corpora:
    """Generate target/retain/general/coherence corpora, held-out splits and probes.

    Deterministic in ``spec.seed``.
    """
    facts = {
        name: _plant_facts(spec, name, derive_rng(spec.seed, f"facts/{name}"))
        for name in FACT_DOMAINS
    }

    def docs(name, n, stream):
        rng = derive_rng(spec.seed, stream)
        return [_fact_doc(spec, facts[name], name, rng) for _ in range(n)]

    rng_coh = derive_rng(spec.seed, "docs/coherence")
    corpora = Corpora(
        spec=spec,
        facts=facts,
        target=docs("target", spec.n_docs_per_corpus, "docs/target"),
        retain=docs("retain", spec.n_docs_per_corpus, "docs/retain"),
        general=docs("general", spec.n_docs_per_corpus, "docs/general"),
        coherence=[_coherence_doc(spec, rng_coh) for _ in range(spec.n_coherence_docs)],
        heldout={
            name: docs(name, spec.n_heldout_docs, f"heldout/{name}")
            for name in FACT_DOMAINS
        },
    )
    corpora.probes = {
        dom: _probe_set(spec, facts[DOMAIN_VOCAB[dom]], dom, derive_rng(spec.seed, f"probes/{dom}"))
        for dom in PROBE_DOMAINS
    }
    return corpora


def concept_prompts(spec: CorpusSpec, facts: Sequence[Fact], n: int = 32) -> list[list[int]]:
    """``[BOS, filler, subject]`` prompts cycling over the planted subjects.

    The filler token varies with the cycle so every prompt is distinct.
    """
    subjects = list(dict.fromkeys(f.subj for f in facts))
    if not subjects:
        raise ValueError("no facts to build concept prompts from")
    filler = spec.filler()
    if n > len(subjects) * len(filler):
        raise InsufficientVocabulary(f"cannot build {n} distinct prompts from {len(subjects)} subjects")
    return [[BOS, int(filler[i // len(subjects)]), subjects[i % len(subjects)]] for i in range(n)]


def token_histogram(docs: Iterable[TokenizedDoc], vocab_size: int) -> np.ndarray:
    hist = np.zeros(vocab_size, dtype=np.int64)
    for d in docs:
        hist += np.bincount(d.tokens, minlength=vocab_size)
    return hist


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def write_docs(docs: Sequence[TokenizedDoc], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            fh.write(" ".join(str(int(t)) for t in d.tokens) + "\n")


def read_docs(path: str | Path, corpus_tag: str, vocab_size: int | None = None) -> list[TokenizedDoc]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            toks = np.array([int(t) for t in line.split()], dtype=np.int64)
            if vocab_size is not None and (toks.min() < 0 or toks.max() >= vocab_size):
                raise ValueError(f"{path}: token id outside [0, {vocab_size})")
            docs.append(TokenizedDoc(toks, corpus_tag))
    return docs


def write_probes(probes: ProbeSet, path: str | Path) -> None:
    records = [
        {
            "prompt": list(it.prompt),
            "answer": list(it.answer),
            "distractors": [list(d) for d in it.distractors],
            "domain": probes.domain_tag,
        }
        for it in probes.items
    ]
    Path(path).write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")


def read_probes(path: str | Path) -> ProbeSet:
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    if not records:
        raise ValueError(f"{path}: empty probe file")
    domains = {r["domain"] for r in records}
    if len(domains) != 1:
        raise ValueError(f"{path}: mixed probe domains {sorted(domains)}")
    items = [
        ProbeItem(tuple(r["prompt"]), tuple(r["answer"]), tuple(tuple(d) for d in r["distractors"]))
        for r in records
    ]
    return ProbeSet(items, domains.pop())


def write_corpora(corpora: Corpora, out: str | Path) -> None:
    """Write every corpus, held-out split, probe set and the fact table under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("target", "retain", "general", "coherence"):
        write_docs(getattr(corpora, name), out / f"{name}.txt")
    for name, docs in corpora.heldout.items():
        write_docs(docs, out / f"heldout_{name}.txt")
    for dom, ps in corpora.probes.items():
        write_probes(ps, out / f"probes_{dom}.json")
    facts = {k: [asdict(f) for f in v] for k, v in corpora.facts.items()}
    meta = {"spec": corpora.spec.to_dict(), "facts": facts}
    (out / "corpus.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_corpora(out: str | Path) -> Corpora:
    out = Path(out)
    meta = json.loads((out / "corpus.json").read_text(encoding="utf-8"))
    spec = CorpusSpec.from_dict(meta["spec"])
    facts = {k: [Fact(**f) for f in v] for k, v in meta["facts"].items()}
    v = spec.vocab_size
    corpora = Corpora(
        spec=spec,
        facts=facts,
        target=read_docs(out / "target.txt", "target", v),
        retain=read_docs(out / "retain.txt", "retain", v),
        general=read_docs(out / "general.txt", "general", v),
        coherence=read_docs(out / "coherence.txt", "coherence", v),
        heldout={n: read_docs(out / f"heldout_{n}.txt", n, v) for n in FACT_DOMAINS},
    )
    for dom in PROBE_DOMAINS:
        ps = read_probes(out / f"probes_{dom}.json")
        corpora.probes[dom] = ProbeSet(ps.items, dom, spec.vocab(DOMAIN_VOCAB[dom]))
    return corpora
