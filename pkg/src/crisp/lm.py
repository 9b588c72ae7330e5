"""Tiny decoder-only transformer with residual-stream capture and LoRA adapters."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from crisp._seeding import derive_generator, derive_seed
from crisp.corpus import BOS, TokenizedDoc

log = logging.getLogger(__name__)

# matrices a LoRA adapter may target; "embed" is the token embedding and only
# exists on layer 0, where its rows are looked up rather than multiplied
LORA_TARGETS = ("embed", "qkv", "attn_out", "mlp_in", "mlp_out")


class TrainingError(RuntimeError):
    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    context_len: int = 128
    tie_embeddings: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 2:
            raise ValueError("n_layers must be at least 2")
        if min(self.vocab_size, self.d_model, self.d_ff, self.context_len) < 1:
            raise ValueError("sizes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class Block(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        d, f = cfg.d_model, cfg.d_ff
        self.n_heads = cfg.n_heads
        self.ln1_w = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.W_qkv = nn.Parameter(torch.empty(d, 3 * d))
        self.b_qkv = nn.Parameter(torch.zeros(3 * d))
        self.W_attn_out = nn.Parameter(torch.empty(d, d))
        self.b_attn_out = nn.Parameter(torch.zeros(d))
        self.ln2_w = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))
        self.W_mlp_in = nn.Parameter(torch.empty(d, f))
        self.b_mlp_in = nn.Parameter(torch.zeros(f))
        self.W_mlp_out = nn.Parameter(torch.empty(f, d))
        self.b_mlp_out = nn.Parameter(torch.zeros(d))

    def forward(self, x, mask, lora=None):
        B, T, d = x.shape
        h = F.layer_norm(x, (d,), self.ln1_w, self.ln1_b)
        q, k, v = _linear(h, self.W_qkv, self.b_qkv, lora, "qkv").split(d, dim=-1)
        hd = d // self.n_heads
        q, k, v = (t.view(B, T, self.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        att = att.masked_fill(mask[:T, :T], float("-inf")).softmax(-1)
        z = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + _linear(z, self.W_attn_out, self.b_attn_out, lora, "attn_out")
        h = F.layer_norm(x, (d,), self.ln2_w, self.ln2_b)
        h = F.gelu(_linear(h, self.W_mlp_in, self.b_mlp_in, lora, "mlp_in"))
        return x + _linear(h, self.W_mlp_out, self.b_mlp_out, lora, "mlp_out")


def _linear(x, W, b, lora, name):
    y = x @ W + b
    if lora is not None and name in lora:
        down, up, scale = lora[name]
        y = y + scale * ((x @ down) @ up)
    return y


class TinyLM(nn.Module):
    """Pre-LN decoder-only transformer.  Layer ``l``'s residual output is the
    stream after block ``l`` (attention and MLP both added)."""

    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.pos = nn.Parameter(torch.empty(cfg.context_len, cfg.d_model))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.lnf_w = nn.Parameter(torch.ones(cfg.d_model))
        self.lnf_b = nn.Parameter(torch.zeros(cfg.d_model))
        if not cfg.tie_embeddings:
            self.unembed = nn.Parameter(torch.empty(cfg.d_model, cfg.vocab_size))
        self.register_buffer(
            "causal_mask",
            torch.triu(torch.ones(cfg.context_len, cfg.context_len, dtype=torch.bool), 1),
            persistent=False,
        )

    @property
    def W_U(self):
        return self.embed.T if self.cfg.tie_embeddings else self.unembed

    def run(self, tokens: torch.Tensor, adapter: "LoraAdapter | None" = None,
            capture: Iterable[int] = ()) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Batched forward on ``[B, T]`` token ids.

        Returns logits ``[B, T, vocab]`` and the full ``[B, T, d_model]``
        residual output of every layer in ``capture``.
        """
        capture = set(capture)
        T = tokens.shape[-1]
        if T > self.cfg.context_len:
            raise ValueError(f"sequence length {T} exceeds context_len {self.cfg.context_len}")
        x = self.embed[tokens] + self.pos[:T]
        if adapter is not None:
            x = x + adapter.embed_delta(tokens)
        acts = {}
        for l, block in enumerate(self.blocks):
            x = block(x, self.causal_mask, adapter.layer_view(l) if adapter is not None else None)
            if l in capture:
                acts[l] = x
        x = F.layer_norm(x, (self.cfg.d_model,), self.lnf_w, self.lnf_b)
        return x @ self.W_U, acts


class LoraAdapter(nn.Module):
    """Low-rank deltas ``scale * down @ up`` on residual-writing matrices."""

    def __init__(self, cfg: LmConfig, layers: Sequence[int], rank: int = 8,
                 alpha: float | None = None, targets: Sequence[str] = LORA_TARGETS, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        bad = [l for l in layers if not 0 <= l < cfg.n_layers]
        if bad:
            raise ValueError(f"adapter layers {bad} outside model depth {cfg.n_layers}")
        self.rank = rank
        self.layers = tuple(sorted(set(int(l) for l in layers)))
        self.targets = tuple(targets)
        self.scale = float(alpha if alpha is not None else rank) / rank
        gen = derive_generator(seed, "lora/init")
        dims = {"embed": (cfg.vocab_size, cfg.d_model),
                "qkv": (cfg.d_model, 3 * cfg.d_model), "attn_out": (cfg.d_model, cfg.d_model),
                "mlp_in": (cfg.d_model, cfg.d_ff), "mlp_out": (cfg.d_ff, cfg.d_model)}
        unknown = [t for t in targets if t not in dims]
        if unknown:
            raise ValueError(f"unknown LoRA targets {unknown}")
        self.down = nn.ParameterDict()
        self.up = nn.ParameterDict()
        for l in self.layers:
            for t in self.targets:
                if t == "embed" and l != 0:
                    continue
                d_in, d_out = dims[t]
                key = f"{l}_{t}"
                if t == "embed":
                    # per-token rows start at zero so each token's delta trains
                    # on its own gradient; the shared factor is random
                    self.down[key] = nn.Parameter(torch.zeros(d_in, rank, dtype=dtype))
                    self.up[key] = nn.Parameter(
                        torch.randn(rank, d_out, generator=gen, dtype=dtype) / math.sqrt(d_out))
                else:
                    self.down[key] = nn.Parameter(
                        torch.randn(d_in, rank, generator=gen, dtype=dtype) / math.sqrt(d_in))
                    self.up[key] = nn.Parameter(torch.zeros(rank, d_out, dtype=dtype))

    def adapted(self) -> list[tuple[int, str]]:
        return [(int(k.split("_", 1)[0]), k.split("_", 1)[1]) for k in self.down]

    def layer_view(self, layer: int) -> dict | None:
        if layer not in self.layers:
            return None
        return {t: (self.down[f"{layer}_{t}"], self.up[f"{layer}_{t}"], self.scale)
                for t in self.targets if f"{layer}_{t}" in self.down}

    def embed_delta(self, tokens: torch.Tensor) -> torch.Tensor | float:
        if "0_embed" not in self.down:
            return 0.0
        return self.scale * (self.down["0_embed"][tokens] @ self.up["0_embed"])

    def delta(self, layer: int, target: str) -> torch.Tensor:
        key = f"{layer}_{target}"
        return self.scale * self.down[key] @ self.up[key]

    def is_zero(self) -> bool:
        return all(bool((self.down[k] == 0).all() or (self.up[k] == 0).all()) for k in self.down)


# --------------------------------------------------------------------------
# functional surface
# --------------------------------------------------------------------------


def init_lm(config: LmConfig) -> TinyLM:
    lm = TinyLM(config)
    gen = derive_generator(config.seed, "lm/init")
    out_std = 0.02 / math.sqrt(2 * config.n_layers)
    with torch.no_grad():
        for name, p in lm.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("W_attn_out", "W_mlp_out"):
                p.copy_(torch.randn(p.shape, generator=gen) * out_std)
            elif leaf in ("embed", "pos", "unembed") or leaf.startswith("W_"):
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
    return lm


def _as_batch(tokens) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    return t.unsqueeze(0) if t.dim() == 1 else t


def _check_tokens(lm: TinyLM, t: torch.Tensor) -> None:
    if t.numel() == 0:
        raise ValueError("empty token sequence")
    if int(t.min()) < 0 or int(t.max()) >= lm.cfg.vocab_size:
        raise ValueError(f"token id outside [0, {lm.cfg.vocab_size})")


def forward(lm: TinyLM, adapter: LoraAdapter | None, tokens: Sequence[int],
            capture_layers: Iterable[int] = ()) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Single-sequence forward.

    Returns logits ``[n_tokens, vocab]`` and an activation record mapping each
    captured layer to its residual outputs at non-BOS positions.
    """
    capture_layers = set(capture_layers)
    if any(not 0 <= l < lm.cfg.n_layers for l in capture_layers):
        raise ValueError(f"capture layers {sorted(capture_layers)} outside [0, {lm.cfg.n_layers})")
    t = _as_batch(tokens)
    _check_tokens(lm, t)
    logits, acts = lm.run(t, adapter, capture_layers)
    keep = t[0] != BOS
    return logits[0], {l: a[0][keep] for l, a in acts.items()}


def token_mask(tokens: torch.Tensor) -> torch.Tensor:
    """Positions that count toward token sums: everything except BOS."""
    return tokens != BOS


def capture_activations(lm: TinyLM, docs: Sequence[TokenizedDoc], layers: Sequence[int],
                        adapter: LoraAdapter | None = None, batch_size: int = 32) -> dict[int, torch.Tensor]:
    """Residual outputs at non-BOS positions of every doc, concatenated in doc order."""
    out = {l: [] for l in layers}
    with torch.no_grad():
        for i in range(0, len(docs), batch_size):
            batch = _stack([d.tokens for d in docs[i:i + batch_size]])
            _, acts = lm.run(batch, adapter, layers)
            keep = token_mask(batch)
            for l in layers:
                out[l].append(acts[l][keep])
    dtype = next(lm.parameters()).dtype
    return {l: torch.cat(v) if v else torch.zeros(0, lm.cfg.d_model, dtype=dtype) for l, v in out.items()}


def _stack(seqs: Sequence[np.ndarray], pad: int = BOS) -> torch.Tensor:
    T = max(len(s) for s in seqs)
    arr = np.full((len(seqs), T), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s
    return torch.from_numpy(arr)


def lm_loss(lm: TinyLM, batch: torch.Tensor, adapter: LoraAdapter | None = None) -> torch.Tensor:
    """Mean next-token cross-entropy over all positions of a ``[B, T]`` batch."""
    logits, _ = lm.run(batch, adapter)
    return F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))


@dataclass
class LmTrainConfig:
    steps: int = 1500
    batch_docs: int = 16
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup: int = 100
    seed: int = 0
    log_every: int = 250
    history: list = field(default_factory=list, repr=False)


def train_lm(lm: TinyLM, docs: Sequence[TokenizedDoc], opt: LmTrainConfig | None = None) -> TinyLM:
    """Train ``lm`` in place on next-token prediction; returns it.

    The per-step loss is appended to ``opt.history``.  A non-finite loss
    raises `TrainingError` carrying the step index.
    """
    opt = opt or LmTrainConfig()
    if not docs:
        raise ValueError("training corpus is empty")
    if opt.steps == 0:
        return lm
    data = _stack([d.tokens for d in docs])
    _check_tokens(lm, data)
    rng = np.random.default_rng(derive_seed(opt.seed, "lm/batches"))
    optim = torch.optim.AdamW(lm.parameters(), lr=opt.lr, weight_decay=opt.weight_decay, betas=(0.9, 0.98))

    def lr_factor(s):
        warm = min(1.0, (s + 1) / max(1, opt.warmup))
        return warm * 0.5 * (1 + math.cos(math.pi * s / opt.steps))

    sched = torch.optim.lr_scheduler.LambdaLR(optim, lr_factor)
    lm.train()
    for step in range(opt.steps):
        idx = rng.choice(len(data), size=min(opt.batch_docs, len(data)), replace=False)
        loss = lm_loss(lm, data[torch.from_numpy(idx)])
        if not torch.isfinite(loss):
            raise TrainingError("language-model loss diverged", step)
        optim.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(lm.parameters(), 1.0)
        optim.step()
        sched.step()
        opt.history.append(loss.item())
        if opt.log_every and step % opt.log_every == 0:
            log.info("train_lm step %d loss %.4f", step, loss.item())
    lm.eval()
    return lm


def doc_nll(lm: TinyLM, docs: Sequence[TokenizedDoc], adapter: LoraAdapter | None = None,
            batch_size: int = 32) -> tuple[float, int]:
    """Summed next-token NLL and number of predicted positions."""
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(docs), batch_size):
            chunk = docs[i:i + batch_size]
            batch = _stack([d.tokens for d in chunk])
            logits, _ = lm.run(batch, adapter)
            lp = logits[:, :-1].double().log_softmax(-1)
            nll = -lp.gather(-1, batch[:, 1:, None])[..., 0]
            lengths = torch.tensor([len(d) for d in chunk])
            valid = torch.arange(batch.shape[1] - 1)[None] < (lengths[:, None] - 1)
            total += float(nll[valid].sum())
            count += int(valid.sum())
    return total, count


def perplexity(lm: TinyLM, adapter: LoraAdapter | None, docs: Sequence[TokenizedDoc]) -> float:
    if not docs:
        raise ValueError("perplexity needs at least one document")
    total, count = doc_nll(lm, docs, adapter)
    if count == 0:
        raise ValueError("documents too short to score")
    return math.exp(total / count)


def generate(lm: TinyLM, adapter: LoraAdapter | None, prefix: Sequence[int], n: int) -> list[int]:
    """Greedy continuation of ``prefix`` by ``n`` tokens (fewer if the context fills)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    toks = [int(t) for t in prefix]
    _check_tokens(lm, _as_batch(toks))
    out = []
    with torch.no_grad():
        for _ in range(n):
            if len(toks) >= lm.cfg.context_len:
                break
            logits, _ = lm.run(_as_batch(toks), adapter)
            nxt = int(logits[0, -1].argmax())
            toks.append(nxt)
            out.append(nxt)
    return out


def merge_lora(lm: TinyLM, adapter: LoraAdapter | None) -> TinyLM:
    """Fold the adapter's deltas into a copy of ``lm``."""
    merged = copy.deepcopy(lm)
    if adapter is None:
        return merged
    names = {"qkv": "W_qkv", "attn_out": "W_attn_out", "mlp_in": "W_mlp_in", "mlp_out": "W_mlp_out"}
    with torch.no_grad():
        for l, t in adapter.adapted():
            if t == "embed" and lm.cfg.tie_embeddings:
                raise ValueError("an embedding delta cannot be merged into tied embeddings")
            W = merged.embed if t == "embed" else getattr(merged.blocks[l], names[t])
            delta = adapter.delta(l, t).to(W.dtype)
            if delta.shape != W.shape:
                raise ValueError(f"adapter delta {tuple(delta.shape)} does not match {tuple(W.shape)}")
            W.add_(delta)
    return merged


def clone_frozen(lm: TinyLM) -> TinyLM:
    frozen = copy.deepcopy(lm)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen
