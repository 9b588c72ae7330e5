"""Feature-suppression fine-tuning (unlearn + retain + coherence) and an RMU baseline."""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from crisp._seeding import derive_rng, derive_seed
from crisp.corpus import Corpora, TokenizedDoc
from crisp.lm import LoraAdapter, TinyLM, TrainingError, _stack, clone_frozen, token_mask
from crisp.sae import SaeParams, encode
from crisp.selection import SalientSet

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights; ``alpha`` is always ``1 - beta``."""

    beta: float = 0.99
    gamma: float = 0.01
    lambda_mean: float = 50.0
    alpha: float | None = None

    def __post_init__(self):
        alpha = 1.0 - self.beta
        if self.alpha is not None and not math.isclose(self.alpha, alpha, abs_tol=1e-12):
            raise ConfigError(f"alpha must equal 1 - beta = {alpha}, got {self.alpha}")
        object.__setattr__(self, "alpha", alpha)
        if min(self.alpha, self.beta, self.gamma) < 0 or self.lambda_mean < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class UnlearnConfig:
    sae_layers: tuple[int, ...] = (1, 2)
    opt_layers: tuple[int, ...] = (0,)
    weights: LossWeights = field(default_factory=LossWeights)
    k: int = 10
    tau: float = 3.0
    lora_rank: int = 8
    lora_alpha: float | None = None
    lora_targets: tuple[str, ...] = ("embed",)
    learning_rate: float = 1e-2
    steps: int = 500
    batch_docs: int = 8
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        self.sae_layers = tuple(sorted(int(l) for l in self.sae_layers))
        self.opt_layers = tuple(sorted(int(l) for l in self.opt_layers))
        self.lora_targets = tuple(self.lora_targets)
        if isinstance(self.weights, Mapping):
            self.weights = LossWeights(**self.weights)
        if not self.sae_layers or not self.opt_layers:
            raise ConfigError("sae_layers and opt_layers must be non-empty")
        if max(self.opt_layers) >= max(self.sae_layers):
            raise ConfigError("optimisation layers must precede the last SAE layer")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sae_layers"], d["opt_layers"] = list(self.sae_layers), list(self.opt_layers)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UnlearnConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def unlearn_loss(saes: Mapping[int, SaeParams], salient: SalientSet, acts: Mapping[int, torch.Tensor],
                 lambda_mean: float) -> torch.Tensor:
    """Mean salient-feature activation plus ``lambda_mean`` times the mean activation
    over all features, averaged over target tokens and then over SAE layers.

    ``acts`` maps each layer to residual rows ``[n_tokens, d_model]``.
    """
    terms = []
    for layer in sorted(salient.layers):
        if layer not in acts:
            raise ValueError(f"activations missing SAE layer {layer}")
        feats = salient.layers[layer]
        if not feats:
            warnings.warn(f"layer {layer} has no salient features; contributes 0", stacklevel=2)
            terms.append(acts[layer].sum() * 0.0)
            continue
        a = encode(saes[layer], acts[layer])
        c = a.mean(-1)
        terms.append((a[:, feats].mean(-1) + lambda_mean * c).mean())
    if not terms:
        raise ValueError("salient set covers no layers")
    return torch.stack(terms).mean()


def residual_drift(current: Mapping[int, torch.Tensor], reference: Mapping[int, torch.Tensor],
                   layers: Sequence[int]) -> torch.Tensor:
    """Squared L2 distance between residual rows, averaged over tokens then layers."""
    return torch.stack([(current[l] - reference[l]).pow(2).sum(-1).mean() for l in layers]).mean()


def _masked_acts(lm: TinyLM, batch: torch.Tensor, adapter, layers) -> dict[int, torch.Tensor]:
    _, acts = lm.run(batch, adapter, layers)
    keep = token_mask(batch)
    return {l: a[keep] for l, a in acts.items()}


def retain_loss(lm: TinyLM, adapter: LoraAdapter | None, lm_frozen: TinyLM, batch: torch.Tensor,
                layers: Sequence[int]) -> torch.Tensor:
    cur = _masked_acts(lm, batch, adapter, layers)
    with torch.no_grad():
        ref = _masked_acts(lm_frozen, batch, None, layers)
    return residual_drift(cur, ref, layers)


def coherence_loss(lm: TinyLM, adapter: LoraAdapter | None, lm_frozen: TinyLM, batch: torch.Tensor) -> torch.Tensor:
    """Retain-style drift measured only at the final layer's residual output."""
    return retain_loss(lm, adapter, lm_frozen, batch, [lm.cfg.n_layers - 1])


def total_loss(components: Sequence[torch.Tensor | float], weights: LossWeights):
    l_u, l_r, l_c = components
    return weights.alpha * l_u + weights.beta * l_r + weights.gamma * l_c


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _frozen_saes(saes: Mapping[int, SaeParams]) -> dict[int, SaeParams]:
    out = {}
    for l, s in saes.items():
        c = copy.deepcopy(s)
        for p in c.parameters():
            p.requires_grad_(False)
        out[l] = c
    return out


def _docs_tensor(docs: Sequence[TokenizedDoc]) -> torch.Tensor:
    if not docs:
        raise ValueError("empty corpus")
    return _stack([d.tokens for d in docs])


def _sampler(n: int, batch: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch + 1 if n >= batch else 1, batch):
            yield torch.from_numpy(perm[i:i + batch])


def mean_feature_activation(lm: TinyLM, adapter: LoraAdapter | None, saes: Mapping[int, SaeParams],
                            features: Mapping[int, Sequence[int]], docs: Sequence[TokenizedDoc]) -> float:
    """Mean activation of the listed features over non-BOS tokens, averaged over layers."""
    layers = [l for l in sorted(features) if features[l]]
    if not layers:
        return 0.0
    data = _docs_tensor(docs)
    sums = {l: 0.0 for l in layers}
    n = 0
    with torch.no_grad():
        for i in range(0, len(data), 32):
            acts = _masked_acts(lm, data[i:i + 32], adapter, layers)
            for l in layers:
                a = encode(saes[l], acts[l])[:, list(features[l])]
                sums[l] += float(a.double().mean(-1).sum())
            n += len(acts[layers[0]])
    return float(np.mean([sums[l] / n for l in layers]))


@dataclass
class CrispResult:
    adapter: LoraAdapter
    log: list[dict]
    summary: dict


def train_crisp(lm_frozen: TinyLM, saes: Mapping[int, SaeParams], salient: SalientSet, cfg: UnlearnConfig,
                corpora: Corpora) -> CrispResult:
    """Train a LoRA adapter that suppresses salient SAE features on target text
    while holding residuals on retain and coherence text near the frozen model.
    """
    if sorted(salient.layers) != list(cfg.sae_layers):
        raise ConfigError(f"salient layers {sorted(salient.layers)} != sae_layers {list(cfg.sae_layers)}")
    missing = [l for l in cfg.sae_layers if l not in saes]
    if missing:
        raise ConfigError(f"no SAE for layers {missing}")
    if salient.total() == 0:
        raise ConfigError("salient set is empty on every layer")

    base = clone_frozen(lm_frozen)
    saes = _frozen_saes(saes)
    dtype = next(base.parameters()).dtype
    adapter = LoraAdapter(base.cfg, cfg.opt_layers, cfg.lora_rank, cfg.lora_alpha, cfg.lora_targets,
                          seed=derive_seed(cfg.seed, "crisp/lora"), dtype=dtype)
    final = base.cfg.n_layers - 1
    layers = list(cfg.sae_layers)

    target = _docs_tensor(corpora.target)
    retain = _docs_tensor(corpora.retain)
    coher = _docs_tensor(corpora.coherence)
    with torch.no_grad():
        ref_retain = [_masked_acts(base, retain[i:i + 1], None, layers) for i in range(len(retain))]
        ref_coher = [_masked_acts(base, coher[i:i + 1], None, [final]) for i in range(len(coher))]

    def ref_for(cache, idx, ls):
        return {l: torch.cat([cache[int(i)][l] for i in idx]) for l in ls}

    rng = derive_rng(cfg.seed, "crisp/batches")
    b = cfg.batch_docs
    it_t = _sampler(len(target), b, rng)
    it_r = _sampler(len(retain), b, rng)
    it_c = _sampler(len(coher), min(b, len(coher)), rng)

    held = corpora.heldout.get("target") or corpora.target
    before = mean_feature_activation(base, None, saes, salient.layers, held)

    params = list(adapter.parameters())
    optim = (torch.optim.Adam(params, lr=cfg.learning_rate) if cfg.optimizer == "adam"
             else torch.optim.SGD(params, lr=cfg.learning_rate))
    w = cfg.weights
    records = []
    for step in range(cfg.steps):
        ti, ri, ci = next(it_t), next(it_r), next(it_c)
        l_u = unlearn_loss(saes, salient, _masked_acts(base, target[ti], adapter, layers), w.lambda_mean)
        l_r = residual_drift(_masked_acts(base, retain[ri], adapter, layers), ref_for(ref_retain, ri, layers), layers)
        l_c = residual_drift(_masked_acts(base, coher[ci], adapter, [final]), ref_for(ref_coher, ci, [final]), [final])
        loss = total_loss((l_u, l_r, l_c), w)
        if not torch.isfinite(loss):
            raise TrainingError("unlearning loss is not finite", step)
        optim.zero_grad(set_to_none=True)
        loss.backward()
        optim.step()
        records.append({"step": step, "l_unlearn": l_u.item(), "l_retain": l_r.item(),
                        "l_coherence": l_c.item(), "total": loss.item()})
    after = mean_feature_activation(base, adapter, saes, salient.layers, held)
    summary = {
        "optimizer": cfg.optimizer,
        "salient_activation_before": before,
        "salient_activation_after": after,
        "salient_drop": 1.0 - after / before if before > 0 else 0.0,
        "steps": cfg.steps,
    }
    log.info("crisp: %s", summary)
    return CrispResult(adapter, records, summary)


def run_log_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


# --------------------------------------------------------------------------
# RMU baseline
# --------------------------------------------------------------------------


@dataclass
class RmuConfig:
    steer_coeff: float = 20.0
    alpha_rmu: float = 100.0
    layer: int = 1
    param_layers: tuple[int, ...] = (0, 1)
    learning_rate: float = 1e-3
    steps: int = 500
    batch_docs: int = 8
    seed: int = 0

    def __post_init__(self):
        self.param_layers = tuple(sorted(int(l) for l in self.param_layers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["param_layers"] = list(self.param_layers)
        return d


def rmu_direction(d_model: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    """The fixed random unit control vector."""
    rng = derive_rng(seed, "rmu/direction")
    u = torch.from_numpy(rng.random(d_model))
    return (u / u.norm()).to(dtype)


def rmu_losses(lm: TinyLM, lm_frozen: TinyLM, target_batch: torch.Tensor, retain_batch: torch.Tensor,
               control: torch.Tensor, cfg: RmuConfig) -> tuple[torch.Tensor, torch.Tensor]:
    h_t = _masked_acts(lm, target_batch, None, [cfg.layer])[cfg.layer]
    forget = (h_t - control).pow(2).sum(-1).mean()
    retain = retain_loss(lm, None, lm_frozen, retain_batch, [cfg.layer])
    return forget, retain


def train_rmu(lm_frozen: TinyLM, cfg: RmuConfig, corpora: Corpora) -> tuple[TinyLM, list[dict]]:
    """Steer target-text residuals at ``cfg.layer`` toward ``steer_coeff * u`` while
    regularising retain-text residuals; updates MLP weights of ``param_layers``."""
    n_layers = lm_frozen.cfg.n_layers
    if not 0 <= cfg.layer < n_layers or any(not 0 <= l < n_layers for l in cfg.param_layers):
        raise ConfigError("RMU layers outside model depth")
    ref = clone_frozen(lm_frozen)
    model = copy.deepcopy(lm_frozen)
    for p in model.parameters():
        p.requires_grad_(False)
    params = []
    for l in cfg.param_layers:
        for name in ("W_mlp_in", "b_mlp_in", "W_mlp_out", "b_mlp_out"):
            p = getattr(model.blocks[l], name)
            p.requires_grad_(True)
            params.append(p)
    control = cfg.steer_coeff * rmu_direction(model.cfg.d_model, cfg.seed, next(model.parameters()).dtype)
    target, retain = _docs_tensor(corpora.target), _docs_tensor(corpora.retain)
    rng = derive_rng(cfg.seed, "rmu/batches")
    it_t, it_r = _sampler(len(target), cfg.batch_docs, rng), _sampler(len(retain), cfg.batch_docs, rng)
    optim = torch.optim.Adam(params, lr=cfg.learning_rate)
    records = []
    for step in range(cfg.steps):
        forget, ret = rmu_losses(model, ref, target[next(it_t)], retain[next(it_r)], control, cfg)
        loss = forget + cfg.alpha_rmu * ret
        if not torch.isfinite(loss):
            raise TrainingError("RMU loss is not finite", step)
        optim.zero_grad(set_to_none=True)
        loss.backward()
        optim.step()
        records.append({"step": step, "l_forget": forget.item(), "l_retain": ret.item(), "total": loss.item()})
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return model, records
