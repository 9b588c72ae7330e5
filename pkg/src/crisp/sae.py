"""Per-layer sparse autoencoders over residual-stream activations."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from crisp._seeding import derive_generator, derive_rng

log = logging.getLogger(__name__)


class InsufficientData(ValueError):
    pass


class SaeParams(nn.Module):
    """Encoder ``a = σ(W_enc h + b_enc)`` and affine decoder ``ĥ = W_dec a + b_dec``.

    ``activation`` is ``"relu"`` or ``"topk"`` (ReLU followed by keeping the
    ``k_act`` largest entries).
    """

    def __init__(self, d_model: int, d_sae: int, activation: str = "relu", k_act: int = 32,
                 l1_coeff: float = 5e-3, layer: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if d_sae <= d_model:
            raise ValueError("SAE must be overcomplete (d_sae > d_model)")
        if activation not in ("relu", "topk"):
            raise ValueError(f"unknown activation {activation!r}")
        if l1_coeff < 0:
            raise ValueError("l1_coeff must be non-negative")
        self.activation = activation
        self.k_act = int(k_act)
        self.l1_coeff = float(l1_coeff)
        self.layer = int(layer)
        self.W_enc = nn.Parameter(torch.zeros(d_sae, d_model, dtype=dtype))
        self.b_enc = nn.Parameter(torch.zeros(d_sae, dtype=dtype))
        self.W_dec = nn.Parameter(torch.zeros(d_model, d_sae, dtype=dtype))
        self.b_dec = nn.Parameter(torch.zeros(d_model, dtype=dtype))

    @property
    def d_model(self) -> int:
        return self.W_enc.shape[1]

    @property
    def d_sae(self) -> int:
        return self.W_enc.shape[0]

    def meta(self) -> dict:
        return {"activation": self.activation, "k_act": self.k_act, "l1_coeff": self.l1_coeff,
                "layer": self.layer, "d_model": self.d_model, "d_sae": self.d_sae}

    def encode(self, h: torch.Tensor) -> torch.Tensor:
        return encode(self, h)

    def decode(self, a: torch.Tensor) -> torch.Tensor:
        return decode(self, a)


def activate(pre: torch.Tensor, activation: str, k_act: int) -> torch.Tensor:
    a = torch.relu(pre)
    if activation == "topk" and k_act < a.shape[-1]:
        top = a.topk(k_act, dim=-1)
        a = torch.zeros_like(a).scatter(-1, top.indices, top.values)
    return a


def encode(sae: SaeParams, h: torch.Tensor) -> torch.Tensor:
    return activate(h @ sae.W_enc.T + sae.b_enc, sae.activation, sae.k_act)


def decode(sae: SaeParams, a: torch.Tensor) -> torch.Tensor:
    return a @ sae.W_dec.T + sae.b_dec


def sae_loss(sae: SaeParams, h: torch.Tensor) -> torch.Tensor:
    """``‖ĥ − h‖² + λ‖a‖₁``, averaged over leading (token) dimensions."""
    a = encode(sae, h)
    err = (decode(sae, a) - h).pow(2).sum(-1)
    return (err + sae.l1_coeff * a.abs().sum(-1)).mean()


def explained_variance(sae: SaeParams, h: torch.Tensor) -> float:
    with torch.no_grad():
        rec = decode(sae, encode(sae, h))
        return 1.0 - float((rec - h).pow(2).sum() / (h - h.mean(0)).pow(2).sum())


def mean_l0(sae: SaeParams, h: torch.Tensor) -> float:
    with torch.no_grad():
        return float((encode(sae, h) > 0).sum(-1).double().mean())


def normalize_decoder(sae: SaeParams) -> None:
    with torch.no_grad():
        sae.W_dec.div_(sae.W_dec.norm(dim=0, keepdim=True).clamp_min(1e-12))


@dataclass
class SaeTrainConfig:
    d_sae: int = 512
    activation: str = "topk"
    k_act: int = 32
    l1_coeff: float = 0.0
    lr: float = 1e-3
    steps: int = 4000
    batch_tokens: int = 256
    heldout_frac: float = 0.1
    min_tokens: int = 1024
    target_loss: float | None = None
    resample_dead: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SaeTrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SaeTrainReport:
    steps_run: int
    heldout_loss: float
    explained_variance: float
    mean_l0: float
    n_resampled: int
    stopped_early: bool
    history: list = field(default_factory=list, repr=False)


def init_sae(d_model: int, cfg: SaeTrainConfig, layer: int, data_mean: torch.Tensor | None = None,
             dtype: torch.dtype = torch.float32) -> SaeParams:
    sae = SaeParams(d_model, cfg.d_sae, cfg.activation, cfg.k_act, cfg.l1_coeff, layer, dtype)
    gen = derive_generator(cfg.seed, f"sae/init/{layer}")
    with torch.no_grad():
        W = torch.randn(d_model, cfg.d_sae, generator=gen, dtype=torch.float64)
        W /= W.norm(dim=0, keepdim=True)
        sae.W_dec.copy_(W)
        sae.W_enc.copy_(W.T)
        if data_mean is not None:
            sae.b_dec.copy_(data_mean)
            # centre pre-activations around the data mean
            sae.b_enc.copy_(-(sae.W_enc @ data_mean))
    return sae


def train_sae(layer: int, activations: torch.Tensor, cfg: SaeTrainConfig | None = None) -> tuple[SaeParams, SaeTrainReport]:
    """Fit an SAE to residual activations ``[n_tokens, d_model]`` of one layer.

    Training stops once the held-out loss falls below ``cfg.target_loss`` or
    after ``cfg.steps`` steps.  Decoder columns are renormalised to unit norm
    after every step; features silent for a whole epoch are re-seeded from
    poorly reconstructed tokens.
    """
    cfg = cfg or SaeTrainConfig()
    acts = torch.as_tensor(activations).detach()
    if acts.dim() != 2:
        raise ValueError("activations must be [n_tokens, d_model]")
    if len(acts) < cfg.min_tokens:
        raise InsufficientData(f"need {cfg.min_tokens} activation rows, got {len(acts)}")
    rng = derive_rng(cfg.seed, f"sae/data/{layer}")
    perm = torch.from_numpy(rng.permutation(len(acts)))
    n_held = max(1, int(len(acts) * cfg.heldout_frac))
    held, train = acts[perm[:n_held]], acts[perm[n_held:]]

    sae = init_sae(acts.shape[1], cfg, layer, train.mean(0), acts.dtype)
    if cfg.steps == 0:
        return sae, _report(sae, held, 0, 0, False, [])

    optim = torch.optim.Adam(sae.parameters(), lr=cfg.lr)
    steps_per_epoch = max(1, math.ceil(len(train) / cfg.batch_tokens))
    fired = torch.zeros(cfg.d_sae, dtype=torch.bool)
    order = torch.from_numpy(rng.permutation(len(train)))
    history, n_resampled, stopped = [], 0, False
    step = 0
    for step in range(1, cfg.steps + 1):
        pos = (step - 1) % steps_per_epoch
        if pos == 0 and step > 1:
            order = torch.from_numpy(rng.permutation(len(train)))
        batch = train[order[pos * cfg.batch_tokens:(pos + 1) * cfg.batch_tokens]]
        a = encode(sae, batch)
        loss = ((decode(sae, a) - batch).pow(2).sum(-1) + sae.l1_coeff * a.sum(-1)).mean()
        optim.zero_grad(set_to_none=True)
        loss.backward()
        optim.step()
        normalize_decoder(sae)
        fired |= (a.detach() > 0).any(0)
        history.append(loss.item())

        if pos == steps_per_epoch - 1:
            dead = (~fired).nonzero().flatten()
            if cfg.resample_dead and len(dead) and step < cfg.steps:
                _resample(sae, optim, dead, train, rng)
                n_resampled += len(dead)
            fired.zero_()
            if cfg.target_loss is not None:
                with torch.no_grad():
                    if float(sae_loss(sae, held)) < cfg.target_loss:
                        stopped = True
                        break
    report = _report(sae, held, step, n_resampled, stopped, history)
    log.info("sae layer %d: %s", layer, report)
    return sae, report


def _report(sae, held, steps, n_resampled, stopped, history) -> SaeTrainReport:
    with torch.no_grad():
        return SaeTrainReport(
            steps_run=steps,
            heldout_loss=float(sae_loss(sae, held)),
            explained_variance=explained_variance(sae, held),
            mean_l0=mean_l0(sae, held),
            n_resampled=n_resampled,
            stopped_early=stopped,
            history=history,
        )


def _resample(sae: SaeParams, optim: torch.optim.Optimizer, dead: torch.Tensor,
              data: torch.Tensor, rng: np.random.Generator, n_probe: int = 4096) -> None:
    with torch.no_grad():
        idx = torch.from_numpy(rng.choice(len(data), size=min(n_probe, len(data)), replace=False))
        x = data[idx]
        err = (decode(sae, encode(sae, x)) - x).pow(2).sum(-1)
        p = err.double().numpy()
        p = p / p.sum() if p.sum() > 0 else np.full(len(p), 1.0 / len(p))
        pick = rng.choice(len(x), size=len(dead), replace=len(dead) > len(x), p=p)
        resid = x[torch.from_numpy(pick)] - sae.b_dec
        dirs = resid / resid.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        alive = torch.ones(sae.d_sae, dtype=torch.bool)
        alive[dead] = False
        enc_norm = sae.W_enc[alive].norm(dim=-1).mean() if alive.any() else 1.0
        sae.W_dec[:, dead] = dirs.T
        sae.W_enc[dead] = dirs * enc_norm * 0.2
        sae.b_enc[dead] = 0.0
        for p_ in (sae.W_enc, sae.b_enc, sae.W_dec):
            state = optim.state.get(p_)
            if not state:
                continue
            for key in ("exp_avg", "exp_avg_sq"):
                if p_ is sae.W_dec:
                    state[key][:, dead] = 0.0
                else:
                    state[key][dead] = 0.0
