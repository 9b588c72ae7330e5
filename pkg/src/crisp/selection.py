"""Contrastive feature statistics, salient-feature selection and feature groups."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from crisp import plots
from crisp.sae import SaeParams, encode

EPS = 1e-8
THETA_HI = 0.05
THETA_LO = 0.01
GROUPS = ("target", "benign", "shared", "inactive")
STATS_COLUMNS = ("layer", "feature", "count_target", "count_retain", "mass_target", "mass_retain",
                 "tokens_seen_target", "tokens_seen_retain", "freq_target", "freq_retain")


class LayerMismatch(ValueError):
    pass


@dataclass
class FeatureStats:
    """Per-feature activation counts and masses on the target and retain corpora."""

    layer: int
    count_target: np.ndarray
    count_retain: np.ndarray
    mass_target: np.ndarray
    mass_retain: np.ndarray
    tokens_seen_target: int = 0
    tokens_seen_retain: int = 0

    @classmethod
    def zeros(cls, layer: int, n_features: int) -> "FeatureStats":
        z = lambda dt: np.zeros(n_features, dtype=dt)  # noqa: E731
        return cls(layer, z(np.int64), z(np.int64), z(np.float64), z(np.float64))

    @property
    def n_features(self) -> int:
        return len(self.count_target)

    def merge(self, other: "FeatureStats") -> "FeatureStats":
        if other.layer != self.layer or other.n_features != self.n_features:
            raise LayerMismatch("cannot merge stats of different layers or widths")
        return FeatureStats(
            self.layer,
            self.count_target + other.count_target,
            self.count_retain + other.count_retain,
            self.mass_target + other.mass_target,
            self.mass_retain + other.mass_retain,
            self.tokens_seen_target + other.tokens_seen_target,
            self.tokens_seen_retain + other.tokens_seen_retain,
        )

    __add__ = merge

    def swapped(self) -> "FeatureStats":
        """Same stats with the roles of the two corpora exchanged."""
        return FeatureStats(self.layer, self.count_retain, self.count_target, self.mass_retain,
                            self.mass_target, self.tokens_seen_retain, self.tokens_seen_target)

    def freq_target(self) -> np.ndarray:
        return self.count_target / max(1, self.tokens_seen_target)

    def freq_retain(self) -> np.ndarray:
        return self.count_retain / max(1, self.tokens_seen_retain)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureStats):
            return NotImplemented
        return (self.layer == other.layer
                and self.tokens_seen_target == other.tokens_seen_target
                and self.tokens_seen_retain == other.tokens_seen_retain
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("count_target", "count_retain", "mass_target", "mass_retain")))


def stats_from_activations(layer: int, feature_acts: np.ndarray | torch.Tensor, corpus_tag: str) -> FeatureStats:
    """Stats from a ``[n_tokens, n_features]`` matrix of SAE activations."""
    a = np.asarray(feature_acts.detach() if isinstance(feature_acts, torch.Tensor) else feature_acts)
    stats = FeatureStats.zeros(layer, a.shape[1])
    count = (a > 0).sum(0).astype(np.int64)
    mass = a.astype(np.float64).sum(0)
    if corpus_tag == "target":
        stats.count_target, stats.mass_target, stats.tokens_seen_target = count, mass, len(a)
    elif corpus_tag == "retain":
        stats.count_retain, stats.mass_retain, stats.tokens_seen_retain = count, mass, len(a)
    else:
        raise ValueError(f"corpus_tag must be 'target' or 'retain', got {corpus_tag!r}")
    return stats


def accumulate_stats(sae: SaeParams, acts: Mapping[int, torch.Tensor] | Iterable[Mapping[int, torch.Tensor]],
                     corpus_tag: str, chunk: int = 8192) -> FeatureStats:
    """Count and sum SAE activations over a stream of activation records."""
    records = [acts] if isinstance(acts, Mapping) else acts
    total = FeatureStats.zeros(sae.layer, sae.d_sae)
    with torch.no_grad():
        for rec in records:
            if sae.layer not in rec:
                raise LayerMismatch(f"activation record has layers {sorted(rec)}, SAE is layer {sae.layer}")
            h = rec[sae.layer]
            for i in range(0, len(h), chunk):
                a = encode(sae, h[i:i + chunk].to(sae.W_enc.dtype))
                total = total.merge(stats_from_activations(sae.layer, a, corpus_tag))
    return total


def count_diff(stats: FeatureStats) -> np.ndarray:
    return stats.count_target - stats.count_retain


def activation_ratio(stats: FeatureStats, eps: float = EPS) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return stats.mass_target / (stats.mass_retain + eps)


def select_salient(stats: FeatureStats, k: int, tau: float = 3.0, eps: float = EPS) -> list[int]:
    """Top-``k`` features by count difference, kept if their activation ratio is at least ``tau``.

    Ties in count difference go to the lower feature index; the result is in
    descending count-difference order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if tau <= 0:
        raise ValueError("tau must be positive")
    dphi = count_diff(stats)
    order = np.lexsort((np.arange(len(dphi)), -dphi))[:k]
    rho = activation_ratio(stats, eps)
    return [int(i) for i in order if rho[i] >= tau]


@dataclass
class SalientSet:
    layers: dict[int, list[int]]
    k: int
    tau: float = 3.0
    eps: float = EPS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = {int(l): [int(i) for i in v] for l, v in self.layers.items()}
        for l, feats in self.layers.items():
            if len(feats) > self.k:
                raise ValueError(f"layer {l} has {len(feats)} features, more than k={self.k}")

    def total(self) -> int:
        return sum(len(v) for v in self.layers.values())

    def to_json(self) -> str:
        d = {"k": self.k, "tau": self.tau, "eps": self.eps,
             "layers": {str(l): v for l, v in sorted(self.layers.items())}}
        if self.meta:
            d["meta"] = self.meta
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SalientSet":
        d = json.loads(text)
        return cls({int(l): v for l, v in d["layers"].items()}, d["k"], d["tau"], d["eps"], d.get("meta", {}))


def build_salient_set(stats: Mapping[int, FeatureStats], k: int, tau: float = 3.0, eps: float = EPS) -> SalientSet:
    return SalientSet({l: select_salient(s, k, tau, eps) for l, s in stats.items()}, k, tau, eps)


def classify_features(stats: FeatureStats, theta_hi: float = THETA_HI, theta_lo: float = THETA_LO) -> np.ndarray:
    """Label each feature target / benign / shared / inactive from per-corpus firing rates."""
    ft, fr = stats.freq_target(), stats.freq_retain()
    labels = np.full(stats.n_features, "inactive", dtype=object)
    labels[(ft >= theta_hi) & (fr <= theta_lo)] = "target"
    labels[(fr >= theta_hi) & (ft <= theta_lo)] = "benign"
    labels[(ft >= theta_hi) & (fr >= theta_hi)] = "shared"
    return labels


def top_benign(stats: FeatureStats, n: int = 10, **thresholds) -> list[int]:
    """The ``n`` benign-labelled features firing most often on the retain corpus."""
    labels = classify_features(stats, **thresholds)
    idx = np.flatnonzero(labels == "benign")
    order = np.lexsort((idx, -stats.count_retain[idx]))
    return [int(i) for i in idx[order][:n]]


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def _f(x: float) -> str:
    return format(float(x), ".17g")


def write_stats_csv(stats: Sequence[FeatureStats], path: str | Path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_COLUMNS)
        for s in stats:
            ft, fr = s.freq_target(), s.freq_retain()
            for i in range(s.n_features):
                w.writerow([s.layer, i, int(s.count_target[i]), int(s.count_retain[i]),
                            _f(s.mass_target[i]), _f(s.mass_retain[i]),
                            s.tokens_seen_target, s.tokens_seen_retain, _f(ft[i]), _f(fr[i])])


def read_stats_csv(path: str | Path) -> dict[int, FeatureStats]:
    rows: dict[int, list[dict]] = {}
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for r in csv.DictReader(lines):
        rows.setdefault(int(r["layer"]), []).append(r)
    out = {}
    for layer, rs in sorted(rows.items()):
        rs.sort(key=lambda r: int(r["feature"]))
        if [int(r["feature"]) for r in rs] != list(range(len(rs))):
            raise ValueError(f"{path}: layer {layer} feature indices are not 0..n-1")
        out[layer] = FeatureStats(
            layer,
            np.array([int(r["count_target"]) for r in rs], dtype=np.int64),
            np.array([int(r["count_retain"]) for r in rs], dtype=np.int64),
            np.array([float(r["mass_target"]) for r in rs]),
            np.array([float(r["mass_retain"]) for r in rs]),
            int(rs[0].get("tokens_seen_target") or 0),
            int(rs[0].get("tokens_seen_retain") or 0),
        )
    return out


SCATTER_COLUMNS = ("layer", "feature", "x_retain_freq", "y_target_freq", "log_ratio", "group")


def scatter_points(stats: FeatureStats, classification: Sequence[str], eps: float = EPS) -> list[dict]:
    x, y = stats.freq_retain(), stats.freq_target()
    log_ratio = np.log((stats.mass_target + eps) / (stats.mass_retain + eps))
    return [
        {"layer": stats.layer, "feature": i, "x": float(x[i]), "y": float(y[i]),
         "log_ratio": float(log_ratio[i]), "group": str(classification[i])}
        for i in range(stats.n_features)
    ]


def export_scatter(stats: FeatureStats, classification: Sequence[str], out: str | Path,
                   highlight: Sequence[int] = (), header_comment: str | None = None) -> tuple[Path, Path]:
    """Write ``<out>.csv`` and ``<out>.svg``: one point per feature, retain vs target frequency."""
    out = Path(out)
    csv_path, svg_path = out.with_suffix(".csv"), out.with_suffix(".svg")
    pts = scatter_points(stats, classification)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_COLUMNS)
        for p in pts:
            w.writerow([p["layer"], p["feature"], _f(p["x"]), _f(p["y"]), _f(p["log_ratio"]), p["group"]])
    hl = set(int(i) for i in highlight)
    fig = plots.Figure(title=f"layer {stats.layer} feature frequencies",
                       xlabel="retain activation frequency", ylabel="target activation frequency")
    if pts:
        lim = max(1e-3, max(max(p["x"], p["y"]) for p in pts)) * 1.05
        fig.set_limits((0.0, lim), (0.0, lim))
        fig.line([(0.0, 0.0), (lim, lim)], color="#999999", dash=True)
        span = max((abs(p["log_ratio"]) for p in pts if math.isfinite(p["log_ratio"])), default=1.0) or 1.0
        for p in pts:
            fig.point(p["x"], p["y"], color=plots.diverging(p["log_ratio"] / span),
                      ring="#d62728" if p["feature"] in hl else None,
                      title=f"f{p['feature']} {p['group']}")
    svg_path.write_text(fig.render(), encoding="utf-8")
    return csv_path, svg_path
