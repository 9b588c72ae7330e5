"""Seeded hyperparameter sweeps, per-bucket frontier extraction and frontier export."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from crisp import plots
from crisp._seeding import derive_rng

METHODS = ("crisp", "rmu")
METRICS = ("u", "r", "m", "f", "c", "overall")

# toy-scale search spaces; each entry is a choice list, a fixed value, or a
# {"uniform" | "log_uniform" | "int": [lo, hi]} range
DEFAULT_SPACES = {
    "crisp": {
        "k": [5, 10, 20, 30, 50],
        "lambda_mean": [10, 20, 30, 40, 50],
        "learning_rate": {"log_uniform": [1e-3, 3e-2]},
        "lora_rank": [4, 8, 16],
    },
    "rmu": {
        "steer_coeff": [5, 10, 20, 40],
        "alpha_rmu": [10, 100, 1000],
        "learning_rate": {"log_uniform": [1e-4, 1e-2]},
        "layer": [1, 2],
    },
}


@dataclass
class SweepPoint:
    method: str
    digest: str
    config: dict
    seed: int
    index: int
    u: float = math.nan
    r: float = math.nan
    m: float = math.nan
    f: float = math.nan
    c: float = math.nan
    overall: float = math.nan
    details: dict = field(default_factory=dict)
    error: str | None = None
    wall_time: float = field(default=0.0, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self, wall_time: bool = False) -> dict:
        d = asdict(self)
        if not wall_time:
            d.pop("wall_time")
        for k in METRICS:
            if isinstance(d[k], float) and math.isnan(d[k]):
                d[k] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepPoint":
        d = dict(d)
        for k in METRICS:
            if d.get(k) is None:
                d[k] = math.nan
        return cls(**d)


def config_digest(method: str, config: Mapping) -> str:
    blob = json.dumps({"method": method, "config": config}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _sample(spec, rng: np.random.Generator):
    if isinstance(spec, list):
        if not spec:
            raise ValueError("empty choice list")
        v = spec[int(rng.integers(len(spec)))]
        return v.item() if isinstance(v, np.generic) else v
    if isinstance(spec, dict):
        (kind, (lo, hi)), = spec.items()
        if lo > hi:
            raise ValueError(f"range {lo, hi} is empty")
        if kind == "uniform":
            return float(rng.uniform(lo, hi))
        if kind == "log_uniform":
            return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        if kind == "int":
            return int(rng.integers(lo, hi + 1))
        raise ValueError(f"unknown range kind {kind!r}")
    return spec


def sample_configs(space: Mapping, n: int, seed: int, method: str) -> list[dict]:
    """``n`` configs drawn uniformly from ``space``, keys sampled in sorted order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not space:
        raise ValueError("search space is empty")
    rng = derive_rng(seed, f"sweep/{method}")
    return [{k: _sample(space[k], rng) for k in sorted(space)} for _ in range(n)]


def _run_one(runner, method: str, config: dict, seed: int, index: int) -> SweepPoint:
    point = SweepPoint(method, config_digest(method, config), config, seed, index)
    t0 = time.perf_counter()
    try:
        metrics = runner(config, seed)
        for k in METRICS:
            setattr(point, k, float(metrics[k]))
        point.details = {k: v for k, v in metrics.items() if k not in METRICS}
    except Exception as e:  # recorded in the point, not raised
        point.error = f"{type(e).__name__}: {e}"
        point.details = {"traceback": traceback.format_exc(limit=3)}
    point.wall_time = time.perf_counter() - t0
    return point


def run_sweep(space: Mapping, n: int, seed: int, runner: Callable[[dict, int], Mapping],
              method: str = "crisp", jobs: int = 1) -> list[SweepPoint]:
    """Sample, train and evaluate ``n`` configurations.

    ``runner(config, seed)`` returns a metrics mapping with ``u r m f c overall``.
    With ``jobs > 1`` runs go to a process pool, so ``runner`` must pickle.
    The output is sorted by digest (then sample index), independent of ``jobs``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    configs = sample_configs(space, n, seed, method)
    if jobs <= 1:
        points = [_run_one(runner, method, c, seed, i) for i, c in enumerate(configs)]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init) as pool:
            futs = [pool.submit(_run_one, runner, method, c, seed, i) for i, c in enumerate(configs)]
            points = [f.result() for f in futs]
    return sorted(points, key=lambda p: (p.digest, p.index))


def _worker_init():
    import torch
    torch.set_num_threads(1)


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("CRISP_JOBS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# frontier
# --------------------------------------------------------------------------


def pareto_envelope(points: Sequence[SweepPoint], bucket_width: float = 2.0) -> list[SweepPoint]:
    """Best-retain point of every non-empty unlearn-accuracy bucket, by ascending U.

    Buckets are ``[i*w, (i+1)*w)``; within a bucket the point with the largest
    R wins, ties going to lower U and then to the lower digest.  Failed points
    are ignored.
    """
    if bucket_width <= 0:
        raise ValueError("bucket_width must be positive")
    best: dict[int, SweepPoint] = {}
    for p in points:
        if not p.ok:
            continue
        b = math.floor(p.u / bucket_width)
        cur = best.get(b)
        if cur is None or (-p.r, p.u, p.digest) < (-cur.r, cur.u, cur.digest):
            best[b] = p
    return [best[b] for b in sorted(best)]


def ideal_point(chance: float, r_orig: float) -> tuple[float, float]:
    """Chance-level unlearn accuracy with untouched retain accuracy."""
    return float(chance), float(r_orig)


def best_by_selection(points: Sequence[SweepPoint], orig: Mapping[str, float], mode: str = "ratio",
                      general_key: str = "m_select") -> SweepPoint | None:
    """Point maximising the selection score; general accuracy read from
    ``details[general_key]`` when present (a probe-subset accuracy), else ``m``."""
    from crisp.evaluate import selection_score

    scored = []
    for p in points:
        if not p.ok:
            continue
        edit = {"unlearn": p.u, "retain": p.r, "general": p.details.get(general_key, p.m)}
        o = {"unlearn": orig["unlearn"], "retain": orig["retain"], "general": orig.get(general_key, orig["general"])}
        scored.append((-selection_score(o, edit, mode), p.digest, p.index, p))
    return min(scored, key=lambda t: t[:3])[3] if scored else None


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def _f(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else format(float(x), ".10g")


def write_points(points: Sequence[SweepPoint], path: str | Path, meta: dict | None = None) -> None:
    d = {"meta": meta or {}, "points": [p.to_dict() for p in points]}
    Path(path).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_points(path: str | Path) -> list[SweepPoint]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return [SweepPoint.from_dict(p) for p in d["points"]]


def write_frontier_csv(frontier: Sequence[SweepPoint], path: str | Path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "digest", "u", "r", "m", "f", "c", "overall"))
        for p in frontier:
            w.writerow([p.method, p.digest] + [_f(getattr(p, k)) for k in METRICS])


COLORS = {"crisp": "#1f77b4", "rmu": "#ff7f0e"}


def frontier_svg(points: Mapping[str, Sequence[SweepPoint]], frontiers: Mapping[str, Sequence[SweepPoint]],
                 ideal: tuple[float, float] | None = None) -> str:
    """Scatter of every sweep point per method, its envelope and the ideal star."""
    fig = plots.Figure(title="unlearn / retain trade-off", xlabel="unlearn accuracy (%)",
                       ylabel="retain accuracy (%)")
    fig.set_limits((0.0, 100.0), (0.0, 100.0))
    for method in sorted(points):
        color = COLORS.get(method, "#2ca02c")
        for p in points[method]:
            if p.ok:
                fig.point(p.u, p.r, color=color, r=2.5, title=f"{method} {p.digest}")
        fig.line([(p.u, p.r) for p in frontiers.get(method, ())], color=color)
    if ideal is not None:
        fig.star(*ideal)
    fig.legend([(m, COLORS.get(m, "#2ca02c")) for m in sorted(points)])
    return fig.render()
