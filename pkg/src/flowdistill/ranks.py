"""Simulated data-parallel ranks.

Each logical rank owns one frozen base model and one dataset; the motion
module (and the discriminator) are shared objects. Per-rank gradient
contributions are computed independently, from per-rank seed streams, and
reduced by elementwise mean in a fixed ascending-rank order, so a
thread-parallel run is bit-identical to the sequential simulation. Base
parameters are excluded from reduction by construction: micro-steps never
emit gradients for them.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RankAssignment",
    "ReductionSpec",
    "build_assignment",
    "all_reduce_shared",
    "GradAccumulator",
    "accumulate_and_update",
    "run_ranks",
]

# Mirrors the 8-worker roster: two default-base workers on real data, two
# realistic-analog workers on the pooled realistic set, four anime-analog
# workers on the pooled anime set.
DEFAULT_RANK_TABLE = (
    {"rank": 0, "style": "default", "dataset": "real"},
    {"rank": 1, "style": "default", "dataset": "real"},
    {"rank": 2, "style": "real_a", "dataset": "gen_realistic"},
    {"rank": 3, "style": "real_b", "dataset": "gen_realistic"},
    {"rank": 4, "style": "anime_a", "dataset": "gen_anime"},
    {"rank": 5, "style": "anime_a", "dataset": "gen_anime"},
    {"rank": 6, "style": "anime_b", "dataset": "gen_anime"},
    {"rank": 7, "style": "anime_c", "dataset": "gen_anime"},
)


@dataclass(frozen=True)
class RankAssignment:
    rank: int
    style: str
    dataset: str


def build_assignment(rows=None, n_ranks: int | None = None,
                     known_styles=None, known_datasets=None) -> list:
    """Validated rank -> (base style, dataset) table.

    ``n_ranks`` replicates the row pattern cyclically (or truncates it), so
    a single-rank table degenerates to single-model distillation on the
    default base. Styles must be registered and not in the unseen group.
    """
    from .datagen import style_by_name

    rows = list(rows) if rows is not None else list(DEFAULT_RANK_TABLE)
    if n_ranks is not None:
        if n_ranks < 1:
            raise ValueError("need at least one rank")
        pattern = rows
        rows = [
            {"rank": i, "style": pattern[i % len(pattern)]["style"],
             "dataset": pattern[i % len(pattern)]["dataset"]}
            for i in range(n_ranks)
        ]
    seen = set()
    out = []
    for row in rows:
        ra = RankAssignment(int(row["rank"]), row["style"], row["dataset"])
        if ra.rank in seen:
            raise ValueError(f"duplicate rank id {ra.rank}")
        seen.add(ra.rank)
        style = style_by_name(ra.style)  # raises on unknown styles
        if style.group == "unseen":
            raise ValueError(f"unseen style {ra.style!r} cannot be trained on")
        if known_datasets is not None and ra.dataset not in known_datasets:
            raise ValueError(f"unknown dataset {ra.dataset!r}")
        out.append(ra)
    return sorted(out, key=lambda r: r.rank)


@dataclass(frozen=True)
class ReductionSpec:
    """Which parameter names are reduced, which are excluded, and the
    fixed rank order used for the deterministic mean."""

    reduce_set: tuple
    exclude_set: tuple
    order: tuple

    def __post_init__(self):
        overlap = set(self.reduce_set) & set(self.exclude_set)
        if overlap:
            raise ValueError(f"names both reduced and excluded: {sorted(overlap)}")


def all_reduce_shared(contributions: list, spec: ReductionSpec) -> dict:
    """Elementwise mean over per-rank gradient dicts in ``spec.order``.

    Every contribution must cover exactly ``spec.reduce_set``; excluded
    names must never appear.
    """
    if len(contributions) != len(spec.order):
        raise ValueError("one contribution per rank required")
    want = set(spec.reduce_set)
    for i, contrib in enumerate(contributions):
        got = set(contrib)
        if got & set(spec.exclude_set):
            bad = sorted(got & set(spec.exclude_set))
            raise ValueError(f"rank {spec.order[i]} emitted excluded gradients: {bad}")
        if got != want:
            missing = sorted(want - got)
            extra = sorted(got - want)
            raise ValueError(
                f"rank {spec.order[i]} gradient names mismatch "
                f"(missing={missing}, extra={extra})")
    by_rank = dict(zip(spec.order, contributions))
    order = sorted(spec.order)
    reduced = {}
    for name in spec.reduce_set:
        acc = np.array(by_rank[order[0]][name], dtype=np.float64, copy=True)
        for r in order[1:]:
            acc += by_rank[r][name]
        acc /= len(order)
        reduced[name] = acc
    return reduced


class GradAccumulator:
    """Collects a fixed number of reduced micro-gradients before an update."""

    def __init__(self, target: int):
        if target < 1:
            raise ValueError("need accumulation >= 1")
        self.target = target
        self._grads: list = []

    def add(self, grads: dict) -> None:
        if len(self._grads) >= self.target:
            raise RuntimeError("accumulator already full; update first")
        self._grads.append(grads)

    @property
    def ready(self) -> bool:
        return len(self._grads) == self.target

    def mean(self) -> dict:
        if not self.ready:
            raise RuntimeError(
                f"update attempted mid-accumulation "
                f"({len(self._grads)}/{self.target} micro-steps)")
        names = self._grads[0].keys()
        out = {}
        for name in names:
            acc = np.array(self._grads[0][name], dtype=np.float64, copy=True)
            for g in self._grads[1:]:
                acc += g[name]
            out[name] = acc / self.target
        return out

    def reset(self) -> None:
        self._grads = []


def accumulate_and_update(optimizer, params: dict, accumulator: GradAccumulator) -> None:
    """Apply one optimizer step from a full accumulator, then clear it."""
    optimizer.step(params, accumulator.mean())
    accumulator.reset()


def run_ranks(fn, ranks: list, mode: str = "sequential") -> list:
    """Evaluate ``fn(rank)`` for every rank; results in rank order.

    ``mode='threads'`` runs the ranks on a thread pool. Contributions are
    collected by rank index, so the result is independent of scheduling.
    """
    if mode == "sequential":
        return [fn(r) for r in ranks]
    if mode == "threads":
        with ThreadPoolExecutor(max_workers=len(ranks)) as pool:
            return list(pool.map(fn, ranks))
    raise ValueError(f"unknown worker mode {mode!r}")
