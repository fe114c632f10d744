"""Budgeted module selection and the static/dynamic search schedules."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .adapters import ModuleId, set_enabled
from .saliency import SaliencyScore, compute_scores

MODES = ("combined", "separated")


class ScheduleError(ValueError):
    pass


def budget_k(fraction: float, pool_size: int) -> int:
    """round-half-up(fraction * pool_size), at least 1."""
    if not 0 < fraction <= 1:
        raise ValueError(f"budget fraction must lie in (0, 1], got {fraction}")
    return max(1, math.floor(fraction * pool_size + 0.5))


@dataclass(frozen=True)
class AllocationPlan:
    enabled: tuple[ModuleId, ...]
    budget_fraction: float
    mode: str
    search_index: int = 0
    pool_sizes: tuple[int, ...] = ()

    def __contains__(self, mid: ModuleId) -> bool:
        return mid in self.enabled

    def __len__(self) -> int:
        return len(self.enabled)

    def summary(self) -> dict:
        return {"search": self.search_index, "mode": self.mode, "fraction": self.budget_fraction,
                "enabled": [str(m) for m in self.enabled]}


def _value(s) -> float:
    return s.value if isinstance(s, SaliencyScore) else float(s)


def _top_k(ids: list[ModuleId], values: Mapping[ModuleId, float], k: int, rng: np.random.Generator) -> list[ModuleId]:
    # shuffle first so the stable sort breaks ties uniformly at random
    order = [ids[i] for i in rng.permutation(len(ids))]
    order.sort(key=lambda m: -values[m])
    return order[:k]


def select(scores: Mapping, budget_fraction: float, mode: str = "combined",
           rng: np.random.Generator | None = None, search_index: int = 0) -> AllocationPlan:
    """Enable the top ``budget_fraction`` of modules by score.

    ``combined`` ranks LoRA and shortcut modules in one pool; ``separated``
    applies the fraction to each pool independently.
    """
    if not scores:
        raise ValueError("select: no scores to rank")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    values = {m: _value(s) for m, s in scores.items()}
    if not all(np.isfinite(v) for v in values.values()):
        raise ValueError("select: scores must be finite")
    ids = sorted(values)
    if mode == "combined":
        pools = [ids]
    else:
        pools = [p for p in ([m for m in ids if not m.is_shortcut], [m for m in ids if m.is_shortcut]) if p]
    chosen: list[ModuleId] = []
    for pool in pools:
        chosen += _top_k(pool, values, budget_k(budget_fraction, len(pool)), rng)
    return AllocationPlan(tuple(sorted(chosen)), budget_fraction, mode, search_index, tuple(len(p) for p in pools))


@dataclass
class FrequencyMatrix:
    counts: dict[ModuleId, int] = field(default_factory=dict)
    total_searches: int = 0

    @classmethod
    def for_registry(cls, registry) -> FrequencyMatrix:
        return cls({m: 0 for m in sorted(registry)}, 0)

    def record(self, plan: AllocationPlan) -> None:
        for m in plan.enabled:
            self.counts[m] = self.counts.get(m, 0) + 1
        self.total_searches += 1

    def to_dict(self) -> dict:
        return {"total_searches": self.total_searches,
                "counts": {str(m): c for m, c in sorted(self.counts.items())}}

    @classmethod
    def from_dict(cls, d: Mapping) -> FrequencyMatrix:
        counts = {ModuleId.parse(k): int(v) for k, v in d["counts"].items()}
        return cls(dict(sorted(counts.items())), int(d["total_searches"]))


def frequency_report(matrix: FrequencyMatrix, registry=None) -> list[tuple[int, str, int, float]]:
    """Rows ``(layer, site, count, frequency)`` in module order."""
    if matrix.total_searches == 0:
        raise ValueError("frequency_report: no searches recorded")
    ids = sorted(set(matrix.counts) | set(registry or ()))
    return [(m.layer, m.site, matrix.counts.get(m, 0), matrix.counts.get(m, 0) / matrix.total_searches)
            for m in ids]


def frequency_csv(matrix: FrequencyMatrix, registry=None) -> str:
    lines = ["layer,site,count,frequency"]
    lines += [f"{layer},{site},{count},{freq:.6f}" for layer, site, count, freq in frequency_report(matrix, registry)]
    return "\n".join(lines) + "\n"


class Allocator:
    """Scores modules with a proxy, selects a plan and applies it to the model.

    ``data`` is an iterator of training batches; each search consumes the
    next ``batch_budget`` of them so repeated searches see fresh data.
    """

    def __init__(self, proxy: str = "gradnorm", fraction: float = 0.25, mode: str = "combined",
                 basis: str = "decomposed", batch_budget: int = 32, data: Iterator | None = None,
                 rng: np.random.Generator | None = None):
        budget_k(fraction, 1)
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if batch_budget < 1:
            raise ValueError("batch_budget must be >= 1")
        self.proxy, self.fraction, self.mode, self.basis = proxy, fraction, mode, basis
        self.batch_budget = batch_budget
        self.data = data
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.frequency: FrequencyMatrix | None = None
        self.plans: list[AllocationPlan] = []
        self.last_scores: dict = {}

    def _draw(self) -> list | None:
        if self.proxy in ("constant", "synflow"):
            return None
        if self.data is None:
            raise ValueError(f"proxy {self.proxy!r} needs training batches")
        batches = list(itertools.islice(self.data, self.batch_budget))
        if not batches:
            raise ValueError("training batch stream is exhausted")
        return batches

    def search(self, model) -> AllocationPlan:
        if self.frequency is None:
            self.frequency = FrequencyMatrix.for_registry(model.adapters)
        self.last_scores = compute_scores(model, self.proxy, self._draw(), self.basis)
        plan = select(self.last_scores, self.fraction, self.mode, self.rng, len(self.plans))
        set_enabled(model.adapters, plan)
        self.frequency.record(plan)
        self.plans.append(plan)
        return plan


def search_steps(steps_per_epoch: int, searches_per_epoch: int) -> list[int]:
    """In-epoch step indices before which a dynamic search runs."""
    if searches_per_epoch < 1:
        raise ScheduleError("searches_per_epoch must be >= 1")
    if searches_per_epoch > steps_per_epoch:
        raise ScheduleError(f"{searches_per_epoch} searches per epoch exceed {steps_per_epoch} steps per epoch")
    return [e * steps_per_epoch // searches_per_epoch for e in range(searches_per_epoch)]


class StaticSchedule:
    """Search once before the first optimizer step and keep the plan."""

    def __init__(self, allocator: Allocator):
        self.allocator = allocator

    def __call__(self, model, epoch: int, step: int, steps_per_epoch: int) -> AllocationPlan | None:
        if epoch == 0 and step == 0:
            return self.allocator.search(model)
        return None


class DynamicSchedule:
    """Re-search ``searches_per_epoch`` times per epoch at evenly spaced step boundaries."""

    def __init__(self, allocator: Allocator, searches_per_epoch: int = 5):
        if searches_per_epoch < 1:
            raise ScheduleError("searches_per_epoch must be >= 1")
        self.allocator = allocator
        self.searches_per_epoch = searches_per_epoch
        self._steps: tuple[int, frozenset] | None = None

    def __call__(self, model, epoch: int, step: int, steps_per_epoch: int) -> AllocationPlan | None:
        if self._steps is None or self._steps[0] != steps_per_epoch:
            self._steps = (steps_per_epoch, frozenset(search_steps(steps_per_epoch, self.searches_per_epoch)))
        if step in self._steps[1]:
            return self.allocator.search(model)
        return None


def static_schedule(model, proxy: str, data, fraction: float, **kw) -> AllocationPlan:
    """One scoring pass, one selection, applied immediately."""
    alloc = Allocator(proxy, fraction, data=iter(data) if data is not None else None, **kw)
    return alloc.search(model)
