"""Label-preserving augmentation of transaction histories.

Two operations, each applied to the center account's history:

* ``time_delay`` shifts selected transactions later by a random delay.
* ``amount_split`` replaces selected transactions by two halves, the second
  one delayed.  Integer halves keep the total exact.

``make_views`` chains both operations twice with independent randomness and
turns each augmented history into a fused representation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .features import MinMaxStats, extract_attributes
from .structgae import FusedRepresentation, fuse
from .txdata import BehaviorLabel, EgoGraph, TransactionRecord


@dataclass(frozen=True)
class AugmentConfig:
    p: float = 0.5
    delta_t_max: float = 3600.0
    theta: float = 0.1
    single_delta: bool = False
    recompute_structure: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.delta_t_max <= 0:
            raise ValueError("delta_t_max must be positive")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")


@dataclass(frozen=True)
class SplitStats:
    split: int = 0
    unsplittable: int = 0


@dataclass(frozen=True)
class ViewPair:
    view1: FusedRepresentation
    view2: FusedRepresentation
    address: str
    label: BehaviorLabel | None = None


def _sorted(history) -> list[TransactionRecord]:
    return sorted(history, key=lambda r: r.sort_key)


def _delay(rng: np.random.Generator, delta_t_max: float) -> int:
    # u in (0, 1]; floor keeps t <= t + delta <= t + delta_t_max
    u = 1.0 - rng.random()
    return int(math.floor(u * delta_t_max))


def _shift(rec: TransactionRecord, dt: int) -> TransactionRecord:
    if dt == 0:
        return rec
    return TransactionRecord(rec.tx_id, rec.timestamp + dt, rec.sender, rec.receiver, rec.amount)


def time_delay(history: Sequence[TransactionRecord], config: AugmentConfig,
               rng: np.random.Generator) -> list[TransactionRecord]:
    """Delay each transaction with probability ``p`` by ``U(0, delta_t_max]`` seconds.

    With ``config.single_delta`` one coin flip and one delay apply to the
    whole history instead.
    """
    if not history:
        raise ValueError("history is empty")
    history = _sorted(history)
    if config.single_delta:
        if rng.random() < config.p:
            dt = _delay(rng, config.delta_t_max)
            history = [_shift(r, dt) for r in history]
        return _sorted(history)
    out = []
    for rec in history:
        if rng.random() < config.p:
            rec = _shift(rec, _delay(rng, config.delta_t_max))
        out.append(rec)
    return _sorted(out)


def split_amounts(history: Sequence[TransactionRecord], config: AugmentConfig,
                  rng: np.random.Generator) -> tuple[list[TransactionRecord], SplitStats]:
    if not history:
        raise ValueError("history is empty")
    history = _sorted(history)
    if rng.random() >= config.p:
        return history, SplitStats()
    k = min(len(history), math.ceil(config.theta * len(history)))
    chosen = set(rng.choice(len(history), size=k, replace=False).tolist())
    out: list[TransactionRecord] = []
    split = skipped = 0
    for i, rec in enumerate(history):
        if i not in chosen:
            out.append(rec)
            continue
        if rec.amount < 2:
            skipped += 1
            out.append(rec)
            continue
        half = rec.amount // 2
        t2 = rec.timestamp + _delay(rng, config.delta_t_max)
        out.append(TransactionRecord(f"{rec.tx_id}~s1", rec.timestamp, rec.sender,
                                     rec.receiver, rec.amount - half))
        out.append(TransactionRecord(f"{rec.tx_id}~s2", t2, rec.sender, rec.receiver, half))
        split += 1
    return _sorted(out), SplitStats(split, skipped)


def amount_split(history: Sequence[TransactionRecord], config: AugmentConfig,
                 rng: np.random.Generator) -> list[TransactionRecord]:
    """With probability ``p`` split ``ceil(theta * n)`` random transactions in two.

    Transactions below 2 base units cannot be split and are kept as they are;
    :func:`split_amounts` also reports how many were split or skipped.
    """
    return split_amounts(history, config, rng)[0]


def augment_history(history, config: AugmentConfig, rng) -> list[TransactionRecord]:
    return amount_split(time_delay(history, config, rng), config, rng)


def augment_graph(graph: EgoGraph, config: AugmentConfig, rng) -> EgoGraph:
    """Copy of ``graph`` with the center's history augmented."""
    new_hist = augment_history(graph.histories[graph.center], config, rng)
    return graph.with_center_history(new_hist)


def represent(graph: EgoGraph, z_row, stats: MinMaxStats) -> FusedRepresentation:
    x = stats.transform(extract_attributes(graph).values[None, :])[0]
    return fuse(x, z_row, graph.center)


def make_views(graph: EgoGraph, z_row, stats: MinMaxStats, config: AugmentConfig,
               rng: np.random.Generator, label: BehaviorLabel | None = None,
               structure_fn: Callable[[EgoGraph], np.ndarray] | None = None) -> ViewPair:
    """Two independently augmented representations of ``graph.center``.

    Each view is re-featurized with the training normalization ``stats`` and
    fused with the original structural embedding ``z_row``, unless
    ``config.recompute_structure`` is set, in which case ``structure_fn``
    supplies an embedding row for every augmented graph.
    """
    if config.recompute_structure and structure_fn is None:
        raise ValueError("recompute_structure requires a structure_fn")
    views = []
    for _ in range(2):
        g = augment_graph(graph, config, rng)
        z = structure_fn(g) if config.recompute_structure else z_row
        views.append(represent(g, z, stats))
    return ViewPair(views[0], views[1], graph.center, label)
