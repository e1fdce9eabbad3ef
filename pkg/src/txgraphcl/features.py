"""Hand-crafted account attributes and min-max normalization.

The registry is a fixed, versioned list of 43 features: 17 temporal,
19 amount and 7 count attributes, computed from an account's transaction
history inside an ego-graph.  Times are UTC seconds; a "day" is a UTC
calendar day.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .txdata import EgoGraph

REGISTRY_VERSION = "1"
DAY = 86400
HOUR = 3600


@dataclass(frozen=True)
class FeatureDef:
    name: str
    category: str
    unit: str
    description: str


def _f(name, category, unit, description):
    return FeatureDef(name, category, unit, description)


TEMPORAL = (
    _f("lifecycle_span", "temporal", "s", "last minus first transaction time"),
    _f("active_days", "temporal", "days", "distinct UTC days with a transaction"),
    _f("active_day_ratio", "temporal", "ratio", "active days / calendar days spanned"),
    _f("interval_mean", "temporal", "s", "mean gap between consecutive transactions"),
    _f("interval_std", "temporal", "s", "std of gaps between consecutive transactions"),
    _f("interval_min", "temporal", "s", "smallest gap"),
    _f("interval_max", "temporal", "s", "largest gap"),
    _f("in_interarrival_mean", "temporal", "s", "mean gap between incoming transactions"),
    _f("in_interarrival_std", "temporal", "s", "std of gaps between incoming transactions"),
    _f("out_interarrival_mean", "temporal", "s", "mean gap between outgoing transactions"),
    _f("out_interarrival_std", "temporal", "s", "std of gaps between outgoing transactions"),
    _f("hour_mean", "temporal", "h", "mean UTC hour-of-day"),
    _f("hour_std", "temporal", "h", "std of UTC hour-of-day"),
    _f("max_daily_tx", "temporal", "count", "most transactions in one day"),
    _f("mean_daily_tx", "temporal", "count", "transactions per active day"),
    _f("peak_day_offset", "temporal", "s", "first tx of the busiest day minus first tx"),
    _f("burstiness", "temporal", "ratio", "(std-mean)/(std+mean) of gaps"),
)

AMOUNT = (
    _f("total_in", "amount", "base", "sum of incoming amounts"),
    _f("total_out", "amount", "base", "sum of outgoing amounts"),
    _f("net_out", "amount", "base", "total_out - total_in"),
    _f("in_mean", "amount", "base", "mean incoming amount"),
    _f("in_std", "amount", "base", "std of incoming amounts"),
    _f("in_min", "amount", "base", "smallest incoming amount"),
    _f("in_max", "amount", "base", "largest incoming amount"),
    _f("out_mean", "amount", "base", "mean outgoing amount"),
    _f("out_std", "amount", "base", "std of outgoing amounts"),
    _f("out_min", "amount", "base", "smallest outgoing amount"),
    _f("out_max", "amount", "base", "largest outgoing amount"),
    _f("in_range", "amount", "base", "largest minus smallest incoming amount"),
    _f("out_range", "amount", "base", "largest minus smallest outgoing amount"),
    _f("in_median", "amount", "base", "median incoming amount"),
    _f("out_median", "amount", "base", "median outgoing amount"),
    _f("out_in_ratio", "amount", "ratio", "total_out / total_in (0 when nothing came in)"),
    _f("largest_share", "amount", "ratio", "largest single amount / total volume"),
    _f("mean_amount", "amount", "base", "volume / transaction count"),
    _f("below_median_fraction", "amount", "ratio", "share of transactions below the median amount"),
)

COUNT = (
    _f("in_degree", "count", "count", "incoming transaction count"),
    _f("out_degree", "count", "count", "outgoing transaction count"),
    _f("degree_diff", "count", "count", "out_degree - in_degree"),
    _f("unique_in", "count", "count", "distinct senders"),
    _f("unique_out", "count", "count", "distinct receivers"),
    _f("tx_count", "count", "count", "transactions touching the account"),
    _f("neighbor_tx_mean", "count", "count", "mean transaction count of direct counterparties"),
)

REGISTRY: tuple[FeatureDef, ...] = TEMPORAL + AMOUNT + COUNT
FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in REGISTRY)
N_FEATURES = len(REGISTRY)

# amount features that scale linearly with the currency unit
PURE_AMOUNT = tuple(f.name for f in AMOUNT if f.unit == "base")
RATIO_AMOUNT = tuple(f.name for f in AMOUNT if f.unit == "ratio")


@dataclass(frozen=True)
class AttributeVector:
    address: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("attribute vector has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __getitem__(self, name: str) -> float:
        return float(self.values[FEATURE_NAMES.index(name)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values.tolist()))


def _gap_stats(times: np.ndarray) -> tuple[float, float, float, float]:
    if len(times) < 2:
        return 0.0, 0.0, 0.0, 0.0
    d = np.diff(times)
    return float(d.mean()), float(d.std()), float(d.min()), float(d.max())


def _amount_stats(a: np.ndarray) -> tuple[float, float, float, float]:
    if len(a) == 0:
        return 0.0, 0.0, 0.0, 0.0
    return float(a.mean()), float(a.std()), float(a.min()), float(a.max())


def extract_attributes(graph: EgoGraph, center: str | None = None) -> AttributeVector:
    """Compute the 43 registry attributes of ``center`` (default: graph center)."""
    center = graph.center if center is None else center
    history = graph.histories.get(center, ())
    if not history:
        raise ValueError(f"address {center!r} has no transactions in the graph")
    history = sorted(history, key=lambda r: r.sort_key)

    times = np.array([r.timestamp for r in history], dtype=np.float64)
    t_in = np.array([r.timestamp for r in history if r.receiver == center], dtype=np.float64)
    t_out = np.array([r.timestamp for r in history if r.sender == center], dtype=np.float64)
    a_in = np.array([r.amount for r in history if r.receiver == center], dtype=np.float64)
    a_out = np.array([r.amount for r in history if r.sender == center], dtype=np.float64)
    amounts = np.array([r.amount for r in history], dtype=np.float64)
    n = len(history)

    # temporal
    ts_int = np.array([r.timestamp for r in history], dtype=np.int64)
    days = ts_int // DAY
    span = float(times[-1] - times[0])
    uniq_days, day_counts = np.unique(days, return_counts=True)
    active_days = len(uniq_days)
    calendar_days = int(days[-1] - days[0]) + 1
    iv_mean, iv_std, iv_min, iv_max = _gap_stats(times)
    in_mean_gap, in_std_gap, _, _ = _gap_stats(t_in)
    out_mean_gap, out_std_gap, _, _ = _gap_stats(t_out)
    hours = ((ts_int % DAY) // HOUR).astype(np.float64)
    peak_day = uniq_days[int(np.argmax(day_counts))]
    peak_offset = float(times[np.argmax(days == peak_day)] - times[0])
    denom = iv_std + iv_mean
    burst = (iv_std - iv_mean) / denom if n >= 2 and denom > 0 else 0.0
    temporal = [
        span, active_days, active_days / calendar_days,
        iv_mean, iv_std, iv_min, iv_max,
        in_mean_gap, in_std_gap, out_mean_gap, out_std_gap,
        float(hours.mean()), float(hours.std()),
        float(day_counts.max()), n / active_days, peak_offset, burst,
    ]

    # amount
    total_in, total_out = float(a_in.sum()), float(a_out.sum())
    in_mean, in_std, in_min, in_max = _amount_stats(a_in)
    out_mean, out_std, out_min, out_max = _amount_stats(a_out)
    volume = total_in + total_out
    median_all = float(np.median(amounts))
    amount = [
        total_in, total_out, total_out - total_in,
        in_mean, in_std, in_min, in_max,
        out_mean, out_std, out_min, out_max,
        in_max - in_min, out_max - out_min,
        float(np.median(a_in)) if len(a_in) else 0.0,
        float(np.median(a_out)) if len(a_out) else 0.0,
        total_out / total_in if total_in > 0 else 0.0,
        float(amounts.max()) / volume if volume > 0 else 0.0,
        volume / n,
        float(np.mean(amounts < median_all)),
    ]

    # counts
    senders = {r.sender for r in history if r.receiver == center}
    receivers = {r.receiver for r in history if r.sender == center}
    counterparties = sorted((senders | receivers) - {center})
    nb_counts = [len(graph.histories.get(a, ())) for a in counterparties]
    count = [
        len(a_in), len(a_out), len(a_out) - len(a_in),
        len(senders), len(receivers), n,
        float(np.mean(nb_counts)) if nb_counts else 0.0,
    ]
    return AttributeVector(center, np.array(temporal + amount + count, dtype=np.float64))


def attribute_matrix(graphs: Sequence[EgoGraph]) -> np.ndarray:
    return np.stack([extract_attributes(g).values for g in graphs]) if graphs else \
        np.zeros((0, N_FEATURES))


@dataclass(frozen=True)
class MinMaxStats:
    """Per-column extrema fitted on training rows."""

    min: np.ndarray
    max: np.ndarray

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        m = np.asarray(matrix, dtype=np.float64)
        if not np.all(np.isfinite(m)):
            raise ValueError("cannot normalize non-finite values")
        rng = self.max - self.min
        safe = np.where(rng > 0, rng, 1.0)
        out = (m - self.min) / safe
        return np.where(rng > 0, out, 0.0)

    def out_of_range(self, matrix: np.ndarray) -> int:
        """Number of entries that fall outside the fitted [min, max]."""
        m = np.asarray(matrix, dtype=np.float64)
        return int(np.sum((m < self.min) | (m > self.max)))

    def to_json(self) -> dict:
        return {"version": REGISTRY_VERSION, "columns": list(FEATURE_NAMES)
                if len(self.min) == N_FEATURES else None,
                "min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "MinMaxStats":
        return cls(np.array(obj["min"], dtype=np.float64), np.array(obj["max"], dtype=np.float64))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "MinMaxStats":
        return cls.from_json(json.loads(Path(path).read_text()))


def normalize_minmax(matrix: np.ndarray) -> tuple[np.ndarray, MinMaxStats]:
    """Scale each column to [0, 1]; constant columns become 0."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError("need a 2-D matrix with at least one row")
    if not np.all(np.isfinite(m)):
        raise ValueError("cannot normalize non-finite values")
    stats = MinMaxStats(m.min(axis=0), m.max(axis=0))
    return stats.transform(m), stats


def write_feature_table(path: str | Path, addresses: Sequence[str], matrix: np.ndarray,
                        names: Sequence[str] = FEATURE_NAMES) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", *names])
        for a, row in zip(addresses, matrix):
            w.writerow([a, *(repr(float(v)) for v in row)])


def read_feature_table(path: str | Path) -> tuple[list[str], np.ndarray, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        addrs, rows = [], []
        for row in r:
            addrs.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return addrs, np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1), header[1:]
