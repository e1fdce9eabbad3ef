"""Transaction records, labels, datasets and ego-graph construction.

Transactions travel as JSON lines with exactly the keys ``tx_id``,
``timestamp``, ``sender``, ``receiver`` and ``amount``.  Labels travel as a
two-column CSV with header ``address,label``.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

TX_FIELDS = ("tx_id", "timestamp", "sender", "receiver", "amount")


class BehaviorLabel(str, enum.Enum):
    PersonalWallet = "PersonalWallet"
    MiningPool = "MiningPool"
    NetworkService = "NetworkService"
    DigitalFinancialService = "DigitalFinancialService"
    Phishing = "Phishing"
    Gambling = "Gambling"
    PonziScheme = "PonziScheme"
    MoneyLaundering = "MoneyLaundering"
    CriminalBlacklist = "CriminalBlacklist"
    DarknetTransaction = "DarknetTransaction"

    @property
    def is_malicious(self) -> bool:
        return self in MALICIOUS_LABELS

    @property
    def rollup(self) -> str:
        """Binary group name, ``"Malicious"`` or ``"Normal"``."""
        return "Malicious" if self.is_malicious else "Normal"

    @property
    def index(self) -> int:
        return LABEL_ORDER.index(self)


LABEL_ORDER: tuple[BehaviorLabel, ...] = tuple(BehaviorLabel)
MALICIOUS_LABELS = frozenset({
    BehaviorLabel.Phishing,
    BehaviorLabel.Gambling,
    BehaviorLabel.PonziScheme,
    BehaviorLabel.MoneyLaundering,
    BehaviorLabel.CriminalBlacklist,
    BehaviorLabel.DarknetTransaction,
})
NORMAL_LABELS = frozenset(set(BehaviorLabel) - MALICIOUS_LABELS)
# binary class indices: Normal=0, Malicious=1
BINARY_CLASSES = ("Normal", "Malicious")


class TransactionFormatError(ValueError):
    """A transaction line failed validation."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class LabelFormatError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TransactionRecord:
    tx_id: str
    timestamp: int
    sender: str
    receiver: str
    amount: int

    def __post_init__(self):
        problem = _record_problem(self)
        if problem:
            raise ValueError(problem)
        # numpy integers would not survive json.dumps
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "amount", int(self.amount))

    def to_json(self) -> str:
        return json.dumps(
            {k: getattr(self, k) for k in TX_FIELDS}, ensure_ascii=False
        )

    @property
    def sort_key(self) -> tuple[int, str]:
        return (self.timestamp, self.tx_id)


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _record_problem(rec) -> str | None:
    if not isinstance(rec.tx_id, str) or rec.tx_id == "":
        return "tx_id must be a non-empty string"
    if not _is_int(rec.timestamp):
        return f"timestamp must be an integer, got {rec.timestamp!r}"
    if rec.timestamp < 0:
        return f"timestamp must be non-negative, got {rec.timestamp}"
    for key in ("sender", "receiver"):
        v = getattr(rec, key)
        if not isinstance(v, str) or v == "":
            return f"{key} must be a non-empty string"
    if not _is_int(rec.amount):
        return f"amount must be an integer, got {rec.amount!r}"
    if rec.amount < 0:
        return f"amount must be non-negative, got {rec.amount}"
    return None


def _parse_line(text: str, line_no: int) -> TransactionRecord:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TransactionFormatError(line_no, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise TransactionFormatError(line_no, "record must be a JSON object")
    missing = [k for k in TX_FIELDS if k not in obj]
    if missing:
        raise TransactionFormatError(line_no, f"missing field(s): {', '.join(missing)}")
    extra = sorted(set(obj) - set(TX_FIELDS))
    if extra:
        raise TransactionFormatError(line_no, f"unexpected field(s): {', '.join(extra)}")
    try:
        return TransactionRecord(**{k: obj[k] for k in TX_FIELDS})
    except ValueError as exc:
        raise TransactionFormatError(line_no, str(exc)) from None


@dataclass
class LoadResult:
    """Records accepted from a transaction file plus the lines that were skipped."""

    records: list[TransactionRecord]
    skipped: list[TransactionFormatError] = field(default_factory=list)

    def summary(self) -> str:
        return f"{len(self.records)} records loaded, {len(self.skipped)} lines skipped"


def load_transactions(path: str | Path, strict: bool = True) -> LoadResult:
    """Read a JSON-lines transaction file.

    In strict mode the first malformed line raises
    :class:`TransactionFormatError`; otherwise bad lines are collected in
    ``LoadResult.skipped`` and a summary is logged.  Blank lines are ignored.
    """
    records: list[TransactionRecord] = []
    skipped: list[TransactionFormatError] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text:
                continue
            try:
                rec = _parse_line(text, line_no)
                if rec.tx_id in seen:
                    raise TransactionFormatError(line_no, f"duplicate tx_id {rec.tx_id!r}")
            except TransactionFormatError as err:
                if strict:
                    raise
                skipped.append(err)
                continue
            seen.add(rec.tx_id)
            records.append(rec)
    result = LoadResult(records, skipped)
    if skipped:
        log.warning("%s: %s", path, result.summary())
    return result


def write_transactions(path: str | Path, records: Iterable[TransactionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def load_labels(path: str | Path) -> dict[str, BehaviorLabel]:
    labels: dict[str, BehaviorLabel] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return labels
        if [h.strip() for h in header] != ["address", "label"]:
            raise LabelFormatError(f"expected header 'address,label', got {','.join(header)!r}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise LabelFormatError(f"row {row_no}: expected 2 columns, got {len(row)}")
            address, name = row[0].strip(), row[1].strip()
            if not address:
                raise LabelFormatError(f"row {row_no}: empty address")
            try:
                label = BehaviorLabel(name)
            except ValueError:
                raise LabelFormatError(f"row {row_no}: unknown label {name!r}") from None
            prev = labels.get(address)
            if prev is not None and prev is not label:
                raise LabelFormatError(
                    f"address {address!r} has conflicting labels {prev.value} and {label.value}"
                )
            labels[address] = label
    return labels


def write_labels(path: str | Path, labels: Mapping[str, BehaviorLabel]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["address", "label"])
        for address in sorted(labels):
            writer.writerow([address, BehaviorLabel(labels[address]).value])


@dataclass(frozen=True)
class Dataset:
    """An immutable set of transactions with labels for some addresses."""

    transactions: tuple[TransactionRecord, ...]
    labels: Mapping[str, BehaviorLabel]
    platform: str = "btc"

    def __post_init__(self):
        object.__setattr__(self, "transactions", tuple(self.transactions))
        object.__setattr__(
            self, "labels",
            MappingProxyType({a: BehaviorLabel(l) for a, l in self.labels.items()}),
        )
        ids = set()
        for rec in self.transactions:
            if rec.tx_id in ids:
                raise ValueError(f"duplicate tx_id {rec.tx_id!r}")
            ids.add(rec.tx_id)
        known = self.addresses
        unseen = sorted(a for a in self.labels if a not in known)
        if unseen:
            raise ValueError(f"labeled address(es) without transactions: {unseen[:5]}")

    @classmethod
    def from_files(cls, transactions: str | Path, labels: str | Path | None = None,
                   platform: str = "btc", strict: bool = True) -> "Dataset":
        recs = load_transactions(transactions, strict=strict).records
        labs = load_labels(labels) if labels else {}
        return cls(tuple(recs), labs, platform)

    def write(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_transactions(d / "transactions.jsonl", self.transactions)
        write_labels(d / "labels.csv", self.labels)

    @cached_property
    def addresses(self) -> frozenset[str]:
        out = set()
        for rec in self.transactions:
            out.add(rec.sender)
            out.add(rec.receiver)
        return frozenset(out)

    @cached_property
    def _by_address(self) -> Mapping[str, tuple[int, ...]]:
        idx: dict[str, list[int]] = defaultdict(list)
        for i, rec in enumerate(self.transactions):
            idx[rec.sender].append(i)
            if rec.receiver != rec.sender:
                idx[rec.receiver].append(i)
        return {a: tuple(v) for a, v in idx.items()}

    @cached_property
    def _neighbors(self) -> Mapping[str, frozenset[str]]:
        nb: dict[str, set[str]] = defaultdict(set)
        for rec in self.transactions:
            nb[rec.sender].add(rec.receiver)
            nb[rec.receiver].add(rec.sender)
        return {a: frozenset(v) for a, v in nb.items()}

    def history(self, address: str) -> list[TransactionRecord]:
        """All transactions touching ``address``, time sorted."""
        recs = [self.transactions[i] for i in self._by_address.get(address, ())]
        return sorted(recs, key=lambda r: r.sort_key)

    def neighbors(self, address: str) -> frozenset[str]:
        return self._neighbors.get(address, frozenset())

    def labeled_addresses(self) -> list[str]:
        return sorted(self.labels)

    def subset_labels(self, addresses: Iterable[str]) -> "Dataset":
        keep = set(addresses)
        return Dataset(self.transactions, {a: l for a, l in self.labels.items() if a in keep},
                       self.platform)


@dataclass(frozen=True)
class EgoGraph:
    """Neighborhood of ``center`` within ``hop_limit`` undirected steps.

    ``edges`` maps directed ``(sender, receiver)`` pairs to their
    transaction count.  Histories only keep transactions whose endpoints are
    both inside the graph.
    """

    center: str
    nodes: tuple[str, ...]
    edges: Mapping[tuple[str, str], int]
    histories: Mapping[str, tuple[TransactionRecord, ...]]
    hop_limit: int = 1

    @cached_property
    def index(self) -> Mapping[str, int]:
        return {a: i for i, a in enumerate(self.nodes)}

    @property
    def transactions(self) -> list[TransactionRecord]:
        seen = {}
        for hist in self.histories.values():
            for rec in hist:
                seen[rec.tx_id] = rec
        return sorted(seen.values(), key=lambda r: r.sort_key)

    @classmethod
    def from_transactions(cls, center: str, nodes: Sequence[str],
                          transactions: Iterable[TransactionRecord],
                          hop_limit: int = 1) -> "EgoGraph":
        """Assemble a graph from an explicit node list and transaction set."""
        node_set = set(nodes)
        edges: dict[tuple[str, str], int] = defaultdict(int)
        hist: dict[str, list[TransactionRecord]] = {a: [] for a in nodes}
        for rec in transactions:
            if rec.sender not in node_set or rec.receiver not in node_set:
                continue
            edges[(rec.sender, rec.receiver)] += 1
            hist[rec.sender].append(rec)
            if rec.receiver != rec.sender:
                hist[rec.receiver].append(rec)
        histories = {a: tuple(sorted(v, key=lambda r: r.sort_key)) for a, v in hist.items()}
        ordered_edges = dict(sorted(edges.items()))
        return cls(center, tuple(nodes), MappingProxyType(ordered_edges),
                   MappingProxyType(histories), hop_limit)

    def with_center_history(self, history: Iterable[TransactionRecord]) -> "EgoGraph":
        """Copy of this graph where the center's transactions are replaced."""
        others = [r for r in self.transactions
                  if r.sender != self.center and r.receiver != self.center]
        return EgoGraph.from_transactions(self.center, self.nodes,
                                          list(others) + list(history), self.hop_limit)


def _reachable(dataset: Dataset, center: str, hops: int) -> set[str]:
    seen = {center}
    frontier = deque([(center, 0)])
    while frontier:
        node, depth = frontier.popleft()
        if depth == hops:
            continue
        for nb in dataset.neighbors(node):
            if nb not in seen:
                seen.add(nb)
                frontier.append((nb, depth + 1))
    return seen


def build_ego_graph(dataset: Dataset, center: str, hops: int = 1) -> EgoGraph:
    if hops < 1:
        raise ValueError("hops must be >= 1")
    if center not in dataset.addresses:
        raise KeyError(f"unknown center address {center!r}")
    reach = _reachable(dataset, center, hops)
    nodes = [center] + sorted(reach - {center})
    candidates = {}
    for a in nodes:
        for i in dataset._by_address.get(a, ()):
            candidates[i] = dataset.transactions[i]
    return EgoGraph.from_transactions(center, nodes, candidates.values(), hops)


def adjacency(graph: EgoGraph, binary: bool = True) -> np.ndarray:
    """Dense adjacency over ``graph.nodes``.

    Binary mode is symmetric: an entry is 1 when a transfer exists in either
    direction.  Weighted mode holds directed transaction counts.
    """
    n = len(graph.nodes)
    A = np.zeros((n, n), dtype=np.float64)
    idx = graph.index
    for (s, r), count in graph.edges.items():
        i, j = idx[s], idx[r]
        if binary:
            A[i, j] = 1.0
            A[j, i] = 1.0
        else:
            A[i, j] += count
    return A


def merge_graphs(graphs: Sequence[EgoGraph]) -> tuple[list[str], np.ndarray]:
    """Union of several ego-graphs as a node list and binary adjacency.

    Node order: the graphs' centers in the given order, then every other
    node in ascending address order.
    """
    centers = []
    seen = set()
    for g in graphs:
        if g.center not in seen:
            centers.append(g.center)
            seen.add(g.center)
    rest = sorted({a for g in graphs for a in g.nodes} - seen)
    nodes = centers + rest
    idx = {a: i for i, a in enumerate(nodes)}
    A = np.zeros((len(nodes), len(nodes)))
    for g in graphs:
        for (s, r) in g.edges:
            A[idx[s], idx[r]] = 1.0
            A[idx[r], idx[s]] = 1.0
    return nodes, A
