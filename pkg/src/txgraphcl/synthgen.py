"""Seeded synthetic transaction histories for each behavior class.

Every generated account is a labeled *center* plus a set of counterparty
stub addresses.  The generator parameters are contracts of this module, not
measurements of any real chain:

* Phishing: few transactions, large outgoing amounts to a handful of
  collector addresses.
* MoneyLaundering: long bursts of very rapid round trips with a small ring
  of colluding addresses.
* PonziScheme: many investors paying in, fewer payouts to the earliest ones.
* CriminalBlacklist (blackmail): one to three transactions; ransom payments
  in, one cash-out.
* DarknetTransaction: buyers pay the center through chains of intermediary
  addresses.
* Gambling: many small bidirectional transfers with a few house addresses.
* The four benign roles have moderate rates and amounts of their own.

``camouflage`` mixes benign-looking cover activity into every account: about
``camouflage`` times the account's own transaction count, drawn from a
randomly chosen benign role, with fresh counterparties.  The default of
0.5 puts the leave-one-out 1-nearest-neighbor error over the seven default
classes (normalized attributes) at about 14%.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .txdata import BehaviorLabel, Dataset, NORMAL_LABELS, TransactionRecord

DAY = 86400
NORMAL = "Normal"  # pseudo-class: a mixture of the four benign roles
BENIGN_ROLES = tuple(l for l in BehaviorLabel if l in NORMAL_LABELS)

_SHORT = {
    BehaviorLabel.PersonalWallet: "pw",
    BehaviorLabel.MiningPool: "mp",
    BehaviorLabel.NetworkService: "ns",
    BehaviorLabel.DigitalFinancialService: "df",
    BehaviorLabel.Phishing: "ph",
    BehaviorLabel.Gambling: "gb",
    BehaviorLabel.PonziScheme: "pz",
    BehaviorLabel.MoneyLaundering: "ml",
    BehaviorLabel.CriminalBlacklist: "bl",
    BehaviorLabel.DarknetTransaction: "dn",
}


@dataclass(frozen=True)
class BehaviorParams:
    label: BehaviorLabel
    n_transactions: tuple[int, int]
    amount_mean: float
    amount_spread: float
    interarrival_mean: float
    interarrival_jitter: float
    counterparty_count: tuple[int, int]
    intermediary_hops: int = 0
    inflow_outflow_ratio: float = 1.0
    inflow_share: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "label", BehaviorLabel(self.label))
        for name in ("n_transactions", "counterparty_count"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo}..{hi} is empty")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.amount_mean <= 0 or self.interarrival_mean <= 0:
            raise ValueError("means must be positive")
        if self.amount_spread < 0 or self.interarrival_jitter <= 0:
            raise ValueError("spread must be >= 0 and jitter > 0")
        if self.inflow_outflow_ratio <= 0:
            raise ValueError("inflow_outflow_ratio must be positive")


DEFAULT_PARAMS: dict[BehaviorLabel, BehaviorParams] = {
    p.label: p for p in (
        BehaviorParams(BehaviorLabel.PersonalWallet, (8, 30), 2e6, 0.8, 2 * DAY, 1.0, (3, 10)),
        BehaviorParams(BehaviorLabel.MiningPool, (25, 60), 1.5e6, 0.6, 6 * 3600, 0.5, (12, 30),
                       inflow_share=0.2),
        BehaviorParams(BehaviorLabel.NetworkService, (15, 45), 4e6, 0.9, 12 * 3600, 1.0, (8, 25)),
        BehaviorParams(BehaviorLabel.DigitalFinancialService, (25, 60), 8e6, 1.0, 8 * 3600, 1.0,
                       (10, 30)),
        BehaviorParams(BehaviorLabel.Phishing, (2, 8), 1.2e8, 0.7, 3 * DAY, 1.2, (1, 3)),
        BehaviorParams(BehaviorLabel.Gambling, (30, 90), 2e5, 0.8, 3600, 1.0, (1, 3)),
        BehaviorParams(BehaviorLabel.PonziScheme, (30, 70), 5e6, 0.7, 10 * 3600, 1.0, (15, 30),
                       inflow_outflow_ratio=4.0),
        BehaviorParams(BehaviorLabel.MoneyLaundering, (40, 90), 1e6, 0.5, 300, 0.6, (3, 6)),
        BehaviorParams(BehaviorLabel.CriminalBlacklist, (1, 3), 5e7, 0.6, 2 * DAY, 1.0, (1, 2)),
        BehaviorParams(BehaviorLabel.DarknetTransaction, (5, 20), 3e6, 0.8, 2 * DAY, 2.0, (5, 20),
                       intermediary_hops=3),
    )
}


@dataclass
class GeneratorSpec:
    """What to generate.  ``counts`` keys are label names or ``"Normal"``."""

    counts: Mapping[str, int]
    seed: int = 7
    platform: str = "btc"
    params: Mapping[BehaviorLabel, BehaviorParams] = field(
        default_factory=lambda: dict(DEFAULT_PARAMS))
    epoch_start: int = 1_560_000_000
    epoch_days: int = 365
    amount_scale: float = 1.0
    camouflage: float = 0.5

    def __post_init__(self):
        if self.camouflage < 0:
            raise ValueError("camouflage must be >= 0")
        for key, n in self.counts.items():
            if key != NORMAL:
                BehaviorLabel(key)
            if n < 0:
                raise ValueError(f"negative count for {key}")
        if sum(self.counts.values()) < 1:
            raise ValueError("spec generates no accounts")
        params = dict(DEFAULT_PARAMS)
        for k, p in self.params.items():
            params[BehaviorLabel(k)] = p
        self.params = params

    @classmethod
    def from_dict(cls, obj: Mapping) -> "GeneratorSpec":
        obj = dict(obj)
        overrides = obj.pop("params", {}) or {}
        params = dict(DEFAULT_PARAMS)
        for name, changes in overrides.items():
            label = BehaviorLabel(name)
            changes = {k: tuple(v) if isinstance(v, list) else v for k, v in changes.items()}
            params[label] = replace(params[label], **changes)
        return cls(params=params, **obj)

    @property
    def epoch_end(self) -> int:
        return self.epoch_start + self.epoch_days * DAY


@dataclass
class AccountHistory:
    center: str
    label: BehaviorLabel
    transactions: list[TransactionRecord]
    stubs: list[str]


class _Emitter:
    def __init__(self, center: str, tx_prefix: str, t_end: int):
        self.center = center
        self.prefix = tx_prefix
        self.t_end = t_end
        self.records: list[TransactionRecord] = []

    def emit(self, t, sender, receiver, amount):
        t = min(int(t), self.t_end)
        rec = TransactionRecord(f"{self.prefix}-{len(self.records):05d}", t, sender, receiver,
                                max(1, int(round(amount))))
        self.records.append(rec)
        return rec


def _amounts(rng, p: BehaviorParams, n: int, scale: float) -> np.ndarray:
    mean = p.amount_mean * scale
    if p.amount_spread == 0:
        return np.full(n, mean)
    mu = np.log(mean) - p.amount_spread ** 2 / 2
    return rng.lognormal(mu, p.amount_spread, size=n)


def _times(rng, p: BehaviorParams, n: int, start: float) -> np.ndarray:
    shape = 1.0 / p.interarrival_jitter ** 2
    gaps = rng.gamma(shape, p.interarrival_mean / shape, size=n)
    gaps[0] = 0.0
    return start + np.cumsum(gaps)


def _draw(rng, lo_hi: tuple[int, int]) -> int:
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def generate_account(label: BehaviorLabel, params: BehaviorParams, rng: np.random.Generator,
                     center: str = "acct", epoch_start: int = 1_560_000_000,
                     epoch_days: int = 365, amount_scale: float = 1.0,
                     camouflage: float = 0.0) -> AccountHistory:
    """Generate one center account of ``label`` and its counterparties."""
    label = BehaviorLabel(label)
    t_end = epoch_start + epoch_days * DAY
    start = epoch_start + rng.uniform(0, 0.4) * epoch_days * DAY
    em = _Emitter(center, f"{center}", t_end)
    n = _draw(rng, params.n_transactions)
    k = max(1, _draw(rng, params.counterparty_count))
    cps = [f"{center}.c{j:03d}" for j in range(k)]
    p = params

    if label is BehaviorLabel.PonziScheme:
        n_out = int(np.floor(n / (p.inflow_outflow_ratio + 1)))
        n_in = max(n - n_out, k)
        t = _times(rng, p, n_in + n_out, start)
        order = rng.permutation(np.arange(1, n_in + n_out))
        # the first transaction is always an investment
        out_slots = set(order[:n_out].tolist())
        amt = _amounts(rng, p, n_in + n_out, amount_scale)
        invested = []
        i_in = 0
        for i in range(n_in + n_out):
            if i in out_slots and invested:
                payee = invested[int(rng.integers(0, max(1, len(invested) // 2 + 1)))]
                em.emit(t[i], center, payee, amt[i] * 1.3)
            else:
                investor = cps[i_in % k] if i_in < k else cps[int(rng.integers(0, k))]
                i_in += 1
                invested.append(investor)
                em.emit(t[i], investor, center, amt[i])
    elif label is BehaviorLabel.DarknetTransaction:
        hops = p.intermediary_hops
        t = _times(rng, p, n, start)
        amt = _amounts(rng, p, n, amount_scale)
        buyers = [f"{center}.b{j:03d}" for j in range(k)]
        cps = list(buyers)
        for i in range(n):
            chain = [buyers[i % k]] + [f"{center}.m{i:03d}.{h}" for h in range(hops)] + [center]
            cps.extend(chain[1:-1])
            ti = t[i]
            for a, b in zip(chain[:-1], chain[1:]):
                em.emit(ti, a, b, amt[i])
                ti += rng.uniform(60, 1800)
    elif label is BehaviorLabel.CriminalBlacklist:
        t = _times(rng, p, n, start)
        amt = _amounts(rng, p, n, amount_scale)
        cashout = f"{center}.x"
        cps = cps + [cashout]
        for i in range(n - 1):
            em.emit(t[i], cps[i % k], center, amt[i])
        total = sum(r.amount for r in em.records) if n > 1 else amt[-1]
        em.emit(t[n - 1], center, cashout, total)
    elif label is BehaviorLabel.MoneyLaundering:
        # rounds of out-and-back through a small ring
        t = _times(rng, p, n, start)
        amt = _amounts(rng, p, n, amount_scale)
        for i in range(n):
            peer = cps[i % k]
            if i % 2 == 0:
                em.emit(t[i], center, peer, amt[i])
            else:
                em.emit(t[i], peer, center, amt[i - 1] * rng.uniform(0.97, 1.0))
    elif label is BehaviorLabel.Phishing:
        # one funding inflow per few thefts; large outflows to collectors
        t = _times(rng, p, n, start)
        amt = _amounts(rng, p, n, amount_scale)
        for i in range(n):
            if i == 0 or (i < n - 1 and rng.random() < 0.25):
                em.emit(t[i], f"{center}.src{i:02d}", center, amt[i])
                cps.append(f"{center}.src{i:02d}")
            else:
                em.emit(t[i], center, cps[int(rng.integers(0, k))], amt[i])
    elif label is BehaviorLabel.Gambling:
        t = _times(rng, p, n, start)
        amt = _amounts(rng, p, n, amount_scale)
        for i in range(n):
            house = cps[int(rng.integers(0, k))]
            if rng.random() < 0.5:
                em.emit(t[i], center, house, amt[i])
            else:
                em.emit(t[i], house, center, amt[i] * rng.uniform(0.5, 2.0))
    else:
        t = _times(rng, p, n, start)
        amt = _amounts(rng, p, n, amount_scale)
        for i in range(n):
            peer = cps[int(rng.integers(0, k))]
            if rng.random() < p.inflow_share:
                em.emit(t[i], peer, center, amt[i])
            else:
                em.emit(t[i], center, peer, amt[i])

    if camouflage > 0:
        _add_cover(em, rng, camouflage, start, amount_scale)

    stubs = sorted({a for r in em.records for a in (r.sender, r.receiver)} - {center})
    return AccountHistory(center, label, em.records, stubs)


def _add_cover(em: _Emitter, rng, camouflage: float, start: float, amount_scale: float) -> None:
    m = int(rng.poisson(camouflage * len(em.records)))
    if m == 0:
        return
    role = DEFAULT_PARAMS[BENIGN_ROLES[int(rng.integers(0, len(BENIGN_ROLES)))]]
    k = max(1, _draw(rng, role.counterparty_count))
    peers = [f"{em.center}.v{j:03d}" for j in range(k)]
    last = max(r.timestamp for r in em.records)
    t = _times(rng, role, m, rng.uniform(start, max(start, last)))
    amt = _amounts(rng, role, m, amount_scale)
    for i in range(m):
        peer = peers[int(rng.integers(0, k))]
        if rng.random() < role.inflow_share:
            em.emit(t[i], peer, em.center, amt[i])
        else:
            em.emit(t[i], em.center, peer, amt[i])


def generate_accounts(spec: GeneratorSpec) -> list[AccountHistory]:
    plan: list[tuple[str, int]] = []
    for key in sorted(spec.counts):
        plan.extend((key, i) for i in range(spec.counts[key]))
    children = np.random.SeedSequence(spec.seed).spawn(len(plan))
    accounts = []
    for (key, i), child in zip(plan, children):
        rng = np.random.default_rng(child)
        if key == NORMAL:
            label = BENIGN_ROLES[int(rng.integers(0, len(BENIGN_ROLES)))]
            center = f"{spec.platform}_nm{i:04d}"
        else:
            label = BehaviorLabel(key)
            center = f"{spec.platform}_{_SHORT[label]}{i:04d}"
        accounts.append(generate_account(label, spec.params[label], rng, center,
                                         spec.epoch_start, spec.epoch_days, spec.amount_scale,
                                         spec.camouflage))
    return accounts


def generate_dataset(spec: GeneratorSpec) -> Dataset:
    """Merged, time-sorted transactions with one label per generated center."""
    accounts = generate_accounts(spec)
    txs = [r for acc in accounts for r in acc.transactions]
    txs.sort(key=lambda r: r.sort_key)
    labels = {acc.center: acc.label for acc in accounts}
    return Dataset(tuple(txs), labels, spec.platform)


def default_spec(per_class: int = 30, seed: int = 7, platform: str = "btc",
                 classes: tuple[str, ...] | None = None) -> GeneratorSpec:
    """Six malicious classes plus the benign mixture, ``per_class`` each."""
    if classes is None:
        classes = tuple(l.value for l in BehaviorLabel if l not in NORMAL_LABELS) + (NORMAL,)
    return GeneratorSpec({c: per_class for c in classes}, seed=seed, platform=platform)


def spec_to_dict(spec: GeneratorSpec) -> dict:
    """Plain-data form of ``spec`` with only the parameters that differ from defaults."""
    overrides = {}
    for label, p in spec.params.items():
        base = DEFAULT_PARAMS[label]
        diff = {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in vars(p).items() if k != "label" and getattr(base, k) != v}
        if diff:
            overrides[label.value] = diff
    return {"counts": dict(copy.deepcopy(spec.counts)), "seed": spec.seed,
            "platform": spec.platform, "epoch_start": spec.epoch_start,
            "epoch_days": spec.epoch_days, "amount_scale": spec.amount_scale,
            "camouflage": spec.camouflage,
            "params": overrides}
