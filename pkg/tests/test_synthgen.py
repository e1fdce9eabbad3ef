from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from txgraphcl.synthgen import (DEFAULT_PARAMS, BehaviorParams, GeneratorSpec, default_spec,
                                generate_account, generate_accounts, generate_dataset, spec_to_dict)
from txgraphcl.txdata import BehaviorLabel as L


def account(label, seed=0, **changes):
    params = replace(DEFAULT_PARAMS[label], **changes)
    return generate_account(label, params, np.random.default_rng(seed), center="c")


def incoming(acc):
    return [r for r in acc.transactions if r.receiver == acc.center]


def outgoing(acc):
    return [r for r in acc.transactions if r.sender == acc.center]


def test_blackmail_with_one_transaction_cashes_out_once():
    acc = account(L.CriminalBlacklist, n_transactions=(1, 1))
    assert len(acc.transactions) == 1 and len(outgoing(acc)) == 1


@pytest.mark.parametrize("seed", range(5))
def test_ponzi_counts(seed):
    acc = account(L.PonziScheme, seed, counterparty_count=(20, 20), inflow_outflow_ratio=4.0)
    n_in, n_out = len(incoming(acc)), len(outgoing(acc))
    assert n_in >= 20 and n_in >= 4 * n_out


def simple_paths(edges, start, goal):
    """Every simple directed path from start to goal, by depth-first enumeration."""
    succ = {}
    for s, r in edges:
        succ.setdefault(s, set()).add(r)
    out, stack = [], [(start, [start])]
    while stack:
        node, path = stack.pop()
        if node == goal:
            out.append(path)
            continue
        for nxt in succ.get(node, ()):
            if nxt not in path:
                stack.append((nxt, path + [nxt]))
    return out


@pytest.mark.parametrize("seed", range(3))
def test_darknet_paths_have_three_intermediaries(seed):
    acc = account(L.DarknetTransaction, seed, intermediary_hops=3)
    edges = {(r.sender, r.receiver) for r in acc.transactions}
    buyers = sorted({s for s, _ in edges if ".b" in s})
    assert buyers
    for b in buyers:
        paths = simple_paths(edges, b, "c")
        assert paths and all(len(p) - 2 == 3 for p in paths)


def test_counts_and_rollup():
    ds = generate_dataset(GeneratorSpec({"Normal": 1}, seed=1))
    assert len(ds.labels) == 1
    ds = generate_dataset(GeneratorSpec({"Phishing": 5, "Normal": 5}, seed=1))
    assert len(ds.labels) == 10
    assert sum(l.is_malicious for l in ds.labels.values()) == 5


def test_same_spec_gives_identical_bytes(tmp_path):
    spec = default_spec(per_class=10, seed=7)
    generate_dataset(spec).write(tmp_path / "a")
    generate_dataset(spec).write(tmp_path / "b")
    for name in ("transactions.jsonl", "labels.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        GeneratorSpec({"Scam": 3})
    with pytest.raises(ValueError):
        GeneratorSpec({"Normal": 0})
    with pytest.raises(ValueError):
        GeneratorSpec({"Normal": 2}, camouflage=-1)
    with pytest.raises(ValueError):
        BehaviorParams(L.Phishing, (5, 2), 1.0, 0.1, 1.0, 1.0, (1, 1))
    spec = GeneratorSpec({"Gambling": 2}, seed=4,
                         params={L.Gambling: replace(DEFAULT_PARAMS[L.Gambling], n_transactions=(3, 4))})
    d = spec_to_dict(spec)
    assert d["params"] == {"Gambling": {"n_transactions": [3, 4]}}
    again = GeneratorSpec.from_dict(d)
    assert again.params[L.Gambling].n_transactions == (3, 4)
    assert generate_dataset(again) == generate_dataset(spec)


def own(acc):
    """The account's class-specific transactions, without cover activity."""
    return [r for r in acc.transactions if ".v" not in r.sender + r.receiver]


def signature_check(accounts, strip_cover):
    hist = {a.center: (own(a) if strip_cover else a.transactions) for a in accounts}
    by = {}
    for a in accounts:
        by.setdefault("Normal" if not a.label.is_malicious else a.label.value, []).append(a)

    def out_amounts(a):
        return [r.amount for r in hist[a.center] if r.sender == a.center]

    def gaps(a):
        ts = sorted(r.timestamp for r in hist[a.center])
        return np.diff(ts) if len(ts) > 1 else np.array([])

    normal = by["Normal"]
    normal_out = np.mean([x for a in normal for x in out_amounts(a)])
    normal_count = np.mean([len(hist[a.center]) for a in normal])
    normal_gap = np.mean(np.concatenate([gaps(a) for a in normal]))
    phishing_out = np.mean([x for a in by["Phishing"] for x in out_amounts(a)])
    assert phishing_out >= 5 * normal_out
    assert all(len(hist[a.center]) < normal_count for a in by["Phishing"])
    for a in by["MoneyLaundering"]:
        assert gaps(a).mean() <= normal_gap / 10
    for a in by["PonziScheme"]:
        n_in = sum(r.receiver == a.center for r in hist[a.center])
        assert n_in >= 2 * (len(hist[a.center]) - n_in)
    for a in by["CriminalBlacklist"]:
        assert len(hist[a.center]) <= 3


def test_class_signatures_without_cover():
    spec = default_spec(per_class=30, seed=7)
    spec.camouflage = 0.0
    signature_check(generate_accounts(spec), strip_cover=False)


def test_class_signatures_hold_for_own_activity_under_cover():
    accounts = generate_accounts(default_spec(per_class=30, seed=7))
    signature_check(accounts, strip_cover=True)
    assert any(len(a.transactions) > len(own(a)) for a in accounts)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1), st.floats(0, 2))
def test_amounts_positive_and_times_in_window(seed, cover):
    spec = GeneratorSpec({"Phishing": 1, "DarknetTransaction": 1, "PonziScheme": 1, "Gambling": 1,
                          "MoneyLaundering": 1, "CriminalBlacklist": 1, "Normal": 2},
                         seed=seed, camouflage=cover)
    ds = generate_dataset(spec)
    assert all(r.amount > 0 for r in ds.transactions)
    assert all(spec.epoch_start <= r.timestamp <= spec.epoch_end for r in ds.transactions)
    assert generate_dataset(spec) == ds
