from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from txgraphcl.augment import (AugmentConfig, amount_split, augment_graph, make_views, represent,
                               split_amounts, time_delay)
from txgraphcl.features import (FEATURE_NAMES, PURE_AMOUNT, attribute_matrix, extract_attributes,
                                normalize_minmax)
from txgraphcl.txdata import BehaviorLabel, Dataset, build_ego_graph

from conftest import tx


def totals(history, center="c"):
    inflow = sum(r.amount for r in history if r.receiver == center)
    outflow = sum(r.amount for r in history if r.sender == center)
    return inflow, outflow


def peers(history, center="c"):
    return ({r.sender for r in history if r.receiver == center},
            {r.receiver for r in history if r.sender == center})


def test_config_validation():
    for bad in (dict(p=1.5), dict(delta_t_max=0), dict(theta=0)):
        with pytest.raises(ValueError):
            AugmentConfig(**bad)


def test_empty_history_is_rejected(rng):
    with pytest.raises(ValueError):
        time_delay([], AugmentConfig(), rng)
    with pytest.raises(ValueError):
        amount_split([], AugmentConfig(), rng)


def test_p_zero_is_identity(rng):
    hist = [tx("1", 10, "a", "c", 4), tx("2", 5, "c", "b", 9)]
    cfg = AugmentConfig(p=0.0)
    ordered = sorted(hist, key=lambda r: r.sort_key)
    assert time_delay(hist, cfg, rng) == ordered
    assert amount_split(hist, cfg, rng) == ordered


def test_tiny_delay_keeps_timestamps(rng):
    hist = [tx(str(i), 100 * i, "a", "c", 3) for i in range(5)]
    out = time_delay(hist, AugmentConfig(p=1.0, delta_t_max=1e-9), rng)
    assert [r.timestamp for r in out] == [r.timestamp for r in hist]


def test_delay_bounds_with_three_transactions():
    hist = [tx("1", 0, "a", "c", 1), tx("2", 50, "c", "b", 1), tx("3", 80, "a", "c", 1)]
    cfg = AugmentConfig(p=1.0, delta_t_max=60)
    out = {r.tx_id: r.timestamp for r in time_delay(hist, cfg, np.random.default_rng(11))}
    for r in hist:
        assert r.timestamp <= out[r.tx_id] <= r.timestamp + 60


def test_single_delta_shifts_everything_together():
    hist = [tx(str(i), 10 * i, "a", "c", 1) for i in range(6)]
    out = time_delay(hist, AugmentConfig(p=1.0, single_delta=True), np.random.default_rng(0))
    shifts = {o.timestamp - r.timestamp for o, r in zip(out, hist)}
    assert len(shifts) == 1 and shifts.pop() > 0


def test_split_of_ten_gives_two_fives():
    hist = [tx("t", 100, "a", "c", 10)]
    out, stats = split_amounts(hist, AugmentConfig(p=1.0, theta=1.0), np.random.default_rng(0))
    assert stats.split == 1 and stats.unsplittable == 0
    assert [r.amount for r in out] == [5, 5]
    assert {(r.sender, r.receiver) for r in out} == {("a", "c")}
    assert [r.tx_id for r in out] == ["t~s1", "t~s2"]
    assert out[0].timestamp == 100 and out[1].timestamp >= 100


def test_odd_amount_keeps_the_larger_half_first():
    out = amount_split([tx("t", 0, "a", "c", 7)], AugmentConfig(p=1.0, theta=1.0), np.random.default_rng(0))
    assert sorted(r.amount for r in out) == [3, 4]
    assert next(r for r in out if r.tx_id == "t~s1").amount == 4


def test_unsplittable_amounts_are_counted():
    hist = [tx("a", 0, "a", "c", 1), tx("b", 1, "a", "c", 0)]
    out, stats = split_amounts(hist, AugmentConfig(p=1.0, theta=1.0), np.random.default_rng(0))
    assert out == hist and stats.unsplittable == 2


def test_split_count_is_ceil_theta_n():
    hist = [tx(str(i), i, "a", "c", 100) for i in range(20)]
    _, stats = split_amounts(hist, AugmentConfig(p=1.0, theta=0.12), np.random.default_rng(3))
    assert stats.split == 3


@st.composite
def histories(draw):
    n = draw(st.integers(1, 25))
    out = []
    for i in range(n):
        peer = draw(st.sampled_from(["p", "q", "r", "s"]))
        s, r = (peer, "c") if draw(st.booleans()) else ("c", peer)
        out.append(tx(f"t{i}", draw(st.integers(0, 10**6)), s, r, draw(st.integers(0, 10**9))))
    return out


configs = st.builds(AugmentConfig, p=st.floats(0, 1), delta_t_max=st.floats(1, 10**5),
                    theta=st.floats(0.01, 1), single_delta=st.booleans())


@given(histories(), configs, st.integers(0, 2**32 - 1))
def test_history_invariants(hist, cfg, seed):
    rng = np.random.default_rng(seed)
    delayed = time_delay(hist, cfg, rng)
    before = {r.tx_id: r.timestamp for r in hist}
    assert all(before[r.tx_id] <= r.timestamp <= before[r.tx_id] + cfg.delta_t_max for r in delayed)
    assert Counter(r.amount for r in delayed) == Counter(r.amount for r in hist)
    assert [r.timestamp for r in delayed] == sorted(r.timestamp for r in delayed)

    split, stats = split_amounts(delayed, cfg, rng)
    assert totals(split) == totals(hist)
    assert peers(split) == peers(hist)
    assert len(split) == len(hist) + stats.split
    origin = {r.tx_id: r.timestamp for r in delayed}
    for r in split:
        assert r.timestamp >= origin[r.tx_id.split("~")[0]]


def views_fixture():
    recs = [tx(f"t{i}", 3600 * i, "c" if i % 3 else "p", "q" if i % 3 else "c", 1000 + 37 * i)
            for i in range(20)]
    ds = Dataset(tuple(recs), {"c": BehaviorLabel.Phishing})
    g = build_ego_graph(ds, "c")
    _, stats = normalize_minmax(attribute_matrix([g]))
    return g, stats


def test_views_with_p_zero_equal_the_original():
    g, stats = views_fixture()
    z = np.arange(4.0)
    pair = make_views(g, z, stats, AugmentConfig(p=0.0), np.random.default_rng(0))
    orig = represent(g, z, stats)
    assert np.array_equal(pair.view1.vector, orig.vector)
    assert np.array_equal(pair.view2.vector, orig.vector)


def test_views_are_deterministic_and_keep_label_and_structure():
    g, stats = views_fixture()
    z = np.arange(4.0)
    a = make_views(g, z, stats, AugmentConfig(), np.random.default_rng(5), BehaviorLabel.Phishing)
    b = make_views(g, z, stats, AugmentConfig(), np.random.default_rng(5), BehaviorLabel.Phishing)
    assert np.array_equal(a.view1.vector, b.view1.vector)
    assert np.array_equal(a.view2.vector, b.view2.vector)
    assert a.label is BehaviorLabel.Phishing and a.address == "c"
    assert np.array_equal(a.view1.structure, z) and np.array_equal(a.view2.structure, z)


def test_views_conserve_totals():
    g, _ = views_fixture()
    base = extract_attributes(g)
    rng = np.random.default_rng(9)
    for _ in range(2):
        v = extract_attributes(augment_graph(g, AugmentConfig(), rng))
        for name in ("total_in", "total_out", "net_out"):
            assert name in PURE_AMOUNT and name in FEATURE_NAMES
            assert v[name] == base[name]


def test_recompute_structure_needs_a_function():
    g, stats = views_fixture()
    with pytest.raises(ValueError):
        make_views(g, np.zeros(2), stats, AugmentConfig(recompute_structure=True), np.random.default_rng(0))
    pair = make_views(g, np.zeros(2), stats, AugmentConfig(recompute_structure=True),
                      np.random.default_rng(0), structure_fn=lambda graph: np.ones(2))
    assert np.array_equal(pair.view1.structure, np.ones(2))
