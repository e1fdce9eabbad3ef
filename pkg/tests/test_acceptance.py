"""Acceptance criteria 1-10.

Each test appends one ``CRITERION n: PASS|FAIL`` line to the summary printed
at the end of the pytest run, then asserts on the same outcome.  Runtime
budgets are part of each criterion.
"""
import json
import math
import time
from collections import Counter, deque

import numpy as np
import pytest
import torch
import yaml

from txgraphcl import evalharness as eh
from txgraphcl.augment import AugmentConfig, amount_split, make_views, time_delay
from txgraphcl.classify import f1_score, metrics
from txgraphcl.cli import main as cli_main
from txgraphcl.contrastive import (ContrastiveConfig, EncoderConfig, contrastive_loss,
                                   heldout_similarity, pretrain)
from txgraphcl.features import attribute_matrix, extract_attributes, normalize_minmax
from txgraphcl.structgae import (GaeConfig, attention_coefficients, build_gae, decode_adjacency, embed,
                                 gae_loss, gat_forward, reconstruction_target, train_gae)
from txgraphcl.synthgen import GeneratorSpec, default_spec, generate_dataset, spec_to_dict
from txgraphcl.txdata import BehaviorLabel, EgoGraph, TransactionRecord, build_ego_graph, merge_graphs

import oracles
from conftest import ACCEPTANCE

pytestmark = pytest.mark.acceptance


def record(n, title, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed <= budget
    line = (f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}; "
            f"{elapsed:.1f}s of {budget:g}s]")
    ACCEPTANCE.append(line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_criterion_1_metric_fidelity():
    t = time.perf_counter()
    # 652 / (652 + 63) = 91.19 %, 652 / (652 + 117) = 84.79 %
    y_true = [1] * (652 + 117) + [0] * 63
    y_pred = [1] * 652 + [0] * 117 + [1] * 63
    r = metrics(y_true, y_pred, averaging="binary", positive=1)
    p, rc, f = 100 * r.avg_precision, 100 * r.avg_recall, 100 * r.avg_f1
    direct = 100 * f1_score(0.9119, 0.8479)
    ok = (round(p, 2) == 91.19 and round(rc, 2) == 84.79
          and abs(f - 87.87) <= 0.01 and abs(direct - 87.87) <= 0.01)
    record(1, "metric fidelity", ok, f"P={p:.2f} R={rc:.2f} F1={f:.3f} direct F1={direct:.3f}",
           time.perf_counter() - t, 1)


# ---------------------------------------------------------------- 2

def test_criterion_2_gat_correctness():
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_row, worst_fwd = 0.0, 0.0
    for i in range(100):
        n = int(rng.integers(2, 7))
        A = oracles.random_graph(rng, n, rng.uniform(0.2, 0.9))
        X = rng.normal(size=(n, 4))
        model = build_gae(4, GaeConfig(hidden_dims=(5,), embedding_dim=3, seed=i))
        hs, Z = gat_forward(model, X, A)
        inputs = [X, *(h.detach() for h in hs[:-1])]
        has_nb = A.sum(1) > 0
        for layer, h in zip(model.layers, inputs):
            alpha = attention_coefficients(layer, h, A).numpy()
            worst_row = max(worst_row, np.abs(alpha.sum(1)[has_nb] - 1).max(initial=0.0))
        want = oracles.gat_dense(oracles.model_layers(model), X, A)
        worst_fwd = max(worst_fwd, np.abs(Z.detach().numpy() - want).max())
    worst_perm = 0.0
    A = oracles.random_graph(rng, 6)
    X = rng.normal(size=(6, 4))
    model = build_gae(4, GaeConfig(hidden_dims=(5,), embedding_dim=3, seed=0))
    Z = embed(model, X, A)
    Ah = decode_adjacency(Z).numpy()
    for _ in range(20):
        P = np.eye(6)[rng.permutation(6)]
        Zp = embed(model, P @ X, P @ A @ P.T)
        worst_perm = max(worst_perm, np.abs(Zp - P @ Z).max(),
                         np.abs(decode_adjacency(Zp).numpy() - P @ Ah @ P.T).max())
    ok = worst_row <= 1e-6 and worst_fwd <= 1e-6 and worst_perm <= 1e-6
    record(2, "GAT correctness", ok,
           f"row-sum err {worst_row:.1e}, forward err {worst_fwd:.1e}, permutation err {worst_perm:.1e}",
           time.perf_counter() - t, 30)


# ---------------------------------------------------------------- 3

def test_criterion_3_gradient_checks():
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    gae_err = []
    for i in range(20):
        A = oracles.random_graph(rng, 4, 0.6)
        X = torch.as_tensor(rng.normal(size=(4, 3)))
        model = build_gae(3, GaeConfig(hidden_dims=(4,), embedding_dim=2, seed=i))
        src, dst = model.edges(A)
        target = reconstruction_target(A)
        names = [n for n, _ in model.named_parameters()]

        def fn(params):
            Z, Xh = torch.func.functional_call(model, dict(zip(names, params)), (X, src, dst))
            return gae_loss(X, Xh, target, decode_adjacency(Z), lam=1.0)
        gae_err.append(oracles.finite_difference_check(fn, list(model.parameters())))
    cl_err = []
    for i in range(20):
        n, d = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        S, S2 = torch.as_tensor(rng.normal(size=(n, d))), torch.as_tensor(rng.normal(size=(n, d)))
        tau = float(rng.uniform(0.2, 2.0))
        mode = ("views", "ntxent")[i % 2]
        cl_err.append(oracles.finite_difference_check(
            lambda ts: contrastive_loss(ts[0], ts[1], tau, mode), [S, S2]))
    ok = max(gae_err) < 1e-4 and max(cl_err) < 1e-4
    record(3, "gradient checks", ok,
           f"max relative err gae {max(gae_err):.1e}, contrastive {max(cl_err):.1e}",
           time.perf_counter() - t, 60)


# ---------------------------------------------------------------- 4

def gae_fixture(seed=7, n_nodes=50):
    """50-node union graph of synthetic ego graphs, features min-max scaled.

    Ego graphs of two accounts per class (no cover activity) are merged and
    the first ``n_nodes`` nodes in breadth-first order are kept.
    """
    spec = default_spec(per_class=2, seed=seed)
    spec.camouflage = 0.0
    ds = generate_dataset(spec)
    nodes, A = merge_graphs([build_ego_graph(ds, a) for a in ds.labeled_addresses()])
    seen, order = set(), []
    for s in range(len(nodes)):
        if s in seen:
            continue
        queue = deque([s])
        seen.add(s)
        while queue:
            u = queue.popleft()
            order.append(u)
            for v in np.flatnonzero(A[u]):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
    keep = order[:n_nodes]
    A = A[np.ix_(keep, keep)]
    names = [nodes[i] for i in keep]
    union = EgoGraph.from_transactions(names[0], names, ds.transactions)
    X = np.stack([extract_attributes(union, center=a).values for a in names])
    return normalize_minmax(X)[0], A


def test_criterion_4_gae_training():
    t = time.perf_counter()
    X, A = gae_fixture()
    assert X.shape[0] == 50
    res = train_gae(X, A, GaeConfig(epochs=200, lam=1.0, seed=7))
    ratio = res.losses[-1] / res.losses[0]
    T = reconstruction_target(A).numpy()
    recovered = float((np.round(decode_adjacency(res.Z).numpy()) == T).mean())
    edge_recall = float(np.round(decode_adjacency(res.Z).numpy())[A != 0].mean())
    ok = ratio <= 0.5 and recovered >= 0.9
    record(4, "GAE training", ok,
           f"final/initial loss {ratio:.3f} (need <= 0.5), entries recovered {recovered:.3f} "
           f"(need >= 0.9), edge recall {edge_recall:.3f}", time.perf_counter() - t, 120)


# ---------------------------------------------------------------- 5

def random_history(rng, i):
    n = int(rng.integers(1, 30))
    peers = [f"p{j}" for j in range(int(rng.integers(1, 6)))]
    out = []
    for k in range(n):
        peer = peers[int(rng.integers(len(peers)))]
        s, r = (peer, "c") if rng.random() < 0.5 else ("c", peer)
        out.append(TransactionRecord(f"h{i}t{k}", int(rng.integers(0, 10**7)), s, r,
                                     int(rng.integers(0, 10**9))))
    return out


def counterparties(history):
    return ({r.sender for r in history if r.receiver == "c"},
            {r.receiver for r in history if r.sender == "c"})


def flows(history):
    return (sum(r.amount for r in history if r.receiver == "c"),
            sum(r.amount for r in history if r.sender == "c"))


def test_criterion_5_augmentation_invariants():
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    failures = Counter()
    labels = list(BehaviorLabel)
    for i in range(1000):
        hist = random_history(rng, i)
        cfg = AugmentConfig(p=float(rng.uniform(0.05, 1)), delta_t_max=float(rng.uniform(1, 10**5)),
                            theta=float(rng.uniform(0.01, 1)))
        split = amount_split(hist, cfg, rng)
        if flows(split) != flows(hist):
            failures["conservation"] += 1
        if counterparties(split) != counterparties(hist):
            failures["counterparties(split)"] += 1
        before = {r.tx_id: r.timestamp for r in hist}
        delayed = time_delay(hist, cfg, rng)
        if any(r.timestamp < before[r.tx_id] for r in delayed):
            failures["timestamp lower bound"] += 1
        if counterparties(delayed) != counterparties(hist):
            failures["counterparties(delay)"] += 1
        ordered = sorted(hist, key=lambda r: r.sort_key)
        off = AugmentConfig(p=0.0)
        if time_delay(hist, off, rng) != ordered or amount_split(hist, off, rng) != ordered:
            failures["p=0 identity"] += 1
        if i % 10 == 0:
            nodes = ["c", *sorted({r.sender for r in hist} | {r.receiver for r in hist} - {"c"})]
            g = EgoGraph.from_transactions("c", nodes, hist)
            stats = normalize_minmax(attribute_matrix([g]))[1]
            label = labels[i // 10 % len(labels)]
            pair = make_views(g, np.zeros(2), stats, AugmentConfig(), rng, label)
            if pair.label is not label or pair.address != "c":
                failures["label invariance"] += 1
    record(5, "augmentation invariants", not failures,
           f"1000 histories, violations: {dict(failures) or 'none'}", time.perf_counter() - t, 30)


# ---------------------------------------------------------------- 6

def test_criterion_6_pretraining_signal():
    t = time.perf_counter()
    ds = generate_dataset(GeneratorSpec({"Phishing": 100, "Normal": 100}, seed=7))
    addresses = ds.labeled_addresses()
    view = eh.structural_view(ds, addresses, 1, GaeConfig(seed=7))
    samples = eh.pretrain_samples(view)
    perm = np.random.default_rng(7).permutation(len(samples))
    train, held = [samples[i] for i in perm[:150]], [samples[i] for i in perm[150:]]
    stats = normalize_minmax(attribute_matrix([s.graph for s in train]))[1]
    enc_cfg = EncoderConfig(in_dim=view.attributes.shape[1] + view.Z.shape[1], seed=7)
    res = pretrain(train, stats, AugmentConfig(), enc_cfg, ContrastiveConfig(epochs=50, seed=7))
    pos, neg = heldout_similarity(res.encoder, res.head, held, stats, seed=1)
    equal = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    log2_err = abs(contrastive_loss(equal, equal, tau=1.0).item() - math.log(2))
    ok = pos - neg >= 0.2 and log2_err <= 1e-9
    record(6, "contrastive pre-training signal", ok,
           f"held-out pos {pos:.3f} neg {neg:.3f} gap {pos - neg:.3f} (need >= 0.2), "
           f"|L - log 2| {log2_err:.1e}", time.perf_counter() - t, 300)


# ---------------------------------------------------------------- 7

def test_criterion_7_end_to_end():
    t = time.perf_counter()
    synth = spec_to_dict(default_spec(per_class=30, seed=7))
    base = {"seed": 7, "data": {"synth": synth}}
    cache = {}
    full = eh.run_experiment(base, cache=cache)
    ablated = eh.run_experiment({**base, "ablation": "no_pretrain"}, cache=cache)
    ok = full.f1 >= 0.90 and full.f1 > ablated.f1
    record(7, "end-to-end pipeline", ok,
           f"full F1 {full.f1:.4f} (need >= 0.90), w/o CL-Encoder F1 {ablated.f1:.4f} "
           f"(full must be higher)", time.perf_counter() - t, 600)


# ---------------------------------------------------------------- 8

def test_criterion_8_protocol_guarantees():
    t = time.perf_counter()
    counts = {c: 50 for c in ("Phishing", "PonziScheme", "Gambling", "MoneyLaundering",
                              "CriminalBlacklist", "DarknetTransaction")}
    ds = generate_dataset(GeneratorSpec({**counts, "Normal": 1300}, seed=8, camouflage=0.0))
    universe = ds.labeled_addresses()
    problems = []

    def malicious(addresses):
        return sum(ds.labels[a].is_malicious for a in addresses)

    for label in counts:
        s = eh.split_zero_shot(ds, label, seed=1)
        s.check_partition(universe)
        leaked = sum(ds.labels[a].value == label for a in s.train)
        if leaked:
            problems.append(f"zero-shot {label}: {leaked} masked in train")
    realized = {}
    for m, n in ((1, 5), (1, 25), (1, 50), (1, 100)):
        s = eh.split_imbalanced(ds, (m, n), seed=1)
        s.check_partition(universe)
        pool = [a for a in universe if a not in set(s.test)]
        k = min(malicious(pool) // m, (len(pool) - malicious(pool)) // n)
        got = (malicious(s.train), len(s.train) - malicious(s.train))
        realized[f"{m}:{n}"] = got
        if got != (k * m, k * n):
            problems.append(f"ratio {m}:{n} realized {got}, expected {(k * m, k * n)}")
    for n_labeled in (10, 20, 50, 100, 200, 500):
        s = eh.split_few_shot(ds, n_labeled, seed=1)
        s.check_partition(universe)
        if len(s.train) != n_labeled:
            problems.append(f"few-shot {n_labeled}: got {len(s.train)}")
    s = eh.split_standard(ds, seed=1)
    s.check_partition(universe)
    record(8, "protocol guarantees", not problems,
           f"imbalanced train counts {realized}; {'; '.join(problems) or 'all partitions hold'}",
           time.perf_counter() - t, 30)


# ---------------------------------------------------------------- 9

def test_criterion_9_distance_analysis():
    t = time.perf_counter()
    ds = generate_dataset(default_spec(per_class=30, seed=7))
    addresses = ds.labeled_addresses()
    X = normalize_minmax(attribute_matrix([build_ego_graph(ds, a) for a in addresses]))[0]
    group_of = [eh.class_of(ds.labels[a], "multiclass") for a in addresses]
    order = eh.class_names("multiclass", list(ds.labels.values()))
    groups = eh.sample_groups(X, group_of, order, per_group=15, seed=7)
    dm = eh.representation_distance(groups)
    want = oracles.minmax_matrix(oracles.pairwise_mean_distance([groups[g] for g in dm.groups]))
    M = dm.matrix
    err = float(np.abs(M - want).max())
    ok = (np.array_equal(M, M.T) and np.nanmin(M) == 0.0 and np.nanmax(M) == 1.0
          and err <= 1e-9 and len(dm.groups) == 7)
    record(9, "distance analysis", ok,
           f"{len(dm.groups)}x{len(dm.groups)} matrix, symmetric={np.array_equal(M, M.T)}, "
           f"min {np.nanmin(M):g} max {np.nanmax(M):g}, oracle err {err:.1e}",
           time.perf_counter() - t, 10)


# ---------------------------------------------------------------- 10

def test_criterion_10_determinism(tmp_path, capsys):
    t = time.perf_counter()
    synth = spec_to_dict(default_spec(per_class=10, seed=7))
    cfg = tmp_path / "fixture.yaml"
    cfg.write_text(yaml.safe_dump({"data": {"synth": synth}}))
    codes = [cli_main(["evaluate", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / r)])
             for r in ("a", "b")]
    a, b = (json.loads((tmp_path / r / "report.json").read_text()) for r in ("a", "b"))
    same = codes == [0, 0] and eh.report_json(eh.strip_wall_clock(a)) == eh.report_json(eh.strip_wall_clock(b))
    record(10, "determinism", same,
           f"exit codes {codes}, report.json identical without wall clock: {same}",
           time.perf_counter() - t, 600)
