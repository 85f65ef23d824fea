"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import csv
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from helpers import all_losses, gradient_errors, tiny_model

from tailsearch import autodiff as ad
from tailsearch.cli import main
from tailsearch.contrastive import secl_loss
from tailsearch.encoder import (HyperParams, LayerStates, compile_graph, encode_intentions,
                                encode_nodes, init_graph_encoder, init_tree_encoder)
from tailsearch.graph import build_graph, validate_forest
from tailsearch.metrics import EvalRecord, auc, gauc, ndcg_at_k
from tailsearch.synthgen import Scenario, ScenarioConfig
from tailsearch.training import load_embeddings, make_pretrain_batch, retrieve_topk


@pytest.fixture
def announce(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return emit


def pair_count_auc(labels, scores):
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0)
               for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# 1 --------------------------------------------------------------------------

def test_1_gradient_oracle(announce):
    start = time.perf_counter()
    worst, where = 0.0, None
    for seed in range(100):
        m = tiny_model(seed)
        assert len(m.data.graph.nodes) == 8
        errs = gradient_errors(m, m.init_params(), seed, h=1e-5, floor=1e-5)
        for loss, per in errs.items():
            for name, e in per.items():
                if e > worst:
                    worst, where = e, (seed, loss, name)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    announce(1, ok, f"max rel err {worst:.2e} at {where}, {elapsed:.1f}s over 100 seeds")


# 2 --------------------------------------------------------------------------

def test_2_loss_identities(announce):
    single = ad.info_nce(ad.constant(np.array([0.3, -1.2, 0.5])),
                         ad.constant(np.array([-2.0, 0.7, 1.1])), [], 0.1).item()

    worst = 0.0
    for seed in range(10):
        m = tiny_model(seed)
        P = m.init_params().leaves()
        batch = make_pretrain_batch(m, m.pairs, np.random.default_rng(seed))
        parts = all_losses(m, batch)(P)
        want = parts["ktcl"].item() + m.hyper.alpha * parts["secl"].item() + \
            m.hyper.beta * parts["igcl"].item()
        worst = max(worst, abs(parts["pretrain"].item() - want),
                    abs(parts["ktcl"].item() - parts["ktcl_query"].item() - parts["ktcl_service"].item()))

    layer = ad.constant(np.ones((2, 3)))
    st = LayerStates("head", ["a", "b"], {"a": 0, "b": 1}, [layer, layer], layer)
    secl = secl_loss(st, ["a", "b"], 0.1).item()

    ok = abs(single) < 1e-9 and worst < 1e-10 and abs(secl - 2 * math.log(2)) < 1e-8
    announce(2, ok, f"singleton {abs(single):.1e}, decomposition {worst:.1e}, "
                    f"two-node SECL err {abs(secl - 2 * math.log(2)):.1e}")


# 3 --------------------------------------------------------------------------

def test_3_metric_oracles(announce):
    rng = np.random.default_rng(2024)
    auc_bad = 0
    for case in range(1000):
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 10, n) / 7.0 if case % 2 else rng.normal(size=n)
        auc_bad += auc(y, s) != float(pair_count_auc(y.tolist(), s.tolist()))

    rows, num, den = [], Fraction(0), 0
    for g in range(30):
        n = int(rng.integers(2, 15))
        ys = rng.integers(0, 2, n)
        sc = rng.integers(0, 6, n) / 5.0
        rows += [EvalRecord(f"q{g}", f"s{i}", int(ys[i]), float(sc[i]), "tail") for i in range(n)]
        if 0 < ys.sum() < n:
            num += n * pair_count_auc(ys.tolist(), sc.tolist())
            den += n
    gauc_ok = gauc(rows)[0] == float(num / den)

    worst = ndcg_at_k([EvalRecord("q", "s1", 0, 0.9, "head"), EvalRecord("q", "s2", 1, 0.1, "head")], 2)
    ndcg_err = abs(worst - 1 / math.log2(3))

    mono_bad = 0
    for _ in range(200):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(-24, 25, n) / 8.0
        base = auc(y, s)
        mono_bad += (auc(y, np.exp(s)) != base) + (auc(y, 3 * s + 7) != base) + \
            (auc(y, s ** 3) != base)

    ok = auc_bad == 0 and gauc_ok and ndcg_err < 1e-9 and mono_bad == 0
    announce(3, ok, f"AUC mismatches {auc_bad}/1000, GAUC exact {gauc_ok}, "
                    f"NDCG@2 err {ndcg_err:.1e}, monotone mismatches {mono_bad}")


# 4 --------------------------------------------------------------------------

def test_4_encoder_hand_checks(announce):
    relu = lambda x: np.maximum(x, 0.0)  # noqa: E731
    nodes = [{"id": "q", "kind": "query", "features": [0.5], "exposure": 1},
             {"id": "s", "kind": "service", "features": [-1.0]}]
    g = build_graph([("q", "s", 3, 10)], [], nodes)[0]
    hyper = HyperParams(layers=1, embed_dim=2)
    P = ad.ParameterSet(init_graph_encoder("g", 2, 1, hyper, np.random.default_rng(0)))
    st = encode_nodes(compile_graph(g, {"q": 0, "s": 1}), P.leaves(), "g", hyper)
    W_in, emb = P["g.W_in"], P["g.emb"]
    W_agg, W_upd = P["g.layer0.W_agg"], P["g.layer0.W_upd"]
    e = np.array(g.edges[0].features)
    zq = W_in @ np.concatenate([emb[0], [0.5]])
    zs = W_in @ np.concatenate([emb[1], [-1.0]])
    zq1 = relu(W_upd @ np.concatenate([zq, np.tanh(W_agg @ np.concatenate([zs, e]))]))
    zs1 = relu(W_upd @ np.concatenate([zs, np.tanh(W_agg @ np.concatenate([zq, e]))]))
    graph_err = np.max(np.abs(st.layers[1].data - np.array([zq1, zs1])))

    forest = validate_forest([{"id": "r", "parent_id": None}, {"id": "a", "parent_id": "r"},
                              {"id": "b", "parent_id": "r"}])
    th = HyperParams(embed_dim=2, tree_levels=3)
    T = ad.ParameterSet(init_tree_encoder("tree", 3, th, np.random.default_rng(1)))
    out = encode_intentions(forest, T.leaves(), th)
    z = {k: T["tree.emb"][forest.index[k]] for k in "rab"}
    W = T["tree.W"]
    for _ in range(2):
        z = {"r": np.tanh(W @ (z["r"] + z["a"] + z["b"])), "a": np.tanh(W @ z["a"]),
             "b": np.tanh(W @ z["b"])}
    tree_err = max(np.max(np.abs(out.final.data[forest.index[k]] - z[k])) for k in "rab")

    deep = HyperParams(layers=3, embed_dim=4)
    PD = ad.ParameterSet(init_graph_encoder("g", 3, 1, deep, np.random.default_rng(3)))
    base = [{"id": "q0", "kind": "query", "features": [0.5], "exposure": 3},
            {"id": "s0", "kind": "service", "features": [-1.0]},
            {"id": "s1", "kind": "service", "features": [2.0]}]
    inter = [("q0", "s0", 1, 4), ("q0", "s1", 3, 3)]
    idx = {"q0": 0, "s0": 1, "s1": 2}
    a = encode_nodes(compile_graph(build_graph(inter, [("q0", "s1", "city")], base)[0], idx),
                     PD.leaves(), "g", deep)
    b = encode_nodes(compile_graph(build_graph(inter[::-1], [("q0", "s1", "city")], base)[0], idx),
                     PD.leaves(), "g", deep)
    mean_err = np.max(np.abs(a.readout.data - np.mean([x.data for x in a.layers], axis=0)))
    perm_err = np.max(np.abs(a.readout.data - b.readout.data))

    ok = graph_err < 1e-6 and tree_err < 1e-6 and mean_err < 1e-10 and perm_err < 1e-10
    announce(4, ok, f"graph {graph_err:.1e}, tree {tree_err:.1e}, readout mean {mean_err:.1e}, "
                    f"permutation {perm_err:.1e}")


# 5 --------------------------------------------------------------------------

def test_5_skew_calibration(announce):
    share = Scenario(ScenarioConfig()).pv_share(0.01)
    announce(5, share >= 0.85, f"top-1% PV share {share:.4f}")


# 6 --------------------------------------------------------------------------

def test_6_directional_ablation(tmp_path, announce):
    start = time.perf_counter()
    assert main(["ablate", "--out", str(tmp_path / "ablate")]) == 0
    elapsed = time.perf_counter() - start
    with open(tmp_path / "ablate" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    val = {(r["arm"], int(r["seed"]), r["slice"]): float(r["auc"]) for r in rows}
    seeds = sorted({int(r["seed"]) for r in rows})
    tail_wins = sum(val["full", s, "tail"] >= val["wo_all", s, "tail"] for s in seeds)
    overall_ok = sum(val["full", s, "overall"] >= val["wo_all", s, "overall"] - 0.01 for s in seeds)
    ok = len(seeds) == 5 and tail_wins >= 4 and overall_ok >= 4 and elapsed < 1800
    detail = ", ".join(f"s{s} tail {val['full', s, 'tail']:.4f}/{val['wo_all', s, 'tail']:.4f}"
                       for s in seeds)
    announce(6, ok, f"tail wins {tail_wins}/5, overall within 0.01 {overall_ok}/5, "
                    f"{elapsed:.0f}s; full/wo_all {detail}")


# 7 and 8 share one pipeline run -------------------------------------------

def pipeline(root, seed):
    data = root / "data"
    steps = [["gen-data", "--out", str(data)],
             ["pretrain", "--data", str(data), "--out", str(root / "pre")],
             ["finetune", "--data", str(data), "--checkpoint", str(root / "pre" / "checkpoint.grca"),
              "--out", str(root / "ft")],
             ["eval", "--data", str(data), "--checkpoint", str(root / "ft" / "checkpoint.grca"),
              "--out", str(root / "eval")],
             ["export", "--data", str(data), "--checkpoint", str(root / "ft" / "checkpoint.grca"),
              "--out", str(root / "exp")]]
    for argv in steps:
        assert main(argv + ["--seed", str(seed)]) == 0, argv[0]


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    roots = [tmp_path_factory.mktemp(f"run{i}") for i in range(2)]
    for r in roots:
        pipeline(r, 11)
    return roots


def test_7_determinism(two_runs, announce, capsys):
    a, b = two_runs
    files = ["pre/checkpoint.grca", "ft/checkpoint.grca", "pre/pretrain_history.csv",
             "ft/finetune_history.csv", "eval/report.json", "eval/report.txt",
             "eval/predictions.tsv", "exp/embeddings.tsv"]
    files += sorted(str(p.relative_to(a)) for p in (a / "data").iterdir())
    diff = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    announce(7, not diff, f"{len(files)} artefacts compared, differing: {diff or 'none'}")


def exhaustive_topk(path, query_ids, qid):
    """Reparses the export and ranks every service by an exact rational inner product."""
    queries, services = {}, {}
    with open(path) as fh:
        for line in fh:
            nid, side, vec = line.rstrip("\n").split("\t")
            v = [float(x) for x in vec.split(",")]
            if nid in query_ids:
                queries[nid] = (side, v)
            else:
                services.setdefault(nid, {})[side] = v
    side, qv = queries[qid]
    other = "tail" if side == "head" else "head"
    scored = []
    for sid, sides in services.items():
        sv = sides[side] if side in sides else sides[other]
        exact = sum((Fraction(a * b) for a, b in zip(qv, sv)), Fraction(0))
        scored.append((sid, float(exact)))
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored


def test_8_retrieval_exact(two_runs, announce):
    root = two_runs[0]
    with open(root / "data" / "nodes.jsonl") as fh:
        query_ids = [r["id"] for r in map(json.loads, fh) if r["kind"] == "query"]
    table = load_embeddings(root / "exp" / "embeddings.tsv", query_ids)
    rng = np.random.default_rng(8)
    picks = rng.choice(len(query_ids), 100, replace=False)
    bad = 0
    for i in picks:
        qid = query_ids[int(i)]
        want = exhaustive_topk(root / "exp" / "embeddings.tsv", set(query_ids), qid)
        k = int(rng.integers(1, 25))
        bad += retrieve_topk(qid, k, table) != want[:k]
        bad += retrieve_topk(qid, math.inf, table) != want
    announce(8, bad == 0, f"{bad} mismatching rankings over 100 queries")
