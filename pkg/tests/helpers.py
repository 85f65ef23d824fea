"""Small in-memory datasets and loss closures shared by the tests."""

from __future__ import annotations

import numpy as np

from tailsearch import autodiff as ad
from tailsearch.contrastive import igcl_loss, ktcl_loss, secl_loss
from tailsearch.encoder import HyperParams
from tailsearch.graph import Dataset, build_graph, validate_forest
from tailsearch.training import SearchModel, TrainConfig, bce_loss, make_pretrain_batch

FOREST = [
    {"id": "a", "parent_id": None}, {"id": "a.0", "parent_id": "a"},
    {"id": "a.1", "parent_id": "a"}, {"id": "a.0.0", "parent_id": "a.0"},
    {"id": "a.0.1", "parent_id": "a.0"}, {"id": "a.1.0", "parent_id": "a.1"},
    {"id": "b", "parent_id": None}, {"id": "b.0", "parent_id": "b"},
    {"id": "b.0.0", "parent_id": "b.0"}, {"id": "b.0.1", "parent_id": "b.0"},
]
LEAVES = ["a.0.0", "a.0.1", "a.1.0", "b.0.0", "b.0.1"]


def tiny_dataset(seed: int, n_queries: int = 4, n_services: int = 4, n_attrs: int = 3
                 ) -> Dataset:
    """Random bipartite scenario; every query correlates with s0 so anchors exist."""
    rng = np.random.default_rng(seed)
    exposure = rng.permutation(n_queries) * 10 + 1
    nodes = [{"id": f"q{i}", "kind": "query", "features": rng.normal(size=n_attrs).tolist(),
              "exposure": int(exposure[i]), "intention_id": str(rng.choice(LEAVES))}
             for i in range(n_queries)]
    nodes += [{"id": f"s{j}", "kind": "service", "features": rng.normal(size=n_attrs).tolist(),
               "intention_id": str(rng.choice(LEAVES))} for j in range(n_services)]
    inter, corr = [], []
    for i in range(n_queries):
        for j in rng.choice(n_services, size=rng.integers(1, 3), replace=False):
            clicks = int(rng.integers(0, 5))
            inter.append((f"q{i}", f"s{j}", clicks, clicks + int(rng.integers(1, 5))))
        corr.append((f"q{i}", "s0", "city"))
        corr.append((f"q{i}", f"s{rng.integers(n_services)}", "brand"))
    graph, report = build_graph(inter, corr, nodes)
    forest = validate_forest(FOREST)
    pairs = [(f"q{i}", f"s{j}") for i in range(n_queries) for j in range(n_services)]
    labels = [(q, s, int(rng.random() < 0.5)) for q, s in pairs]
    labels[0] = (labels[0][0], labels[0][1], 1)
    labels[1] = (labels[1][0], labels[1][1], 0)
    return Dataset(graph, report, forest, labels, labels[: len(labels) // 2], labels)


def tiny_model(seed: int, dim: int = 4, **train) -> SearchModel:
    hyper = HyperParams(embed_dim=dim, tree_levels=3, alpha=0.7, beta=0.3)
    cfg = TrainConfig(hyper=hyper, seed=seed, batch_size=8, head=1, n_hard=2, n_easy=2, **train)
    return SearchModel(tiny_dataset(seed), cfg)


def all_losses(model: SearchModel, batch) -> "callable":
    """f(leaves) -> {name: scalar Tensor} for every objective, from one shared forward."""
    tau = model.hyper.tau
    train = model.data.train
    labels = np.array([y for *_, y in train])

    def f(P):
        h, t = model.encode(P)
        st = {"head": h, "tail": t}
        ktcl, parts = ktcl_loss(batch.pairs, batch.shared_services, h, t, tau)
        secl = ad.constant(0.0)
        for side, groups in batch.secl_nodes.items():
            for nodes in groups.values():
                secl = secl + secl_loss(st[side], nodes, tau)
        tree = model.encode_tree(P)
        igcl = igcl_loss(h, tree, batch.igcl["head"], tau) + igcl_loss(t, tree, batch.igcl["tail"], tau)
        feats = model.pair_features(h, t, [(q, s) for q, s, _ in train])
        return {"ktcl_query": parts["query"], "ktcl_service": parts["service"], "ktcl": ktcl,
                "secl": secl, "igcl": igcl, "pretrain": model.pretrain_loss(P, batch)[0],
                "bce": bce_loss(model.logits(P, feats), labels)}
    return f


def gradient_errors(model: SearchModel, params: ad.ParameterSet, seed: int,
                    h: float = 1e-5, floor: float = 1e-6) -> dict[str, dict[str, float]]:
    """Relative error of analytic vs central-difference directional derivatives.

    One random direction per (loss, tensor); returns loss -> tensor -> error.
    """
    rng = np.random.default_rng(seed)
    batch = make_pretrain_batch(model, model.pairs, rng)
    f = all_losses(model, batch)
    leaves = params.leaves()
    losses = f(leaves)
    grads = {k: ad.backward(v, leaves) for k, v in losses.items()}
    arrays = dict(params.items())
    out: dict[str, dict[str, float]] = {k: {} for k in losses}
    for name, arr in arrays.items():
        v = rng.standard_normal(arr.shape)
        v /= np.linalg.norm(v)
        plus = f(ad.ParameterSet({**arrays, name: arr + h * v}).leaves())
        minus = f(ad.ParameterSet({**arrays, name: arr - h * v}).leaves())
        for k in losses:
            fd = (plus[k].item() - minus[k].item()) / (2 * h)
            an = float(np.sum(grads[k][name] * v))
            out[k][name] = abs(an - fd) / max(abs(an), abs(fd), floor)
    return out
