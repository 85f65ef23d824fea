"""Anchor-pair mining and the three contrastive objectives.

* knowledge transfer (KTCL): tail query readouts are pulled toward their
  anchor head query against the other heads in the batch, and each shared
  service's head/tail encodings are aligned in both directions;
* structure enhancement (SECL): each layer-l state is contrasted against the
  node's layer-0 state, other batch members being negatives;
* intention generalisation (IGCL): a node's readout is pulled toward every
  intention on its leaf-to-root path, against same-level intentions from the
  same tree (hard) and other trees (easy).

All losses are sums over anchors, as InfoNCE terms whose denominators include
the positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import IntentionEmbeddings, LayerStates
from .graph import (CORRELATION, HeadTailSplit, IntentionForest, ServiceSearchGraph,
                    ancestors)


@dataclass(frozen=True)
class AnchorPair:
    tail_query_id: str
    head_query_id: str
    relevance: float


def _attr_cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def correlation_keys(graph: ServiceSearchGraph) -> dict[str, set[tuple[str, str]]]:
    """query -> {(correlation type, service)} from its correlation edges.

    Two queries share a correlation value exactly when they hold the same key:
    both match one service on the same attribute.
    """
    keys: dict[str, set[tuple[str, str]]] = {q: set() for q in graph.queries}
    for e in graph.edges:
        if e.kind == CORRELATION:
            keys[e.query_id].add((e.correlation_type, e.service_id))
    return keys


def mine_anchor_pairs(split: HeadTailSplit, graph: ServiceSearchGraph,
                      tie_tol: float = 1e-12) -> tuple[list[AnchorPair], int]:
    """Pick one head partner per tail query.

    Candidates share at least one correlation value with the tail query; the
    most attribute-similar candidate wins, with exposure and then id breaking
    ties. Returns the pairs and the number of tail queries skipped.
    """
    keys = correlation_keys(graph)
    by_key: dict[tuple[str, str], list[str]] = {}
    for h in sorted(split.head_queries):
        for k in keys[h]:
            by_key.setdefault(k, []).append(h)
    pairs, skipped = [], 0
    for t in sorted(split.tail_queries):
        cands = sorted({h for k in keys[t] for h in by_key.get(k, ())})
        if not cands:
            skipped += 1
            continue
        xt = np.asarray(graph.nodes[t].features)
        rel = {h: _attr_cos(xt, np.asarray(graph.nodes[h].features)) for h in cands}
        best = max(rel.values())
        top = [h for h in cands if rel[h] >= best - tie_tol]
        chosen = min(top, key=lambda h: (-graph.nodes[h].exposure, h))
        pairs.append(AnchorPair(t, chosen, rel[chosen]))
    return pairs, skipped


def write_anchor_pairs(pairs: Sequence[AnchorPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.tail_query_id}\t{p.head_query_id}\t{p.relevance:.9g}\n")


# ---------------------------------------------------------------------------
# KTCL

def ktcl_loss(pairs: Sequence[AnchorPair], shared_services: Sequence[str],
              head: LayerStates, tail: LayerStates, tau: float) -> tuple[Tensor, dict]:
    """Query-side transfer term plus two-way service alignment.

    Returns the total and a dict with the ``query`` and ``service`` parts.
    """
    parts = {}
    if pairs:
        heads = sorted({p.head_query_id for p in pairs})
        pos = [heads.index(p.head_query_id) for p in pairs]
        anchors = ad.gather(tail.readout, tail.rows([p.tail_query_id for p in pairs]))
        cands = ad.gather(head.readout, head.rows(heads))
        parts["query"] = ad.sum(ad.info_nce_rows(anchors, cands, pos, tau))
    else:
        parts["query"] = ad.constant(0.0)
    if shared_services:
        missing = [s for s in shared_services if s not in head.index or s not in tail.index]
        if missing:
            raise KeyError(f"services lacking a head or tail embedding: {missing[:5]}")
        zh = ad.gather(head.readout, head.rows(shared_services))
        zt = ad.gather(tail.readout, tail.rows(shared_services))
        diag = np.arange(len(shared_services))
        parts["service"] = ad.sum(ad.info_nce_rows(zh, zt, diag, tau)) + \
            ad.sum(ad.info_nce_rows(zt, zh, diag, tau))
    else:
        parts["service"] = ad.constant(0.0)
    return parts["query"] + parts["service"], parts


# ---------------------------------------------------------------------------
# SECL

def secl_loss(states: LayerStates, batch: Sequence[str], tau: float) -> Tensor:
    """Layer-l versus layer-0 contrast, averaged over l = 1..L, summed over the batch."""
    n_layers = len(states.layers) - 1
    if n_layers < 1:
        raise ValueError("SECL needs at least one GNN layer; set alpha=0 when L=0")
    if not batch:
        return ad.constant(0.0)
    rows = states.rows(batch)
    anchors = ad.gather(states.layers[0], rows)
    diag = np.arange(len(batch))
    total = None
    for z in states.layers[1:]:
        term = ad.sum(ad.info_nce_rows(anchors, ad.gather(z, rows), diag, tau))
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / n_layers)


# ---------------------------------------------------------------------------
# IGCL

@dataclass
class IntentionTargets:
    """Positives and sampled negatives for one node."""

    node_id: str
    path: list[str]
    negatives: list[list[str]]
    dropped: int = 0


def igcl_negatives(forest: IntentionForest, leaf: str, path: Sequence[str] | None,
                   n_hard: int, n_easy: int, rng: np.random.Generator,
                   level_anchor: str = "positive") -> list[list[str]]:
    """Negative intentions for each positive on ``path`` (leaf first).

    Hard negatives share the node's tree, easy ones come from other trees; both
    sit at the positive's level (``level_anchor="positive"``) or at the leaf's
    level (``"leaf"``). The positive, its ancestors and descendants, and the
    node's own path are never sampled.
    """
    if level_anchor not in ("positive", "leaf"):
        raise ValueError("level_anchor must be 'positive' or 'leaf'")
    path = list(path) if path is not None else ancestors(forest, leaf)
    out = []
    for j in path:
        hard, easy = _negative_pools(forest, leaf, tuple(path), j, level_anchor)
        picked = []
        if hard:
            picked += list(rng.choice(hard, min(n_hard, len(hard)), replace=False))
        if easy:
            picked += list(rng.choice(easy, min(n_easy, len(easy)), replace=False))
        out.append([str(i) for i in picked])
    return out


def _negative_pools(forest: IntentionForest, leaf: str, path: tuple[str, ...], j: str,
                    level_anchor: str) -> tuple[list[str], list[str]]:
    cache = forest.__dict__.setdefault("_negative_pool_cache", {})
    key = (leaf, path, j, level_anchor)
    if key not in cache:
        tree = forest.nodes[leaf].tree_id
        level = forest.nodes[j].level if level_anchor == "positive" else forest.nodes[leaf].level
        banned = set(path) | {j} | set(ancestors(forest, j)) | forest.descendants(j)
        pool = [i for i in forest.at_level(level) if i not in banned]
        cache[key] = ([i for i in pool if forest.nodes[i].tree_id == tree],
                      [i for i in pool if forest.nodes[i].tree_id != tree])
    return cache[key]


def build_targets(forest: IntentionForest, node_intentions: Mapping[str, str | None],
                  nodes: Sequence[str], n_hard: int, n_easy: int,
                  rng: np.random.Generator, level_anchor: str = "positive"
                  ) -> tuple[list[IntentionTargets], int]:
    """Targets for each node carrying an intention; returns (targets, n_without)."""
    targets, without = [], 0
    for nid in nodes:
        leaf = node_intentions.get(nid)
        if leaf is None:
            without += 1
            continue
        path = ancestors(forest, leaf)
        negs = igcl_negatives(forest, leaf, path, n_hard, n_easy, rng, level_anchor)
        targets.append(IntentionTargets(nid, path, negs, sum(1 for n in negs if not n)))
    return targets, without


def igcl_loss(states: LayerStates, intentions: IntentionEmbeddings,
              targets: Sequence[IntentionTargets], tau: float) -> Tensor:
    """Sum over nodes of the path-averaged InfoNCE against intention embeddings.

    Positives whose negative set is empty contribute exactly zero (singleton
    denominator) and are skipped.
    """
    rows, pos, weights, masks = [], [], [], []
    n_int = len(intentions.ids)
    for t in targets:
        w = 1.0 / len(t.path)
        for j, negs in zip(t.path, t.negatives):
            if not negs:
                continue
            m = np.zeros(n_int, dtype=bool)
            m[intentions.index[j]] = True
            m[[intentions.index[k] for k in negs]] = True
            rows.append(states.index[t.node_id])
            pos.append(intentions.index[j])
            weights.append(w)
            masks.append(m)
    if not rows:
        return ad.constant(0.0)
    anchors = ad.gather(states.readout, rows)
    per_row = ad.info_nce_rows(anchors, intentions.final, pos, tau, np.array(masks))
    return ad.dot(per_row, ad.constant(np.array(weights)))


def info_nce_reference(anchor: np.ndarray, positive: np.ndarray,
                       negatives: Sequence[np.ndarray], tau: float) -> float:
    """Plain-float InfoNCE used as an independent check of the tape version."""
    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    scores = [cos(anchor, positive) / tau] + [cos(anchor, n) / tau for n in negatives]
    m = max(scores)
    return -(scores[0] - m - math.log(math.fsum(math.exp(s - m) for s in scores)))


@dataclass
class CLBatch:
    """One pre-training batch; every loss reads from the same node set."""

    pairs: list[AnchorPair]
    shared_services: list[str]
    secl_nodes: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    igcl: dict[str, list[IntentionTargets]] = field(default_factory=dict)
