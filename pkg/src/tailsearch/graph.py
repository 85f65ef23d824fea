"""Service search graph, head/tail split and intention forest.

The graph is bipartite: queries connect to services through interaction
edges (past clicks, carrying CTR) and correlation edges (shared city, brand or
category). Edge features use one fixed layout for both kinds::

    [ctr, log1p(clicks), is_city, is_brand, is_category]
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

QUERY = "query"
SERVICE = "service"
INTERACTION = "interaction"
CORRELATION = "correlation"
CORRELATION_TYPES = ("city", "brand", "category")
EDGE_FEATURES = 2 + len(CORRELATION_TYPES)
DEFAULT_N_ATTRS = 11
MAX_LEVELS = 5


class GraphError(ValueError):
    """Malformed or inconsistent graph input."""


class ForestError(ValueError):
    """Intention records violating the tree definition."""


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    features: tuple[float, ...]
    exposure: float | None = None
    intention_id: str | None = None


@dataclass(frozen=True)
class Edge:
    query_id: str
    service_id: str
    kind: str
    features: tuple[float, ...]
    correlation_type: str | None = None


def interaction_features(clicks: float, impressions: float,
                         log_clicks: bool = True) -> tuple[float, ...]:
    ctr = clicks / impressions if impressions else 0.0
    vol = math.log1p(clicks) if log_clicks else 0.0
    return (ctr, vol) + (0.0,) * len(CORRELATION_TYPES)


def correlation_features(ctype: str) -> tuple[float, ...]:
    onehot = tuple(1.0 if t == ctype else 0.0 for t in CORRELATION_TYPES)
    return (0.0, 0.0) + onehot


class ServiceSearchGraph:
    """Immutable bipartite query-service graph."""

    def __init__(self, nodes: Iterable[Node], edges: Iterable[Edge]):
        self.nodes: dict[str, Node] = {}
        for n in nodes:
            if n.id in self.nodes:
                raise GraphError(f"duplicate node id {n.id!r}")
            self.nodes[n.id] = n
        self.edges: tuple[Edge, ...] = tuple(edges)
        adj: dict[str, list[tuple[str, tuple[float, ...]]]] = {i: [] for i in self.nodes}
        for e in self.edges:
            q, s = self.nodes.get(e.query_id), self.nodes.get(e.service_id)
            if q is None or s is None:
                raise GraphError(f"edge ({e.query_id}, {e.service_id}) has a dangling endpoint")
            if q.kind != QUERY or s.kind != SERVICE:
                raise GraphError(f"edge ({e.query_id}, {e.service_id}) is not query-service")
            adj[e.query_id].append((e.service_id, e.features))
            adj[e.service_id].append((e.query_id, e.features))
        self.adjacency = {k: tuple(v) for k, v in adj.items()}
        widths = {len(n.features) for n in self.nodes.values()}
        if len(widths) > 1:
            raise GraphError(f"attribute length differs across nodes: {sorted(widths)}")

    @cached_property
    def queries(self) -> tuple[str, ...]:
        return tuple(sorted(i for i, n in self.nodes.items() if n.kind == QUERY))

    @cached_property
    def services(self) -> tuple[str, ...]:
        return tuple(sorted(i for i, n in self.nodes.items() if n.kind == SERVICE))

    @property
    def n_attrs(self) -> int:
        for n in self.nodes.values():
            return len(n.features)
        return 0

    def isolated(self) -> list[str]:
        return sorted(i for i, nbrs in self.adjacency.items() if not nbrs)

    def is_bipartite(self) -> bool:
        return all(self.nodes[e.query_id].kind == QUERY
                   and self.nodes[e.service_id].kind == SERVICE for e in self.edges)

    def induced_by_queries(self, queries: Iterable[str], extra: Iterable[str] = ()
                           ) -> "ServiceSearchGraph":
        """Subgraph holding ``queries``, their edges and every service they touch."""
        keep = set(queries)
        edges = [e for e in self.edges if e.query_id in keep]
        services = {e.service_id for e in edges} | set(extra)
        nodes = [n for i, n in self.nodes.items() if i in keep or i in services]
        return ServiceSearchGraph(nodes, edges)


@dataclass
class BuildReport:
    n_queries: int
    n_services: int
    n_interaction_edges: int
    n_correlation_edges: int
    isolated_nodes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "n_services": self.n_services,
            "n_interaction_edges": self.n_interaction_edges,
            "n_correlation_edges": self.n_correlation_edges,
            "n_isolated": len(self.isolated_nodes),
            "isolated_nodes": self.isolated_nodes,
        }


def build_graph(interactions: Iterable[Sequence], correlations: Iterable[Sequence],
                nodes: Iterable[Mapping], log_clicks: bool = True
                ) -> tuple[ServiceSearchGraph, BuildReport]:
    """Assemble a graph from raw records.

    ``interactions`` rows are (query_id, service_id, clicks, impressions);
    duplicate pairs are summed before CTR is computed. ``correlations`` rows
    are (query_id, service_id, correlation_type). ``nodes`` follow the
    nodes.jsonl schema.
    """
    node_objs = [_parse_node(r) for r in nodes]
    known = {n.id: n for n in node_objs}

    def check(qid, sid, where):
        for i in (qid, sid):
            if i not in known:
                raise GraphError(f"{where}: unknown node id {i!r}")

    totals: dict[tuple[str, str], list[float]] = {}
    for row in interactions:
        if len(row) != 4:
            raise GraphError(f"interaction record needs 4 fields, got {list(row)!r}")
        qid, sid = str(row[0]), str(row[1])
        try:
            clicks, imps = float(row[2]), float(row[3])
        except ValueError as exc:
            raise GraphError(f"interaction record {list(row)!r}: {exc}") from None
        check(qid, sid, "interaction")
        if clicks < 0 or imps < 0:
            raise GraphError(f"negative counts in interaction ({qid}, {sid})")
        acc = totals.setdefault((qid, sid), [0.0, 0.0])
        acc[0] += clicks
        acc[1] += imps

    edges: list[Edge] = []
    for (qid, sid), (clicks, imps) in sorted(totals.items()):
        if imps == 0 and clicks > 0:
            raise GraphError(f"interaction ({qid}, {sid}) has clicks but zero impressions")
        if clicks > imps:
            raise GraphError(f"interaction ({qid}, {sid}) has more clicks than impressions")
        edges.append(Edge(qid, sid, INTERACTION, interaction_features(clicks, imps, log_clicks)))
    n_inter = len(edges)

    seen = set()
    for row in correlations:
        if len(row) != 3:
            raise GraphError(f"correlation record needs 3 fields, got {list(row)!r}")
        qid, sid, ctype = str(row[0]), str(row[1]), str(row[2])
        check(qid, sid, "correlation")
        if ctype not in CORRELATION_TYPES:
            raise GraphError(f"unknown correlation type {ctype!r}")
        if (qid, sid, ctype) in seen:
            continue
        seen.add((qid, sid, ctype))
        edges.append(Edge(qid, sid, CORRELATION, correlation_features(ctype), ctype))

    graph = ServiceSearchGraph(node_objs, edges)
    report = BuildReport(len(graph.queries), len(graph.services), n_inter,
                         len(edges) - n_inter, graph.isolated())
    return graph, report


def _parse_node(rec: Mapping) -> Node:
    try:
        nid, kind, feats = str(rec["id"]), rec["kind"], rec["features"]
    except KeyError as exc:
        raise GraphError(f"node record missing field {exc}: {dict(rec)!r}") from None
    if kind not in (QUERY, SERVICE):
        raise GraphError(f"node {nid!r}: kind must be query or service, got {kind!r}")
    exposure = rec.get("exposure")
    if kind == QUERY:
        if exposure is None or float(exposure) < 0:
            raise GraphError(f"query {nid!r} needs a non-negative exposure")
        exposure = float(exposure)
    elif exposure is not None:
        raise GraphError(f"service {nid!r} must not carry an exposure")
    return Node(nid, kind, tuple(float(x) for x in feats), exposure, rec.get("intention_id"))


# ---------------------------------------------------------------------------
# head/tail split

@dataclass(frozen=True)
class HeadTailSplit:
    head_queries: frozenset[str]
    tail_queries: frozenset[str]
    head_graph: ServiceSearchGraph
    tail_graph: ServiceSearchGraph

    def side_of(self, query_id: str) -> str:
        if query_id in self.head_queries:
            return "head"
        if query_id in self.tail_queries:
            return "tail"
        raise KeyError(f"query {query_id!r} is in neither split")


def rank_by_exposure(graph: ServiceSearchGraph) -> list[str]:
    """Queries by exposure descending, ties broken by id."""
    return sorted(graph.queries, key=lambda q: (-graph.nodes[q].exposure, q))


def split_head_tail(graph: ServiceSearchGraph, head: int | float) -> HeadTailSplit:
    """Top ``head`` queries by exposure form the head.

    An int is a count; a float in (0, 1) is a fraction of all queries
    (rounded, at least one). Services with no edges at all join the tail
    graph so that every node has an encoder.
    """
    n = len(graph.queries)
    if isinstance(head, float) and 0 < head < 1:
        k = max(1, int(round(head * n)))
    else:
        k = int(head)
    if k < 1:
        raise GraphError("head_count must be at least 1")
    if k >= n:
        raise GraphError(f"head_count {k} must be smaller than the {n} queries")
    ranked = rank_by_exposure(graph)
    heads, tails = ranked[:k], ranked[k:]
    lonely = [i for i in graph.services if not graph.adjacency[i]]
    return HeadTailSplit(frozenset(heads), frozenset(tails),
                         graph.induced_by_queries(heads),
                         graph.induced_by_queries(tails, extra=lonely))


# ---------------------------------------------------------------------------
# intention forest

@dataclass(frozen=True)
class Intention:
    id: str
    parent: str | None
    children: tuple[str, ...]
    level: int
    tree_id: str


class IntentionForest:
    def __init__(self, nodes: Mapping[str, Intention], max_levels: int):
        self.nodes = dict(nodes)
        self.max_levels = max_levels

    def __contains__(self, iid: str) -> bool:
        return iid in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def ids(self) -> tuple[str, ...]:
        """Intention ids ordered by (tree, level, id); row order of embeddings."""
        return tuple(sorted(self.nodes, key=lambda i: (self.nodes[i].tree_id,
                                                       self.nodes[i].level, i)))

    @cached_property
    def index(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.ids)}

    @cached_property
    def roots(self) -> tuple[str, ...]:
        return tuple(i for i in self.ids if self.nodes[i].parent is None)

    def depth(self) -> int:
        return max((n.level for n in self.nodes.values()), default=0)

    def at_level(self, level: int) -> list[str]:
        return [i for i in self.ids if self.nodes[i].level == level]

    def descendants(self, iid: str) -> set[str]:
        out, stack = set(), list(self.nodes[iid].children)
        while stack:
            c = stack.pop()
            out.add(c)
            stack.extend(self.nodes[c].children)
        return out


def validate_forest(records: Iterable[Mapping], max_levels: int = MAX_LEVELS
                    ) -> IntentionForest:
    """Check raw {"id", "parent_id", optional "level"} records and build a forest."""
    parent: dict[str, str | None] = {}
    declared: dict[str, int] = {}
    for rec in records:
        iid = str(rec["id"])
        if iid in parent:
            raise ForestError(f"intention {iid!r} declared twice (multiple parents)")
        pid = rec.get("parent_id")
        parent[iid] = None if pid is None else str(pid)
        if rec.get("level") is not None:
            declared[iid] = int(rec["level"])
    for iid, pid in parent.items():
        if pid == iid:
            raise ForestError(f"intention {iid!r} is its own parent (cycle)")
        if pid is not None and pid not in parent:
            raise ForestError(f"intention {iid!r} references unknown parent {pid!r}")

    children: dict[str, list[str]] = defaultdict(list)
    for iid, pid in parent.items():
        if pid is not None:
            children[pid].append(iid)

    level: dict[str, int] = {}
    tree: dict[str, str] = {}
    roots = sorted(i for i, p in parent.items() if p is None)
    stack = [(r, 1, r) for r in roots]
    while stack:
        iid, lvl, root = stack.pop()
        level[iid], tree[iid] = lvl, root
        stack.extend((c, lvl + 1, root) for c in children[iid])
    unreached = sorted(set(parent) - set(level))
    if unreached:
        raise ForestError(f"cycle among intentions {unreached[:5]}")
    for iid, lvl in level.items():
        if lvl > max_levels:
            raise ForestError(f"intention {iid!r} sits at level {lvl} > max {max_levels}")
        if iid in declared and declared[iid] != lvl:
            raise ForestError(f"intention {iid!r} declares level {declared[iid]}, computed {lvl}")
    nodes = {i: Intention(i, parent[i], tuple(sorted(children[i])), level[i], tree[i])
             for i in parent}
    return IntentionForest(nodes, max_levels)


def ancestors(forest: IntentionForest, iid: str) -> list[str]:
    """[iid, parent, grandparent, ..., root]."""
    if iid not in forest.nodes:
        raise KeyError(f"unknown intention {iid!r}")
    path = [iid]
    while forest.nodes[path[-1]].parent is not None:
        path.append(forest.nodes[path[-1]].parent)
    return path


# ---------------------------------------------------------------------------
# file loaders

def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_tsv(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [row for row in csv.reader(fh, delimiter="\t") if row]


def read_labels(path: Path) -> list[tuple[str, str, int]]:
    out = []
    for row in read_tsv(path):
        if len(row) != 3 or row[2] not in ("0", "1"):
            raise GraphError(f"{path.name}: bad label record {row!r}")
        out.append((row[0], row[1], int(row[2])))
    return out


@dataclass
class Dataset:
    """Everything loaded from a data directory."""

    graph: ServiceSearchGraph
    report: BuildReport
    forest: IntentionForest
    train: list[tuple[str, str, int]]
    val: list[tuple[str, str, int]]
    test: list[tuple[str, str, int]]


def load_dataset(root: str | Path, log_clicks: bool = True,
                 max_levels: int = MAX_LEVELS) -> Dataset:
    root = Path(root)
    needed = ["nodes.jsonl", "interactions.tsv", "correlations.tsv", "intentions.jsonl",
              "train.tsv", "val.tsv", "test.tsv"]
    for name in needed:
        if not (root / name).exists():
            raise FileNotFoundError(f"missing input: expected {root / name}")
    nodes = read_jsonl(root / "nodes.jsonl")
    graph, report = build_graph(read_tsv(root / "interactions.tsv"),
                                read_tsv(root / "correlations.tsv"), nodes, log_clicks)
    forest = validate_forest(read_jsonl(root / "intentions.jsonl"), max_levels)
    for n in graph.nodes.values():
        if n.intention_id is not None and n.intention_id not in forest:
            raise GraphError(f"node {n.id!r} references unknown intention {n.intention_id!r}")
    splits = [read_labels(root / f"{s}.tsv") for s in ("train", "val", "test")]
    for recs in splits:
        for q, s, _ in recs:
            if q not in graph.nodes or s not in graph.nodes:
                raise GraphError(f"label ({q}, {s}) references an unknown node")
    return Dataset(graph, report, forest, *splits)


def node_attributes(graph: ServiceSearchGraph, ids: Sequence[str]) -> np.ndarray:
    return np.array([graph.nodes[i].features for i in ids], dtype=np.float64).reshape(
        len(ids), graph.n_attrs)
