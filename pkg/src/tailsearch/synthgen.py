"""Seeded desk-scale scenarios with Zipf query traffic and intention-driven clicks.

Each query and service hangs off one leaf of a randomly grown intention forest
and carries a latent vector drawn around its leaf's latent. Click probability
is ``sigmoid(affinity * cos(latent_q, latent_s) + bonus * shared_depth + bias)``
where ``shared_depth`` is the fraction of levels the two leaf intentions share.
Only noisy linear views of the latents (the 11 attributes) and the logged
sessions are written out; the latents stay in memory as the evaluation oracle.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graph import CORRELATION_TYPES


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    n_queries: int = 1000
    n_services: int = 200
    n_trees: int = 4
    max_depth: int = 5
    branching: int = 2
    zipf_exponent: float = 1.8
    sessions: int = 20000
    slate_size: int = 5
    label_noise: float = 0.05
    seed: int = 0
    n_attrs: int = 11
    latent_dim: int = 8
    attr_noise: float = 0.5
    node_noise: float = 0.5
    affinity: float = 4.0
    intention_bonus: float = 1.5
    click_bias: float = -2.5
    n_cities: int = 20
    corr_per_type: int = 3

    def validate(self) -> None:
        for name in ("n_queries", "n_services", "n_trees", "max_depth", "branching",
                     "sessions", "slate_size", "n_attrs", "latent_dim", "n_cities",
                     "corr_per_type"):
            if getattr(self, name) < 1:
                raise ScenarioError(f"{name} must be >= 1")
        if self.max_depth > 5:
            raise ScenarioError("max_depth must be <= 5")
        if self.zipf_exponent <= 0:
            raise ScenarioError("zipf_exponent must be > 0")
        if not 0 <= self.label_noise < 0.5:
            raise ScenarioError("label_noise must lie in [0, 0.5)")
        if self.n_trees > min(self.n_queries, self.n_services):
            raise ScenarioError(
                f"{self.n_trees} trees cannot each host a query and a service "
                f"({self.n_queries} queries, {self.n_services} services)")
        if self.slate_size > self.n_services:
            raise ScenarioError("slate_size exceeds n_services")


@dataclass
class LatentAffinity:
    """Hidden state used only to emit labels and rank oracles."""

    query_latent: np.ndarray
    service_latent: np.ndarray
    query_leaf: np.ndarray
    service_leaf: np.ndarray
    leaf_paths: list[list[int]]


class Scenario:
    """A generated scenario: intention forest, nodes, sessions and oracle."""

    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self._grow_forest()
        self._draw_nodes()
        self._draw_correlations()
        self._simulate_sessions()

    # -- forest ----------------------------------------------------------
    def _grow_forest(self) -> None:
        cfg, rng = self.config, self.rng
        self.int_ids: list[str] = []
        self.int_parent: list[int | None] = []
        self.int_level: list[int] = []
        lat: list[np.ndarray] = []
        for t in range(cfg.n_trees):
            frontier = [len(self.int_ids)]
            self.int_ids.append(f"i{t}")
            self.int_parent.append(None)
            self.int_level.append(1)
            lat.append(rng.standard_normal(cfg.latent_dim))
            for level in range(2, cfg.max_depth + 1):
                spread = 0.8 * 0.7 ** (level - 2)
                nxt = []
                for p in frontier:
                    for c in range(int(rng.integers(1, 2 * cfg.branching))):
                        nxt.append(len(self.int_ids))
                        self.int_ids.append(f"{self.int_ids[p]}.{c}")
                        self.int_parent.append(p)
                        self.int_level.append(level)
                        lat.append(lat[p] + spread * rng.standard_normal(cfg.latent_dim))
                frontier = nxt
        self.int_latent = np.array(lat)
        self.leaves = np.array([i for i, lv in enumerate(self.int_level) if lv == cfg.max_depth])
        self.leaf_paths = {}
        for leaf in self.leaves:
            path, cur = [], int(leaf)
            while cur is not None:
                path.append(cur)
                cur = self.int_parent[cur]
            self.leaf_paths[int(leaf)] = path

    def _ancestor_at(self, leaf: int, level: int) -> int:
        path = self.leaf_paths[leaf]
        return path[len(path) - min(level, len(path))]

    # -- nodes -----------------------------------------------------------
    def _draw_nodes(self) -> None:
        cfg, rng = self.config, self.rng
        self.query_ids = [f"q{i}" for i in range(cfg.n_queries)]
        self.service_ids = [f"s{i}" for i in range(cfg.n_services)]
        q_leaf = rng.choice(self.leaves, cfg.n_queries)
        s_leaf = rng.choice(self.leaves, cfg.n_services)
        # every tree hosts at least one query and one service
        tree_of = {int(leaf): self.leaf_paths[int(leaf)][-1] for leaf in self.leaves}
        roots = [i for i, p in enumerate(self.int_parent) if p is None]
        for t, root in enumerate(roots):
            own = [int(leaf) for leaf in self.leaves if tree_of[int(leaf)] == root]
            if not any(tree_of[int(x)] == root for x in q_leaf):
                q_leaf[t] = own[0]
            if not any(tree_of[int(x)] == root for x in s_leaf):
                s_leaf[t] = own[0]
        self.q_leaf, self.s_leaf = q_leaf.astype(int), s_leaf.astype(int)
        q_lat = self.int_latent[self.q_leaf] + cfg.node_noise * rng.standard_normal(
            (cfg.n_queries, cfg.latent_dim))
        s_lat = self.int_latent[self.s_leaf] + cfg.node_noise * rng.standard_normal(
            (cfg.n_services, cfg.latent_dim))
        proj = rng.standard_normal((cfg.n_attrs, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
        self.q_attr = q_lat @ proj.T + cfg.attr_noise * rng.standard_normal((cfg.n_queries, cfg.n_attrs))
        self.s_attr = s_lat @ proj.T + cfg.attr_noise * rng.standard_normal((cfg.n_services, cfg.n_attrs))
        self.latent = LatentAffinity(q_lat, s_lat, self.q_leaf, self.s_leaf,
                                     [self.leaf_paths[int(x)] for x in self.leaves])
        # query popularity: Zipf over a random rank order
        ranks = rng.permutation(cfg.n_queries) + 1
        w = ranks.astype(float) ** (-cfg.zipf_exponent)
        self.query_popularity = w / w.sum()
        # correlation attribute values; brand/category follow the intention tree
        brand_level = min(3, cfg.max_depth)
        cat_level = min(2, cfg.max_depth)
        self.q_corr = {
            "city": rng.integers(0, cfg.n_cities, cfg.n_queries),
            "brand": np.array([self._ancestor_at(x, brand_level) for x in self.q_leaf]),
            "category": np.array([self._ancestor_at(x, cat_level) for x in self.q_leaf]),
        }
        self.s_corr = {
            "city": rng.integers(0, cfg.n_cities, cfg.n_services),
            "brand": np.array([self._ancestor_at(x, brand_level) for x in self.s_leaf]),
            "category": np.array([self._ancestor_at(x, cat_level) for x in self.s_leaf]),
        }
        self._click_p = self._click_matrix()

    def _shared_depth(self) -> np.ndarray:
        depth = np.zeros((self.config.n_queries, self.config.n_services))
        for level in range(1, self.config.max_depth + 1):
            qa = np.array([self._ancestor_at(x, level) for x in self.q_leaf])
            sa = np.array([self._ancestor_at(x, level) for x in self.s_leaf])
            depth += qa[:, None] == sa[None, :]
        return depth / self.config.max_depth

    def _click_matrix(self) -> np.ndarray:
        cfg = self.config
        qn = self.latent.query_latent / np.linalg.norm(self.latent.query_latent, axis=1, keepdims=True)
        sn = self.latent.service_latent / np.linalg.norm(self.latent.service_latent, axis=1, keepdims=True)
        logit = cfg.affinity * (qn @ sn.T) + cfg.intention_bonus * self._shared_depth() + cfg.click_bias
        return 1.0 / (1.0 + np.exp(-logit))

    def _draw_correlations(self) -> None:
        cfg, rng = self.config, self.rng
        self.correlations: list[tuple[int, int, str]] = []
        for q in range(cfg.n_queries):
            for ctype in CORRELATION_TYPES:
                pool = np.flatnonzero(self.s_corr[ctype] == self.q_corr[ctype][q])
                if pool.size == 0:
                    continue
                take = rng.choice(pool, min(cfg.corr_per_type, pool.size), replace=False)
                self.correlations.extend((q, int(s), ctype) for s in np.sort(take))
        related = {}
        for q, s, _ in self.correlations:
            related.setdefault(q, set()).add(s)
        self.related = {q: np.array(sorted(v)) for q, v in related.items()}

    # -- traffic ---------------------------------------------------------
    def _simulate_sessions(self) -> None:
        cfg, rng = self.config, self.rng
        sess_query = rng.choice(cfg.n_queries, cfg.sessions, p=self.query_popularity)
        n_rel = cfg.slate_size // 2 + 1
        records = []
        for t, q in enumerate(sess_query):
            rel = self.related.get(int(q), np.array([], dtype=int))
            picked = list(rng.choice(rel, min(n_rel, rel.size), replace=False)) if rel.size else []
            rest = np.setdiff1d(np.arange(cfg.n_services), picked)
            picked += list(rng.choice(rest, cfg.slate_size - len(picked), replace=False))
            for s in picked:
                records.append((t, int(q), int(s)))
        self.records = np.array(records, dtype=np.int64)
        p = self._click_p[self.records[:, 1], self.records[:, 2]]
        self.clean_clicks = (rng.random(len(p)) < p).astype(int)
        flips = rng.random(len(p)) < cfg.label_noise
        self.labels = np.where(flips, 1 - self.clean_clicks, self.clean_clicks)
        n_train = int(round(0.8 * cfg.sessions))
        n_val = int(round(0.1 * cfg.sessions))
        self.period = np.where(self.records[:, 0] < n_train, 0,
                               np.where(self.records[:, 0] < n_train + n_val, 1, 2))
        train_sessions = sess_query[:n_train]
        self.exposure = np.bincount(train_sessions, minlength=cfg.n_queries)

    # -- oracle ----------------------------------------------------------
    def click_probability(self, query_id: str, service_id: str) -> float:
        return float(self._click_p[self._qidx(query_id), self._sidx(service_id)])

    def oracle_rank(self, query_id: str) -> list[str]:
        """Services by true click probability, descending; ties by id."""
        p = self._click_p[self._qidx(query_id)]
        order = sorted(range(len(p)), key=lambda s: (-p[s], self.service_ids[s]))
        return [self.service_ids[s] for s in order]

    def oracle_label(self, query_id: str, service_id: str) -> int:
        """Noise-free relevance: 1 when the true click probability is >= 0.5."""
        return int(self.click_probability(query_id, service_id) >= 0.5)

    def _qidx(self, query_id: str) -> int:
        try:
            i = int(query_id[1:]) if query_id.startswith("q") else -1
        except ValueError:
            i = -1
        if not 0 <= i < self.config.n_queries:
            raise KeyError(f"unknown query {query_id!r}")
        return i

    def _sidx(self, service_id: str) -> int:
        try:
            i = int(service_id[1:]) if service_id.startswith("s") else -1
        except ValueError:
            i = -1
        if not 0 <= i < self.config.n_services:
            raise KeyError(f"unknown service {service_id!r}")
        return i

    def pv_share(self, top_fraction: float = 0.01) -> float:
        k = max(1, int(round(top_fraction * self.config.n_queries)))
        pv = np.sort(self.exposure)[::-1]
        return float(pv[:k].sum() / max(pv.sum(), 1))

    # -- output ----------------------------------------------------------
    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg = self.config
        with open(out / "nodes.jsonl", "w", encoding="utf-8") as fh:
            for i, qid in enumerate(self.query_ids):
                fh.write(json.dumps({
                    "id": qid, "kind": "query",
                    "features": [round(float(x), 6) for x in self.q_attr[i]],
                    "exposure": int(self.exposure[i]),
                    "intention_id": self.int_ids[self.q_leaf[i]],
                }) + "\n")
            for i, sid in enumerate(self.service_ids):
                fh.write(json.dumps({
                    "id": sid, "kind": "service",
                    "features": [round(float(x), 6) for x in self.s_attr[i]],
                    "intention_id": self.int_ids[self.s_leaf[i]],
                }) + "\n")
        with open(out / "intentions.jsonl", "w", encoding="utf-8") as fh:
            for i, iid in enumerate(self.int_ids):
                p = self.int_parent[i]
                fh.write(json.dumps({"id": iid, "parent_id": None if p is None else self.int_ids[p]})
                         + "\n")
        with open(out / "correlations.tsv", "w", encoding="utf-8") as fh:
            for q, s, ctype in self.correlations:
                fh.write(f"{self.query_ids[q]}\t{self.service_ids[s]}\t{ctype}\n")
        # interaction edges come from the training period only
        train = self.period == 0
        clicks: dict[tuple[int, int], list[int]] = {}
        for (_, q, s), y in zip(self.records[train], self.labels[train]):
            acc = clicks.setdefault((int(q), int(s)), [0, 0])
            acc[0] += int(y)
            acc[1] += 1
        with open(out / "interactions.tsv", "w", encoding="utf-8") as fh:
            for (q, s), (c, n) in sorted(clicks.items()):
                if c > 0:
                    fh.write(f"{self.query_ids[q]}\t{self.service_ids[s]}\t{c}\t{n}\n")
        names = ("train.tsv", "val.tsv", "test.tsv")
        handles = [open(out / n, "w", encoding="utf-8") for n in names]
        with open(out / "labels.tsv", "w", encoding="utf-8") as lab:
            for (_, q, s), y, per in zip(self.records, self.labels, self.period):
                line = f"{self.query_ids[q]}\t{self.service_ids[s]}\t{int(y)}\n"
                lab.write(line)
                handles[per].write(line)
        for h in handles:
            h.close()
        manifest = {
            "config": asdict(cfg),
            "n_records": int(len(self.records)),
            "n_train": int((self.period == 0).sum()),
            "n_val": int((self.period == 1).sum()),
            "n_test": int((self.period == 2).sum()),
            "n_intentions": len(self.int_ids),
            "n_correlations": len(self.correlations),
            "top1pct_pv_share": round(self.pv_share(0.01), 6),
            "positive_rate": round(float(self.labels.mean()), 6),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return out


def generate(config: ScenarioConfig, out_dir: str | Path | None = None) -> Scenario:
    """Build a scenario and, if ``out_dir`` is given, write its dataset files."""
    scenario = Scenario(config)
    if out_dir is not None:
        scenario.write(out_dir)
    return scenario
