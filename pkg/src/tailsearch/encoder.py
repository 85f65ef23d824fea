"""Attention GNN encoders for the head/tail graphs and the intention-tree encoder.

Graph layer l, for every node q with neighbours v (messages flow both ways
along each query-service edge)::

    score(q, v) = LeakyReLU(a . [W_att z_q || W_att z_v || e_qv])
    alpha       = softmax of score over q's neighbours
    m_q         = tanh(W_agg  sum_v alpha(q, v) [z_v || e_qv])
    z_q'        = relu(W_upd [z_q || m_q])

and the readout is the mean of z^(0..L). The initial state is
``W_in [id_embedding || attributes]``.

The tree encoder runs H-1 synchronous bottom-up passes
``z_i' = act(W_tree (z_i + sum_children z_c))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import (EDGE_FEATURES, HeadTailSplit, IntentionForest, ServiceSearchGraph,
                    QUERY, node_attributes)


@dataclass
class HyperParams:
    layers: int = 2
    tree_levels: int = 5
    embed_dim: int = 32
    tau: float = 0.1
    alpha: float = 0.1
    beta: float = 0.01
    leaky_slope: float = 0.2
    share_layers: bool = False
    tree_activation: str = "tanh"

    def validate(self) -> None:
        if self.layers < 0 or self.tree_levels < 1 or self.embed_dim < 1:
            raise ValueError("layers >= 0, tree_levels >= 1 and embed_dim >= 1 required")
        if self.tau <= 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("tau > 0, alpha >= 0 and beta >= 0 required")
        if self.tree_activation not in _ACTIVATIONS:
            raise ValueError(f"tree_activation must be one of {sorted(_ACTIVATIONS)}")


_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "sigmoid": ad.sigmoid}


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def layer_name(prefix: str, layer: int, hyper: HyperParams) -> str:
    return f"{prefix}.layer{0 if hyper.share_layers else layer}"


def init_graph_encoder(prefix: str, n_nodes: int, n_attrs: int, hyper: HyperParams,
                       rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, f = hyper.embed_dim, EDGE_FEATURES
    params = {
        f"{prefix}.emb": rng.normal(0.0, 0.1, size=(n_nodes, d)),
        f"{prefix}.W_in": glorot(rng, (d, d + n_attrs)),
    }
    for layer in range(1 if hyper.share_layers else hyper.layers):
        base = layer_name(prefix, layer, hyper)
        params[f"{base}.W_att"] = glorot(rng, (d, d))
        params[f"{base}.att"] = glorot(rng, (2 * d + f,))
        params[f"{base}.W_agg"] = glorot(rng, (d, d + f))
        params[f"{base}.W_upd"] = glorot(rng, (d, 2 * d))
    return params


def init_tree_encoder(prefix: str, n_intentions: int, hyper: HyperParams,
                      rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = hyper.embed_dim
    return {
        f"{prefix}.emb": rng.normal(0.0, 0.1, size=(n_intentions, d)),
        f"{prefix}.W": glorot(rng, (d, d)),
    }


@dataclass
class GraphArrays:
    """Index arrays for one (sub)graph, ready for vectorised message passing.

    Local row order is queries (sorted) then services (sorted). ``table_rows``
    maps local rows into the encoder's id-embedding table.
    """

    node_ids: list[str]
    index: dict[str, int]
    n_queries: int
    table_rows: np.ndarray
    attrs: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_feats: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


def compile_graph(graph: ServiceSearchGraph, table_index: Mapping[str, int]) -> GraphArrays:
    qs = sorted(i for i, n in graph.nodes.items() if n.kind == QUERY)
    ss = sorted(i for i, n in graph.nodes.items() if n.kind != QUERY)
    ids = qs + ss
    index = {n: k for k, n in enumerate(ids)}
    src, dst, feats = [], [], []
    for e in graph.edges:
        q, s = index[e.query_id], index[e.service_id]
        src += [s, q]
        dst += [q, s]
        feats += [e.features, e.features]
    return GraphArrays(
        node_ids=ids, index=index, n_queries=len(qs),
        table_rows=np.array([table_index[i] for i in ids], dtype=np.int64),
        attrs=node_attributes(graph, ids),
        src=np.array(src, dtype=np.int64), dst=np.array(dst, dtype=np.int64),
        edge_feats=np.array(feats, dtype=np.float64).reshape(len(feats), EDGE_FEATURES),
    )


@dataclass
class LayerStates:
    side: str
    node_ids: list[str]
    index: dict[str, int]
    layers: list[Tensor]
    readout: Tensor

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.index[i] for i in ids], dtype=np.int64)


def attention_weights(z_center: Tensor, z_neighbors: Tensor, edge_feats: Tensor,
                      W_att: Tensor, att: Tensor, slope: float = 0.2) -> Tensor:
    """Attention of one centre node over its neighbours (rows of ``z_neighbors``)."""
    n = z_neighbors.shape[0]
    if n == 0:
        raise ValueError("attention_weights: empty neighbour list")
    d = W_att.shape[0]
    pc = ad.matmul(W_att, z_center)
    pn = ad.matmul(z_neighbors, ad.transpose(W_att))
    a_c = ad.gather(att, np.arange(d))
    a_n = ad.gather(att, np.arange(d, 2 * d))
    a_e = ad.gather(att, np.arange(2 * d, att.shape[0]))
    centre = ad.gather(ad.reshape(ad.dot(a_c, pc), (1,)), np.zeros(n, dtype=np.int64))
    scores = ad.leaky_relu(centre + ad.matmul(pn, a_n) + ad.matmul(edge_feats, a_e), slope)
    return ad.segment_softmax(scores, np.zeros(n, dtype=np.int64), 1)


def _check_shapes(P: Mapping[str, Tensor], prefix: str, garr: GraphArrays,
                  hyper: HyperParams) -> None:
    d = hyper.embed_dim
    emb, w_in = P[f"{prefix}.emb"], P[f"{prefix}.W_in"]
    if emb.shape[1] != d or w_in.shape != (d, d + garr.attrs.shape[1]):
        raise ad.ShapeError(f"{prefix}: parameter shapes {emb.shape}, {w_in.shape} "
                            f"do not match embed_dim={d}")


def initial_states(garr: GraphArrays, P: Mapping[str, Tensor], prefix: str) -> Tensor:
    ids = ad.gather(P[f"{prefix}.emb"], garr.table_rows)
    x = ad.concat([ids, ad.constant(garr.attrs)], axis=1)
    return ad.matmul(x, ad.transpose(P[f"{prefix}.W_in"]))


def graph_layer(z: Tensor, garr: GraphArrays, P: Mapping[str, Tensor], base: str,
                hyper: HyperParams) -> Tensor:
    d, n = hyper.embed_dim, garr.n_nodes
    att = P[f"{base}.att"]
    e = ad.constant(garr.edge_feats)
    proj = ad.matmul(z, ad.transpose(P[f"{base}.W_att"]))
    s_dst = ad.matmul(proj, ad.gather(att, np.arange(d)))
    s_src = ad.matmul(proj, ad.gather(att, np.arange(d, 2 * d)))
    s_edge = ad.matmul(e, ad.gather(att, np.arange(2 * d, att.shape[0])))
    if garr.src.size:
        scores = ad.leaky_relu(ad.gather(s_dst, garr.dst) + ad.gather(s_src, garr.src) + s_edge,
                               hyper.leaky_slope)
        alpha = ad.segment_softmax(scores, garr.dst, n)
        msg = ad.concat([ad.gather(z, garr.src), e], axis=1)
        agg = ad.segment_sum(ad.scale_rows(msg, alpha), garr.dst, n)
    else:
        agg = ad.constant(np.zeros((n, d + EDGE_FEATURES)))
    m = ad.tanh(ad.matmul(agg, ad.transpose(P[f"{base}.W_agg"])))
    return ad.relu(ad.matmul(ad.concat([z, m], axis=1), ad.transpose(P[f"{base}.W_upd"])))


def encode_nodes(garr: GraphArrays, P: Mapping[str, Tensor], prefix: str,
                 hyper: HyperParams, side: str = "") -> LayerStates:
    _check_shapes(P, prefix, garr, hyper)
    layers = [initial_states(garr, P, prefix)]
    for layer in range(hyper.layers):
        layers.append(graph_layer(layers[-1], garr, P, layer_name(prefix, layer, hyper), hyper))
    readout = layers[0]
    for z in layers[1:]:
        readout = readout + z
    readout = ad.scale(readout, 1.0 / len(layers))
    return LayerStates(side, garr.node_ids, garr.index, layers, readout)


def encode_adaptive(head: GraphArrays, tail: GraphArrays, P: Mapping[str, Tensor],
                    hyper: HyperParams, head_prefix: str = "head", tail_prefix: str = "tail",
                    shared: bool = False) -> tuple[LayerStates, LayerStates]:
    """Encode the head graph with head parameters and the tail graph with tail ones."""
    if head_prefix == tail_prefix and not shared:
        raise ValueError(f"encoder namespace collision: both encoders use {head_prefix!r}")
    return (encode_nodes(head, P, head_prefix, hyper, "head"),
            encode_nodes(tail, P, tail_prefix, hyper, "tail"))


@dataclass
class IntentionEmbeddings:
    ids: tuple[str, ...]
    index: dict[str, int]
    levels: list[Tensor] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.levels[-1]


def tree_arrays(forest: IntentionForest) -> tuple[np.ndarray, np.ndarray]:
    """(child rows, parent rows) for every parent-child link."""
    child, parent = [], []
    for iid in forest.ids:
        p = forest.nodes[iid].parent
        if p is not None:
            child.append(forest.index[iid])
            parent.append(forest.index[p])
    return np.array(child, dtype=np.int64), np.array(parent, dtype=np.int64)


def encode_intentions(forest: IntentionForest, P: Mapping[str, Tensor], hyper: HyperParams,
                      prefix: str = "tree", links: tuple[np.ndarray, np.ndarray] | None = None
                      ) -> IntentionEmbeddings:
    emb, W = P[f"{prefix}.emb"], P[f"{prefix}.W"]
    if emb.shape != (len(forest), hyper.embed_dim) or W.shape != (hyper.embed_dim,) * 2:
        raise ad.ShapeError(f"{prefix}: shapes {emb.shape}, {W.shape} do not match the forest")
    act = _ACTIVATIONS[hyper.tree_activation]
    child, parent = links if links is not None else tree_arrays(forest)
    n = len(forest)
    z = emb
    levels = [z]
    for _ in range(hyper.tree_levels - 1):
        total = z
        if child.size:
            total = total + ad.segment_sum(ad.gather(z, child), parent, n)
        z = act(ad.matmul(total, ad.transpose(W)))
        levels.append(z)
    return IntentionEmbeddings(forest.ids, forest.index, levels)


def split_arrays(split: HeadTailSplit, table_index: Mapping[str, int]
                 ) -> tuple[GraphArrays, GraphArrays]:
    return compile_graph(split.head_graph, table_index), compile_graph(split.tail_graph, table_index)
