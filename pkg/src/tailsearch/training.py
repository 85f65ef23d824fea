"""Pre-training, fine-tuning, prediction, checkpoints and embedding export."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParameterSet, Tensor
from .contrastive import (AnchorPair, build_targets, igcl_loss, ktcl_loss, mine_anchor_pairs,
                          secl_loss)
from .encoder import (HyperParams, IntentionEmbeddings, LayerStates, compile_graph,
                      encode_adaptive, encode_intentions, glorot, init_graph_encoder,
                      init_tree_encoder, tree_arrays)
from .graph import Dataset, split_head_tail
from .metrics import auc

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs_pretrain: int = 50
    epochs_finetune: int = 3
    batch_size: int = 1024
    lr: float = 1e-3
    seed: int = 0
    patience: int = 2
    hyper: HyperParams = field(default_factory=HyperParams)
    pretrain_steps: int | None = None
    head: float = 0.01
    n_hard: int = 5
    n_easy: int = 5
    igcl_level_anchor: str = "positive"
    shared_encoder: bool = False
    use_pretrain: bool = True
    train_groups: str = "all"
    finetune_cl_weight: float = 0.0
    log_clicks_feature: bool = True

    def validate(self) -> None:
        self.hyper.validate()
        for name in ("epochs_pretrain", "epochs_finetune", "patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.train_groups not in ("all", "mlp"):
            raise ValueError("train_groups must be 'all' or 'mlp'")
        if self.igcl_level_anchor not in ("positive", "leaf"):
            raise ValueError("igcl_level_anchor must be 'positive' or 'leaf'")


def sub_seed(root: int, name: str) -> np.random.Generator:
    """Independent named stream derived from the root seed."""
    digest = hashlib.sha256(name.encode()).digest()
    return np.random.default_rng([root, int.from_bytes(digest[:4], "little")])


def config_hash(config: Mapping | TrainConfig) -> str:
    payload = asdict(config) if isinstance(config, TrainConfig) else dict(config)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# model assembly

class SearchModel:
    """Dataset-bound structures shared by every training stage.

    Holds the split, compiled head/tail graphs, the forest and the mined
    anchor pairs. Parameters live outside, in a :class:`ParameterSet`.
    """

    def __init__(self, data: Dataset, config: TrainConfig):
        config.validate()
        self.data = data
        self.config = config
        self.hyper = config.hyper
        g = data.graph
        self.table_ids = list(g.queries) + list(g.services)
        self.table_index = {n: i for i, n in enumerate(self.table_ids)}
        self.split = split_head_tail(g, config.head)
        self.head_arrays = compile_graph(self.split.head_graph, self.table_index)
        self.tail_arrays = compile_graph(self.split.tail_graph, self.table_index)
        self.tree_links = tree_arrays(data.forest)
        self.node_intention = {i: n.intention_id for i, n in g.nodes.items()}
        self.pairs, self.skipped_tails = mine_anchor_pairs(self.split, g)
        if config.shared_encoder:
            self.prefixes = ("enc", "enc")
        else:
            self.prefixes = ("head", "tail")
        self._neighbours = {
            "head": {i: sorted({v for v, _ in self.split.head_graph.adjacency[i]})
                     for i in self.split.head_graph.nodes},
            "tail": {i: sorted({v for v, _ in self.split.tail_graph.adjacency[i]})
                     for i in self.split.tail_graph.nodes},
        }

    # parameters ---------------------------------------------------------
    def init_params(self, rng: np.random.Generator | None = None) -> ParameterSet:
        rng = rng if rng is not None else sub_seed(self.config.seed, "init")
        h, d = self.hyper, self.hyper.embed_dim
        n_attrs = self.data.graph.n_attrs
        arrays: dict[str, np.ndarray] = {}
        for prefix in dict.fromkeys(self.prefixes):
            arrays.update(init_graph_encoder(prefix, len(self.table_ids), n_attrs, h, rng))
        arrays.update(init_tree_encoder("tree", len(self.data.forest), h, rng))
        arrays["mlp.W1"] = glorot(rng, (d, 2 * d))
        arrays["mlp.b1"] = np.zeros(d)
        arrays["mlp.W2"] = glorot(rng, (1, d))
        arrays["mlp.b2"] = np.zeros(1)
        return ParameterSet(arrays)

    # forward pieces -----------------------------------------------------
    def encode(self, P: Mapping[str, Tensor]) -> tuple[LayerStates, LayerStates]:
        hp, tp = self.prefixes
        return encode_adaptive(self.head_arrays, self.tail_arrays, P, self.hyper, hp, tp,
                               shared=self.config.shared_encoder)

    def encode_tree(self, P: Mapping[str, Tensor]) -> IntentionEmbeddings:
        return encode_intentions(self.data.forest, P, self.hyper, "tree", self.tree_links)

    def pair_rows(self, pairs: Sequence[tuple[str, str]]) -> tuple[np.ndarray, np.ndarray]:
        """Rows into ``concat(head readout, tail readout)`` for each (query, service).

        A query reads from its own side; its service uses the same side when
        that graph holds it, otherwise the other side.
        """
        n_head = self.head_arrays.n_nodes
        sides = {"head": (self.head_arrays.index, 0), "tail": (self.tail_arrays.index, n_head)}
        qrows, srows = np.empty(len(pairs), np.int64), np.empty(len(pairs), np.int64)
        for k, (q, s) in enumerate(pairs):
            try:
                side = self.split.side_of(q)
            except KeyError:
                raise KeyError(f"query {q!r} is not in the graph") from None
            idx, off = sides[side]
            qrows[k] = idx[q] + off
            if s in idx:
                srows[k] = idx[s] + off
            else:
                other, ooff = sides["tail" if side == "head" else "head"]
                if s not in other:
                    raise KeyError(f"service {s!r} is not in the graph")
                srows[k] = other[s] + ooff
        return qrows, srows

    def pair_features(self, head: LayerStates, tail: LayerStates,
                      pairs: Sequence[tuple[str, str]]) -> Tensor:
        both = ad.concat([head.readout, tail.readout], axis=0)
        qrows, srows = self.pair_rows(pairs)
        return ad.concat([ad.gather(both, qrows), ad.gather(both, srows)], axis=1)

    def logits(self, P: Mapping[str, Tensor], features: Tensor) -> Tensor:
        return mlp_logits(P, features)

    def pretrain_loss(self, P: Mapping[str, Tensor], batch: "PretrainBatch",
                      alpha: float | None = None, beta: float | None = None
                      ) -> tuple[Tensor, dict[str, float]]:
        h = self.hyper
        alpha = h.alpha if alpha is None else alpha
        beta = h.beta if beta is None else beta
        head, tail = self.encode(P)
        states = {"head": head, "tail": tail}
        ktcl, parts = ktcl_loss(batch.pairs, batch.shared_services, head, tail, h.tau)
        secl = ad.constant(0.0)
        if h.layers >= 1:
            for side, groups in batch.secl_nodes.items():
                for nodes in groups.values():
                    secl = secl + secl_loss(states[side], nodes, h.tau)
        igcl = ad.constant(0.0)
        if any(batch.igcl.values()):
            tree = self.encode_tree(P)
            for side, targets in batch.igcl.items():
                igcl = igcl + igcl_loss(states[side], tree, targets, h.tau)
        total = ktcl + ad.scale(secl, alpha) + ad.scale(igcl, beta)
        info = {"loss": total.item(), "ktcl": ktcl.item(), "ktcl_query": parts["query"].item(),
                "ktcl_service": parts["service"].item(), "secl": secl.item(),
                "igcl": igcl.item()}
        return total, info


def mlp_logits(P: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Two-layer perceptron with ReLU hidden units; one logit per row."""
    hidden = ad.relu(ad.add(ad.matmul(x, ad.transpose(P["mlp.W1"])), P["mlp.b1"]))
    out = ad.add(ad.matmul(hidden, ad.transpose(P["mlp.W2"])), P["mlp.b2"])
    return ad.reshape(out, (x.shape[0],))


def bce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels, dtype=np.float64)
    p = ad.clip(ad.sigmoid(logits), BCE_EPS, 1.0 - BCE_EPS)
    one = ad.constant(np.ones(len(y)))
    ll = ad.mul(ad.constant(y), ad.log(p)) + ad.mul(ad.constant(1.0 - y), ad.log(one - p))
    return ad.scale(ad.sum(ll), -1.0 / len(y))


# ---------------------------------------------------------------------------
# pre-training

@dataclass
class PretrainBatch:
    pairs: list[AnchorPair]
    shared_services: list[str]
    secl_nodes: dict[str, dict[str, list[str]]]
    igcl: dict[str, list]


def make_pretrain_batch(model: SearchModel, pairs: Sequence[AnchorPair],
                        rng: np.random.Generator) -> PretrainBatch:
    """Anchor pairs plus their incident services and intention targets."""
    cfg = model.config
    tails = [p.tail_query_id for p in pairs]
    heads = sorted({p.head_query_id for p in pairs})
    nbrs = model._neighbours
    services = sorted({s for q in tails for s in nbrs["tail"][q]}
                      | {s for q in heads for s in nbrs["head"][q]})
    if len(services) > cfg.batch_size:
        services = sorted(rng.choice(services, cfg.batch_size, replace=False).tolist())
    head_idx, tail_idx = model.head_arrays.index, model.tail_arrays.index
    shared = [s for s in services if s in head_idx and s in tail_idx]
    side_nodes = {
        "head": {"query": heads, "service": [s for s in services if s in head_idx]},
        "tail": {"query": sorted(set(tails)), "service": [s for s in services if s in tail_idx]},
    }
    igcl = {}
    for side, groups in side_nodes.items():
        nodes = groups["query"] + groups["service"]
        igcl[side], _ = build_targets(model.data.forest, model.node_intention, nodes,
                                      cfg.n_hard, cfg.n_easy, rng, cfg.igcl_level_anchor)
    return PretrainBatch(list(pairs), shared, side_nodes, igcl)


@dataclass
class Checkpoint:
    params: ParameterSet
    adam: AdamState
    epoch: int
    stage: str
    config_hash: str
    history: list[dict] = field(default_factory=list)


def _trainable(params: ParameterSet, groups: str) -> list[str]:
    if groups == "mlp":
        return params.namespace("mlp")
    return list(params)


def _step(params: ParameterSet, state: AdamState, loss: Tensor, leaves, lr: float,
          trainable: Iterable[str] | None = None) -> tuple[ParameterSet, AdamState]:
    grads = ad.backward(loss, leaves)
    return ad.adam_step(params, grads, state, lr, trainable=trainable)


def pretrain(model: SearchModel, params: ParameterSet | None = None,
             chash: str = "") -> Checkpoint:
    """Optimise KTCL + alpha*SECL + beta*IGCL with Adam over all encoder weights."""
    cfg = model.config
    params = params if params is not None else model.init_params()
    if not model.pairs:
        raise TrainingError("no anchor pairs could be mined; pre-training has no signal")
    rng = sub_seed(cfg.seed, "sampling.pretrain")
    state = AdamState()
    history: list[dict] = []
    per_epoch = math.ceil(len(model.pairs) / cfg.batch_size)
    total = cfg.pretrain_steps if cfg.pretrain_steps is not None else per_epoch * cfg.epochs_pretrain
    step, epoch = 0, 0
    while step < total:
        order = rng.permutation(len(model.pairs))
        for start in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            chunk = [model.pairs[i] for i in order[start:start + cfg.batch_size]]
            batch = make_pretrain_batch(model, chunk, rng)
            leaves = params.leaves()
            try:
                loss, info = model.pretrain_loss(leaves, batch)
            except ad.NonFiniteError as exc:
                raise TrainingError(f"pre-training step {step}: {exc}") from exc
            params, state = _step(params, state, loss, leaves, cfg.lr)
            info.update(step=step, epoch=epoch)
            history.append(info)
            step += 1
        epoch += 1
        log.info("pretrain epoch %d step %d loss %.4f", epoch, step, history[-1]["loss"])
    return Checkpoint(params, state, epoch, "pretrained", chash, history)


# ---------------------------------------------------------------------------
# fine-tuning and prediction

def predict_scores(model: SearchModel, params: ParameterSet,
                   pairs: Sequence[tuple[str, str]]) -> np.ndarray:
    """Click probabilities for (query, service) pairs."""
    if not pairs:
        return np.zeros(0)
    P = params.leaves()
    head, tail = model.encode(P)
    return ad.sigmoid(model.logits(P, model.pair_features(head, tail, pairs))).data.copy()


def predict(model: SearchModel, checkpoint: Checkpoint, query_id: str, service_id: str) -> float:
    return float(predict_scores(model, checkpoint.params, [(query_id, service_id)])[0])


def validation_auc(model: SearchModel, params: ParameterSet,
                   records: Sequence[tuple[str, str, int]]) -> float | None:
    labels = np.array([r[2] for r in records])
    if labels.size == 0 or labels.min() == labels.max():
        return None
    scores = predict_scores(model, params, [(q, s) for q, s, _ in records])
    return auc(labels, scores)


def finetune(model: SearchModel, params: ParameterSet | None = None,
             train: Sequence[tuple[str, str, int]] | None = None,
             val: Sequence[tuple[str, str, int]] | None = None,
             chash: str = "", max_steps: int | None = None) -> Checkpoint:
    """Minimise binary cross entropy of the MLP click head on labelled pairs.

    Starts from ``params`` (a pre-trained set) or a fresh initialisation.
    Early-stops on validation AUC with ``config.patience`` epochs of patience
    and returns the best parameters seen.
    """
    cfg = model.config
    train = list(model.data.train if train is None else train)
    val = list(model.data.val if val is None else val)
    labels = np.array([r[2] for r in train])
    if labels.size == 0 or labels.min() == labels.max():
        raise TrainingError("training labels contain a single class; BCE fine-tuning is degenerate")
    params = params if params is not None else model.init_params()
    trainable = _trainable(params, cfg.train_groups)
    rng = sub_seed(cfg.seed, "sampling.finetune")
    cl_rng = sub_seed(cfg.seed, "sampling.finetune_cl")
    state = AdamState()
    history: list[dict] = []
    best = (validation_auc(model, params, val), params, 0)
    bad, step, epoch = 0, 0, 0
    pairs_all = [(q, s) for q, s, _ in train]
    for epoch in range(1, cfg.epochs_finetune + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[start:start + cfg.batch_size]
            leaves = params.leaves()
            try:
                head, tail = model.encode(leaves)
                feats = model.pair_features(head, tail, [pairs_all[i] for i in idx])
                loss = bce_loss(model.logits(leaves, feats), labels[idx])
                if cfg.finetune_cl_weight > 0 and model.pairs:
                    chunk = [model.pairs[i] for i in
                             cl_rng.choice(len(model.pairs), min(cfg.batch_size, len(model.pairs)),
                                           replace=False)]
                    cl, _ = model.pretrain_loss(leaves, make_pretrain_batch(model, chunk, cl_rng))
                    loss = loss + ad.scale(cl, cfg.finetune_cl_weight)
            except ad.NonFiniteError as exc:
                raise TrainingError(f"fine-tuning step {step}: {exc}") from exc
            params, state = _step(params, state, loss, leaves, cfg.lr, trainable)
            history.append({"step": step, "epoch": epoch, "bce": loss.item()})
            step += 1
        val_auc = validation_auc(model, params, val)
        history[-1]["val_auc"] = val_auc
        log.info("finetune epoch %d bce %.4f val_auc %s", epoch, history[-1]["bce"], val_auc)
        if best[0] is None or (val_auc is not None and val_auc > best[0]):
            best, bad = (val_auc, params, epoch), 0
        else:
            bad += 1
            if bad > cfg.patience:
                break
        if max_steps is not None and step >= max_steps:
            break
    return Checkpoint(best[1], state, best[2], "finetuned", chash, history)


# ---------------------------------------------------------------------------
# checkpoint file: b"GRCA" | u16 version | 32-byte config digest | u16 stage | u32 epoch
#                  | u64 adam step | u32 n_tensors | tensors...
# tensor: u16 name length | name | u8 ndim | u32 dims... | float64 little-endian data

MAGIC = b"GRCA"
FORMAT_VERSION = 1
_STAGES = ("pretrained", "finetuned", "initial")


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors = [(n, ckpt.params[n]) for n in sorted(ckpt.params)]
    tensors += [(f"adam.m/{n}", np.asarray(ckpt.adam.m[n])) for n in sorted(ckpt.adam.m)]
    tensors += [(f"adam.v/{n}", np.asarray(ckpt.adam.v[n])) for n in sorted(ckpt.adam.v)]
    digest = bytes.fromhex(ckpt.config_hash) if ckpt.config_hash else bytes(32)
    if len(digest) != 32:
        raise ValueError("config hash must be a sha256 hex digest")
    out = bytearray(MAGIC)
    out += struct.pack("<H", FORMAT_VERSION) + digest
    out += struct.pack("<HIQI", _STAGES.index(ckpt.stage), ckpt.epoch, ckpt.adam.step, len(tensors))
    for name, arr in tensors:
        out += _pack_tensor(name, arr)
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[6:38]
    stage, epoch, adam_step, count = struct.unpack_from("<HIQI", buf, 38)
    pos = 38 + struct.calcsize("<HIQI")
    params, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    chash = digest.hex() if any(digest) else ""
    return Checkpoint(ParameterSet(params), AdamState(m, v, adam_step), epoch, _STAGES[stage], chash)


# ---------------------------------------------------------------------------
# export and retrieval

def export_embeddings(model: SearchModel, params: ParameterSet, path: str | Path) -> int:
    """Write ``id<TAB>side<TAB>v1,v2,...`` for every node on every side it lives on.

    Queries appear once (their own side); services once per graph holding
    them. Returns the record count.
    """
    P = params.leaves()
    head, tail = model.encode(P)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for states in (head, tail):
            data = states.readout.data
            for i, nid in enumerate(states.node_ids):
                vec = ",".join(f"{x:.9g}" for x in data[i])
                fh.write(f"{nid}\t{states.side}\t{vec}\n")
                n += 1
    return n


@dataclass
class EmbeddingTable:
    queries: dict[str, tuple[str, np.ndarray]]
    services: dict[str, dict[str, np.ndarray]]


def load_embeddings(path: str | Path, query_ids: Iterable[str]) -> EmbeddingTable:
    """Read an embeddings file; ``query_ids`` tells queries apart from services."""
    qset = set(query_ids)
    queries: dict[str, tuple[str, np.ndarray]] = {}
    services: dict[str, dict[str, np.ndarray]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            nid, side, vec = line.rstrip("\n").split("\t")
            arr = np.array([float(x) for x in vec.split(",")])
            if nid in qset:
                queries[nid] = (side, arr)
            else:
                services.setdefault(nid, {})[side] = arr
    return EmbeddingTable(queries, services)


def _service_matrix(table: EmbeddingTable, side: str) -> tuple[list[str], np.ndarray]:
    other = "tail" if side == "head" else "head"
    ids = sorted(table.services)
    rows = [table.services[s].get(side, table.services[s].get(other)) for s in ids]
    return ids, np.array(rows)


def score_services(table: EmbeddingTable, query_id: str) -> dict[str, float]:
    """Inner products of one query against every service, in one vectorised pass.

    Each score is the correctly rounded sum of the float64 products, so the
    value does not depend on evaluation order.
    """
    if query_id not in table.queries:
        raise KeyError(f"unknown query {query_id!r}")
    side, qv = table.queries[query_id]
    ids, mat = _service_matrix(table, side)
    prods = (mat * qv).tolist()
    return {s: math.fsum(row) for s, row in zip(ids, prods)}


def score_services_streaming(table: EmbeddingTable, query_id: str) -> dict[str, float]:
    """Same scores as :func:`score_services`, one service at a time."""
    if query_id not in table.queries:
        raise KeyError(f"unknown query {query_id!r}")
    side, qv = table.queries[query_id]
    other = "tail" if side == "head" else "head"
    q = qv.tolist()
    out = {}
    for sid in sorted(table.services):
        vec = table.services[sid].get(side, table.services[sid].get(other)).tolist()
        out[sid] = math.fsum(a * b for a, b in zip(q, vec))
    return out


def retrieve_topk(query_id: str, k: int | float, table: EmbeddingTable
                  ) -> list[tuple[str, float]]:
    """Top-k services by inner product, descending; ties go to the smaller id."""
    scores = score_services(table, query_id)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked if math.isinf(k) else ranked[:int(k)]
