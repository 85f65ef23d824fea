"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a new :class:`Tensor` that remembers its inputs and a closure
mapping the output gradient to input gradients. Tensors receive a monotonically
increasing tape index at construction, so sorting reachable nodes by that index
gives a valid topological order for the backward sweep.

Shapes are explicit: tensors are 0-, 1- or 2-dimensional, and the only
broadcast allowed is a matrix combined with a row vector.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
COS_EPS = 1e-12

_tape_counter = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf; the message names the op."""


class Tensor:
    __slots__ = ("data", "grad", "op", "name", "_parents", "_backward", "_index")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward=None,
                 op: str = "leaf", name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 2:
            raise ShapeError(f"{op}: tensors are at most 2-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            label = f"{op} ({name})" if name else op
            raise NonFiniteError(f"non-finite values produced by {label}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward
        self._index = next(_tape_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar; all route through the named ops below
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def constant(x) -> Tensor:
    return Tensor(x, op="const")


def _shape_err(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# linear algebra and arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 0 or b.ndim == 0:
        raise _shape_err("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[0]:
        raise _shape_err("matmul", a.shape, b.shape)
    # overflow surfaces as NonFiniteError from the Tensor constructor
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        return g * b.data, g * a.data

    return Tensor(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
    return Tensor(a.data.T, (a,), lambda g: (g.T,), "transpose")


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """Return True when b is a row vector broadcast over matrix a."""
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return True
    raise _shape_err(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    row = _check_broadcast("add", a, b)

    def backward(g):
        return g, (g.sum(axis=0) if row else g)

    return Tensor(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    row = _check_broadcast("sub", a, b)

    def backward(g):
        return g, -(g.sum(axis=0) if row else g)

    return Tensor(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    row = _check_broadcast("mul", a, b)

    def backward(g):
        gb = g * a.data
        return g * b.data, (gb.sum(axis=0) if row else gb)

    return Tensor(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    row = _check_broadcast("div", a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: zero in denominator; clamp before dividing")
    out = a.data / b.data

    def backward(g):
        gb = -g * out / b.data
        return g / b.data, (gb.sum(axis=0) if row else gb)

    return Tensor(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * c, (a,), lambda g: (g * c,), "scale")


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of matrix ``a`` by ``w[i]``."""
    if a.ndim != 2 or w.ndim != 1 or a.shape[0] != w.shape[0]:
        raise _shape_err("scale_rows", a.shape, w.shape)
    out = a.data * w.data[:, None]

    def backward(g):
        return g * w.data[:, None], np.einsum("ij,ij->i", g, a.data)

    return Tensor(out, (a, w), backward, "scale_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input")
    nd = tensors[0].ndim
    for t in tensors:
        if t.ndim != nd:
            raise _shape_err("concat", tensors[0].shape, t.shape)
        other = [d for i, d in enumerate(t.shape) if i != axis]
        ref = [d for i, d in enumerate(tensors[0].shape) if i != axis]
        if other != ref:
            raise _shape_err("concat", tensors[0].shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor(out, tuple(tensors), backward, "concat")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return Tensor(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise FloatingPointError("log: non-positive input; clamp before taking log")
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor(out, (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise _shape_err("dot", a.shape, b.shape)
    return Tensor(a.data @ b.data, (a, b), lambda g: (g * b.data, g * a.data), "dot")


def norm(a: Tensor) -> Tensor:
    """L2 norm of a vector, or of each row of a matrix."""
    out = np.sqrt((a.data ** 2).sum(axis=-1))
    if np.any(out == 0.0):
        raise ZeroDivisionError("norm: gradient undefined at the zero vector")

    def backward(g):
        if a.ndim == 1:
            return (g * a.data / out,)
        return (a.data * (g / out)[:, None],)

    return Tensor(out, (a,), backward, "norm")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax along the last axis, optionally restricted to ``mask``.

    Masked-out entries are excluded from the normaliser, come out as 0 and
    receive no gradient. Every row must keep at least one entry.
    """
    x = a.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != x.shape:
            raise _shape_err("log_softmax", x.shape, keep.shape)
        if not np.all(keep.any(axis=-1)):
            raise ValueError("log_softmax: a row has every entry masked out")
    xm = np.where(keep, x, -np.inf)
    m = xm.max(axis=-1, keepdims=True)
    e = np.exp(xm - m)
    s = e.sum(axis=-1, keepdims=True)
    out = np.where(keep, x - m - np.log(s), 0.0)
    p = e / s

    def backward(g):
        g = np.where(keep, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# similarity

def normalize_rows(a: Tensor, eps: float = COS_EPS) -> Tensor:
    """Unit-normalise a vector or each matrix row; norms clamp at ``eps``."""
    n = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    nc = np.maximum(n, eps)
    out = a.data / nc
    live = n > eps

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - out * proj) / nc, g / nc),)

    return Tensor(out, (a,), backward, "normalize")


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors, or row-wise for two matrices."""
    if a.shape != b.shape or a.ndim == 0:
        raise _shape_err("cosine", a.shape, b.shape)
    an, bn = normalize_rows(a), normalize_rows(b)
    if a.ndim == 1:
        return dot(an, bn)
    return sum(mul(an, bn), axis=1)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity: rows of ``a`` against rows of ``b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise _shape_err("cosine_matrix", a.shape, b.shape)
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


# ---------------------------------------------------------------------------
# indexing and segment ops (graph message passing)

def gather(a: Tensor, index) -> Tensor:
    """Select rows (or entries of a vector) by integer index."""
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def backward(g):
        out = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for {n} rows")
    return Tensor(a.data[idx], (a,), backward, "gather")


def pick(a: Tensor, cols) -> Tensor:
    """Return ``a[i, cols[i]]`` for each row i."""
    cols = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise _shape_err("pick", a.shape, cols.shape)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros(a.shape, dtype=DTYPE)
        out[rows, cols] = g
        return (out,)

    return Tensor(a.data[rows, cols], (a,), backward, "pick")


def segment_sum(a: Tensor, segments, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets; empty buckets are zero."""
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (a.shape[0],):
        raise _shape_err("segment_sum", a.shape, seg.shape)
    out = np.zeros((n_segments,) + a.shape[1:], dtype=DTYPE)
    np.add.at(out, seg, a.data)
    return Tensor(out, (a,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(scores: Tensor, segments, n_segments: int) -> Tensor:
    """Softmax of a score vector within each segment (e.g. a node's in-edges)."""
    seg = np.asarray(segments, dtype=np.int64)
    if scores.ndim != 1 or seg.shape != scores.shape:
        raise _shape_err("segment_softmax", scores.shape, seg.shape)
    x = scores.data
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, seg, x)
    e = np.exp(x - seg_max[seg])
    denom = np.zeros(n_segments)
    np.add.at(denom, seg, e)
    out = e / denom[seg]

    def backward(g):
        inner = np.zeros(n_segments)
        np.add.at(inner, seg, g * out)
        return (out * (g - inner[seg]),)

    return Tensor(out, (scores,), backward, "segment_softmax")


# ---------------------------------------------------------------------------
# contrastive objective

def info_nce(anchor: Tensor, positive: Tensor, negatives: Sequence[Tensor],
             tau: float) -> Tensor:
    """InfoNCE with cosine scores; the denominator is {positive} plus negatives."""
    if tau <= 0:
        raise ValueError(f"info_nce: tau must be positive, got {tau}")
    vecs = [anchor, positive, *negatives]
    for v in vecs:
        if v.ndim != 1:
            raise ShapeError(f"info_nce: expected 1-d vectors, got shape {v.shape}")
        if v.shape != anchor.shape:
            raise _shape_err("info_nce", anchor.shape, v.shape)
        if v.shape[0] == 0:
            raise ShapeError("info_nce: empty vectors")
        if not np.any(v.data):
            raise ZeroDivisionError("info_nce: zero-norm vector, cosine undefined")
    sims = [reshape(cosine(anchor, v), (1,)) for v in vecs[1:]]
    logits = scale(concat(sims), 1.0 / tau)
    return scale(sum(gather(log_softmax(logits), [0])), -1.0)


def info_nce_rows(anchors: Tensor, candidates: Tensor, positive_idx,
                  tau: float, mask: np.ndarray | None = None) -> Tensor:
    """Batched InfoNCE: one loss per anchor row.

    Each row scores every candidate row by cosine / tau; ``positive_idx[i]``
    picks the positive and ``mask[i]`` (default: all) is the denominator set,
    which must contain the positive.
    """
    if tau <= 0:
        raise ValueError(f"info_nce_rows: tau must be positive, got {tau}")
    pos = np.asarray(positive_idx, dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask[np.arange(len(pos)), pos]):
            raise ValueError("info_nce_rows: positive missing from its denominator")
    logits = scale(cosine_matrix(anchors, candidates), 1.0 / tau)
    return scale(pick(log_softmax(logits, mask), pos), -1.0)


# ---------------------------------------------------------------------------
# backward pass

def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._index, reverse=True)


def backward(loss: Tensor, leaves: Mapping[str, Tensor] | None = None
             ) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) through the tape.

    Returns the gradient for every named leaf in ``leaves``; leaves the loss
    does not depend on get a zero array of their own shape.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _reachable(loss)
    for t in order:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in order:
        if t._backward is None or t.grad is None:
            continue
        grads = t._backward(t.grad)
        for parent, g in zip(t._parents, grads):
            _accumulate(parent, np.reshape(g, parent.shape))
    if leaves is None:
        return {}
    # grads left on leaves by an earlier pass over a shared tape are stale
    reached = {id(t) for t in order}
    out = {}
    for name, leaf in leaves.items():
        if id(leaf) in reached and leaf.grad is not None:
            out[name] = leaf.grad.copy()
        else:
            out[name] = np.zeros(leaf.shape)
    return out


# ---------------------------------------------------------------------------
# parameters and optimizer

class ParameterSet(Mapping[str, np.ndarray]):
    """Immutable name -> array map of learnable weights.

    Names use dotted namespaces (``head.layer0.W_agg``). Updates produce a
    new set; shapes can never change.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            a = np.array(arr, dtype=DTYPE, copy=True)
            a.setflags(write=False)
            self._arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def namespace(self, prefix: str) -> list[str]:
        return [n for n in self._arrays if n.startswith(prefix + ".")]

    def leaves(self) -> dict[str, Tensor]:
        return {n: Tensor(a, op="param", name=n) for n, a in self._arrays.items()}

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParameterSet":
        merged = dict(self._arrays)
        for name, arr in updates.items():
            if name not in merged:
                raise KeyError(f"unknown parameter {name!r}")
            if np.shape(arr) != merged[name].shape:
                raise ShapeError(f"parameter {name!r}: shape {merged[name].shape} "
                                 f"cannot become {np.shape(arr)}")
            merged[name] = arr
        return ParameterSet(merged)

    def merged(self, other: Mapping[str, np.ndarray]) -> "ParameterSet":
        clash = set(self._arrays) & set(other)
        if clash:
            raise KeyError(f"duplicate parameter names: {sorted(clash)}")
        return ParameterSet({**self._arrays, **other})


class AdamState:
    """First/second moments and step count for :func:`adam_step`."""

    def __init__(self, m: dict[str, np.ndarray] | None = None,
                 v: dict[str, np.ndarray] | None = None, step: int = 0):
        self.m = m or {}
        self.v = v or {}
        self.step = step


def adam_step(params: ParameterSet, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              trainable: Iterable[str] | None = None) -> tuple[ParameterSet, AdamState]:
    """One Adam update. Returns fresh params and state; inputs are untouched."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise KeyError(f"gradient keys do not match parameters: {sorted(missing)}")
    names = list(params) if trainable is None else list(trainable)
    step = state.step + 1
    m_new, v_new, updates = dict(state.m), dict(state.v), {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name in names:
        g = grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_new[name], v_new[name] = m, v
        updates[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params.replace(updates), AdamState(m_new, v_new, step)


# ---------------------------------------------------------------------------
# finite-difference oracle

def numeric_grad(fn: Callable[[Mapping[str, np.ndarray]], float],
                 arrays: Mapping[str, np.ndarray], name: str, h: float = 1e-5
                 ) -> np.ndarray:
    """Central-difference gradient of ``fn`` w.r.t. every entry of ``arrays[name]``."""
    base = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in arrays.items()}
    target = base[name]
    out = np.zeros_like(target)
    for i in np.ndindex(target.shape):
        orig = target[i]
        target[i] = orig + h
        fp = fn(base)
        target[i] = orig - h
        fm = fn(base)
        target[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def directional_check(fn: Callable[[Mapping[str, np.ndarray]], float],
                      arrays: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      rng: np.random.Generator, h: float = 1e-5,
                      floor: float = 1e-6) -> dict[str, float]:
    """Relative error of analytic vs central-difference directional derivatives.

    One random unit direction per named array; returns name -> relative error
    ``|g.v - fd| / max(|g.v|, |fd|, floor)``.
    """
    errors = {}
    for name, arr in arrays.items():
        v = rng.standard_normal(np.shape(arr))
        v /= np.linalg.norm(v) or 1.0
        plus = {k: (a + h * v if k == name else a) for k, a in arrays.items()}
        minus = {k: (a - h * v if k == name else a) for k, a in arrays.items()}
        fd = (fn(plus) - fn(minus)) / (2 * h)
        an = float(np.sum(grads[name] * v))
        errors[name] = abs(an - fd) / max(abs(an), abs(fd), floor)
    return errors
