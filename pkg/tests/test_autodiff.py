import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tailsearch import autodiff as ad
from tailsearch.contrastive import info_nce_reference


def check_grads(fn, arrays_, tol=1e-6):
    """Entrywise finite-difference check of fn(leaves) -> scalar Tensor."""
    params = ad.ParameterSet(arrays_)
    leaves = params.leaves()
    grads = ad.backward(fn(leaves), leaves)
    for name in arrays_:
        num = ad.numeric_grad(lambda a: fn(ad.ParameterSet(a).leaves()).item(), arrays_, name)
        np.testing.assert_allclose(grads[name], num, rtol=tol, atol=tol)


rng = np.random.default_rng(0)
A = rng.normal(size=(3, 4))
B = rng.normal(size=(4, 2))
R = rng.normal(size=(4,))
V = rng.normal(size=(3,))

UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "leaky": lambda x: ad.leaky_relu(x, 0.2),
    "relu": ad.relu,
    "softmax": lambda x: ad.softmax(x, axis=1),
    "log_softmax": ad.log_softmax,
    "normalize": ad.normalize_rows,
    "transpose": ad.transpose,
    "reshape": lambda x: ad.reshape(x, (4, 3)),
    "mean0": lambda x: ad.mean(x, axis=0),
    "sum1": lambda x: ad.sum(x, axis=1),
    "clip": lambda x: ad.clip(x, -0.5, 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    op = UNARY[name]
    w = rng.normal(size=op(ad.constant(A)).shape)
    check_grads(lambda P: ad.sum(ad.mul(op(P["a"]), ad.constant(w))), {"a": A})


def test_binary_gradients():
    check_grads(lambda P: ad.sum(ad.tanh(ad.matmul(P["a"], P["b"]))), {"a": A, "b": B})
    check_grads(lambda P: ad.sum(ad.mul(ad.add(P["a"], P["r"]), P["a"])), {"a": A, "r": R})
    check_grads(lambda P: ad.sum(ad.sub(P["a"], P["r"])), {"a": A, "r": R})
    check_grads(lambda P: ad.sum(ad.div(P["a"], ad.add(ad.exp(P["a"]), P["r"] * 0.0 + ad.constant(np.ones(4))))),
                {"a": A, "r": R})
    check_grads(lambda P: ad.log(ad.dot(ad.exp(P["v"]), ad.exp(P["v"]))), {"v": V})
    check_grads(lambda P: ad.norm(P["v"]), {"v": V})
    check_grads(lambda P: ad.sum(ad.scale_rows(P["a"], P["v"])), {"a": A, "v": V})
    check_grads(lambda P: ad.sum(ad.tanh(ad.concat([P["a"], P["a"] * 2.0], axis=1))), {"a": A})
    check_grads(lambda P: ad.sum(ad.cosine_matrix(P["a"], ad.transpose(P["b"]))), {"a": A, "b": B})
    check_grads(lambda P: ad.cosine(P["v"], ad.tanh(P["v"])), {"v": V})


def test_indexing_gradients():
    idx = np.array([2, 0, 2, 1])
    check_grads(lambda P: ad.sum(ad.tanh(ad.gather(P["a"], idx))), {"a": A})
    check_grads(lambda P: ad.sum(ad.exp(ad.pick(P["a"], [1, 3, 0]))), {"a": A})
    seg = np.array([0, 1, 1])
    w = rng.normal(size=(2, 4))
    check_grads(lambda P: ad.sum(ad.mul(ad.segment_sum(P["a"], seg, 2), ad.constant(w))), {"a": A})
    scores = rng.normal(size=5)
    segs = np.array([0, 0, 1, 1, 1])
    wv = rng.normal(size=5)
    check_grads(lambda P: ad.dot(ad.segment_softmax(P["s"], segs, 2), ad.constant(wv)),
                {"s": scores})


def test_info_nce_gradients_and_reference():
    a, p = rng.normal(size=4), rng.normal(size=4)
    negs = [rng.normal(size=4) for _ in range(3)]
    arrs = {"a": a, "p": p, "n0": negs[0], "n1": negs[1]}
    check_grads(lambda P: ad.info_nce(P["a"], P["p"], [P["n0"], P["n1"]], 0.3), arrs)
    got = ad.info_nce(ad.constant(a), ad.constant(p), [ad.constant(n) for n in negs], 0.2).item()
    assert got == pytest.approx(info_nce_reference(a, p, negs, 0.2), abs=1e-12)


def test_info_nce_rows_mask_matches_single():
    anchors, cands = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
    mask = np.array([[1, 1, 0, 1, 0], [0, 1, 1, 1, 1]], dtype=bool)
    rows = ad.info_nce_rows(ad.constant(anchors), ad.constant(cands), [0, 2], 0.5, mask).data
    ref0 = info_nce_reference(anchors[0], cands[0], [cands[1], cands[3]], 0.5)
    ref1 = info_nce_reference(anchors[1], cands[2], [cands[1], cands[3], cands[4]], 0.5)
    np.testing.assert_allclose(rows, [ref0, ref1], atol=1e-12)


def test_singleton_info_nce_is_zero():
    a, p = ad.constant(rng.normal(size=3)), ad.constant(rng.normal(size=3))
    assert abs(ad.info_nce(a, p, [], 0.1).item()) < 1e-12


def test_info_nce_errors():
    a = ad.constant(np.ones(3))
    with pytest.raises(ValueError):
        ad.info_nce(a, a, [], 0.0)
    with pytest.raises(ad.ShapeError):
        ad.info_nce(a, ad.constant(np.ones(2)), [], 0.1)
    with pytest.raises(ZeroDivisionError):
        ad.info_nce(ad.constant(np.zeros(3)), a, [], 0.1)


def test_non_finite_is_named():
    with pytest.raises(ad.NonFiniteError, match="exp"):
        ad.exp(ad.constant(np.array([1000.0])))


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.constant(A), ad.constant(A))
    with pytest.raises(ad.ShapeError):
        ad.add(ad.constant(A), ad.constant(np.ones(3)))
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.constant(A))


def test_division_and_log_domain():
    with pytest.raises(ZeroDivisionError):
        ad.div(ad.constant(np.ones(2)), ad.constant(np.array([1.0, 0.0])))
    with pytest.raises(FloatingPointError):
        ad.log(ad.constant(np.array([0.0])))


def test_tape_order_and_shared_subexpression():
    x = ad.constant(np.array([2.0]))
    P = ad.ParameterSet({"x": np.array([2.0])}).leaves()
    y = ad.mul(P["x"], P["x"])
    z = ad.sum(ad.add(y, y))
    assert y._index > P["x"]._index and z._index > y._index
    g = ad.backward(z, P)
    assert g["x"][0] == pytest.approx(8.0)
    assert x._index < z._index


def test_unreached_leaves_get_zero_after_shared_pass():
    P = ad.ParameterSet({"a": np.ones(2), "b": np.ones(2)}).leaves()
    la = ad.sum(ad.mul(P["a"], P["b"]))
    lb = ad.sum(P["a"])
    ad.backward(la, P)
    g = ad.backward(lb, P)
    assert np.all(g["b"] == 0) and np.all(g["a"] == 1)


def test_parameter_set_is_immutable():
    ps = ad.ParameterSet({"w": np.ones(2)})
    with pytest.raises(ValueError):
        ps["w"][0] = 5.0
    with pytest.raises(ad.ShapeError):
        ps.replace({"w": np.ones(3)})
    with pytest.raises(KeyError):
        ps.replace({"v": np.ones(2)})
    assert ps.replace({"w": np.zeros(2)})["w"][0] == 0.0 and ps["w"][0] == 1.0


def test_adam_first_step_moves_by_lr():
    ps = ad.ParameterSet({"w": np.array([1.0, -1.0])})
    new, state = ad.adam_step(ps, {"w": np.array([0.5, -2.0])}, ad.AdamState(), lr=0.1)
    np.testing.assert_allclose(new["w"], [0.9, -0.9], atol=1e-7)
    assert state.step == 1
    with pytest.raises(KeyError):
        ad.adam_step(ps, {"v": np.ones(2)}, ad.AdamState(), lr=0.1)
    with pytest.raises(ValueError):
        ad.adam_step(ps, {"w": np.ones(2)}, ad.AdamState(), lr=0.0)


def test_adam_respects_trainable():
    ps = ad.ParameterSet({"w": np.ones(1), "v": np.ones(1)})
    new, _ = ad.adam_step(ps, {"w": np.ones(1), "v": np.ones(1)}, ad.AdamState(), 0.1,
                          trainable=["w"])
    assert new["v"][0] == 1.0 and new["w"][0] != 1.0


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(ad.constant(x), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(s > 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(0.1, 5)), st.floats(0.05, 2.0))
def test_cosine_scale_invariant(v, c):
    w = v[::-1].copy()
    a = ad.cosine(ad.constant(v), ad.constant(w)).item()
    b = ad.cosine(ad.constant(v * c), ad.constant(w)).item()
    assert a == pytest.approx(b, abs=1e-12)
    assert -1 - 1e-12 <= a <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5,), elements=finite), st.floats(0.05, 1.0))
def test_info_nce_nonnegative_and_bounded(x, tau):
    a = ad.constant(np.ones(5) + 0.1 * np.arange(5))
    p = ad.constant(x + 1e-3 * np.arange(1, 6))
    n = [ad.constant(np.roll(x, 1) + 0.5), ad.constant(-a.data)]
    val = ad.info_nce(a, p, n, tau).item()
    assert val >= 0
    assert val <= 2 / tau + math.log(3) + 1e-9


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6,), elements=finite))
def test_segment_softmax_is_per_segment_distribution(x):
    seg = np.array([0, 0, 1, 2, 2, 2])
    s = ad.segment_softmax(ad.constant(x), seg, 3).data
    for k in range(3):
        assert s[seg == k].sum() == pytest.approx(1.0, abs=1e-12)
