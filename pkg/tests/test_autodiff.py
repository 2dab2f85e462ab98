import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlkv import autodiff as ad
from rlkv.autodiff import Tensor


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def check_grad(build, *shapes, seed=0, step=1e-3, tol=1e-3):
    """backward() in float32 against float64 central differences."""
    rng = np.random.default_rng(seed)
    points = [rng.normal(size=s) for s in shapes]
    xs = [Tensor(p, requires_grad=True) for p in points]
    ad.backward(build(*xs))
    for i, p in enumerate(points):
        def f(x, i=i):
            with ad.default_dtype(np.float64):
                args = [Tensor(x if j == i else points[j]) for j in range(len(points))]
                return build(*args).item()
        fd = ad.finite_diff_grad(f, p, step)
        assert rel_err(xs[i].grad, fd) < tol, (i, xs[i].grad, fd)


def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    out = ad.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_symmetry():
    np.testing.assert_allclose(ad.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_cross_entropy_value():
    expected = float(-mpmath.log(mpmath.mpf(3) / 4))
    assert math.isclose(expected, 0.28768207245178, rel_tol=1e-12)
    out = ad.cross_entropy(Tensor([[0.0, math.log(3.0)]]), [1])
    assert out.item() == pytest.approx(expected, abs=1e-6)


def test_product_rule():
    x, y = Tensor(3.0, requires_grad=True), Tensor(5.0, requires_grad=True)
    ad.backward(ad.mul(x, y))
    assert x.grad == pytest.approx(5.0)
    assert y.grad == pytest.approx(3.0)


def test_sum_softmax_has_zero_grad():
    z = Tensor(np.random.default_rng(1).normal(size=(3, 5)), requires_grad=True)
    ad.backward(ad.tsum(ad.softmax_lastdim(z)))
    np.testing.assert_allclose(z.grad, 0.0, atol=1e-6)


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(Tensor(np.ones(3), requires_grad=True))


def test_shape_mismatch_names_op():
    with pytest.raises(ad.ShapeError, match="add.*\\(2,\\).*\\(3,\\)"):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_leaves_without_requires_grad_get_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.full(3, 2.0))
    grads = ad.backward(ad.tsum(ad.mul(x, c)))
    assert c.id not in grads and c.grad is None
    np.testing.assert_allclose(x.grad, 2.0)


def test_finite_diff_oracle():
    g = ad.finite_diff_grad(lambda x: float(x[0] ** 2), np.array([2.0]), 1e-4)
    assert g[0] == pytest.approx(4.0, abs=1e-6)
    np.testing.assert_array_equal(ad.finite_diff_grad(lambda x: 7.0, np.zeros(4), 1e-3), 0.0)


def test_fan_out_sums_gradients():
    # y = x*x + x used twice must equal the duplicated-subgraph construction
    rng = np.random.default_rng(3)
    p = rng.normal(size=4)
    x = Tensor(p, requires_grad=True)
    h = ad.mul(x, x)
    ad.backward(ad.tsum(ad.add(ad.mul(h, h), h)))
    shared = x.grad.copy()
    x2 = Tensor(p, requires_grad=True)
    h1, h2, h3 = ad.mul(x2, x2), ad.mul(x2, x2), ad.mul(x2, x2)
    ad.backward(ad.tsum(ad.add(ad.mul(h1, h2), h3)))
    np.testing.assert_allclose(shared, x2.grad, rtol=1e-6)
    np.testing.assert_allclose(shared, 4 * p ** 3 + 2 * p, rtol=1e-5)


def test_graph_is_topologically_ordered():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.softmax_lastdim(ad.matmul(x, x))
    graph = ad.ComputationGraph(ad.tsum(y))
    for _kind, input_ids, out in graph.nodes:
        assert all(i < out.id for i in input_ids)


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: ad.tsum(ad.mul(ad.add(a, b), a)), [(3, 4), (3, 4)]),
    ("sub", lambda a, b: ad.tsum(ad.mul(ad.sub(a, b), b)), [(3, 4), (3, 4)]),
    ("mul", lambda a, b: ad.tsum(ad.mul(ad.mul(a, b), a)), [(2, 5), (2, 5)]),
    ("scale", lambda a: ad.tsum(ad.mul(ad.scale(a, -1.7), a)), [(4,)]),
    ("matmul2d", lambda a, b: ad.tsum(ad.gelu(ad.matmul(a, b))), [(2, 3, 4), (4, 5)]),
    ("matmul_batched", lambda a, b: ad.tsum(ad.gelu(ad.matmul(a, b))), [(2, 3, 4), (2, 4, 2)]),
    ("softmax", lambda a, b: ad.tsum(ad.mul(ad.softmax_lastdim(a), b)), [(3, 5), (3, 5)]),
    ("layernorm", lambda x, g, b, w: ad.tsum(ad.mul(ad.layernorm(x, g, b), w)), [(3, 6), (6,), (6,), (3, 6)]),
    ("cross_entropy", lambda a: ad.cross_entropy(a, [0, 2, 1], weights=[1.0, 0.5, 2.0]), [(3, 4)]),
    ("cross_entropy_none", lambda a, w: ad.tsum(ad.mul(ad.cross_entropy(a, [0, 2, 1], reduction="none"), w)),
     [(3, 4), (3,)]),
    ("mask_fill", lambda a, b: ad.tsum(ad.mul(ad.softmax_lastdim(ad.mask_fill(a, np.triu(np.ones((4, 4), bool), 1), -1e30)), b)),
     [(2, 4, 4), (2, 4, 4)]),
    ("concat", lambda a, b, w: ad.tsum(ad.mul(ad.concat_lastdim([a, b]), w)), [(2, 3), (2, 2), (2, 5)]),
    ("exp_log", lambda a: ad.tsum(ad.log(ad.add(ad.exp(a), ad.exp(a)))), [(5,)]),
    ("transpose_reshape", lambda a, w: ad.tsum(ad.mul(ad.reshape(ad.transpose(a, (1, 0, 2)), (3, 8)), w)),
     [(2, 3, 4), (3, 8)]),
    ("expand", lambda a, w: ad.tsum(ad.mul(ad.expand(a, (3, 4)), w)), [(1, 4), (3, 4)]),
    ("getitem", lambda a: ad.tsum(ad.mul(ad.getitem(a, 1), ad.getitem(a, 2))), [(3, 4)]),
    ("rope", lambda a, w: ad.tsum(ad.mul(ad.rope(a, np.cos(np.outer(np.arange(3), [1.0, 0.3])),
                                                 np.sin(np.outer(np.arange(3), [1.0, 0.3]))), w)),
     [(2, 3, 4), (2, 3, 4)]),
    ("gelu", lambda a: ad.tsum(ad.gelu(a)), [(6,)]),
])
def test_primitive_gradients(name, build, shapes):
    check_grad(build, *shapes)


def test_embedding_gradient():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    check_grad(lambda t, w: ad.tsum(ad.mul(ad.embedding_lookup(t, ids), w)), (4, 3), (2, 3, 3))


def test_clip_minimum_gradients_away_from_kinks():
    a = Tensor([0.5, 1.1, 1.5], requires_grad=True)
    b = Tensor([1.0, 1.0, 1.0], requires_grad=True)
    ad.backward(ad.tsum(ad.add(ad.minimum(a, b), ad.clip(a, 0.8, 1.2))))
    np.testing.assert_allclose(a.grad, [1.0, 1.0, 0.0])
    np.testing.assert_allclose(b.grad, [0.0, 1.0, 1.0])


def test_abs_subgradient_zero():
    a = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
    ad.backward(ad.tsum(ad.tabs(a)))
    np.testing.assert_array_equal(a.grad, [-1.0, 0.0, 1.0])


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 4))
    targets = rng.integers(0, 3, size=5)

    def net(w1, w2):
        return ad.cross_entropy(ad.matmul(ad.gelu(ad.matmul(Tensor(x), w1)), w2), targets)

    check_grad(net, (4, 6), (6, 3))


def test_mask_fill_requires_bool():
    with pytest.raises(ad.ShapeError):
        ad.mask_fill(Tensor(np.ones((2, 2))), np.ones((2, 2)), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_softmax_rows_are_distributions(rows, cols, seed):
    z = np.random.default_rng(seed).normal(scale=10, size=(rows, cols))
    y = ad.softmax_lastdim(Tensor(z)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_primitive_chain_gradients(seed):
    check_grad(lambda a, b: ad.tsum(ad.mul(ad.softmax_lastdim(ad.matmul(a, b)), ad.matmul(a, b))),
               (3, 4), (4, 3), seed=seed)
