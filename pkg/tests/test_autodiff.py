import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rscn import autodiff as ad
from rscn.autodiff import LinearLayer, Tensor
from rscn.gradcheck import numeric_grad, rel_err


def leaf(x):
    return Tensor(x, requires_grad=True)


def test_add_componentwise():
    out = ad.apply_primitive("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert out.data.tolist() == [4.0, 6.0]
    assert out.op == "add" and len(out.parents) == 2


def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((2, 2))
    out = ad.apply_primitive("matmul", Tensor(np.eye(2)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_mean():
    assert ad.mean(Tensor([2.0, 4.0, 6.0])).item() == 4.0


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_unknown_primitive():
    with pytest.raises(ValueError):
        ad.apply_primitive("conv", Tensor(1.0))


def test_leaf_and_nonleaf_structure():
    x = leaf([1.0])
    y = ad.scale(x, 2.0)
    assert x.is_leaf and not x.parents
    assert not y.is_leaf and y.parents == (x,)
    assert y.data.size == int(np.prod(y.shape))


# ---------------------------------------------------------------- backward


def test_square_gradient_matches_finite_difference():
    x = leaf(3.0)
    ad.backward(ad.mul(x, x))
    num = numeric_grad(lambda: float(x.data * x.data), x.data)
    assert x.grad == pytest.approx(6.0)
    assert float(num) == pytest.approx(6.0, rel=1e-8)


def test_constant_loss_gives_zero_gradient():
    x = leaf([1.0, 2.0])
    loss = ad.add(ad.scale(ad.sum_(x), 0.0), Tensor(5.0))
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_mean_matmul_against_finite_differences():
    rng = np.random.default_rng(1)
    W = leaf(rng.standard_normal((3, 3)))
    v = leaf(rng.standard_normal(3))

    def f():
        return float(np.mean(W.data @ v.data))

    ad.backward(ad.mean(ad.matmul(W, v)))
    assert rel_err(W.grad, numeric_grad(f, W.data)) < 1e-6
    assert rel_err(v.grad, numeric_grad(f, v.data)) < 1e-6


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.scale(leaf([1.0, 2.0]), 1.0))


def test_repeated_backward_accumulates():
    x = leaf([1.0, -2.0])
    ad.backward(ad.sum_(ad.scale(x, 3.0)))
    ad.backward(ad.sum_(ad.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_two_consumers_sum_rule():
    x = leaf([2.0])
    y = ad.scale(x, 3.0)
    loss = ad.sum_(ad.add(ad.mul(y, y), y))  # 9x^2 + 3x
    ad.backward(loss)
    assert x.grad[0] == pytest.approx(18 * 2.0 + 3)


def test_diamond_graph_visits_each_node_once():
    x = leaf([1.5])
    a = ad.scale(x, 2.0)
    b = ad.add(a, a)
    c = ad.mul(b, a)  # 2a^2 = 8x^2
    ad.backward(ad.sum_(c))
    assert x.grad[0] == pytest.approx(16 * 1.5)


# ---------------------------------------------------------------- gradient reversal


def test_grad_reverse_forward_is_identity():
    x = Tensor([1.5, -2.0])
    out = ad.grad_reverse(x, 1.0)
    assert out.data.tobytes() == x.data.tobytes()


@pytest.mark.parametrize("lam, expected", [(1.0, [-1.0, -1.0]), (0.5, [-0.5, -0.5]), (0.0, [0.0, 0.0])])
def test_grad_reverse_backward_scaling(lam, expected):
    x = leaf([1.0, 1.0])
    ad.backward(ad.sum_(ad.grad_reverse(x, lam)))
    np.testing.assert_array_equal(x.grad, expected)


def test_grad_reverse_rejects_negative_lambda():
    with pytest.raises(ValueError):
        ad.grad_reverse(leaf([1.0]), -0.1)


# ---------------------------------------------------------------- normalization and similarity


@pytest.mark.parametrize("vec, expected", [([0.6, 0.8], [0.6, 0.8]), ([0.0, 0.0], [0.0, 0.0]),
                                           ([3.0, 4.0], [0.6, 0.8])])
def test_l2_normalize(vec, expected):
    np.testing.assert_allclose(ad.l2_normalize(Tensor(vec)).data, expected, atol=1e-15)


def test_l2_normalize_zero_vector_gradient_is_finite():
    x = leaf([0.0, 0.0])
    ad.backward(ad.sum_(ad.l2_normalize(x)))
    assert np.all(np.isfinite(x.grad))


def test_cosine_cases():
    v = Tensor([0.3, -1.2, 2.0])
    assert ad.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-15)
    assert ad.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert ad.cosine_similarity(v, Tensor(-v.data)).item() == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ad.ShapeError):
        ad.cosine_similarity(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


vectors = arrays(np.float64, 4, elements=st.floats(-100, 100, allow_nan=False))


@given(vectors, vectors)
@settings(max_examples=200, deadline=None)
def test_cosine_symmetric_and_bounded(a, b):
    ab = ad.cosine_similarity(Tensor(a), Tensor(b)).item()
    ba = ad.cosine_similarity(Tensor(b), Tensor(a)).item()
    assert ab == ba
    assert -1 - 1e-12 <= ab <= 1 + 1e-12


# ---------------------------------------------------------------- losses on logits


def test_bce_values():
    assert ad.bce_with_logits(Tensor(0.0), 1).item() == pytest.approx(math.log(2), abs=1e-15)
    assert ad.bce_with_logits(Tensor(40.0), 1).item() < 1e-12
    assert ad.bce_with_logits(Tensor(1.0), 0).item() == pytest.approx(math.log1p(math.e), abs=1e-12)
    assert math.isfinite(ad.bce_with_logits(Tensor(-1e4), 1).item())
    with pytest.raises(ValueError):
        ad.bce_with_logits(Tensor(0.0), 2)


def test_softmax_cross_entropy_values():
    assert ad.softmax_cross_entropy(Tensor([0.7, 0.7, 0.7]), 2).item() == pytest.approx(math.log(3))
    assert ad.softmax_cross_entropy(Tensor([40.0, 0.0, 0.0]), 0).item() < 1e-12
    assert ad.softmax_cross_entropy(Tensor([1.0, 0.0]), 0).item() == pytest.approx(
        math.log1p(math.exp(-1)), abs=1e-12)
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(Tensor([1.0, 0.0]), 2)


# ---------------------------------------------------------------- layers


def test_mlp_identity_and_zero():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 2)))
    ident = LinearLayer(leaf(np.eye(2)), leaf(np.zeros(2)))
    np.testing.assert_array_equal(ad.mlp_forward([ident], x).data, x.data)
    zero = [LinearLayer(leaf(np.zeros((2, 4))), leaf(np.zeros(4))),
            LinearLayer(leaf(np.zeros((4, 3))), leaf(np.zeros(3)))]
    np.testing.assert_array_equal(ad.mlp_forward(zero, x).data, np.zeros((3, 3)))


def test_mlp_matches_straight_line_forward():
    rng = np.random.default_rng(7)
    layers = ad.init_mlp([5, 4, 4, 2], rng, "net")
    x = rng.standard_normal((3, 5))
    w = [l.weight.data for l in layers]
    b = [l.bias.data for l in layers]
    h1 = np.maximum(x @ w[0] + b[0], 0)
    h2 = np.maximum(h1 @ w[1] + b[1], 0)
    expected = h2 @ w[2] + b[2]
    np.testing.assert_allclose(ad.mlp_forward(layers, Tensor(x)).data, expected, rtol=1e-14)


def test_mlp_dimension_mismatch():
    layers = ad.init_mlp([5, 4], np.random.default_rng(0), "net")
    with pytest.raises(ad.ShapeError):
        ad.mlp_forward(layers, Tensor(np.zeros((2, 3))))


def test_init_bounds():
    layer = LinearLayer.init(16, 8, np.random.default_rng(0))
    assert np.all(np.abs(layer.weight.data) <= 0.25)
    assert layer.weight.requires_grad and layer.bias.requires_grad
