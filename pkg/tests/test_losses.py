import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rscn import autodiff as ad
from rscn.autodiff import Tensor
from rscn.gradcheck import numeric_grad, rel_err
from rscn.losses import (Discriminator, LossWeights, loss_bpa, loss_detection, loss_rsh, loss_ssp,
                         total_loss_G, total_loss_GR)
from rscn.prototypes import BG, IGNORE, PrototypeSet, SimilarityMatrix


def leaf(x):
    return Tensor(x, requires_grad=True)


def zero_disc(d=4, bias=0.0):
    disc = Discriminator.init(d, 5, np.random.default_rng(0))
    for layer in disc.layers:
        layer.weight.data[:] = 0
        layer.bias.data[:] = 0
    disc.layers[-1].bias.data[:] = bias
    return disc


# ---------------------------------------------------------------- detection


def test_detection_loss_values():
    sat = Tensor([[40.0, 0.0, 0.0], [0.0, 0.0, 40.0]])
    assert loss_detection(sat, [0, BG]).item() < 1e-12
    assert loss_detection(Tensor(np.zeros((4, 3))), [0, 1, BG, 1]).item() == pytest.approx(math.log(3))
    rows = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.5]])
    expected = np.mean([ad.softmax_cross_entropy(Tensor(rows[0]), 0).item(),
                        ad.softmax_cross_entropy(Tensor(rows[1]), 2).item()])
    assert loss_detection(Tensor(rows), [0, BG]).item() == pytest.approx(expected, abs=1e-14)


def test_detection_loss_ignores_rows():
    rows = np.array([[5.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    assert loss_detection(Tensor(rows), [0, IGNORE]).item() == pytest.approx(
        ad.softmax_cross_entropy(Tensor(rows[0]), 0).item())
    with pytest.raises(ValueError, match="ignored"):
        loss_detection(Tensor(rows), [IGNORE, IGNORE])


# ---------------------------------------------------------------- BPA


def test_bpa_at_zero_logits():
    assert loss_bpa(Tensor(np.ones(4)), Tensor(np.zeros(4)), zero_disc()).item() == pytest.approx(
        2 * math.log(2), abs=1e-12)


def test_bpa_perfect_discriminator():
    disc = Discriminator.init(1, 1, np.random.default_rng(0))
    for layer in disc.layers:
        layer.weight.data[:] = 1.0
        layer.bias.data[:] = 0.0
    disc.layers[-1].bias.data[:] = -40.0  # logit = relu(x) - 40: +40 for source, -40 for target
    loss = loss_bpa(Tensor([80.0]), Tensor([-5.0]), disc)
    assert loss.item() < 1e-12


def test_bpa_dim_mismatch():
    with pytest.raises(ad.ShapeError):
        loss_bpa(Tensor(np.zeros(3)), Tensor(np.zeros(3)), zero_disc(4))


def test_bpa_sign_contract():
    rng = np.random.default_rng(5)
    disc = Discriminator.init(3, 4, rng)
    s, t = leaf(rng.standard_normal(3)), leaf(rng.standard_normal(3))
    ad.backward(loss_bpa(s, t, disc, lam=0.5))
    reversed_s, reversed_w = s.grad.copy(), disc.layers[0].weight.grad.copy()

    def plain():
        src = ad.bce_with_logits(disc(Tensor(s.data)), 1)
        tgt = ad.bce_with_logits(disc(Tensor(t.data)), 0)
        return ad.add(src, tgt).item()

    num_s = numeric_grad(plain, s.data)
    np.testing.assert_allclose(reversed_s, -0.5 * num_s, rtol=1e-6, atol=1e-10)
    num_w = numeric_grad(plain, disc.layers[0].weight.data)
    # the discriminator sees the un-reversed gradient
    assert rel_err(reversed_w, num_w) < 1e-6


def test_bpa_batch_mean():
    disc = Discriminator.init(2, 3, np.random.default_rng(1))
    a, b, t = Tensor([1.0, 0.0]), Tensor([0.0, 2.0]), Tensor([1.0, 1.0])
    both = loss_bpa([a, b], [t], disc).item()
    singles = [loss_bpa(a, t, disc).item(), loss_bpa(b, t, disc).item()]
    assert both == pytest.approx(np.mean(singles), abs=1e-14)


# ---------------------------------------------------------------- RSH


def proto_set(classes, bg):
    return PrototypeSet(0, {c: Tensor(v) for c, v in classes.items()}, Tensor(bg))


def test_rsh_zero_when_backgrounds_coincide():
    ps = proto_set({0: [1.0, 2.0, 0.0], 2: [-1.0, 0.5, 3.0]}, [0.2, 0.1, 0.0])
    assert loss_rsh(ps, Tensor([0.2, 0.1, 0.0])).item() == 0.0


def test_rsh_hand_case():
    ps = proto_set({0: [1.0, 0.0]}, [0.0, 0.0])
    assert loss_rsh(ps, Tensor([0.0, 1.0])).item() == pytest.approx(1.0, abs=1e-9)


def test_rsh_skips_coincident_anchor():
    ps = proto_set({0: [1.0, 1.0], 1: [1.0, 0.0]}, [1.0, 1.0])
    only_one = proto_set({1: [1.0, 0.0]}, [1.0, 1.0])
    p_t = Tensor([0.0, 3.0])
    assert loss_rsh(ps, p_t).item() == loss_rsh(only_one, p_t).item()
    assert loss_rsh(proto_set({0: [1.0, 1.0]}, [1.0, 1.0]), p_t).item() == 0.0


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_rsh_bounds_and_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    d = 4
    classes = {c: rng.standard_normal(d) for c in range(3)}
    bg_s, bg_t = rng.standard_normal(d), rng.standard_normal(d)
    value = loss_rsh(proto_set(classes, bg_s), Tensor(bg_t)).item()
    assert 0.0 <= value <= 2 * math.sqrt(d) * 3 + 1e-12
    scaled = loss_rsh(proto_set({c: 2.5 * v for c, v in classes.items()}, 2.5 * bg_s),
                      Tensor(2.5 * bg_t)).item()
    assert scaled == pytest.approx(value, abs=1e-12)


# ---------------------------------------------------------------- SSP


def mat(values, labels=None):
    values = np.asarray(values, float)
    labels = labels or list(range(len(values) - 1)) + ["bg"]
    return SimilarityMatrix(labels, Tensor(values))


def test_ssp_cases():
    a = mat([[1, 0.8], [0.8, 1]])
    assert loss_ssp(a, a).item() == 0.0
    assert loss_ssp(a, mat([[1, 0.6], [0.6, 1]])).item() == pytest.approx(0.4, abs=1e-15)
    assert loss_ssp(a, mat([[0.3, 0.8], [0.8, -2]])).item() == 0.0


def test_ssp_label_mismatch():
    with pytest.raises(ValueError):
        loss_ssp(mat(np.eye(3), [0, 1, "bg"]), mat(np.eye(3), [0, 2, "bg"]))


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_ssp_zero_iff_off_diagonals_match(seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(-1, 1, (3, 3))
    r = m.copy()
    r[np.diag_indices(3)] = rng.uniform(-1, 1, 3)
    assert loss_ssp(mat(m), mat(r)).item() == 0.0
    i, j = rng.choice(3, 2, replace=False)
    r[i, j] += 0.1
    assert loss_ssp(mat(m), mat(r)).item() > 0


def test_ssp_gradient_stops_at_reference():
    m_s = leaf(np.array([[1.0, 0.3], [0.3, 1.0]]))
    m_r = leaf(np.array([[1.0, 0.1], [0.1, 1.0]]))
    ad.backward(loss_ssp(SimilarityMatrix([0, "bg"], m_s), SimilarityMatrix([0, "bg"], m_r)))
    assert m_r.grad is None
    np.testing.assert_array_equal(m_s.grad, [[0.0, 1.0], [1.0, 0.0]])


# ---------------------------------------------------------------- totals


def test_total_losses():
    terms = [Tensor(v) for v in (0.5, 0.2, 0.1, 0.3)]
    assert total_loss_G(*terms).item() == pytest.approx(1.1)
    assert total_loss_G(*terms, LossWeights(1, 0, 0, 0)).item() == 0.5
    assert total_loss_G(*[Tensor(0.0)] * 4).item() == 0.0
    assert total_loss_GR(Tensor(0.7)).item() == 0.7


def test_weights_parsing():
    assert LossWeights.from_string("1,0,0.5,2").as_tuple() == (1.0, 0.0, 0.5, 2.0)
    with pytest.raises(ValueError):
        LossWeights.from_string("1,0")
    with pytest.raises(ValueError):
        LossWeights(w_rsh=-1)
