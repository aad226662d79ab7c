import numpy as np
import pytest

from deformux import autograd as ag


def test_quadratic_gradient():
    a = ag.parameter(np.array([1.0, -2.0, 3.0]))
    loss = ag.sum_all(ag.mul(a, a))
    (g,) = ag.backward(loss, [a]).values()
    np.testing.assert_array_equal(g, 2 * a.value)


def test_fanout_accumulates():
    a = ag.parameter(np.array([2.0]))
    b = ag.add(ag.scale(a, 3.0), ag.mul(a, a))  # 3a + a^2
    loss = ag.sum_all(ag.add(b, a))  # 4a + a^2
    assert ag.backward(loss, [a])[a][0] == 4 + 2 * 2


def test_unreachable_parameter_gets_zeros():
    a, b = ag.parameter(np.ones(2)), ag.parameter(np.ones((2, 2)))
    grads = ag.backward(ag.sum_all(a), [a, b])
    np.testing.assert_array_equal(grads[b], np.zeros((2, 2)))


def test_nonscalar_loss_rejected():
    with pytest.raises(ValueError):
        ag.backward(ag.parameter(np.ones(3)), [])


def test_constants_do_not_require_grad():
    c = ag.constant(np.ones(3))
    assert not ag.add(c, c).requires_grad


def test_broadcast_add_unbroadcasts():
    x = ag.parameter(np.ones((2, 3, 1, 1, 1)))
    b = ag.parameter(np.ones((1, 3, 1, 1, 1)))
    g = ag.backward(ag.sum_all(ag.add(x, b)), [x, b])
    np.testing.assert_array_equal(g[b], np.full((1, 3, 1, 1, 1), 2.0))


def test_finite_difference_grad_on_known_function():
    f = lambda t: float(np.sin(t[0]) * t[1] ** 2)
    theta = np.array([0.3, 1.7])
    fd = ag.finite_difference_grad(f, theta, h=1e-5)
    np.testing.assert_allclose(fd, [np.cos(0.3) * 1.7**2, 2 * np.sin(0.3) * 1.7], rtol=1e-9)


def test_finite_difference_subset_marks_others_nan():
    fd = ag.finite_difference_grad(lambda t: float(t.sum()), np.zeros(4), indices=[1])
    assert np.isnan(fd[0]) and fd[1] == pytest.approx(1.0)


def test_deep_chain_does_not_recurse():
    a = ag.parameter(np.array([1.0]))
    y = a
    for _ in range(5000):
        y = ag.scale(y, 1.0)
    assert ag.backward(ag.sum_all(y), [a])[a][0] == 1.0


def test_backward_is_bit_reproducible():
    rng = np.random.default_rng(0)
    x = ag.parameter(rng.standard_normal((1, 3, 4, 4, 4)))
    w = ag.parameter(rng.standard_normal((3, 3)))

    def run():
        y = ag.gelu(ag.pointwise_linear(x, w))
        loss = ag.sum_all(ag.add(ag.mul(y, y), y))
        return ag.backward(loss, [x, w])

    g1, g2 = run(), run()
    assert g1[x].tobytes() == g2[x].tobytes() and g1[w].tobytes() == g2[w].tobytes()


def test_soft_dice_loss_values():
    gt = np.zeros((1, 2, 2, 1, 1))
    gt[0, 1, 0] = 1
    gt[0, 0, 1] = 1
    perfect = ag.soft_dice_loss(gt.copy(), gt)
    assert float(perfect.value) == pytest.approx(0.0, abs=1e-12)
    # p = 0.5 everywhere: (2*0.5 + eps) / (1 + 1 + eps)
    half = ag.soft_dice_loss(np.full_like(gt, 0.5), gt, eps=1e-5)
    assert float(half.value) == pytest.approx(1 - (1 + 1e-5) / (2 + 1e-5), abs=1e-15)


def test_cross_entropy_uniform_logits():
    gt = np.zeros((1, 4, 2, 2, 2))
    gt[:, 0] = 1
    assert float(ag.cross_entropy(np.zeros_like(gt), gt).value) == pytest.approx(np.log(4))
