import math

import numpy as np
import pytest

from hyperdys import autodiff as ad
from hyperdys.errors import LabelError, ParameterError, ShapeError


def leaf(a):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def check(loss_fn, params, tol=1e-6, h=1e-6):
    assert ad.gradient_check(loss_fn, params, h=h) < tol


# ----------------------------------------------------------- small graphs


def test_mul_add_gradients():
    a, b = leaf(2.0), leaf(-3.0)
    y = a * b + a
    y.backward()
    assert a.grad == pytest.approx(-2.0)
    assert b.grad == pytest.approx(2.0)


def test_shared_node_accumulates():
    a = leaf([1.0, 2.0])
    y = ad.mul(a, a)
    s = ad.linear(y.reshape(1, 2), ad.Tensor(np.ones((2, 1))))
    s.reshape(()).backward()
    np.testing.assert_allclose(a.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        leaf([1.0, 2.0]).backward()


# ------------------------------------------------- finite-difference checks

def test_fd_activations():
    rng = np.random.default_rng(7)
    x = leaf(rng.normal(size=(3, 4)) + 0.05)
    w = ad.Tensor(rng.normal(size=(4, 1)))
    for act in (ad.relu, ad.tanh, ad.sigmoid):
        check(lambda: ad.softmax_cross_entropy(ad.linear(act(x), w).reshape(1, 3), np.array([2])), [x])


def test_fd_linear_concat_getitem():
    rng = np.random.default_rng(8)
    x, W, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(6, 2))), leaf(rng.normal(size=2))
    y = leaf(rng.normal(size=(3, 2)))

    def loss():
        z = ad.linear(ad.concat([x[:, :3], y[:, ::-1], x[:, 3:]], axis=1), W, b)
        return ad.softmax_cross_entropy(z, np.array([0, 1, 1]))

    check(loss, [x, W, b, y])


def test_fd_batched_affine_both_modes():
    rng = np.random.default_rng(9)
    x = leaf(rng.normal(size=(4, 5)))
    for m in (1, 4):
        W, b = leaf(rng.normal(size=(m, 5, 2))), leaf(rng.normal(size=(m, 2)))
        check(lambda: ad.softmax_cross_entropy(ad.batched_affine(x, W, b), np.array([0, 1, 0, 1])), [x, W, b])


def test_fd_conv_pool_dropout():
    rng = np.random.default_rng(7)
    x = leaf(rng.normal(size=(2, 2, 9, 9)))
    K, b = leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
    W = ad.Tensor(rng.normal(size=(12, 2)))

    def loss():
        # tanh keeps pool windows free of tied zeros, where the max is not differentiable
        h = ad.tanh(ad.conv2d(x, K, b, stride=2, pad=1))
        h = ad.maxpool2d(h, 3, 2)
        h = ad.dropout(h, 0.5, np.random.default_rng(3), train=True)
        return ad.softmax_cross_entropy(ad.linear(ad.flatten(h), W), np.array([1, 0]))

    check(loss, [x, K, b], tol=1e-5, h=1e-4)


# ------------------------------------------------------------------- conv2d


def conv_oracle(x, K, b, stride, pad):
    n, c, h, w = x.shape
    oc, _, kh, kw = K.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for i in range(n):
        for o in range(oc):
            for r in range(oh):
                for s in range(ow):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * stride + u, s * stride + v] * K[o, ch, u, v]
                    out[i, o, r, s] = acc
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (4, 2)])
def test_conv2d_matches_loops(stride, pad):
    rng = np.random.default_rng(stride)
    x, K, b = rng.normal(size=(2, 3, 11, 10)), rng.normal(size=(4, 3, 3, 5)), rng.normal(size=4)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(K), ad.Tensor(b), stride, pad).data
    np.testing.assert_allclose(out, conv_oracle(x, K, b, stride, pad), atol=1e-12)


def test_conv2d_first_layer_shape():
    x = ad.Tensor(np.zeros((1, 3, 224, 224), np.float32))
    K = ad.Tensor(np.zeros((2, 3, 11, 11), np.float32))
    assert ad.conv2d(x, K, stride=4, pad=2).shape == (1, 2, 55, 55)


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        ad.conv2d(ad.Tensor(np.zeros((1, 1, 3, 3))), ad.Tensor(np.zeros((1, 1, 5, 5))))


# ------------------------------------------------------------------ maxpool


def test_maxpool_matches_brute_force():
    x = np.random.default_rng(0).normal(size=(2, 3, 13, 13))
    y = ad.maxpool2d(ad.Tensor(x), 3, 2).data
    assert y.shape == (2, 3, 6, 6)
    for r in range(6):
        for s in range(6):
            np.testing.assert_array_equal(y[:, :, r, s], x[:, :, 2 * r : 2 * r + 3, 2 * s : 2 * s + 3].max(axis=(2, 3)))


def test_maxpool_tie_goes_to_first_index():
    x = leaf(np.ones((1, 1, 3, 3)))
    ad.maxpool2d(x, 3, 2).reshape(()).backward()
    expected = np.zeros((1, 1, 3, 3))
    expected[0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


# ------------------------------------------------------------ cross-entropy


def test_xent_uniform_logits_is_ln2():
    loss = ad.softmax_cross_entropy(ad.Tensor(np.zeros((5, 2))), np.array([0, 1, 0, 1, 1]))
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)


def test_xent_is_stable_for_huge_logits():
    z = leaf([[1000.0, -1000.0], [-1e4, 1e4]])
    loss = ad.softmax_cross_entropy(z, np.array([0, 0]))
    assert float(loss.data) == pytest.approx(1e4, rel=1e-12)
    loss.backward()
    assert np.all(np.isfinite(z.grad))


def test_xent_bad_labels():
    with pytest.raises(LabelError):
        ad.softmax_cross_entropy(ad.Tensor(np.zeros((2, 2))), np.array([0, 2]))


# -------------------------------------------------------------- optimizers

# independent scalar recurrence for f(x) = (x - 3)^2, lr 0.1, default betas
ADAM_TRACE = [0.09999999983333344, 0.19989729258521116, 0.2996184765492529, 0.3990864689442148, 0.49822054377271324]


def test_adam_matches_frozen_trace():
    store = ad.ParamStore()
    x = store.add("x", 0.0, dtype=np.float64)
    for want in ADAM_TRACE:
        store.zero_grad()
        ((x - 3.0) * (x - 3.0)).backward()
        ad.adam_step(store, lr=0.1)
        assert float(x.data) == pytest.approx(want, abs=1e-14)


def test_adam_first_step_is_lr_times_sign():
    store = ad.ParamStore()
    p = store.add("p", np.zeros(4), dtype=np.float64)
    ad.adam_step(store, {"p": np.array([3.0, -0.2, 1e-3, 50.0])}, lr=0.01)
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01, -0.01], rtol=1e-4)


def test_adam_zero_gradient_is_noop():
    store = ad.ParamStore()
    p = store.add("p", np.arange(3.0), dtype=np.float64)
    ad.adam_step(store, {"p": np.zeros(3)}, lr=1.0)
    np.testing.assert_array_equal(p.data, [0.0, 1.0, 2.0])


def test_adam_names_leaves_others_untouched():
    store = ad.ParamStore()
    a = store.add("a", np.ones(2), dtype=np.float64)
    b = store.add("b", np.ones(2), dtype=np.float64)
    ad.adam_step(store, {"a": np.ones(2)}, lr=0.5, names=["a"])
    np.testing.assert_array_equal(b.data, [1.0, 1.0])
    assert np.all(a.data < 1.0)
    assert "b" not in store.m


def test_sgd_step():
    store = ad.ParamStore()
    p = store.add("p", np.array([1.0, 2.0]), dtype=np.float64)
    ad.sgd_step(store, {"p": np.array([1.0, -1.0])}, lr=0.5)
    np.testing.assert_array_equal(p.data, [0.5, 2.5])


# ----------------------------------------------------------- gradient_check


def test_gradient_check_accepts_exact_graph():
    x = ad.Tensor(np.random.default_rng(1).normal(size=(4, 3)))
    W = leaf(np.random.default_rng(2).normal(size=(3, 2)))
    assert ad.gradient_check(lambda: ad.linear(x, W)[1, 0] + ad.linear(x, W)[3, 1], [W]) < 1e-7


def test_gradient_check_flags_wrong_backward():
    W = leaf(np.random.default_rng(2).normal(size=(3,)))

    def broken_square(t):
        # forward t^2 but backward claims t (half the true gradient)
        return ad._node(t.data**2, (t,), lambda g: (g * t.data,), "broken")

    def loss():
        return ad.linear(broken_square(W).reshape(1, 3), ad.Tensor(np.ones((3, 1))))[0, 0]

    assert ad.gradient_check(loss, [W]) > 0.3


def test_param_store_rejects_duplicates():
    store = ad.ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(ParameterError):
        store.add("w", np.zeros(2))
