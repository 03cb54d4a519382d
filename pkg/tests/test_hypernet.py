import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperdys import autodiff as ad
from hyperdys.errors import ParameterError, ShapeError, StateError
from hyperdys.hypernet import (
    EGEMAPS_DIM,
    NOISE_DIM,
    ConditionSampler,
    ConditionVector,
    HyperHead,
    HyperNetwork,
    PlainHead,
    generate_params,
    plain_head_forward,
    sample_condition,
    target_forward,
)


def f64_hyper(**kw):
    return HyperNetwork(dtype=np.float64, **kw)


def test_parameter_count_noise_mode():
    # 128x512 + 512 + 512x1538 + 1538
    assert HyperNetwork().params.count() == 855_042


def test_parameter_count_data_mode_and_separate_bias():
    assert HyperNetwork(EGEMAPS_DIM).params.count() == 88 * 512 + 512 + 512 * 1538 + 1538
    sep = HyperNetwork(bias_mode="separate")
    assert sep.params.count() == 128 * 512 + 512 + 512 * 1536 + 1536 + 2


def test_zero_output_layer_gives_zero_classifier():
    h = f64_hyper()
    h.params["hyper.W2"].data[:] = 0
    h.params["hyper.b2"].data[:] = 0
    W, b = generate_params(sample_condition(0), h)
    assert W.shape == (768, 2) and b.shape == (2,)
    assert np.all(W.data == 0) and np.all(b.data == 0)
    assert np.all(target_forward(np.ones(768), W, b).data == 0)


def test_output_bias_passes_through_when_w2_is_zero():
    h = f64_hyper()
    h.params["hyper.W2"].data[:] = 0
    b2 = np.arange(1538, dtype=np.float64)
    h.params["hyper.b2"].data[:] = b2
    W, b = generate_params(sample_condition(1), h)
    # row-major split: first 1536 values are W, the last 2 are b
    np.testing.assert_array_equal(W.data, b2[:1536].reshape(768, 2))
    np.testing.assert_array_equal(b.data, [1536.0, 1537.0])


def test_generate_matches_naive_loops():
    h = HyperNetwork(cond_dim=5, hidden=4, in_features=3, n_classes=2, dtype=np.float64, seed=2)
    W1, b1, W2, b2 = (t.data for t in h.phi())
    c = np.random.default_rng(0).normal(size=5)
    hidden = [max(0.0, sum(c[i] * W1[i, j] for i in range(5)) + b1[j]) for j in range(4)]
    out = [sum(hidden[j] * W2[j, k] for j in range(4)) + b2[k] for k in range(8)]
    W, b = generate_params(c, h)
    np.testing.assert_allclose(W.data, np.array(out[:6]).reshape(3, 2), atol=1e-12)
    np.testing.assert_allclose(b.data, out[6:], atol=1e-12)


def test_target_forward_cases():
    W = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    b = np.array([0.5, -0.5])
    np.testing.assert_allclose(target_forward(np.array([1.0, 2.0, 3.0]), W, b).data, [4.5, 4.5])
    np.testing.assert_allclose(target_forward(np.zeros((4, 3)), W, b).data, np.tile(b, (4, 1)))
    with pytest.raises(ShapeError):
        target_forward(np.zeros(4), W, b)


def test_condition_dimension_checked():
    with pytest.raises(ShapeError):
        HyperNetwork().generate(np.zeros(EGEMAPS_DIM))
    with pytest.raises(ShapeError):
        ConditionVector(np.zeros(10))
    with pytest.raises(ParameterError):
        ConditionVector(np.full(NOISE_DIM, np.nan))


def test_backward_before_forward():
    head = HyperHead(HyperNetwork())
    with pytest.raises(StateError):
        head.backward(np.ones((1, 2)))


def test_head_backward_reaches_phi_only():
    h = f64_hyper(seed=3)
    head = HyperHead(h)
    X = ad.Tensor(np.random.default_rng(0).normal(size=(3, 768)))
    head(X, ad.Tensor(sample_condition(0).values[None]))
    head.backward(np.ones((3, 2)))
    assert all(t.grad is not None for t in h.phi())
    assert X.grad is None
    with pytest.raises(StateError):
        head.backward(np.ones((3, 2)))


@pytest.mark.parametrize("bias_mode", ["joint", "separate"])
def test_phi_gradient_matches_finite_differences(bias_mode):
    h = HyperNetwork(cond_dim=6, hidden=5, in_features=4, bias_mode=bias_mode, dtype=np.float64, seed=1)
    rng = np.random.default_rng(4)
    X = ad.Tensor(rng.normal(size=(5, 4)))
    C = ad.Tensor(rng.normal(size=(1, 6)))
    y = np.array([0, 1, 1, 0, 1])
    err = ad.gradient_check(lambda: ad.softmax_cross_entropy(HyperHead(h)(X, C), y), h.params.params, h=1e-6)
    assert err < 1e-4


def test_data_mode_generates_one_classifier_per_row():
    h = HyperNetwork(EGEMAPS_DIM, in_features=4, dtype=np.float64, seed=0)
    rng = np.random.default_rng(0)
    C = rng.normal(size=(3, EGEMAPS_DIM))
    X = rng.normal(size=(3, 4))
    out = HyperHead(h, "data")(ad.Tensor(X), ad.Tensor(C)).data
    for i in range(3):
        W, b = generate_params(C[i], h)
        np.testing.assert_allclose(out[i], X[i] @ W.data + b.data, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=25, deadline=None)
def test_target_is_affine_and_lipschitz(seed, a, c):
    rng = np.random.default_rng(seed)
    W, b = rng.normal(size=(768, 2)), rng.normal(size=2)
    x1, x2 = rng.normal(size=(2, 768))
    f = lambda x: target_forward(x, W, b).data  # noqa: E731
    np.testing.assert_allclose(f(a * x1 + c * x2) - b, a * (f(x1) - b) + c * (f(x2) - b), atol=1e-9)
    lip = np.linalg.norm(W, 2)
    assert np.linalg.norm(f(x1) - f(x2)) <= lip * np.linalg.norm(x1 - x2) * (1 + 1e-12)


def test_sampler_statistics():
    s = ConditionSampler(5, "per_step")
    draws = np.stack([s.for_step().values for _ in range(800)])  # 102,400 values
    n = draws.size
    assert abs(draws.mean()) < 4 / np.sqrt(n)
    assert abs(draws.var() - 1) < 4 * np.sqrt(2 / n)


def test_sampler_policies():
    fixed = ConditionSampler(1)
    assert np.array_equal(fixed.for_step().values, fixed.for_step().values)
    assert np.array_equal(fixed.for_step().values, fixed.for_eval().values)
    step = ConditionSampler(1, "per_step")
    a, b = step.for_step().values, step.for_step().values
    assert not np.array_equal(a, b)
    assert np.array_equal(step.for_eval().values, fixed.for_eval().values)
    assert np.array_equal(sample_condition(9).values, sample_condition(9).values)
    assert not np.array_equal(sample_condition(9).values, sample_condition(10).values)
    with pytest.raises(ParameterError):
        ConditionSampler(0, "sometimes")


def test_plain_head():
    head = PlainHead(seed=0)
    assert head.params.count() == 1538
    x = np.random.default_rng(0).normal(size=768).astype(np.float32)
    W, b = head.params["plain.weight"].data, head.params["plain.bias"].data
    np.testing.assert_allclose(plain_head_forward(x, head).data, x @ W + b, rtol=1e-5)
