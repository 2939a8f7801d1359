import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aedetect import autodiff as ad
from aedetect.autodiff import Tape, Tensor
from oracles import conv_oracle, fd_check, op_cases

INSTANCES = 20


OP_NAMES = [c[0] for c in op_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("op", OP_NAMES)
def test_gradients_match_central_differences(op):
    start = time.perf_counter()
    for seed in range(INSTANCES):
        rng = np.random.default_rng(seed)
        _, fn, inputs = next(c for c in op_cases(rng) if c[0] == op)
        assert fd_check(fn, inputs, np.float32, 1e-3) < 1e-2
        assert fd_check(fn, inputs, np.float64, 1e-5) < 1e-5
    assert time.perf_counter() - start < 60


def test_dense_examples(rng):
    out = ad.dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1, 2]])
    out = ad.dense(Tensor([[0.0, 0.0]]), Tensor(rng.standard_normal((2, 2))), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [[3, 4]])
    x, w, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
    expect = np.zeros((2, 2))
    for i in range(2):
        for o in range(2):
            expect[i, o] = b[o] + sum(x[i, k] * w[k, o] for k in range(3))
    got = ad.dense(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(got, expect, rtol=1e-12)
    with pytest.raises(ad.DimensionError):
        ad.dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


def test_conv2d_examples(rng):
    x = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
    assert not ad.conv2d(Tensor(x), Tensor(np.zeros((2, 1, 3, 3)))).data.any()
    x = rng.standard_normal((2, 2, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    got = ad.conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64)).data
    np.testing.assert_allclose(got, conv_oracle(x, k, 1, 0), rtol=1e-10)
    got = ad.conv2d(Tensor(x), Tensor(k), 1, 1).data
    np.testing.assert_allclose(got, conv_oracle(x, k, 1, 1), rtol=1e-5, atol=1e-5)


def test_conv2d_rejects_nonintegral_extent():
    with pytest.raises(ad.DimensionError):
        ad.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), 2, 1)
    assert ad.conv_output_extent(6, 4, 2, 1) == 3


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 4, 4))
    y = rng.standard_normal((2, 4, 4, 4))
    t64 = lambda a: Tensor(a, dtype=np.float64)  # noqa: E731
    lhs = (ad.conv2d(t64(x), t64(k), 2, 1).data * y).sum()
    rhs = (x * ad.conv_transpose2d(t64(y), t64(k), 2, 1).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_pointwise_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=1e-6)
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0, 0.0])).data, [0, 2, 0])
    ce = ad.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item()
    oracle = -np.log(np.exp(10.0) / (np.exp(10.0) + np.exp(-10.0)))
    assert ce == pytest.approx(oracle, abs=1e-6)
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor([[1.0, 2.0]]), [2])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(z):
    p = ad.softmax(Tensor(z)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((p >= 0) & (p <= 1))
    # monotone: the softmax argmax is a logit argmax up to rounding of near-ties
    top = z[np.arange(len(z)), np.argmax(p, axis=1)]
    assert np.all(top >= z.max(axis=1) - 1e-6)


def test_kernel_gram_examples(rng):
    a = Tensor([[1.0, 2.0]])
    assert ad.kernel_gram(a, a, "rbf", 2.0).item() == 1.0
    assert ad.kernel_gram(a, a, "imq", 2.0).item() == 1.0
    far = Tensor([[1e4, 1e4]])
    assert ad.kernel_gram(a, far, "rbf", 2.0).item() < 1e-12
    assert ad.kernel_gram(a, far, "imq", 2.0).item() < 1e-6
    x, y = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    got = ad.kernel_gram(Tensor(x, dtype=np.float64), Tensor(y, dtype=np.float64), "imq", 6.0).data
    for i in range(2):
        for j in range(2):
            d2 = sum((x[i, t] - y[j, t]) ** 2 for t in range(3))
            assert got[i, j] == pytest.approx(6.0 / (6.0 + d2), rel=1e-12)
    with pytest.raises(ad.ParameterError):
        ad.kernel_gram(a, a, "imq", 0.0)


def test_backward_examples():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(x)
    np.testing.assert_array_equal(tape.gradient(loss, [x])[0], np.ones((2, 3)))
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.mse(x, Tensor([0.0]))
    np.testing.assert_allclose(tape.gradient(loss, [x])[0], [4.0])
    with Tape() as tape:
        out = ad.scale(x, 2.0)
    with pytest.raises(ad.ContractError):
        tape.backward(ad.reshape(Tensor(np.ones((2, 1))), (2,)))
    with pytest.raises(ad.ContractError):
        tape.backward(Tensor(np.ones(2)))
    assert out.shape == (1,)


def test_backward_is_deterministic(rng):
    x = rng.standard_normal((4, 2, 6, 6))
    k = rng.standard_normal((3, 2, 4, 4))
    results = []
    for _ in range(2):
        kt = Tensor(k, requires_grad=True)
        with Tape() as tape:
            loss = ad.sum(ad.relu(ad.conv2d(Tensor(x), kt, 2, 1)))
        results.append(tape.gradient(loss, [kt])[0])
    assert results[0].tobytes() == results[1].tobytes()


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_forward_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.scale(Tensor([3e38]), 10.0)


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_optimizer_examples():
    p = {"w": Tensor([1.0])}
    out = ad.optimizer_step(ad.OptimizerState("sgd", 0.1), p, {"w": np.array([1.0], np.float32)})
    assert out["w"].item() == pytest.approx(0.9)
    out = ad.optimizer_step(ad.OptimizerState("adam", 0.1), p, {"w": np.zeros(1, np.float32)})
    assert out["w"].item() == 1.0
    with pytest.raises(ad.ContractError):
        ad.optimizer_step(ad.OptimizerState(), p, {})


@pytest.mark.parametrize("g", [1.0, 1e-3, 250.0])
def test_adam_matches_scalar_recurrence(g):
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    state = ad.OptimizerState("adam", lr, b1, b2, eps)
    params = {"w": Tensor(np.zeros(3), dtype=np.float64)}
    m = v = w = 0.0
    for t in range(1, 6):
        params = ad.optimizer_step(state, params, {"w": np.full(3, g)})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        np.testing.assert_allclose(params["w"].data, w, rtol=1e-12)
    # first step moves by ~lr whatever the gradient scale
    first = ad.optimizer_step(ad.OptimizerState("adam", lr), {"w": Tensor(np.zeros(1), dtype=np.float64)},
                              {"w": np.array([g])})
    assert abs(first["w"].item()) == pytest.approx(lr, rel=1e-4)
