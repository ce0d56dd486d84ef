import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from textlayout import tensor as T
from textlayout.tensor import GradCheckError, ShapeError, Tensor, grad_check, parameter


def numeric_grad(f, x, eps=1e-4):
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f().item()
        flat[i] = orig - eps
        down = f().item()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


def assert_grads_match(f, params, tol=1e-4):
    for p in params:
        p.zero_grad()
    f().backward()
    for p in params:
        num = numeric_grad(f, p)
        rel = np.abs(p.grad - num) / np.maximum(1.0, np.abs(num))
        assert rel.max() < tol, (p.name, rel.max())


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, np.eye(2))

    def test_hand_example(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        a = parameter(rng.normal(size=(3, 4)), "a")
        b = parameter(rng.normal(size=(4, 2)), "b")
        w = rng.normal(size=(3, 2))
        assert_grads_match(lambda: T.sum_all(T.mul(T.matmul(a, b), Tensor(w))), [a, b])

    def test_batched_gradient(self):
        rng = np.random.default_rng(1)
        a = parameter(rng.normal(size=(2, 3, 4)), "a")
        b = parameter(rng.normal(size=(2, 4, 5)), "b")
        w = rng.normal(size=(2, 3, 5))
        assert_grads_match(lambda: T.sum_all(T.mul(T.matmul(a, b), Tensor(w))), [a, b])

    def test_shared_matrix_gradient(self):
        rng = np.random.default_rng(2)
        a = parameter(rng.normal(size=(2, 3, 4)), "a")
        b = parameter(rng.normal(size=(4, 5)), "b")
        w = rng.normal(size=(2, 3, 5))
        assert_grads_match(lambda: T.sum_all(T.mul(T.matmul(a, b), Tensor(w))), [a, b])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0)

    def test_jacobian(self):
        rng = np.random.default_rng(3)
        x = parameter(rng.normal(size=5), "x")
        w = rng.normal(size=5)
        assert_grads_match(lambda: T.sum_all(T.mul(T.softmax(x), Tensor(w))), [x])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_sums_to_one_and_equivariant(self, vals):
        x = np.array(vals)
        p = T.softmax(Tensor(x)).data
        assert np.all(p > 0)
        assert abs(p.sum() - 1.0) < 1e-9
        perm = np.random.default_rng(len(vals)).permutation(len(vals))
        np.testing.assert_allclose(T.softmax(Tensor(x[perm])).data, p[perm], rtol=1e-12, atol=1e-15)


class TestGelu:
    def test_values(self):
        assert T.gelu(Tensor(0.0)).item() == 0.0
        assert abs(T.gelu(Tensor(10.0)).item() - 10.0) < 1e-6
        assert abs(T.gelu(Tensor(-10.0)).item()) < 1e-6

    def test_exact_erf_form(self):
        x = 0.7
        assert T.gelu(Tensor(x)).item() == pytest.approx(x * 0.5 * (1 + math.erf(x / math.sqrt(2))), rel=1e-14)

    def test_gradient(self):
        x = parameter(np.linspace(-3, 3, 7), "x")
        assert_grads_match(lambda: T.sum_all(T.gelu(x)), [x])


class TestLayerNorm:
    def test_constant_slice(self):
        out = T.layer_norm(Tensor([5.0] * 4), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_normalised(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-4)

    def test_statistics(self):
        x = np.random.default_rng(4).normal(3.0, 2.0, size=32)
        out = T.layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
        assert abs(out.mean()) < 1e-6
        assert abs(out.var() - 1.0) < 1e-3

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = parameter(rng.normal(size=(3, 6)), "x")
        g = parameter(rng.normal(size=6), "g")
        b = parameter(rng.normal(size=6), "b")
        w = rng.normal(size=(3, 6))
        assert_grads_match(lambda: T.sum_all(T.mul(T.layer_norm(x, g, b), Tensor(w))), [x, g, b])


class TestCrossEntropy:
    def test_uniform(self):
        assert T.cross_entropy(Tensor(np.zeros(1001)), 3).item() == pytest.approx(math.log(1001), abs=1e-12)
        assert math.log(1001) == pytest.approx(6.9088, abs=1e-4)

    def test_saturated(self):
        logits = np.zeros(10)
        logits[2] = 30.0
        assert T.cross_entropy(Tensor(logits), 2).item() < 1e-12

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros(4)), 4)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(6)
        x = parameter(rng.normal(size=7), "x")
        T.cross_entropy(x, 3).backward()
        expected = T.softmax(Tensor(x.data)).data
        expected[3] -= 1
        np.testing.assert_allclose(x.grad, expected, atol=1e-14)
        x.zero_grad()
        assert_grads_match(lambda: T.cross_entropy(x, 3), [x])

    def test_masked_mean(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(2, 3, 5))
        tgt = rng.integers(0, 5, size=(2, 3))
        mask = np.array([[True, False, True], [False, True, False]])
        got = T.cross_entropy(Tensor(logits), tgt, mask).item()
        ref = [T.cross_entropy(Tensor(logits[b, t]), tgt[b, t]).item()
               for b in range(2) for t in range(3) if mask[b, t]]
        assert got == pytest.approx(np.mean(ref), rel=1e-12)


class TestGraph:
    def test_reuse_accumulates(self):
        rng = np.random.default_rng(8)
        x = parameter(rng.normal(size=(2, 2)), "x")
        assert_grads_match(lambda: T.sum_all(T.mul(T.matmul(x, x), T.add(x, x))), [x])

    def test_take_rows_repeated_indices(self):
        rng = np.random.default_rng(9)
        table = parameter(rng.normal(size=(4, 3)), "table")
        w = rng.normal(size=(5, 3))
        assert_grads_match(lambda: T.sum_all(T.mul(T.take_rows(table, [0, 2, 0, 0, 3]), Tensor(w))),
                           [table])

    def test_concat_reshape_transpose(self):
        rng = np.random.default_rng(10)
        a = parameter(rng.normal(size=(2, 3)), "a")
        b = parameter(rng.normal(size=(2, 1)), "b")
        w = rng.normal(size=(4, 2))

        def f():
            c = T.concat([a, b], axis=-1)
            return T.sum_all(T.mul(T.transpose(T.reshape(c, (2, 4)), (1, 0)), Tensor(w)))

        assert_grads_match(f, [a, b])

    def test_bias_broadcast_only_on_last_axis(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_no_grad_builds_no_graph(self):
        x = parameter(np.ones(3))
        with T.no_grad():
            y = T.sum_all(T.gelu(x))
        assert y._backward is None

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
    def test_random_shapes(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a = parameter(rng.normal(size=(m, k)), "a")
        b = parameter(rng.normal(size=(k, n)), "b")
        g = parameter(rng.normal(size=n) + 1.0, "g")
        bias = parameter(rng.normal(size=n), "bias")
        tgt = rng.integers(0, n, size=m)

        def f():
            h = T.gelu(T.layer_norm(T.matmul(a, b), g, bias)) if n > 1 else T.gelu(T.matmul(a, b))
            return T.cross_entropy(T.add(h, bias), tgt)

        assert grad_check(f, [a, b, g, bias], samples_per_param=None) < 1e-4


class TestGradCheck:
    def test_polynomial(self):
        x = parameter(np.array([1.0, 2.0]), "x")
        err = grad_check(lambda: T.sum_all(T.mul(x, x)), [x], samples_per_param=None)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])
        assert err < 1e-8

    def test_constant(self):
        x = parameter(np.array([1.0, 2.0]), "x")
        assert grad_check(lambda: Tensor(3.0), [x], samples_per_param=None) < 1e-12

    def test_non_finite(self):
        x = parameter(np.array([1.0]), "x")
        with pytest.raises(GradCheckError):
            grad_check(lambda: Tensor(np.inf), [x])
