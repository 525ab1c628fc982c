import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hifn import numkernel as nk
from hifn.numkernel import Tensor

from conftest import numeric_grad

# frozen from a 30-digit mpmath evaluation of ln(1 + e^-10)
SOFTPLUS_MINUS_10 = 4.5398899216864646769e-05

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def param(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nk.matmul(np.eye(2), a).data, a)

    def test_zero_annihilates(self):
        assert not nk.matmul(np.eye(2), np.zeros((2, 2))).data.any()

    def test_hand_product(self):
        out = nk.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(nk.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            nk.matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_batched_gradients(self):
        a, b = param((3, 2, 4), 1), param((4, 5), 2)

        def f():
            return float(nk.sum(nk.matmul(a, b)).data)

        nk.backward(nk.sum(nk.matmul(a, b)))
        np.testing.assert_allclose(a.grad, numeric_grad(f, a.data), atol=1e-7)
        np.testing.assert_allclose(b.grad, numeric_grad(f, b.data), atol=1e-7)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert nk.sigmoid(np.array(0.0)).data == 0.5

    def test_softplus_zero(self):
        assert nk.softplus(np.array(0.0)).data == pytest.approx(math.log(2), abs=1e-15)

    def test_softplus_minus_ten(self):
        assert nk.softplus(np.array(-10.0)).data == pytest.approx(SOFTPLUS_MINUS_10, rel=1e-12)

    def test_softplus_large_is_finite(self):
        v = nk.softplus(np.array([40.0, 800.0])).data
        np.testing.assert_allclose(v, [40.0 + math.log1p(math.exp(-40.0)), 800.0])

    def test_log_domain(self):
        with pytest.raises(nk.DomainError):
            nk.log(np.array([1.0, 0.0]))

    def test_dispatch(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, 5.0])
        np.testing.assert_array_equal(nk.elementwise("mul", a, b).data, [3.0, 10.0])
        np.testing.assert_array_equal(nk.elementwise("relu", np.array([-1.0, 2.0])).data, [0.0, 2.0])
        with pytest.raises(nk.ContractError):
            nk.elementwise("cosh", a)

    def test_leading_axis_broadcast_only(self):
        assert nk.add(np.ones((2, 3)), np.ones(3)).shape == (2, 3)
        with pytest.raises(nk.DimensionError):
            nk.add(np.ones((2, 3)), np.ones((2, 1)))

    @pytest.mark.parametrize("op", ["sigmoid", "tanh", "softplus", "exp", "neg"])
    def test_unary_gradients(self, op):
        x = param((3, 4), 4)

        def f():
            return float(nk.sum(nk.elementwise(op, x)).data)

        nk.backward(nk.sum(nk.elementwise(op, x)))
        np.testing.assert_allclose(x.grad, numeric_grad(f, x.data), rtol=1e-6, atol=1e-8)

    def test_log_gradient(self):
        x = Tensor(np.random.default_rng(0).uniform(0.5, 2, (4,)), requires_grad=True)
        nk.backward(nk.sum(nk.log(x)))
        np.testing.assert_allclose(x.grad, 1.0 / x.data)

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_binary_gradients_with_broadcast(self, op):
        a, b = param((2, 3, 4), 5), param((4,), 6)

        def f():
            return float(nk.sum(nk.mul(nk.elementwise(op, a, b), nk.elementwise(op, a, b))).data)

        out = nk.elementwise(op, a, b)
        nk.backward(nk.sum(nk.mul(out, out)))
        np.testing.assert_allclose(a.grad, numeric_grad(f, a.data), rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(b.grad, numeric_grad(f, b.data), rtol=1e-6, atol=1e-7)

    @given(arrays(np.float64, (5,), elements=finite))
    def test_forward_finite(self, x):
        for op in ("sigmoid", "tanh", "relu", "softplus", "exp"):
            assert np.all(np.isfinite(nk.elementwise(op, x).data))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nk.softmax(np.zeros(3)).data, [1 / 3] * 3)

    def test_large_logit_stable(self):
        p = nk.softmax(np.array([100.0, 0.0])).data
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-40

    def test_masked(self):
        sigma = math.e / (math.e + math.e**3)
        p = nk.softmax(np.array([1.0, 2.0, 3.0]), mask=np.array([True, False, True])).data
        np.testing.assert_allclose(p, [sigma, 0.0, 1 - sigma], rtol=1e-14)

    def test_all_masked(self):
        with pytest.raises(nk.EmptyAttentionError):
            nk.softmax(np.ones((2, 3)), mask=np.array([[True, False, False], [False, False, False]]))

    def test_gradient(self):
        x = param((2, 5), 7)
        mask = np.array([[1, 1, 0, 1, 1], [0, 1, 1, 1, 0]], dtype=bool)
        w = np.random.default_rng(1).normal(size=(2, 5))

        def f():
            return float(nk.sum(nk.mul(nk.softmax(x, mask), w)).data)

        nk.backward(nk.sum(nk.mul(nk.softmax(x, mask), w)))
        np.testing.assert_allclose(x.grad, numeric_grad(f, x.data), atol=1e-8)

    @settings(max_examples=60)
    @given(arrays(np.float64, (6,), elements=st.floats(-500, 500)), st.lists(st.booleans(), min_size=6, max_size=6))
    def test_probability_vector(self, x, mask):
        mask = np.array(mask)
        mask[0] = True
        p = nk.softmax(x, mask=mask).data
        assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-9
        assert np.all(p[~mask] == 0)


class TestShapeOps:
    def test_gradients(self):
        a, b = param((2, 3), 1), param((2, 3), 2)
        w = np.random.default_rng(3).normal(size=(3, 4, 2))

        def build():
            s = nk.stack([a, b], axis=0)  # (2, 2, 3)
            c = nk.concat([nk.transpose(s, (2, 0, 1)), nk.reshape(a, (3, 1, 2))], axis=1)  # (3, 3, 2)
            c = nk.getitem(c, (slice(None), slice(0, 2)))
            d = nk.broadcast_to(nk.mean(c, axis=1, keepdims=True), (3, 4, 2))
            return nk.sum(nk.mul(d, w))

        def f():
            return float(build().data)

        nk.backward(build())
        np.testing.assert_allclose(a.grad, numeric_grad(f, a.data), atol=1e-8)
        np.testing.assert_allclose(b.grad, numeric_grad(f, b.data), atol=1e-8)

    def test_getitem_rejects_fancy_index(self):
        with pytest.raises(nk.ContractError):
            nk.getitem(param((3,)), np.array([0, 1]))

    def test_where_selects_exactly(self):
        a, b = param((4,), 1), param((4,), 2)
        cond = np.array([True, False, True, False])
        out = nk.where(cond, a, b)
        np.testing.assert_array_equal(out.data, np.where(cond, a.data, b.data))
        nk.backward(nk.sum(out))
        np.testing.assert_array_equal(a.grad, cond.astype(float))
        np.testing.assert_array_equal(b.grad, (~cond).astype(float))

    def test_embedding_padding_gets_no_grad(self):
        table = param((4, 2), 0)
        ids = np.array([[0, 1, 1], [3, 0, 2]])
        nk.backward(nk.sum(nk.embedding(table, ids)))
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1], [1, 1]])

    def test_detach_blocks_gradient(self):
        a = param((3,))
        nk.backward(nk.sum(nk.add(nk.mul(nk.detach(a), a), 0.0)))
        np.testing.assert_array_equal(a.grad, a.data)


class TestGRU:
    def params(self, d_in, H, seed=0, scale=0.5):
        rng = np.random.default_rng(seed)
        return nk.GRUParams(
            Tensor(rng.normal(0, scale, (d_in, 3 * H)), requires_grad=True),
            Tensor(rng.normal(0, scale, (H, 3 * H)), requires_grad=True),
            Tensor(rng.normal(0, scale, (3 * H,)), requires_grad=True),
        )

    def test_zero_params(self):
        p = nk.GRUParams(Tensor(np.zeros((2, 9))), Tensor(np.zeros((3, 9))), Tensor(np.zeros(9)))
        assert not nk.gru_step(np.array([1.0, -2.0]), np.zeros(3), p).data.any()

    def test_closed_update_gate_keeps_state(self):
        p = self.params(2, 3)
        p.b.data[:3] = -60.0
        h = np.array([0.3, -0.2, 0.9])
        np.testing.assert_allclose(nk.gru_step(np.array([1.0, 2.0]), h, p).data, h, atol=1e-20)

    def test_scalar_oracle(self):
        H, d = 3, 4
        p = self.params(d, H, seed=9)
        x = np.random.default_rng(1).normal(size=d)
        h = np.random.default_rng(2).normal(size=H)
        W, U, b = p.W.data, p.U.data, p.b.data

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        z = [sig(sum(x[k] * W[k, j] for k in range(d)) + sum(h[k] * U[k, j] for k in range(H)) + b[j]) for j in range(H)]
        r = [sig(sum(x[k] * W[k, H + j] for k in range(d)) + sum(h[k] * U[k, H + j] for k in range(H)) + b[H + j]) for j in range(H)]
        c = [
            math.tanh(sum(x[k] * W[k, 2 * H + j] for k in range(d)) + sum(r[k] * h[k] * U[k, 2 * H + j] for k in range(H)) + b[2 * H + j])
            for j in range(H)
        ]
        expect = [(1 - z[j]) * h[j] + z[j] * c[j] for j in range(H)]
        np.testing.assert_allclose(nk.gru_step(x, h, p).data, expect, atol=1e-12)

    def test_gradients(self):
        p = self.params(3, 2, seed=4)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 3)), requires_grad=True)
        h0 = Tensor(np.random.default_rng(6).normal(size=(2, 2)), requires_grad=True)

        def build():
            h1 = nk.gru_step(x, h0, p)
            return nk.sum(nk.mul(nk.gru_step(x, h1, p), h1))

        def f():
            return float(build().data)

        nk.backward(build())
        for t in (p.W, p.U, p.b, x, h0):
            np.testing.assert_allclose(t.grad, numeric_grad(f, t.data), rtol=1e-5, atol=1e-8)

    def test_shape_error(self):
        with pytest.raises(nk.DimensionError):
            nk.gru_step(np.zeros(3), np.zeros(2), self.params(4, 2))


class TestBackward:
    def test_sum_gives_ones(self):
        w = param((3, 2))
        nk.backward(nk.sum(w))
        np.testing.assert_array_equal(w.grad, np.ones((3, 2)))

    def test_quadratic(self):
        w = param((5,))
        nk.backward(nk.sum(nk.mul(w, w)))
        np.testing.assert_allclose(w.grad, 2 * w.data)

    def test_non_scalar_loss(self):
        with pytest.raises(nk.ContractError):
            nk.backward(nk.mul(param((2,)), 2.0))

    def test_tape_cleared_and_each_node_visited_once(self):
        w = param((2,))
        y = nk.add(w, w)
        loss = nk.sum(nk.mul(y, y))
        assert len(nk.current_tape()) == 3
        nk.backward(loss)
        assert len(nk.current_tape()) == 0
        np.testing.assert_allclose(w.grad, 8 * w.data)

    def test_shared_upstream_gradient_not_aliased(self):
        # add() hands the same upstream array to both inputs; later in-place
        # accumulation into one must not leak into the other
        a, b = param((3,), 1), param((3,), 2)
        s = nk.add(a, b)
        loss = nk.sum(nk.add(nk.mul(s, 1.0), nk.mul(a, 3.0)))
        nk.backward(loss)
        np.testing.assert_allclose(a.grad, 4.0)
        np.testing.assert_allclose(b.grad, 1.0)

    def test_no_grad_records_nothing(self):
        w = param((2,))
        with nk.no_grad():
            out = nk.sum(nk.mul(w, w))
        assert not out.requires_grad and len(nk.current_tape()) == 0

    def test_deterministic(self):
        w = param((4, 4), 3)
        x = np.random.default_rng(0).normal(size=(2, 4))
        a = nk.softmax(nk.matmul(x, w)).data
        b = nk.softmax(nk.matmul(x, w)).data
        nk.current_tape().clear()
        assert a.tobytes() == b.tobytes()
