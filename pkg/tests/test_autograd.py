import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drfpn import autograd as ag
from drfpn.autograd import Tensor
from drfpn.errors import ContractError, ShapeError
from drfpn.gradcheck import gradcheck, numerical_grad
from drfpn.optim import SGD, sgd_step


def T(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestCreate:
    def test_zeros(self):
        assert np.all(ag.zeros((1, 1, 2, 2)).data == 0.0)

    def test_full(self):
        assert ag.full((1, 2, 1, 1), 3.5).data.ravel().tolist() == [3.5, 3.5]

    def test_randn_deterministic(self):
        a = ag.randn((2, 3, 4, 5), seed=7)
        b = ag.randn((2, 3, 4, 5), seed=7)
        assert a.data.tobytes() == b.data.tobytes()
        assert not np.array_equal(a.data, ag.randn((2, 3, 4, 5), seed=8).data)

    @pytest.mark.parametrize("shape", [(0, 1, 1, 1), (1, 1, 0, 2), (1, 2, 3)])
    def test_bad_shape(self, shape):
        with pytest.raises(ShapeError):
            ag.zeros(shape)

    def test_float32_mode(self):
        t = ag.randn((1, 1, 2, 2), seed=1, dtype=np.float32)
        assert t.dtype == np.float32


class TestElementwise:
    def test_add(self):
        out = ag.add(T([[[[1, 2]]]]), T([[[[3, 4]]]]))
        assert out.data.ravel().tolist() == [4, 6]

    def test_sub_mul(self):
        a, b = T([[[[1.0, 2.0]]]]), T([[[[3.0, 4.0]]]])
        assert ag.sub(a, b).data.ravel().tolist() == [-2, -2]
        assert ag.elementwise("mul", a, b).data.ravel().tolist() == [3, 8]

    def test_ones_gate_is_identity(self):
        x = ag.randn((2, 3, 4, 4), seed=0, requires_grad=True)
        gate = ag.full((2, 3, 1, 1), 1.0)
        out = ag.mul(x, gate)
        assert np.array_equal(out.data, x.data)
        w = ag.randn((2, 3, 4, 4), seed=1)
        grads = ag.backward(ag.sum(ag.mul(out, w)))
        assert np.array_equal(grads[x], w.data)

    def test_broadcast_shapes(self):
        x = ag.randn((2, 3, 4, 5), seed=0)
        assert ag.mul(x, ag.randn((2, 3, 1, 1), seed=1)).shape == x.shape
        assert ag.mul(x, ag.randn((2, 1, 4, 5), seed=1)).shape == x.shape
        with pytest.raises(ShapeError):
            ag.mul(x, ag.randn((2, 2, 1, 1), seed=1))
        with pytest.raises(ShapeError):
            ag.add(x, ag.randn((2, 3, 4, 4), seed=1))

    def test_broadcast_grad_sums(self):
        x = ag.randn((2, 3, 4, 5), seed=0)
        gate = ag.randn((2, 3, 1, 1), seed=1, requires_grad=True)
        grads = ag.backward(ag.sum(ag.mul(x, gate)))
        np.testing.assert_allclose(grads[gate], x.data.sum(axis=(2, 3), keepdims=True), rtol=1e-14)

    def test_grad_of_product_is_other_factor(self):
        b = ag.randn((1, 2, 3, 3), seed=3)
        err = gradcheck(lambda a: ag.sum(ag.mul(a, b)), ag.randn((1, 2, 3, 3), seed=2), eps=1e-3)
        assert err < 1e-10  # linear in a
        a = Tensor(ag.randn((1, 2, 3, 3), seed=2).data, requires_grad=True)
        assert np.array_equal(ag.backward(ag.sum(ag.mul(a, b)))[a], b.data)


class TestConcat:
    def test_shape(self):
        assert ag.concat_channels(ag.zeros((1, 2, 2, 2)), ag.zeros((1, 3, 2, 2))).shape == (1, 5, 2, 2)

    def test_inverse(self):
        a, b = ag.randn((1, 2, 3, 3), seed=0), ag.randn((1, 3, 3, 3), seed=1)
        c = ag.concat_channels(a, b)
        assert np.array_equal(ag.slice_channels(c, 0, 2).data, a.data)
        assert np.array_equal(ag.slice_channels(c, 2, 5).data, b.data)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            ag.concat_channels(ag.zeros((1, 2, 2, 2)), ag.zeros((1, 2, 3, 2)))

    def test_backward_all_ones(self):
        a = ag.randn((1, 2, 3, 3), seed=0, requires_grad=True)
        b = ag.randn((1, 3, 3, 3), seed=1, requires_grad=True)
        grads = ag.backward(ag.sum(ag.concat_channels(a, b)))
        assert np.all(grads[a] == 1.0) and np.all(grads[b] == 1.0)
        fd = numerical_grad(lambda t: ag.sum(ag.concat_channels(t, b)), a.data, 1e-3)
        np.testing.assert_allclose(fd, 1.0, atol=1e-10)

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_associative(self, ca, cb, cc, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (Tensor(rng.standard_normal((1, k, 2, 3))) for k in (ca, cb, cc))
        left = ag.concat_channels(ag.concat_channels(a, b), c)
        right = ag.concat_channels(a, ag.concat_channels(b, c))
        assert np.array_equal(left.data, right.data)


class TestActivation:
    def test_relu(self):
        assert ag.relu(T([[[[-1.0, 0.0, 2.0]]]])).data.ravel().tolist() == [0, 0, 2]

    def test_sigmoid_center_and_range(self):
        assert ag.sigmoid(T([[[[0.0]]]])).item() == 0.5
        s = ag.sigmoid(T([[[[-800.0, -30.0, 30.0, 700.0]]]])).data
        assert np.all(np.isfinite(s)) and np.all(s >= 0) and np.all(s <= 1)
        s = ag.sigmoid(ag.randn((1, 1, 10, 10), seed=0, stddev=5.0)).data
        assert np.all((s > 0) & (s < 1))

    def test_sigmoid_grad(self):
        x = T([[[[-2.0, 0.0, 3.0]]]])
        assert gradcheck(lambda t: ag.sum(ag.sigmoid(t)), x, eps=1e-5) < 1e-6

    def test_relu_grad_off_kink(self):
        x = T([[[[-1.5, -0.3, 0.4, 2.0]]]])
        assert gradcheck(lambda t: ag.sum(ag.relu(t)), x, eps=1e-3) < 1e-10

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            ag.activation("tanh", ag.zeros((1, 1, 1, 1)))


class TestReduce:
    def test_sum_mean(self):
        x = ag.full((1, 1, 2, 2), 2.0)
        assert ag.reduce("sum", x).item() == 8.0
        assert ag.reduce("mean", x).item() == 2.0

    def test_mean_grad_uniform(self):
        x = ag.full((1, 1, 2, 2), 2.0, requires_grad=True)
        assert np.all(ag.backward(ag.mean(x))[x] == 0.25)


class TestBackward:
    def test_sum(self):
        x = ag.randn((1, 2, 3, 3), seed=0, requires_grad=True)
        assert np.all(ag.backward(ag.sum(x))[x] == 1.0)

    def test_square(self):
        x = ag.randn((1, 2, 3, 3), seed=0, requires_grad=True)
        np.testing.assert_allclose(ag.backward(ag.sum(ag.mul(x, x)))[x], 2 * x.data, rtol=1e-15)

    def test_fan_out_accumulates(self):
        x = ag.randn((1, 1, 2, 2), seed=0, requires_grad=True)
        y = ag.add(ag.mul(x, x), ag.scale(x, 3.0))
        np.testing.assert_allclose(ag.backward(ag.sum(y))[x], 2 * x.data + 3.0, rtol=1e-14)

    def test_non_scalar_loss(self):
        x = ag.randn((1, 1, 2, 2), seed=0, requires_grad=True)
        with pytest.raises(ContractError):
            ag.backward(ag.relu(x))

    def test_second_backward_raises(self):
        x = ag.randn((1, 1, 2, 2), seed=0, requires_grad=True)
        loss = ag.sum(ag.mul(x, x))
        ag.backward(loss)
        with pytest.raises(ContractError):
            ag.backward(loss)

    def test_no_grad_tensor_untouched(self):
        x = ag.randn((1, 1, 2, 2), seed=0, requires_grad=True)
        c = ag.randn((1, 1, 2, 2), seed=1)
        grads = ag.backward(ag.sum(ag.mul(x, c)))
        assert c not in grads and c.grad is None

    def test_fresh_tape_after_backward(self):
        x = ag.randn((1, 1, 2, 2), seed=0, requires_grad=True)
        ag.backward(ag.sum(x))
        g = ag.backward(ag.sum(ag.scale(x, 2.0)))
        assert np.all(g[x] == 2.0)

    def test_reusing_intermediate_from_consumed_tape(self):
        x = ag.randn((1, 1, 2, 2), seed=0, requires_grad=True)
        y = ag.mul(x, x)
        ag.backward(ag.sum(y))
        with pytest.raises(ContractError):
            ag.sum(y)

    def test_no_grad_records_nothing(self):
        x = ag.randn((1, 1, 2, 2), seed=0, requires_grad=True)
        with ag.no_grad():
            y = ag.sum(x)
        assert not y.requires_grad
        with pytest.raises(ContractError):
            ag.backward(y)


class TestSGD:
    def test_zero_lr(self):
        p = {"w": ag.full((1, 1, 1, 1), 1.0, requires_grad=True)}
        sgd_step(p, {p["w"]: np.full((1, 1, 1, 1), 5.0)}, lr=0.0, momentum=0.9)
        assert p["w"].item() == 1.0

    def test_single_step(self):
        p = {"w": ag.full((1, 1, 1, 1), 1.0, requires_grad=True)}
        sgd_step(p, {p["w"]: np.full((1, 1, 1, 1), 2.0)}, lr=0.1, momentum=0.0)
        assert p["w"].item() == pytest.approx(0.8, abs=1e-15)

    def test_two_momentum_steps(self):
        # v1 = g1 = 2; p1 = 1 - 0.1*2 = 0.8
        # v2 = 0.9*2 + g2(=-1) = 0.8; p2 = 0.8 - 0.1*0.8 = 0.72
        p = {"w": ag.full((1, 1, 1, 1), 1.0, requires_grad=True)}
        opt = SGD(p, lr=0.1, momentum=0.9)
        opt.step({p["w"]: np.full((1, 1, 1, 1), 2.0)})
        opt.step({p["w"]: np.full((1, 1, 1, 1), -1.0)})
        assert p["w"].item() == pytest.approx(0.72, abs=1e-15)

    def test_shape_mismatch(self):
        p = {"w": ag.full((1, 1, 1, 1), 1.0, requires_grad=True)}
        with pytest.raises(ContractError):
            sgd_step(p, {p["w"]: np.ones((1, 1, 1, 2))}, lr=0.1)

    def test_missing_grad_skipped(self):
        p = {"w": ag.full((1, 1, 1, 1), 1.0, requires_grad=True)}
        sgd_step(p, {}, lr=0.1)
        assert p["w"].item() == 1.0


class TestGradcheck:
    def test_sum_exact(self):
        assert gradcheck(ag.sum, ag.randn((1, 2, 3, 3), seed=0), eps=1e-3) <= 1e-10

    def test_sigmoid_sum(self):
        assert gradcheck(lambda t: ag.sum(ag.sigmoid(t)), ag.randn((1, 2, 3, 3), seed=0)) < 1e-6

    def test_non_scalar(self):
        with pytest.raises(ContractError):
            gradcheck(ag.sigmoid, ag.randn((1, 1, 2, 2), seed=0))

    def test_detects_wrong_gradient(self):
        def bad_square(x):
            return ag.make_result(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

        assert gradcheck(lambda t: ag.sum(bad_square(t)), ag.full((1, 1, 2, 2), 1.5)) > 0.1
