"""Gradient checks for every autodiff primitive against central differences."""

import numpy as np
import pytest
from scipy import special

from stfact import autodiff as ad
from stfact.errors import NumericalError

from oracles import finite_difference_gradient

REL_TOL = 1e-5


def check_grad(build, x0, h=1e-5, tol=REL_TOL):
    """Compare tape gradient of scalar build(leaf) with central differences."""
    x0 = np.asarray(x0, dtype=np.float64)
    leaf = ad.leaf(x0.copy(), "x")
    loss = build(leaf)
    ad.backward(loss)
    got = leaf.grad.reshape(x0.shape)

    def f(flat):
        return float(build(ad.as_var(flat.reshape(x0.shape))).value)

    want = finite_difference_gradient(f, x0.ravel(), h=h).reshape(x0.shape)
    scale = max(np.linalg.norm(want), 1e-8)
    assert np.linalg.norm(got - want) / scale < tol, (got, want)


class TestElementwise:
    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_add_sub_mul_div(self):
        x = self.rng.normal(size=(3, 4))
        c = self.rng.normal(size=(3, 4)) + 3.0
        check_grad(lambda v: ad.sum_(ad.mul(ad.add(v, c), ad.sub(v, 1.5))), x)
        check_grad(lambda v: ad.sum_(ad.div(v, c)), x)
        check_grad(lambda v: ad.sum_(ad.div(c, ad.add(v, 5.0))), x)

    def test_exp_log_tanh_sin_sigmoid_relu(self):
        x = self.rng.normal(size=(2, 5)) * 0.7
        check_grad(lambda v: ad.sum_(ad.exp(v)), x)
        check_grad(lambda v: ad.sum_(ad.log(ad.add(ad.square(v), 1.0))), x)
        check_grad(lambda v: ad.sum_(ad.tanh(v)), x)
        check_grad(lambda v: ad.sum_(ad.sin(v)), x)
        check_grad(lambda v: ad.sum_(ad.sigmoid(v)), x)
        x_off = x + np.where(np.abs(x) < 1e-2, 0.5, 0.0)  # keep away from the kink
        check_grad(lambda v: ad.sum_(ad.relu(v)), x_off)

    def test_power_square(self):
        x = np.abs(self.rng.normal(size=(4,))) + 0.5
        check_grad(lambda v: ad.sum_(ad.power(v, 3.0)), x)
        check_grad(lambda v: ad.sum_(ad.square(v)), x)

    def test_clip_zero_gradient_outside(self):
        x = np.array([-2.0, 0.3, 2.0])
        leaf = ad.leaf(x, "x")
        loss = ad.sum_(ad.clip(leaf, -1.0, 1.0))
        ad.backward(loss)
        np.testing.assert_array_equal(leaf.grad, [0.0, 1.0, 0.0])


class TestBroadcasting:
    def test_broadcast_add_and_mul(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 1))
        b = rng.normal(size=(1, 4))
        r = rng.normal(size=(3, 4))
        check_grad(lambda v: ad.sum_(ad.mul(ad.add(v, b), r)), a)
        check_grad(lambda v: ad.sum_(ad.mul(ad.mul(a, v), r)), b)

    def test_scalar_broadcast(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 2))
        check_grad(lambda v: ad.sum_(ad.mul(v, 2.5)), x)

    def test_leading_axis_broadcast(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4,))
        full = rng.normal(size=(5, 4))
        check_grad(lambda v: ad.sum_(ad.square(ad.add(v, full))), x)


class TestLinearAlgebra:
    def test_dot_vector_and_stack(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 2))
        x1 = rng.normal(size=(3,))
        x3 = rng.normal(size=(5, 4, 3))
        r = rng.normal(size=(5, 4, 2))
        check_grad(lambda v: ad.sum_(ad.dot(v, w)), x1)
        check_grad(lambda v: ad.sum_(ad.mul(ad.dot(v, w), r)), x3)
        check_grad(lambda v: ad.sum_(ad.mul(ad.dot(x3, v), r)), w)

    def test_matmul_2d(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        r = rng.normal(size=(3, 2))
        check_grad(lambda v: ad.sum_(ad.mul(ad.matmul(v, b), r)), a)
        check_grad(lambda v: ad.sum_(ad.mul(ad.matmul(a, v), r)), b)

    def test_matmul_batched_with_broadcast(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(6, 5, 3))
        b = rng.normal(size=(3, 4))
        r = rng.normal(size=(6, 5, 4))
        check_grad(lambda v: ad.sum_(ad.mul(ad.matmul(v, b), r)), a)
        check_grad(lambda v: ad.sum_(ad.mul(ad.matmul(a, v), r)), b)
        b3 = rng.normal(size=(6, 3, 4))
        check_grad(lambda v: ad.sum_(ad.mul(ad.matmul(a, v), r)), b3)

    def test_matmul_rejects_vectors(self):
        with pytest.raises(ValueError):
            ad.matmul(np.ones(3), np.ones((3, 2)))


class TestShapeOps:
    def test_reshape_concat_stack_getitem(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 6))
        r = rng.normal(size=(3, 4))
        check_grad(lambda v: ad.sum_(ad.mul(ad.reshape(v, (3, 4)), r)), x)
        y = rng.normal(size=(2, 3))
        check_grad(lambda v: ad.sum_(ad.square(ad.concat([v, y], axis=1))), x[:, :3])
        check_grad(lambda v: ad.sum_(ad.square(ad.stack([v, v], axis=0))), y)
        check_grad(lambda v: ad.sum_(ad.square(ad.getitem(v, (slice(None), 1)))), x)

    def test_getitem_reused_rows_accumulate(self):
        x = ad.leaf(np.arange(4.0), "x")
        loss = ad.add(ad.sum_(ad.square(x[1:3])), ad.sum_(x[1:3]))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, [0.0, 3.0, 5.0, 0.0])


class TestReductionsAndSoftmax:
    def test_sum_axis_keepdims(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 4, 2))
        r = rng.normal(size=(3, 1, 2))
        check_grad(lambda v: ad.sum_(ad.mul(ad.sum_(v, axis=1, keepdims=True), r)), x)
        check_grad(lambda v: ad.sum_(ad.square(ad.mean(v, axis=(0, 2)))), x)

    def test_logsumexp_matches_scipy(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 6)) * 3
        out = ad.logsumexp(ad.as_var(x), axis=-1)
        np.testing.assert_allclose(out.value, special.logsumexp(x, axis=-1), rtol=1e-12)
        check_grad(lambda v: ad.sum_(ad.square(ad.logsumexp(v, axis=-1))), x)

    def test_softmax_normalizes_and_grads(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(3, 5)) * 2
        sm = ad.softmax(ad.as_var(x), axis=-1)
        np.testing.assert_allclose(sm.value.sum(axis=-1), np.ones(3), rtol=1e-12)
        r = rng.normal(size=(3, 5))
        check_grad(lambda v: ad.sum_(ad.mul(ad.softmax(v, axis=-1), r)), x)

    def test_extreme_logits_stay_finite(self):
        x = np.array([[1000.0, 0.0, -1000.0]])
        out = ad.log_softmax(ad.as_var(x))
        assert np.isfinite(out.value[0, 0])
        assert out.value[0, 0] == pytest.approx(0.0, abs=1e-12)


class TestCompositeGraphs:
    def test_random_twenty_parameter_graph_matches_central_differences(self):
        rng = np.random.default_rng(11)
        p0 = rng.normal(size=20) * 0.5
        w = rng.normal(size=(5, 3))
        r = rng.normal(size=(4, 3))

        def build(v):
            m = ad.reshape(v, (4, 5))
            h = ad.tanh(ad.matmul(m, w))
            s = ad.softmax(ad.add(h, r), axis=-1)
            gate = ad.sigmoid(ad.sum_(ad.mul(m, 0.3), axis=1))
            mixed = ad.mul(ad.sum_(ad.mul(s, r), axis=-1), gate)
            return ad.add(ad.sum_(ad.exp(ad.mul(mixed, 0.2))), ad.logsumexp(v, axis=0))

        check_grad(build, p0, h=1e-5, tol=1e-6)

    def test_log_sigmoid_gradient_at_zero_is_half(self):
        p = ad.leaf(np.array(0.0), "p")
        loss = ad.log(ad.sigmoid(p))
        ad.backward(loss)
        assert p.grad == pytest.approx(0.5, rel=1e-12)

    def test_half_sum_square_gradient_returns_parameters(self):
        p0 = np.linspace(-2.0, 3.0, 7)
        p = ad.leaf(p0.copy(), "p")
        loss = ad.mul(ad.sum_(ad.square(p)), 0.5)
        ad.backward(loss)
        np.testing.assert_allclose(p.grad, p0, rtol=1e-15)


class TestTapeMechanics:
    def test_diamond_reuse_accumulates_once_per_path(self):
        x = ad.leaf(np.array(3.0), "x")
        y = ad.add(ad.mul(x, x), x)  # x^2 + x -> grad 2x + 1
        ad.backward(y)
        assert x.grad == pytest.approx(7.0)

    def test_grad_returns_zeros_for_unused_leaf(self):
        x = ad.leaf(np.ones(3), "x")
        unused = ad.leaf(np.ones(2), "unused")
        loss = ad.sum_(ad.square(x))
        grads = ad.grad(loss, {"x": x, "unused": unused})
        np.testing.assert_array_equal(grads["unused"], np.zeros(2))

    def test_backward_requires_scalar(self):
        x = ad.leaf(np.ones(3), "x")
        with pytest.raises(ValueError):
            ad.backward(ad.square(x))

    def test_nonfinite_loss_raises_with_node_name(self):
        x = ad.leaf(np.array(800.0), "x")
        with np.errstate(all="ignore"):
            loss = ad.exp(x)
        loss.name = "boom"
        with pytest.raises(NumericalError, match="boom"):
            ad.backward(loss)

    def test_nonfinite_gradient_names_node(self):
        x = ad.leaf(np.array(0.0), "x")
        with np.errstate(all="ignore"):
            y = ad.log(x)  # -inf value, finite after mul by 0; grad blows up
            y.name = "bad_log"
            loss = ad.mul(y, 0.0)
        with pytest.raises(NumericalError):
            ad.backward(loss)

    def test_second_backward_resets_grads(self):
        x = ad.leaf(np.array(2.0), "x")
        loss = ad.square(x)
        ad.backward(loss)
        ad.backward(loss)
        assert x.grad == pytest.approx(4.0)
