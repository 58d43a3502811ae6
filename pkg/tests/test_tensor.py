"""Tensor primitives: frozen examples, loop oracles, and gradient audits."""

import math

import numpy as np
import pytest

from panodepth import tensor as T
from panodepth.audit import audit_tensor, conv2d_loops, matmul_loops
from panodepth.tensor import (
    NumericError,
    ShapeError,
    Tensor,
    UsageError,
    backward,
    finite_diff_gradcheck,
)


class TestMatmul:
    def test_identity(self):
        x = np.arange(10.0).reshape(2, 5)
        out = T.matmul(Tensor(np.eye(2)), Tensor(x))
        np.testing.assert_allclose(out.numpy(), x)

    def test_hand_expansion(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_allclose(out.numpy(), [[3.0], [7.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        want = matmul_loops(a, b)
        np.testing.assert_allclose(got.numpy(), want, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        for n in (1, 2, 5, 9):
            out = T.softmax_lastdim(Tensor(np.full((3, n), 0.7)))
            np.testing.assert_allclose(out.numpy(), 1.0 / n, atol=1e-7)

    def test_closed_form(self):
        # e^0 / (e^0 + e^ln3) = 1/4
        out = T.softmax_lastdim(Tensor([0.0, math.log(3.0)], dtype=np.float64))
        np.testing.assert_allclose(out.numpy(), [0.25, 0.75], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 6))
        a = T.softmax_lastdim(Tensor(x)).numpy()
        b = T.softmax_lastdim(Tensor(x + 123.456)).numpy()
        np.testing.assert_allclose(a, b, atol=1e-7)

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(4)
        out = T.softmax_lastdim(Tensor(rng.standard_normal((5, 4, 7)) * 10)).numpy()
        assert out.min() >= 0.0 and out.max() <= 1.0
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestElementwise:
    def test_exp_neg_abs_zero(self):
        out = T.exp(T.neg(T.absolute(Tensor([0.0]))))
        np.testing.assert_allclose(out.numpy(), [1.0])

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor([0.0])).item() == pytest.approx(0.5)

    def test_sigmoid_range_and_saturation(self):
        out = T.sigmoid(Tensor(np.linspace(-100, 100, 41))).numpy()
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_sum_last_axis(self):
        out = T.tensor_sum(Tensor(np.ones((2, 3))), axis=1)
        np.testing.assert_allclose(out.numpy(), [3.0, 3.0])

    def test_broadcast_add_trailing(self):
        out = T.add(Tensor(np.zeros((2, 3))), Tensor(np.arange(3.0)))
        np.testing.assert_allclose(out.numpy(), [[0, 1, 2], [0, 1, 2]])

    def test_incompatible_broadcast(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])
        big = Tensor([800.0], dtype=np.float64)
        with pytest.raises(NumericError):
            T.exp(big)  # overflows to inf


class TestConv2d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 4, 6))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = T.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.numpy(), x, rtol=1e-6)

    def test_box_kernel_on_constant(self):
        c = 0.37
        x = np.full((1, 5, 5), c)
        w = np.ones((1, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w)).numpy()
        np.testing.assert_allclose(out, 9 * c, rtol=1e-6)
        assert out.shape == (1, 3, 3)

    def test_matches_six_loop_oracle(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((4, 2, 3, 3))
        for stride, pad, hw in ((1, 0, (8, 8)), (1, 1, (8, 8)), (2, 1, (7, 9))):
            x = rng.standard_normal((2,) + hw)
            got = T.conv2d(Tensor(x, dtype=np.float64),
                           Tensor(w, dtype=np.float64), stride, pad).numpy()
            want = conv2d_loops(x, w, stride, pad)
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-10)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_non_integral_output_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))),
                     stride=2, padding=0)


class TestBilinearResize:
    def test_constant_preserved(self):
        x = np.full((2, 3, 5), 1.25)
        for h2, w2 in ((1, 1), (6, 10), (7, 3)):
            out = T.bilinear_resize(Tensor(x), h2, w2).numpy()
            np.testing.assert_allclose(out, 1.25, rtol=1e-6)

    def test_single_pixel_upsample(self):
        out = T.bilinear_resize(Tensor(np.full((1, 1, 1), 2.0)), 2, 2).numpy()
        np.testing.assert_allclose(out, 2.0)

    def test_hand_weights_on_ramp_row(self):
        # 1x1x2 [0,1] -> width 4: sources -0.25,0.25,0.75,1.25 clamp to [0,1]
        out = T.bilinear_resize(Tensor(np.array([[[0.0, 1.0]]])), 1, 4).numpy()
        np.testing.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-7)


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(T.tensor_sum(x))
        np.testing.assert_allclose(x.grad, np.ones((2, 3)))

    def test_grad_of_sum_square_is_2x(self):
        xv = np.arange(6.0).reshape(2, 3) - 2.0
        x = Tensor(xv, requires_grad=True)
        backward(T.tensor_sum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * xv)

    def test_grad_accumulates_over_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.add(T.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1 = 5
        backward(T.tensor_sum(y))
        np.testing.assert_allclose(x.grad, [5.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            backward(T.mul(x, x))

    def test_backward_deterministic(self):
        def run():
            rng = np.random.default_rng(42)
            w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            x = Tensor(rng.standard_normal((4, 4)))
            backward(T.tensor_sum(T.sigmoid(T.matmul(w, x))))
            return w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_tape_cleared_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(T.tensor_sum(x))
        assert len(T.active_tape()) == 0

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.tensor_sum(x)
        assert not y.requires_grad
        assert len(T.active_tape()) == 0


class TestGradcheck:
    def test_sigmoid_layer_passes(self):
        rng = np.random.default_rng(7)
        w = rng.standard_normal((4, 4))
        x = rng.standard_normal((4, 4))

        def f(wt):
            return T.tensor_sum(T.sigmoid(T.matmul(wt, Tensor(x, dtype=np.float64))))

        rep = finite_diff_gradcheck(f, Tensor(w, dtype=np.float64))
        assert rep.passed, str(rep)

    def test_linear_is_nearly_exact(self):
        c = np.arange(1.0, 7.0).reshape(2, 3)

        def f(x):
            return T.tensor_sum(T.mul(x, Tensor(c, dtype=np.float64)))

        rep = finite_diff_gradcheck(f, Tensor(np.zeros((2, 3)), dtype=np.float64))
        assert rep.passed
        assert rep.max_rel_err < 1e-8

    def test_wrong_gradient_rule_fails(self):
        # Negative control: a "square" op wired with the gradient of cube.
        def bad_square(x):
            out = x.data * x.data
            bw = lambda g: (g * 3.0 * x.data * x.data,)
            return T._record("bad_square", (x,), out, bw)

        def f(x):
            return T.tensor_sum(bad_square(x))

        rep = finite_diff_gradcheck(f, Tensor(np.full((2, 2), 1.5), dtype=np.float64))
        assert not rep.passed
        assert rep.failures

    def test_float32_input_rejected(self):
        with pytest.raises(UsageError):
            finite_diff_gradcheck(lambda x: T.tensor_sum(x),
                                  [Tensor(np.ones(2, dtype=np.float32))])


class TestPrimitiveAudit:
    """Every primitive's reverse rule vs central differences, 5 seeds."""

    def test_all_primitives_pass(self):
        results = audit_tensor()
        failed = [r.line() for r in results if not r.passed]
        assert not failed, "\n".join(failed)


class TestStructuralOps:
    def test_gather_rows_values_and_grad(self):
        x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        idx = np.array([1, 1, 3])
        out = T.gather_rows(x, idx)
        np.testing.assert_allclose(out.numpy(), [[3, 4, 5], [3, 4, 5], [9, 10, 11]])
        backward(T.tensor_sum(out))
        np.testing.assert_allclose(x.grad, [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])

    def test_gather_rows_bad_index(self):
        with pytest.raises(UsageError):
            T.gather_rows(Tensor(np.zeros((2, 2))), np.array([0, 5]))

    def test_concat_roundtrip(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.zeros((1, 3)))
        out = T.concat([a, b], axis=0)
        assert out.shape == (3, 3)

    def test_max_ties_route_to_first(self):
        x = Tensor(np.array([[1.0, 5.0, 5.0]]), requires_grad=True)
        backward(T.tensor_sum(T.tensor_max(x, axis=1)))
        np.testing.assert_allclose(x.grad, [[0.0, 1.0, 0.0]])

    def test_permute_inverse(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 4))
        out = T.permute(T.permute(Tensor(x), (2, 0, 1)), (1, 2, 0))
        np.testing.assert_allclose(out.numpy(), x)
