"""Decoder contract, loss closed forms, metric oracles, optimizer behavior."""

import numpy as np
import pytest

from panodepth import tensor as T
from panodepth.encoders import ErpEncoder
from panodepth.pipeline import (
    Adam,
    DepthDecoder,
    MetricsReport,
    adam_step,
    berhu,
    berhu_loss,
    compute_metrics,
    gradient_loss,
    total_loss,
)
from panodepth.tensor import Tensor, UsageError, backward, finite_diff_gradcheck


def scalar_loop_metrics(pred, gt, mask, alpha=1.25):
    """Independent per-pixel metrics accumulation (same summation order)."""
    n = 0
    s_abs = s_sq = s_se = 0.0
    d = [0, 0, 0]
    h, w = gt.shape
    for i in range(h):
        for j in range(w):
            if not mask[i, j] or gt[i, j] <= 0:
                continue
            n += 1
            p, g = float(pred[i, j]), float(gt[i, j])
            s_abs += abs(p - g) / g
            s_sq += (p - g) ** 2 / g
            s_se += (p - g) ** 2
            ratio = max(p / g, g / p) if p > 0 else float("inf")
            for t in range(3):
                if ratio < alpha ** (t + 1):
                    d[t] += 1
    return (s_abs / n, s_sq / n, np.sqrt(s_se / n),
            d[0] / n, d[1] / n, d[2] / n, n)


def scalar_loop_total_loss(pred, gt, mask, c=0.2):
    """Independent scalar-loop reference of the combined training loss."""
    def b(x):
        return abs(x) if abs(x) <= c else (x * x + c * c) / (2 * c)

    h, w = gt.shape
    s = n = 0.0
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                s += b(pred[i, j] - gt[i, j])
                n += 1
    depth_term = s / n
    sx = nx = 0.0
    for i in range(h):
        for j in range(w - 1):
            if mask[i, j] and mask[i, j + 1]:
                sx += b((pred[i, j + 1] - pred[i, j]) - (gt[i, j + 1] - gt[i, j]))
                nx += 1
    sy = ny = 0.0
    for i in range(h - 1):
        for j in range(w):
            if mask[i, j] and mask[i + 1, j]:
                sy += b((pred[i + 1, j] - pred[i, j]) - (gt[i + 1, j] - gt[i, j]))
                ny += 1
    return depth_term + sx / nx + sy / ny


class TestDecoder:
    def _build(self, channels=16, h=64, w=128, seed=0):
        rng = np.random.default_rng(seed)
        enc = ErpEncoder(rng, channels)
        pyr = enc.forward(np.random.default_rng(1).random((h, w, 3)))
        skips = {2 ** (i + 1): wd for i, wd in enumerate(enc.widths)}
        dec = DepthDecoder(rng, channels, skips, max_depth=10.0)
        return dec, pyr

    def test_output_shape_and_range(self):
        dec, pyr = self._build()
        out = dec.forward(pyr.deepest, pyr)
        assert out.shape == (1, 64, 128)
        v = out.numpy()
        assert v.min() >= 0.0 and v.max() <= 10.0

    def test_head_bias_saturation_hits_max_depth(self):
        rng = np.random.default_rng(2)
        enc = ErpEncoder(rng, 16)
        pyr = enc.forward(np.random.default_rng(3).random((64, 128, 3)))
        skips = {2 ** (i + 1): wd for i, wd in enumerate(enc.widths)}
        dec = DepthDecoder(rng, 16, skips, max_depth=8.0, head_bias=60.0)
        out = dec.forward(pyr.deepest, pyr).numpy()
        np.testing.assert_allclose(out, 8.0, atol=1e-4)

    def test_missing_skip_scale_is_config_error(self):
        dec, pyr = self._build()
        pyr.scales.remove(4)
        del pyr.maps[pyr.scales.index(8)]  # drop a mid pyramid level
        with pytest.raises(UsageError):
            dec.forward(pyr.deepest, pyr)


class TestBerhu:
    def test_zero_residual(self):
        out = berhu(Tensor(np.zeros((3, 3))))
        np.testing.assert_array_equal(out.numpy(), 0.0)

    def test_branch_continuity_at_threshold(self):
        c = 0.2
        out = berhu(Tensor(np.array([c, -c], dtype=np.float64)), c)
        np.testing.assert_allclose(out.numpy(), [c, c], atol=1e-15)

    def test_closed_form_above_threshold(self):
        out = berhu(Tensor(np.array([0.5], dtype=np.float64)), 0.2)
        assert out.numpy()[0] == pytest.approx((0.25 + 0.04) / 0.4)
        assert out.numpy()[0] == pytest.approx(0.725)

    def test_derivative_continuity_at_threshold(self):
        # d|x|/dx = sign(x);  d[(x^2+c^2)/2c]/dx = x/c -> both 1 at x = c
        c = 0.2
        for x0 in (c * (1 - 1e-7), c * (1 + 1e-7)):
            t = Tensor(np.array([x0], dtype=np.float64), requires_grad=True)
            backward(T.tensor_sum(berhu(t, c)))
            assert t.grad[0] == pytest.approx(1.0, abs=1e-6)

    def test_gradcheck_away_from_kink(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0.25, 1.0, (3, 3)) * np.sign(rng.standard_normal((3, 3)))

        def f(t):
            return T.tensor_sum(berhu(t, 0.2))

        rep = finite_diff_gradcheck(f, Tensor(x, dtype=np.float64))
        assert rep.passed, str(rep)


class TestLosses:
    def test_perfect_prediction_zero_loss(self):
        gt = np.random.default_rng(5).random((8, 8)) * 5
        mask = np.ones((8, 8), dtype=bool)
        pred = Tensor(gt, dtype=np.float64)
        assert berhu_loss(pred, gt, mask).item() == 0.0
        assert gradient_loss(pred, gt, mask).item() == 0.0
        assert total_loss(pred, gt, mask).item() == 0.0

    def test_constant_offset_has_zero_gradient_term(self):
        rng = np.random.default_rng(6)
        gt = rng.random((8, 8)) * 3
        mask = np.ones((8, 8), dtype=bool)
        pred = Tensor(gt + 0.13, dtype=np.float64)
        assert gradient_loss(pred, gt, mask).item() == pytest.approx(0.0, abs=1e-12)
        assert total_loss(pred, gt, mask).item() == \
            pytest.approx(berhu_loss(pred, gt, mask).item(), abs=1e-12)

    def test_constant_maps_zero_gradient_loss(self):
        gt = np.full((6, 6), 2.0)
        pred = Tensor(np.full((6, 6), 5.0))
        mask = np.ones((6, 6), dtype=bool)
        assert gradient_loss(pred, gt, mask).item() == pytest.approx(0.0, abs=1e-7)

    def test_ramp_gradient_loss_closed_form(self):
        # horizontal ramp slope 1 vs flat GT: every horizontal residual is 1
        h, w = 4, 6
        pred = Tensor(np.tile(np.arange(w, dtype=np.float64), (h, 1)))
        gt = np.zeros((h, w))
        mask = np.ones((h, w), dtype=bool)
        got = gradient_loss(pred, gt, mask, c=0.2).item()
        assert got == pytest.approx((1 + 0.04) / 0.4)  # 2.6, vertical term 0

    def test_total_loss_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(7)
        gt = rng.random((8, 8)) * 4 + 0.5
        pred_np = gt + rng.standard_normal((8, 8)) * 0.3
        mask = rng.random((8, 8)) > 0.2
        got = total_loss(Tensor(pred_np, dtype=np.float64), gt, mask).item()
        want = scalar_loop_total_loss(pred_np, gt, mask)
        assert got == pytest.approx(want, abs=1e-9)

    def test_depth_term_invariant_to_pixel_permutation(self):
        # jointly permuting (pred, gt, mask) pixels cannot change a
        # per-pixel mean
        rng = np.random.default_rng(13)
        gt = rng.random((6, 6)) + 1
        pred = gt + rng.standard_normal((6, 6)) * 0.3
        mask = rng.random((6, 6)) > 0.3
        perm = rng.permutation(36)
        a = berhu_loss(Tensor(pred, dtype=np.float64), gt, mask).item()
        b = berhu_loss(Tensor(pred.reshape(-1)[perm].reshape(6, 6),
                              dtype=np.float64),
                       gt.reshape(-1)[perm].reshape(6, 6),
                       mask.reshape(-1)[perm].reshape(6, 6)).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_invalid_pixels_do_not_contribute(self):
        rng = np.random.default_rng(8)
        gt = rng.random((6, 6)) + 1
        mask = rng.random((6, 6)) > 0.4
        pred_a = gt.copy()
        pred_b = gt.copy()
        pred_b[~mask] = 99.0  # garbage outside the mask
        la = total_loss(Tensor(pred_a, dtype=np.float64), gt, mask).item()
        lb = total_loss(Tensor(pred_b, dtype=np.float64), gt, mask).item()
        assert la == pytest.approx(lb, abs=1e-12)

    def test_empty_mask_rejected(self):
        gt = np.ones((4, 4))
        with pytest.raises(UsageError):
            berhu_loss(Tensor(gt), gt, np.zeros((4, 4), dtype=bool))

    def test_loss_gradcheck(self):
        rng = np.random.default_rng(9)
        gt = rng.random((5, 5)) * 2 + 1
        mask = rng.random((5, 5)) > 0.2
        pred0 = gt + rng.standard_normal((5, 5)) * 0.4

        def f(p):
            return total_loss(p, gt, mask)

        rep = finite_diff_gradcheck(f, Tensor(pred0, dtype=np.float64))
        assert rep.passed, str(rep)


class TestMetrics:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(10).random((6, 6)) * 5 + 0.1
        m = compute_metrics(gt, gt, np.ones((6, 6), dtype=bool))
        assert (m.abs_rel, m.sq_rel, m.rmse) == (0.0, 0.0, 0.0)
        assert (m.delta1, m.delta2, m.delta3) == (1.0, 1.0, 1.0)
        assert m.valid_px == 36

    def test_double_prediction_closed_form(self):
        gt = np.full((4, 4), 2.0)
        m = compute_metrics(2 * gt, gt, np.ones((4, 4), dtype=bool))
        assert m.abs_rel == pytest.approx(1.0)
        # ratio 2 exceeds 1.25 (1.25), 1.5625 (1.25^2) and 1.953125 (1.25^3)
        assert (m.delta1, m.delta2, m.delta3) == (0.0, 0.0, 0.0)
        # a 1.8x prediction still clears the third threshold
        m2 = compute_metrics(1.8 * gt, gt, np.ones((4, 4), dtype=bool))
        assert (m2.delta1, m2.delta2, m2.delta3) == (0.0, 0.0, 1.0)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(11)
        gt = rng.random((8, 8)) * 4 + 0.2
        pred = np.abs(gt + rng.standard_normal((8, 8)))
        mask = rng.random((8, 8)) > 0.3
        m = compute_metrics(pred, gt, mask)
        want = scalar_loop_metrics(pred, gt, mask)
        got = (m.abs_rel, m.sq_rel, m.rmse, m.delta1, m.delta2, m.delta3,
               m.valid_px)
        np.testing.assert_allclose(got[:6], want[:6], atol=1e-9)
        assert got[6] == want[6]

    def test_deltas_are_monotone(self):
        rng = np.random.default_rng(12)
        gt = rng.random((10, 10)) * 3 + 0.5
        pred = gt * rng.uniform(0.4, 2.5, (10, 10))
        m = compute_metrics(pred, gt, np.ones((10, 10), dtype=bool))
        assert m.delta1 <= m.delta2 <= m.delta3
        assert 0.0 <= m.delta1 and m.delta3 <= 1.0

    def test_nonpositive_gt_excluded_with_warning(self):
        gt = np.ones((4, 4))
        gt[0, 0] = 0.0
        pred = np.ones((4, 4))
        with pytest.warns(UserWarning):
            m = compute_metrics(pred, gt, np.ones((4, 4), dtype=bool))
        assert m.valid_px == 15

    def test_json_schema(self):
        m = MetricsReport(0.1, 0.2, 0.3, 0.9, 0.95, 0.99, 123)
        d = m.to_dict()
        assert set(d) == {"abs_rel", "sq_rel", "rmse", "d1", "d2", "d3",
                          "valid_px"}
        assert m.to_json() == m.to_json()  # deterministic bytes


class TestAdam:
    def test_zero_gradient_no_motion(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        before = p.numpy().copy()
        adam_step([p], [np.zeros(2)], None, lr=0.1)
        np.testing.assert_array_equal(p.numpy(), before)

    def test_first_step_magnitude_is_lr(self):
        p = Tensor(np.array([1.0, -1.0, 3.0]), requires_grad=True)
        g = np.array([0.3, -2.0, 1e-3])
        before = p.numpy().copy()
        adam_step([p], [g], None, lr=1e-2)
        step = before - p.numpy()
        # mhat/(sqrt(vhat)+eps) ~ sign(g) on the first step
        np.testing.assert_allclose(step, 1e-2 * np.sign(g), rtol=1e-4)

    def test_quadratic_bowl_monotone_descent(self):
        x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        opt = Adam([x], lr=1e-2)
        losses = []
        for _ in range(100):
            loss = T.tensor_sum(T.mul(x, x)) * 0.5
            backward(loss)
            losses.append(loss.item())
            opt.step()
            opt.zero_grad()
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_state_carries_between_steps(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = adam_step([p], [np.array([1.0])], None, lr=0.1)
        assert state["t"] == 1
        state = adam_step([p], [np.array([1.0])], state, lr=0.1)
        assert state["t"] == 2
