"""Acceptance suite: one test per exit criterion, with stated tolerances.

Each test prints a single [PASS] line on success (run with -s to see them);
tolerances and budgets are pinned here, not configurable.
"""

import io
import json
import time

import numpy as np
import pytest

from panodepth import b2f as b2f_mod
from panodepth import icosap
from panodepth import sphere
from panodepth import tensor as T
from panodepth.audit import (
    _distance_attention_loops,
    _semantic_attention_loops,
    audit_b2f,
    audit_tensor,
    conv2d_loops,
    matmul_loops,
)
from panodepth.b2f import B2FWeights, exp_neg_abs_diff
from panodepth.encoders import PointEncoder
from panodepth.model import (
    DepthModel,
    ModelConfig,
    TrainConfig,
    train_overfit,
)
from panodepth.pipeline import berhu, compute_metrics, total_loss
from panodepth.scenes import BoxScene, synth_box_scene
from panodepth.tensor import Tensor, backward

from test_pipeline import scalar_loop_metrics, scalar_loop_total_loss
from test_scenes_cli import ray_march_depth


def _ok(msg):
    print(f"[PASS] {msg}")


class TestCriterion1Icosahedron:
    def test_structure_constants(self):
        t0 = time.monotonic()
        want = {0: (20, 12), 1: (80, 42), 2: (320, 162)}
        mesh = icosap.build_icosahedron()
        for level in range(6):
            if level:
                mesh = icosap.subdivide(mesh)
            if level in want:
                assert (mesh.face_count, mesh.vertex_count) == want[level]
            assert mesh.euler_characteristic() == 2
        img = np.full((16, 32, 3), 0.5)
        ps = icosap.face_center_point_set(icosap.build_mesh(4), img)
        assert ps.points.shape == (5120, 6)
        elapsed = time.monotonic() - t0
        assert elapsed < 5.0
        _ok(f"criterion 1: icosahedron counts, Euler=2 (l=0..5), 5120 rows "
            f"at l=4 in {elapsed:.2f}s")


class TestCriterion2PointEncoderCounts:
    @pytest.mark.parametrize("blocks,n", [(3, 80), (2, 320), (4, 20)])
    def test_level4_counts(self, blocks, n):
        img = np.full((16, 32, 3), 0.5)
        pts = icosap.face_center_point_set(icosap.build_mesh(4), img).points
        enc = PointEncoder(np.random.default_rng(0), channels=8, blocks=blocks,
                           knn=4)
        pf = enc.forward(pts)
        assert len(pf) == n
        assert pf.features.shape == (n, 8)
        _ok(f"criterion 2: l=4 with {blocks} blocks -> N={n}")


class TestCriterion3GeometryRoundTrip:
    def test_round_trips(self):
        t0 = time.monotonic()
        h, w = 64, 128
        ii, jj = np.meshgrid(np.arange(h, dtype=float),
                             np.arange(w, dtype=float), indexing="ij")
        d = sphere.pixel_to_dir(ii, jj, h, w)
        ri, rj = sphere.dir_to_pixel(d, h, w)
        err_px = max(np.abs(ri - ii).max(), np.abs(rj - jj).max())
        assert err_px < 1e-9

        rng = np.random.default_rng(42)
        dirs = rng.standard_normal((10_000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        i, j = sphere.dir_to_pixel(dirs, h, w)
        lat = np.pi / 2 - (i + 0.5) / h * np.pi
        lon = (j + 0.5) / w * 2 * np.pi - np.pi
        back = np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon),
                         np.sin(lat)], axis=-1)
        chord = np.linalg.norm(back - dirs, axis=1)  # ~ angle in radians
        assert chord.max() < 1e-9
        elapsed = time.monotonic() - t0
        assert elapsed < 2.0
        _ok(f"criterion 3: exhaustive 64x128 round trip ({err_px:.2e} px) and "
            f"1e4 random dirs ({chord.max():.2e} rad) in {elapsed:.2f}s")


class TestCriterion4GradientAudits:
    def test_all_primitives_and_fusion_path(self):
        t0 = time.monotonic()
        results = audit_tensor(seeds=(0, 1, 2, 3, 4))
        results += audit_b2f(seeds=(0, 1, 2, 3, 4))
        failed = [r.line() for r in results if not r.passed]
        elapsed = time.monotonic() - t0
        assert not failed, "\n".join(failed)
        assert elapsed < 60.0
        grads = [r for r in results if r.name.startswith("grad/")]
        _ok(f"criterion 4: {len(grads)} gradient audits at 1e-4 over 5 seeds "
            f"in {elapsed:.1f}s")


class TestCriterion5OracleEquivalence:
    def test_b2f_batched_vs_loops(self):
        rng = np.random.default_rng(50)
        h, w, n, c = 2, 3, 5, 8
        weights = B2FWeights.create(c, c, rng)
        fe = rng.standard_normal((h, w, c))
        fi = rng.standard_normal((n, c))
        dirs = rng.standard_normal((h, w, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        coords = rng.standard_normal((n, 3))
        coords /= np.linalg.norm(coords, axis=-1, keepdims=True)

        got_s = b2f_mod.semantic_affinity_attention(
            Tensor(fe, dtype=np.float64), Tensor(fi, dtype=np.float64),
            weights).numpy()
        assert np.abs(got_s - _semantic_attention_loops(fe, fi, weights)).max() \
            <= 1e-6
        got_d = b2f_mod.distance_affinity_attention(
            Tensor(fe, dtype=np.float64), Tensor(fi, dtype=np.float64),
            coords, dirs, weights).numpy()
        assert np.abs(got_d - _distance_attention_loops(fe, fi, coords, dirs,
                                                        weights)).max() <= 1e-6
        _ok("criterion 5a: batched fusion equals per-pixel loops within 1e-6 "
            "(h=2,w=3,N=5,C=d=8)")

    def test_matmul_conv_vs_loops(self):
        rng = np.random.default_rng(51)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        got = T.matmul(Tensor(a, dtype=np.float64),
                       Tensor(b, dtype=np.float64)).numpy()
        want = matmul_loops(a, b)
        assert np.abs(got - want).max() / np.abs(want).max() <= 1e-5

        x = rng.standard_normal((2, 8, 8))
        w = rng.standard_normal((4, 2, 3, 3))
        got = T.conv2d(Tensor(x, dtype=np.float64),
                       Tensor(w, dtype=np.float64), 1, 1).numpy()
        want = conv2d_loops(x, w, 1, 1)
        assert np.abs(got - want).max() / np.abs(want).max() <= 1e-5
        _ok("criterion 5b: matmul/conv2d equal loop oracles within 1e-5")

    def test_metrics_and_losses_vs_scalar_loops(self):
        rng = np.random.default_rng(52)
        gt = rng.random((8, 8)) * 4 + 0.5
        pred = np.abs(gt + rng.standard_normal((8, 8)) * 0.4)
        mask = rng.random((8, 8)) > 0.25

        got = total_loss(Tensor(pred, dtype=np.float64), gt, mask).item()
        want = scalar_loop_total_loss(pred, gt, mask)
        assert abs(got - want) <= 1e-9

        m = compute_metrics(pred, gt, mask)
        w = scalar_loop_metrics(pred, gt, mask)
        got6 = (m.abs_rel, m.sq_rel, m.rmse, m.delta1, m.delta2, m.delta3)
        assert max(abs(a - b) for a, b in zip(got6, w[:6])) <= 1e-9
        assert m.valid_px == w[6]
        _ok("criterion 5c: losses and metrics equal scalar-loop oracles "
            "within 1e-9")


class TestCriterion6AnalyticInvariants:
    def test_attention_embedding_gate_invariants(self):
        rng = np.random.default_rng(60)
        h, w, n, c = 3, 4, 9, 8
        weights = B2FWeights.create(c, c, rng)
        fe = rng.standard_normal((h, w, c))
        fi = rng.standard_normal((n, c))
        dirs = rng.standard_normal((h, w, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        coords = rng.standard_normal((n, 3))
        coords /= np.linalg.norm(coords, axis=-1, keepdims=True)

        _, a_s = b2f_mod.semantic_affinity_attention(
            Tensor(fe), Tensor(fi), weights, return_attention=True)
        _, a_d = b2f_mod.distance_affinity_attention(
            Tensor(fe), Tensor(fi), coords, dirs, weights,
            return_attention=True)
        for a in (a_s.numpy(), a_d.numpy()):
            assert a.min() >= 0.0
            assert np.abs(a.sum(axis=-1) - 1.0).max() <= 1e-6

        e_sp = exp_neg_abs_diff(dirs.reshape(-1, 3), coords)
        e_se = b2f_mod.semantic_distance_embedding(
            Tensor(fe.reshape(-1, c)), Tensor(fi), weights.w_dist_q,
            weights.w_dist_k).numpy()
        for e in (e_sp, e_se):
            assert e.min() > 0.0 and e.max() <= 1.0

        cat = Tensor(rng.standard_normal((h * w, 2 * c)) * 10)
        gates = T.sigmoid(T.matmul(cat, weights.w_gate_sem)).numpy()
        assert gates.min() >= 0.0 and gates.max() <= 1.0
        _ok("criterion 6a: attention rows sum to 1 +- 1e-6, embeddings in "
            "(0,1], gates in [0,1]")

    def test_berhu_branch_agreement_at_threshold(self):
        c = 0.2
        vals = berhu(Tensor(np.array([c, -c], dtype=np.float64)), c).numpy()
        assert np.abs(vals - c).max() <= 1e-12  # |x| branch == quad branch
        for x0 in (c, -c):
            t = Tensor(np.array([x0], dtype=np.float64), requires_grad=True)
            backward(T.tensor_sum(berhu(t, c)))
            assert abs(t.grad[0] - np.sign(x0)) <= 1e-12
        _ok("criterion 6b: reverse-Huber branches and derivatives agree at "
            "|x| = c = 0.2")

    def test_fused_output_permutation_invariance(self):
        rng = np.random.default_rng(61)
        h, w, n, c = 2, 3, 7, 8
        weights = B2FWeights.create(c, c, rng)
        fe = rng.standard_normal((h, w, c))
        fi = rng.standard_normal((n, c))
        dirs = rng.standard_normal((h, w, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        coords = rng.standard_normal((n, 3))
        coords /= np.linalg.norm(coords, axis=-1, keepdims=True)
        base = b2f_mod.b2f_forward(Tensor(fe, dtype=np.float64),
                                   Tensor(fi, dtype=np.float64),
                                   coords, dirs, weights).numpy()
        perm = rng.permutation(n)
        moved = b2f_mod.b2f_forward(Tensor(fe, dtype=np.float64),
                                    Tensor(fi[perm], dtype=np.float64),
                                    coords[perm], dirs, weights).numpy()
        assert np.abs(base - moved).max() <= 1e-6
        _ok("criterion 6c: fused output invariant to point permutation "
            "within 1e-6")


class TestCriterion7SyntheticOracle:
    def test_box_depth_vs_ray_march(self):
        scene = BoxScene(half_extents=(2.0, 1.5, 1.2), checker=4)
        _, depth, _ = synth_box_scene(scene, 64, 128)
        dirs = sphere.erp_pixel_dirs(64, 128)
        oracle = ray_march_depth(scene, dirs)
        err = np.abs(depth - oracle).max()
        assert err < 1e-4
        _ok(f"criterion 7: box depth matches ray-march oracle everywhere "
            f"(max {err:.2e} m)")


DESK_SCENE = BoxScene(half_extents=(2.0, 1.5, 1.2), checker=4)


def _run_desk_overfit(max_steps=5000):
    cfg = ModelConfig(seed=0)  # 64x128, C=32, l=3 -> N=20
    img, depth, mask = synth_box_scene(DESK_SCENE, cfg.height, cfg.width)
    model = DepthModel(cfg)
    points = model.prepare_points(img)
    tc = TrainConfig(lr=1e-4, steps=max_steps, log_every=100)

    def good(m):
        return m.delta1 >= 0.95 and m.rmse <= 0.05 * cfg.max_depth

    history, metrics, pred = train_overfit(model, tc, img, depth, mask,
                                           points, stop_when=good,
                                           eval_every=100)
    return model, history, metrics, pred


class TestCriterion8Overfit:
    def test_desk_overfit_reaches_targets_deterministically(self):
        t0 = time.monotonic()
        model1, hist1, m1, pred1 = _run_desk_overfit()
        steps_used = hist1[-1][0] + 1
        assert steps_used <= 5000
        assert m1.delta1 >= 0.95, m1.to_dict()
        assert m1.rmse <= 0.05 * 10.0, m1.to_dict()

        # identical seed -> bit-identical metric bytes and weight bytes
        model2, hist2, m2, pred2 = _run_desk_overfit()
        assert m1.to_json().encode() == m2.to_json().encode()
        assert np.array_equal(pred1, pred2)
        buf1, buf2 = io.BytesIO(), io.BytesIO()
        np.save(buf1, np.concatenate([p.numpy().ravel()
                                      for p in model1.parameters()]))
        np.save(buf2, np.concatenate([p.numpy().ravel()
                                      for p in model2.parameters()]))
        assert buf1.getvalue() == buf2.getvalue()
        elapsed = time.monotonic() - t0
        assert elapsed < 900.0
        _ok(f"criterion 8: desk overfit hit d1={m1.delta1:.3f}, "
            f"rmse={m1.rmse:.3f} m in {steps_used} steps; two runs "
            f"bit-identical; {elapsed:.0f}s total")


class TestCriterion9AblationHarness:
    @pytest.mark.parametrize("fusion", ["gated", "add", "concat"])
    def test_fusion_modes_train_without_divergence(self, fusion):
        cfg = ModelConfig(seed=1, fusion=fusion)
        img, depth, mask = synth_box_scene(DESK_SCENE, cfg.height, cfg.width)
        model = DepthModel(cfg)
        points = model.prepare_points(img)
        tc = TrainConfig(lr=1e-4, steps=120, log_every=40)
        history, metrics, _ = train_overfit(model, tc, img, depth, mask, points)
        losses = [row[1] for row in history]
        assert all(np.isfinite(losses))
        assert losses[-1] < losses[0]  # trained, did not diverge
        blob = json.loads(metrics.to_json())
        assert set(blob) == {"abs_rel", "sq_rel", "rmse", "d1", "d2", "d3",
                             "valid_px"}
        _ok(f"criterion 9: fusion mode {fusion!r} trains and emits metrics "
            f"(final loss {losses[-1]:.4f})")
