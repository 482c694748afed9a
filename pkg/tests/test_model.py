"""Attention fusion, gate algebra, model wiring, loss, and variant structure."""

import numpy as np
import numpy.testing as npt
import pytest

from cfgaze import model as M
from cfgaze import tensor as T
from cfgaze.gradcheck import finite_difference_check
from cfgaze.tensor import ShapeError, Tape, Tensor

SCALE = 1 / 16  # 16-dim features, desk-tiny geometry
FACE_HW = (8, 8)
EYE_HW = (6, 10)


def rand_inputs(n=2, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    face = Tensor(rng.uniform(0, 1, size=(n, 3, *FACE_HW)).astype(dtype))
    left = Tensor(rng.uniform(0, 1, size=(n, 1, *EYE_HW)).astype(dtype))
    right = Tensor(rng.uniform(0, 1, size=(n, 1, *EYE_HW)).astype(dtype))
    return face, left, right


def att64(q=5, f=5, p=5, seed=0):
    return M.AttentionParams(q, f, p, np.random.default_rng(seed), dtype=np.float64)


class TestAttention:
    def test_equal_features_give_half_weights(self):
        """f_l == f_r forces m_l == m_r, so weights are (0.5, 0.5) and the
        fused feature equals either input."""
        rng = np.random.default_rng(1)
        params = att64(seed=2)
        q = Tensor(rng.normal(size=(3, 5)))
        f = Tensor(rng.normal(size=(3, 5)))
        out = M.attention_fuse(q, f, f, params)
        npt.assert_allclose(out.w_l.data, 0.5, atol=1e-12)
        npt.assert_allclose(out.f_e.data, f.data, atol=1e-12)

    def test_zero_projector_gives_half_weights(self):
        """v = 0 zeroes both scores regardless of the features."""
        rng = np.random.default_rng(3)
        params = att64(seed=4)
        params.v.data[:] = 0.0
        q = Tensor(rng.normal(size=(2, 5)))
        fl = Tensor(rng.normal(size=(2, 5)))
        fr = Tensor(rng.normal(size=(2, 5)))
        out = M.attention_fuse(q, fl, fr, params)
        npt.assert_array_equal(out.m_l.data, 0.0)
        npt.assert_allclose(out.w_l.data, 0.5, atol=1e-12)

    def test_weights_sum_to_one_and_convexity(self):
        """w_l + w_r = 1 exactly; f_e lies between f_l and f_r per coordinate."""
        rng = np.random.default_rng(5)
        params = att64(seed=6)
        for _ in range(20):
            q = Tensor(rng.normal(size=(4, 5)))
            fl = Tensor(rng.normal(size=(4, 5)))
            fr = Tensor(rng.normal(size=(4, 5)))
            out = M.attention_fuse(q, fl, fr, params)
            npt.assert_allclose(out.w_l.data + out.w_r.data, 1.0, atol=1e-12)
            assert np.all(out.w_l.data > 0) and np.all(out.w_l.data < 1)
            lo = np.minimum(fl.data, fr.data)
            hi = np.maximum(fl.data, fr.data)
            assert np.all(out.f_e.data >= lo - 1e-12)
            assert np.all(out.f_e.data <= hi + 1e-12)

    def test_gradient_vs_oracle(self):
        """d ||f_e||^2 / d {v, W1, W2, features} matches finite differences
        at 1e-4."""
        rng = np.random.default_rng(7)
        params = att64(seed=8)
        q = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        fl = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        fr = Tensor(rng.normal(size=(2, 5)), requires_grad=True)

        def f():
            out = M.attention_fuse(q, fl, fr, params)
            return T.tensor_sum(T.mul(out.f_e, out.f_e))

        checked = params.params("att") + [("q", q), ("fl", fl), ("fr", fr)]
        report = finite_difference_check(f, checked, tol=1e-4)
        assert report.passed, report.summary()

    def test_dimension_mismatch(self):
        params = att64()
        with pytest.raises(ShapeError):
            M.attention_fuse(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 5))),
                             Tensor(np.zeros((2, 5))), params)

    def test_fixed_weights_when_no_params(self):
        fl = Tensor(np.ones((2, 4), dtype=np.float32))
        fr = Tensor(np.full((2, 4), 3.0, dtype=np.float32))
        out = M.attention_fuse(None, fl, fr, None)
        npt.assert_array_equal(out.w_l.data, 0.5)
        npt.assert_allclose(out.f_e.data, 2.0)


def gate64(feat=4, state=4, seed=0):
    return M.GateParams(feat, state, np.random.default_rng(seed), dtype=np.float64)


class TestGateStep:
    def test_z_zero_preserves_state(self):
        """Forcing z ~ 0 (weights 0, bias -50) leaves h' == h within 1e-9."""
        params = gate64(seed=1)
        params.wz.weight.data[:] = 0.0
        params.wz.bias.data[:] = -50.0
        rng = np.random.default_rng(2)
        h = Tensor(rng.normal(size=(3, 4)))
        f = Tensor(rng.normal(size=(3, 4)))
        step = M.gate_step(h, f, params)
        npt.assert_allclose(step.h.data, h.data, atol=1e-9)

    def test_z_one_r_one_from_zero_state(self):
        """z ~ 1 and r ~ 1 with h = 0 collapse the update to ReLU(Wh [0, f])."""
        params = gate64(seed=3)
        params.wz.weight.data[:] = 0.0
        params.wz.bias.data[:] = 50.0
        params.wr.weight.data[:] = 0.0
        params.wr.bias.data[:] = 50.0
        rng = np.random.default_rng(4)
        h = Tensor(np.zeros((2, 4), dtype=np.float64))
        f = Tensor(rng.normal(size=(2, 4)))
        step = M.gate_step(h, f, params)
        hf = np.concatenate([np.zeros((2, 4)), f.data], axis=1)
        expected = np.maximum(hf @ params.wh.weight.data + params.wh.bias.data, 0.0)
        npt.assert_allclose(step.h.data, expected, atol=1e-12)

    def test_gate_intermediates_in_unit_interval(self):
        params = gate64(seed=5)
        rng = np.random.default_rng(6)
        step = M.gate_step(Tensor(rng.normal(size=(4, 4))),
                           Tensor(rng.normal(size=(4, 4))), params)
        for t in (step.z, step.r):
            assert np.all(t.data > 0) and np.all(t.data < 1)

    def test_two_chained_steps_gradient_vs_oracle(self):
        """Gradient through two chained gate updates matches the oracle at 1e-4."""
        p1 = gate64(seed=7)
        p2 = gate64(seed=8)
        rng = np.random.default_rng(9)
        h0 = Tensor(np.zeros((2, 4), dtype=np.float64))
        f1 = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        f2 = Tensor(rng.normal(size=(2, 4)), requires_grad=True)

        def f():
            s1 = M.gate_step(h0, f1, p1)
            s2 = M.gate_step(s1.h, f2, p2)
            return T.tensor_sum(T.mul(s2.h, s2.h))

        checked = p1.params("g1") + p2.params("g2") + [("f1", f1), ("f2", f2)]
        report = finite_difference_check(f, checked, tol=1e-4)
        assert report.passed, report.summary()

    def test_dims_check(self):
        params = gate64(feat=4, state=4)
        with pytest.raises(ShapeError):
            M.gate_step(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), params)

    def test_tanh_candidate_option(self):
        params = gate64(seed=10)
        rng = np.random.default_rng(11)
        h = Tensor(rng.normal(size=(2, 4)))
        f = Tensor(rng.normal(size=(2, 4)))
        relu_step = M.gate_step(h, f, params, activation="relu")
        tanh_step = M.gate_step(h, f, params, activation="tanh")
        assert not np.allclose(relu_step.h.data, tanh_step.h.data)
        assert np.all(tanh_step.h_tilde.data <= 1.0)


class TestLoss:
    def test_perfect_prediction_is_zero(self):
        g_star = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0]], dtype=np.float32)
        pred = Tensor(g_star.copy())
        loss = M.canet_loss(pred, pred, g_star)
        assert abs(loss.item()) <= 1e-6

    def test_orthogonal_refined_gives_pi(self):
        """alpha=1 on a perfect basic term, beta=2 on an orthogonal final
        term: loss = 2 * (pi/2) = pi."""
        g_star = np.array([[0.0, 0.0, -1.0]], dtype=np.float32)
        g_b = Tensor(g_star.copy())
        g = Tensor(np.array([[1.0, 0.0, 0.0]], dtype=np.float32))
        loss = M.canet_loss(g_b, g, g_star, M.LossWeights(alpha=1.0, beta=2.0))
        npt.assert_allclose(loss.item(), np.pi, atol=1e-6)

    def test_monotone_in_refined_error(self):
        """With g_b fixed, a larger angle to the target strictly increases
        the loss (beta > 0)."""
        g_star = np.array([[0.0, 0.0, -1.0]], dtype=np.float32)
        g_b = Tensor(g_star.copy())
        losses = []
        for ang in np.radians([5, 20, 45, 90, 170]):
            g = Tensor(np.array([[np.sin(ang), 0.0, -np.cos(ang)]], dtype=np.float32))
            losses.append(M.canet_loss(g_b, g, g_star).item())
        assert all(b > a for a, b in zip(losses, losses[1:]))

    def test_gradient_vs_oracle(self):
        """Loss gradient on random near-unit predictions matches the oracle
        at 1e-4."""
        rng = np.random.default_rng(12)
        g_star = rng.normal(size=(4, 3))
        g_star /= np.linalg.norm(g_star, axis=1, keepdims=True)
        g_b = Tensor(rng.normal(size=(4, 3)) * 0.9, requires_grad=True)
        g_r = Tensor(rng.normal(size=(4, 3)) * 0.2, requires_grad=True)

        def f():
            return M.canet_loss(g_b, T.add(g_b, g_r), g_star.astype(np.float64))

        report = finite_difference_check(f, [("g_b", g_b), ("g_r", g_r)], tol=1e-4)
        assert report.passed, report.summary()

    def test_zero_norm_prediction_rejected(self):
        g_star = np.array([[0.0, 0.0, -1.0]], dtype=np.float32)
        dead = Tensor(np.zeros((1, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            M.canet_loss(dead, dead, g_star)

    def test_non_unit_target_rejected(self):
        g = Tensor(np.array([[0.0, 0.0, -1.0]], dtype=np.float32))
        with pytest.raises(ValueError):
            M.canet_loss(g, g, np.array([[0.0, 0.0, -2.0]]))


class TestModelForward:
    def test_output_shapes(self):
        """Batch of 4 toy inputs yields (4,3) for each of g_b, g_r, g."""
        model = M.build_variant("canet", SCALE, seed=0)
        face, left, right = rand_inputs(n=4)
        res = model.forward(face, left, right, train=True)
        for t in (res.g_b, res.g_r, res.g):
            assert t.shape == (4, 3)

    def test_residual_composition_exact(self):
        """g - g_b - g_r is exactly zero, elementwise."""
        model = M.build_variant("canet", SCALE, seed=1)
        face, left, right = rand_inputs(n=3, seed=2)
        res = model.forward(face, left, right)
        npt.assert_array_equal(res.g.data, res.g_b.data + res.g_r.data)

    def test_zeroed_residual_head_collapses_to_basic(self):
        """With FC_r weights and bias zeroed, g == g_b exactly."""
        model = M.build_variant("canet", SCALE, seed=3)
        model.head_r.weight.data[:] = 0.0
        model.head_r.bias.data[:] = 0.0
        face, left, right = rand_inputs(n=2, seed=4)
        res = model.forward(face, left, right)
        npt.assert_array_equal(res.g.data, res.g_b.data)
        npt.assert_array_equal(res.g_r.data, 0.0)

    def test_swap_invariance_with_synced_eye_backbones(self):
        """After copying left-eye weights into the right-eye net, swapping
        the two eye images swaps the attention weights and leaves the output
        unchanged (the fused feature is symmetric)."""
        model = M.build_variant("canet", SCALE, seed=5)
        for (_, src), (_, dst) in zip(model.eye_l_bb.state("l"), model.eye_r_bb.state("r")):
            if isinstance(dst, Tensor):
                dst.data = src.data.copy()
            else:
                dst[...] = src
        face, left, right = rand_inputs(n=2, seed=6)
        res1 = model.forward(face, left, right)
        res2 = model.forward(face, right, left)
        npt.assert_allclose(res2.diagnostics["w_l"], res1.diagnostics["w_r"], atol=1e-6)
        npt.assert_allclose(res2.g.data, res1.g.data, atol=1e-5)

    def test_identical_eye_images_fuse_to_backbone_feature(self):
        model = M.build_variant("canet", SCALE, seed=7)
        face, left, _ = rand_inputs(n=2, seed=8)
        res = model.forward(face, left, left)
        # separate eye weights: w_l != 0.5 in general, but f_e interpolates
        # between two different features; just check determinism + finiteness
        assert np.isfinite(res.g.data).all()

    def test_geometry_mismatch_rejected(self):
        model = M.build_variant("canet", SCALE, seed=0)
        face, left, right = rand_inputs()
        with pytest.raises(ShapeError):
            model.forward(left, left, right)  # 1-channel image in the face slot


class TestVariants:
    def test_all_kinds_build_and_run(self):
        face, left, right = rand_inputs(n=2, seed=9)
        for kind in M.VARIANT_KINDS:
            model = M.build_variant(kind, SCALE, seed=10)
            res = model.forward(face, left, right, train=True)
            assert res.g.shape == (2, 3), kind
            npt.assert_array_equal(res.g.data, res.g_b.data + res.g_r.data)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            M.build_variant("resnet", SCALE, seed=0)

    def test_attention_ablation_fixed_weights(self):
        """Diagnostics always report w_l == w_r == 0.5."""
        model = M.build_variant("attention_ablation", SCALE, seed=11)
        face, left, right = rand_inputs(n=3, seed=12)
        res = model.forward(face, left, right)
        npt.assert_array_equal(res.diagnostics["w_l"], 0.5)
        npt.assert_array_equal(res.diagnostics["w_r"], 0.5)
        assert model.attention is None

    def test_one_gram_residual_state_is_zero(self):
        """The residual gate consumes a zero previous state, while the
        attention is still queried by the basic-stage state."""
        model = M.build_variant("one_gram", SCALE, seed=13)
        face, left, right = rand_inputs(n=2, seed=14)
        res = model.forward(face, left, right)
        npt.assert_array_equal(res.diagnostics["residual_state_input"], 0.0)
        # the attention query (h1) still depends on the face: perturb face
        face2 = Tensor(face.data + 0.5)
        res2 = model.forward(face2, left, right)
        assert np.abs(res2.g_b.data - res.g_b.data).max() > 0
        assert np.abs(res2.diagnostics["w_l"] - res.diagnostics["w_l"]).max() > 0

    def test_canet_residual_state_is_h1(self):
        model = M.build_variant("canet", SCALE, seed=15)
        face, left, right = rand_inputs(n=2, seed=16)
        res = model.forward(face, left, right)
        npt.assert_array_equal(res.diagnostics["residual_state_input"],
                               res.diagnostics["h1"])

    def test_parameter_count_ordering(self):
        """joint_net has fewer parameters than the full model (which adds
        gates and attention)."""
        joint = M.build_variant("joint_net", SCALE, seed=0)
        canet = M.build_variant("canet", SCALE, seed=0)
        assert joint.param_count() < canet.param_count()

    def test_face_attention_ignores_eyes_for_weights(self):
        """Query-only scoring: changing the eye images must not move the
        attention weights (though it changes the features being mixed)."""
        model = M.build_variant("face_attention", SCALE, seed=17)
        face, left, right = rand_inputs(n=2, seed=18)
        res1 = model.forward(face, left, right)
        res2 = model.forward(face, Tensor(left.data + 0.3), Tensor(right.data * 0.5))
        npt.assert_allclose(res1.diagnostics["w_l"], res2.diagnostics["w_l"], atol=1e-7)

    def test_eye_attention_ignores_face_for_weights(self):
        model = M.build_variant("eye_attention", SCALE, seed=19)
        face, left, right = rand_inputs(n=2, seed=20)
        res1 = model.forward(face, left, right)
        res2 = model.forward(Tensor(face.data + 0.4), left, right)
        npt.assert_allclose(res1.diagnostics["w_l"], res2.diagnostics["w_l"], atol=1e-7)

    def test_fine_to_coarse_swaps_roles(self):
        """Basic gaze comes from the eyes; the residual stage sees the face."""
        model = M.build_variant("fine_to_coarse", SCALE, seed=21)
        face, left, right = rand_inputs(n=2, seed=22)
        res1 = model.forward(face, left, right)
        res2 = model.forward(Tensor(face.data + 0.5), left, right)
        npt.assert_array_equal(res1.g_b.data, res2.g_b.data)  # face does not move g_b
        assert not np.allclose(res1.g_r.data, res2.g_r.data)

    def test_gate_ablation_has_no_gates(self):
        model = M.build_variant("gate_ablation", SCALE, seed=23)
        assert model.gate1 is None and model.gate2 is None
        assert model.attention is not None
        face, left, right = rand_inputs(n=2, seed=24)
        res = model.forward(face, left, right)
        assert "h1" not in res.diagnostics

    def test_single_source_variants(self):
        face, left, right = rand_inputs(n=2, seed=25)
        for kind in ("face_net", "eye_net", "joint_net"):
            model = M.build_variant(kind, SCALE, seed=26)
            res = model.forward(face, left, right)
            npt.assert_array_equal(res.g.data, res.g_b.data)
            npt.assert_array_equal(res.g_r.data, 0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = M.build_variant("canet", SCALE, seed=27)
        face, left, right = rand_inputs(n=2, seed=28)
        before = model.forward(face, left, right).g.data
        path = tmp_path / "model.canw"
        M.save_checkpoint(model, path)
        loaded = M.load_checkpoint(path)
        assert loaded.kind == "canet"
        assert loaded.width_scale == pytest.approx(SCALE)
        after = loaded.forward(face, left, right).g.data
        npt.assert_array_equal(before, after)

    def test_variant_metadata_preserved(self, tmp_path):
        model = M.build_variant("one_gram", SCALE, seed=29, gate_activation="tanh")
        path = tmp_path / "m.canw"
        M.save_checkpoint(model, path)
        loaded = M.load_checkpoint(path)
        assert loaded.kind == "one_gram"
        assert loaded.gate_activation == "tanh"

    def test_missing_meta_rejected(self, tmp_path):
        from cfgaze.layers import save_weights
        path = tmp_path / "bare.canw"
        save_weights(path, [("x", np.ones(3, dtype=np.float32))])
        with pytest.raises(ValueError):
            M.load_checkpoint(path)
