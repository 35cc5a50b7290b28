import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import arch_spec, random_labels, random_model_setup, random_views, small_config
from mvhash import loss, model, nd
from mvhash.errors import ConfigError, FormatError, ShapeError


def zero_params(config, seed=0, names=None):
    params = model.ModelParams.init(config, seed)
    for name, t in params.tensors.items():
        if names is None or any(name.startswith(p) for p in names):
            t.data = np.zeros_like(t.data)
    return params


class TestModelConfig:
    def test_concat_requires_no_adaptive(self):
        with pytest.raises(ConfigError):
            small_config(fusion="concat", use_adaptive=True)
        cfg = small_config(fusion="concat", use_adaptive=False)
        assert cfg.fused_dim == cfg.d * 2

    def test_domain_checks(self):
        with pytest.raises(ConfigError):
            small_config(k=0)
        with pytest.raises(ConfigError):
            small_config(d=0)
        with pytest.raises(ConfigError):
            small_config(views_enabled=())
        with pytest.raises(ConfigError):
            small_config(views_enabled=(0, 5))
        with pytest.raises(ConfigError):
            small_config(fusion="mean")

    def test_round_trips_through_dict(self):
        cfg = small_config(views_enabled=(1,), use_gate=False)
        assert model.ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncodeView:
    def test_zero_weights_give_zero(self, rng):
        cfg = small_config()
        params = zero_params(cfg, names=["enc."])
        e = model.encode_view(params, 0, nd.Tensor(rng.standard_normal((3, 12))))
        assert not e.data.any()

    def test_output_strictly_inside_unit_box(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 7)
        e = model.encode_view(params, 0, nd.Tensor(rng.standard_normal((6, 12)) * 3))
        assert np.abs(e.data).max() < 1.0
        # float64 tanh saturates to exactly +-1 for extreme pre-activations
        wild = model.encode_view(params, 0, nd.Tensor(rng.standard_normal((6, 12)) * 1e6))
        assert np.abs(wild.data).max() <= 1.0

    def test_matches_straight_line_oracle(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 3)
        z = rng.standard_normal((3, 12))
        e = model.encode_view(params, 0, nd.Tensor(z))
        arrays = params.arrays()
        hidden = np.maximum(z @ arrays["enc.0.w1"] + arrays["enc.0.b1"], 0.0)
        expected = np.tanh(hidden @ arrays["enc.0.w2"] + arrays["enc.0.b2"])
        np.testing.assert_allclose(e.data, expected, rtol=0, atol=1e-12)

    def test_width_mismatch(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 3)
        with pytest.raises(ShapeError):
            model.encode_view(params, 0, nd.Tensor(rng.standard_normal((3, 5))))


class TestGateView:
    def test_zero_gate_params_give_half(self, rng):
        cfg = small_config()
        params = zero_params(cfg, names=["gate."])
        e = nd.Tensor(rng.standard_normal((4, cfg.d)))
        w, c = model.gate_view(params, 0, e)
        np.testing.assert_array_equal(w.data, np.full((4, cfg.d), 0.5))
        np.testing.assert_allclose(c.data, e.data / 2, atol=0)

    def test_strongly_negative_bias_closes_the_gate(self, rng):
        cfg = small_config()
        params = zero_params(cfg, names=["gate."])
        params.tensors["gate.0.b"].data = np.full((1, cfg.d), -30.0)
        e = nd.Tensor(rng.standard_normal((4, cfg.d)))
        w, _ = model.gate_view(params, 0, e)
        assert w.data.max() < 1e-13  # sigmoid(-30) ~ 9.4e-14

    def test_ablated_gate_is_exact_identity(self, rng):
        cfg = small_config(use_gate=False)
        params = model.ModelParams.init(cfg, 1)
        e = nd.Tensor(rng.standard_normal((4, cfg.d)))
        w, c = model.gate_view(params, 0, e)
        assert c is e
        np.testing.assert_array_equal(w.data, np.ones((4, cfg.d)))

    def test_shared_gate_uses_one_parameter_set(self, rng):
        cfg = small_config(shared_gate=True)
        params = model.ModelParams.init(cfg, 1)
        assert "gate.w" in params.tensors
        assert "gate.0.w" not in params.tensors
        e = nd.Tensor(rng.standard_normal((4, cfg.d)))
        w0, _ = model.gate_view(params, 0, e)
        w1, _ = model.gate_view(params, 1, e)
        np.testing.assert_array_equal(w0.data, w1.data)

    def test_gate_weights_strictly_between_zero_and_one(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 2)
        e = nd.Tensor(rng.standard_normal((8, cfg.d)))
        w, _ = model.gate_view(params, 1, e)
        assert ((w.data > 0) & (w.data < 1)).all()


class TestFuse:
    def test_single_view_with_unit_weight(self, rng):
        cfg = small_config(views_enabled=(0,))
        params = model.ModelParams.init(cfg, 1)
        params.tensors["view_weight.0"].data[:] = 1.0
        c = nd.Tensor(rng.standard_normal((4, cfg.d)))
        fused = model.fuse(params, cfg, [c])
        np.testing.assert_array_equal(fused.data, c.data)

    def test_zero_weight_drops_a_view(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 1)
        params.tensors["view_weight.0"].data[:] = 1.0
        params.tensors["view_weight.1"].data[:] = 0.0
        c1 = nd.Tensor(rng.standard_normal((4, cfg.d)))
        c2 = nd.Tensor(rng.standard_normal((4, cfg.d)))
        fused = model.fuse(params, cfg, [c1, c2])
        np.testing.assert_array_equal(fused.data, c1.data)

    def test_weighted_sum_matches_loop_oracle(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 1)
        params.tensors["view_weight.0"].data[:] = 0.3
        params.tensors["view_weight.1"].data[:] = 0.7
        c1 = rng.standard_normal((4, cfg.d))
        c2 = rng.standard_normal((4, cfg.d))
        fused = model.fuse(params, cfg, [nd.Tensor(c1), nd.Tensor(c2)])
        expected = np.zeros_like(c1)
        for i in range(4):
            for j in range(cfg.d):
                expected[i, j] = 0.3 * c1[i, j] + 0.7 * c2[i, j]
        np.testing.assert_allclose(fused.data, expected, rtol=0, atol=1e-15)

    def test_plain_sum_when_adaptive_off(self, rng):
        cfg = small_config(use_adaptive=False)
        params = model.ModelParams.init(cfg, 1)
        assert "view_weight.0" not in params.tensors
        c1 = nd.Tensor(rng.standard_normal((4, cfg.d)))
        c2 = nd.Tensor(rng.standard_normal((4, cfg.d)))
        fused = model.fuse(params, cfg, [c1, c2])
        np.testing.assert_array_equal(fused.data, c1.data + c2.data)

    def test_concat(self, rng):
        cfg = small_config(fusion="concat", use_adaptive=False)
        params = model.ModelParams.init(cfg, 1)
        c1 = nd.Tensor(rng.standard_normal((4, cfg.d)))
        c2 = nd.Tensor(rng.standard_normal((4, cfg.d)))
        fused = model.fuse(params, cfg, [c1, c2])
        np.testing.assert_array_equal(fused.data, np.hstack([c1.data, c2.data]))


class TestDilate:
    def test_zero_weights_reduce_to_residual_identity(self, rng):
        cfg = small_config()
        params = zero_params(cfg, names=["dilation."])
        a = nd.Tensor(rng.standard_normal((4, cfg.d)))
        g = model.dilate(params, a)
        np.testing.assert_array_equal(g.data, a.data)

    def test_ablated_dilation_is_exact_identity(self, rng):
        cfg = small_config(use_dilation=False)
        params = model.ModelParams.init(cfg, 1)
        a = nd.Tensor(rng.standard_normal((4, cfg.d)))
        assert model.dilate(params, a) is a

    def test_matches_straight_line_oracle(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 5)
        a = rng.standard_normal((3, cfg.d))
        g = model.dilate(params, nd.Tensor(a))
        arrays = params.arrays()
        u = np.maximum(a @ arrays["dilation.w1"] + arrays["dilation.b1"], 0.0)
        expected = u @ arrays["dilation.w2"] + arrays["dilation.b2"] + a
        np.testing.assert_allclose(g.data, expected, rtol=0, atol=1e-12)

    def test_expansion_is_four_fold(self):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 1)
        assert params.tensors["dilation.w1"].shape == (cfg.d, 4 * cfg.d)
        assert params.tensors["dilation.w2"].shape == (4 * cfg.d, cfg.d)


class TestHashAndClassify:
    def test_zero_params_give_zero(self, rng):
        cfg = small_config()
        params = zero_params(cfg, names=["hash.", "classifier."])
        g = nd.Tensor(rng.standard_normal((4, cfg.d)))
        h = model.hash_forward(params, g)
        assert not h.data.any()
        assert not model.classify(params, h).data.any()

    def test_hash_activations_bounded(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 2)
        h = model.hash_forward(params, nd.Tensor(rng.standard_normal((4, cfg.d)) * 3))
        assert np.abs(h.data).max() < 1.0
        wild = model.hash_forward(params, nd.Tensor(rng.standard_normal((4, cfg.d)) * 1e6))
        assert np.abs(wild.data).max() <= 1.0

    def test_identity_classifier_shifts_by_bias(self, rng):
        cfg = small_config(n_classes=4, k=4)
        params = model.ModelParams.init(cfg, 2)
        params.tensors["classifier.w"].data = np.eye(4)
        h = nd.Tensor(rng.standard_normal((3, 4)))
        out = model.classify(params, h)
        np.testing.assert_allclose(
            out.data, h.data + params.tensors["classifier.b"].data, atol=1e-15)

    def test_match_oracles(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 4)
        arrays = params.arrays()
        g = rng.standard_normal((5, cfg.d))
        h = model.hash_forward(params, nd.Tensor(g))
        np.testing.assert_allclose(
            h.data, np.tanh(g @ arrays["hash.w"] + arrays["hash.b"]),
            rtol=0, atol=1e-12)
        y = model.classify(params, h)
        np.testing.assert_allclose(
            y.data, h.data @ arrays["classifier.w"] + arrays["classifier.b"],
            rtol=0, atol=1e-12)


class TestBinarize:
    def test_sign_convention(self):
        np.testing.assert_array_equal(
            model.binarize(np.array([[0.3, -0.2]])), [[1.0, -1.0]])
        np.testing.assert_array_equal(
            model.binarize(np.zeros((1, 4))), np.ones((1, 4)))

    def test_idempotent_under_positive_scaling(self, rng):
        h = rng.standard_normal((5, 8))
        b = model.binarize(h)
        np.testing.assert_array_equal(model.binarize(b * 0.5), b)

    @given(st.floats(min_value=1e-6, max_value=1e6))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(0)
        h = rng.standard_normal((4, 6))
        np.testing.assert_array_equal(model.binarize(c * h), model.binarize(h))


class TestForward:
    def test_matches_pipeline_oracle_across_architectures(self, rng):
        for _ in range(10):
            config, params, views = random_model_setup(rng)
            trace = model.forward(params, config, views)
            h, scores = oracles.forward_pipeline(params.arrays(), arch_spec(config),
                                                 views)
            np.testing.assert_allclose(trace.hash_act.data, h, rtol=0, atol=1e-12)
            np.testing.assert_allclose(trace.class_scores.data, scores,
                                       rtol=0, atol=1e-12)

    def test_disabled_view_does_not_influence_output(self, rng):
        cfg = small_config(views_enabled=(1,))
        params = model.ModelParams.init(cfg, 3)
        views = random_views(rng, cfg.view_dims, 4)
        h1 = model.forward(params, cfg, views).hash_act.data
        views[0] = rng.standard_normal((4, 12)) * 100
        h2 = model.forward(params, cfg, views).hash_act.data
        np.testing.assert_array_equal(h1, h2)
        h3 = model.forward(params, cfg, [None, views[1]]).hash_act.data
        np.testing.assert_array_equal(h1, h3)

    def test_trace_shapes(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 3)
        s = 6
        trace = model.forward(params, cfg, random_views(rng, cfg.view_dims, s))
        d, k, c = cfg.d, cfg.k, cfg.n_classes
        assert [t.shape for t in trace.encoded] == [(s, d), (s, d)]
        assert [t.shape for t in trace.gate_weights] == [(s, d), (s, d)]
        assert [t.shape for t in trace.gated] == [(s, d), (s, d)]
        assert trace.fused.shape == (s, d)
        assert trace.expanded.shape == (s, 4 * d)
        assert trace.enhanced.shape == (s, d)
        assert trace.hash_act.shape == (s, k)
        assert trace.class_scores.shape == (s, c)

    def test_permutation_equivariance_over_batch(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 3)
        views = random_views(rng, cfg.view_dims, 6)
        h = model.forward(params, cfg, views).hash_act.data
        perm = rng.permutation(6)
        h_perm = model.forward(params, cfg, [v[perm] for v in views]).hash_act.data
        np.testing.assert_array_equal(h_perm, h[perm])

    def test_zero_view_weight_blocks_gradient_flow(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 3)
        params.tensors["view_weight.1"].data[:] = 0.0
        views = random_views(rng, cfg.view_dims, 4)
        labels = random_labels(rng, 4, cfg.n_classes)

        tape = nd.Tape()
        bound = params.bind(tape)
        trace = model.forward_bound(bound, cfg, views)
        breakdown = loss.total_loss(
            loss.sim_loss(trace.hash_act, loss.affinity(labels)),
            loss.clf_loss(trace.class_scores, labels), 1.0)
        gmap = nd.backward(breakdown.tensor)
        for name in ("enc.1.w1", "enc.1.b1", "enc.1.w2", "enc.1.b2", "gate.1.w"):
            assert not gmap[bound[name]].any(), name
        assert gmap[bound["enc.0.w1"]].any()

    def test_missing_enabled_view_rejected(self, rng):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 3)
        with pytest.raises(ShapeError):
            model.forward(params, cfg, [None, rng.standard_normal((4, 8))])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        config, params, _ = random_model_setup(rng)
        stats = {"norm.mean.0": rng.standard_normal((1, config.view_dims[0]))}
        meta = {"epoch": 12, "note": "x"}
        path = tmp_path / "model.ckpt"
        model.save_checkpoint(params, path, extra_tensors=stats, meta=meta)
        ckpt = model.load_checkpoint(path)
        assert ckpt.config == config
        assert ckpt.meta == meta
        back = ckpt.params()
        for name, t in params.tensors.items():
            np.testing.assert_array_equal(back.tensors[name].data, t.data)
        np.testing.assert_array_equal(ckpt.extras()["norm.mean.0"],
                                      stats["norm.mean.0"])

    def test_truncated_payload_rejected(self, tmp_path):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 1)
        path = tmp_path / "model.ckpt"
        model.save_checkpoint(params, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(FormatError, match="payload"):
            model.load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"XXXX" + bytes(100))
        with pytest.raises(FormatError, match="magic"):
            model.load_checkpoint(path)

    def test_same_seed_init_is_identical(self):
        cfg = small_config()
        a = model.ModelParams.init(cfg, 42)
        b = model.ModelParams.init(cfg, 42)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)

    def test_init_bounds_follow_fan_in_out(self):
        cfg = small_config()
        params = model.ModelParams.init(cfg, 0)
        w1 = params.tensors["enc.0.w1"].data
        bound = np.sqrt(6.0 / (12 + 8))
        assert np.abs(w1).max() <= bound
        assert not params.tensors["enc.0.b1"].data.any()
        assert params.tensors["view_weight.0"].item() == 0.5
