import numpy as np
import pytest

import oracles
from odmixer import autodiff as ad
from odmixer import backend
from odmixer.autodiff import Tensor
from odmixer.errors import ConfigError, DataError, ShapeError
from odmixer.gradcheck import grad_check
from odmixer.model import (
    LAYER_NORM_EPS,
    ModelConfig,
    ODMixer,
    expected_param_count,
    load_checkpoint,
    save_checkpoint,
)

TINY = ModelConfig(n=3, horizon=2, channels=3, layers=1)
DTYPE_TOL = {np.float32: 1e-6, np.float64: 1e-10}


@pytest.fixture(params=backend.available())
def kernel_backend(request):
    previous = backend.use(request.param)
    yield request.param
    backend.use(previous)


def random_model(cfg=TINY, seed=0, dtype=np.float64):
    return ODMixer(cfg, dtype=dtype, seed=seed)


def feature_cube(rng, cfg, dtype):
    return rng.standard_normal((cfg.n, cfg.n, cfg.channels)).astype(dtype)


class TestConfig:
    def test_hidden_is_twice_channels(self):
        assert ModelConfig(n=4, channels=7).hidden == 14

    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(n=1)
        with pytest.raises(ConfigError):
            ModelConfig(n=4, layers=0)
        with pytest.raises(ConfigError):
            ModelConfig(n=4, activation="softplus")

    def test_ablated_copy(self):
        cfg = TINY.ablated(use_btl=False)
        assert not cfg.use_btl and TINY.use_btl


class TestParameterCount:
    @pytest.mark.parametrize("seed", range(5))
    def test_formula_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(
            n=int(rng.integers(2, 12)),
            horizon=int(rng.integers(1, 7)),
            channels=int(rng.integers(1, 20)),
            layers=int(rng.integers(1, 6)),
        )
        model = random_model(cfg, seed=seed)
        assert model.param_count() == expected_param_count(cfg)

    def test_growth_linear_in_n_and_layers_constant_in_horizon(self):
        base = ModelConfig(n=8, horizon=4, channels=6, layers=2)
        d = base.channels
        bigger_n = ModelConfig(n=9, horizon=4, channels=6, layers=2)
        assert expected_param_count(bigger_n) - expected_param_count(base) == base.layers * 4 * 2 * d
        more_layers = ModelConfig(n=8, horizon=4, channels=6, layers=3)
        per_block = 4 * d * d + 8 * d * base.n + 4 * d
        assert expected_param_count(more_layers) - expected_param_count(base) == per_block
        longer = ModelConfig(n=8, horizon=6, channels=6, layers=2)
        assert expected_param_count(longer) - expected_param_count(base) == 2 * d

    def test_initialization_is_seeded(self):
        a = random_model(seed=5)
        b = random_model(seed=5)
        c = random_model(seed=6)
        for name, pa in a.named_parameters().items():
            np.testing.assert_array_equal(pa.data, b.param(name).data)
        assert any(
            not np.array_equal(pa.data, c.param(name).data)
            for name, pa in a.named_parameters().items()
        )


class TestEmbedding:
    def test_zero_weights_give_zero_features(self, rng):
        model = random_model()
        model.param("embed.w").tensor.assign_(np.zeros((3, 2)))
        out = model.embed(rng.standard_normal((3, 3, 2)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 3, 3)))

    def test_identity_embedding(self, rng):
        cfg = ModelConfig(n=3, horizon=3, channels=3, layers=1)
        model = random_model(cfg)
        model.param("embed.w").tensor.assign_(np.eye(3))
        window = rng.standard_normal((3, 3, 3))
        np.testing.assert_allclose(model.embed(window).data, window)

    def test_hand_dot_product(self):
        cfg = ModelConfig(n=2, horizon=2, channels=1, layers=1)
        model = random_model(cfg)
        model.param("embed.w").tensor.assign_(np.array([[1.0, -1.0]]))
        window = np.zeros((2, 2, 2))
        window[0, 1] = [3.0, 5.0]
        out = model.embed(window)
        assert out.data[0, 1, 0] == -2.0

    def test_shape_check(self, rng):
        model = random_model()
        with pytest.raises(ShapeError):
            model.embed(rng.standard_normal((3, 3, 5)))


class TestBlockSemantics:
    def test_channel_mixer_dead_branch_reduces_to_layer_norm(self, rng):
        model = random_model()
        model.param("block0.cm.w1").tensor.assign_(np.zeros((6, 3)))
        h = feature_cube(rng, TINY, np.float64)
        out = model.channel_mixer(h, 0).data
        expected = ad.layer_norm(
            Tensor(h),
            model.param("block0.cm.ln.gamma"),
            model.param("block0.cm.ln.beta"),
            eps=LAYER_NORM_EPS,
        ).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_mixers_vanish_with_zero_first_weights(self, rng):
        model = random_model()
        h = feature_cube(rng, TINY, np.float64)
        model.param("block0.om.w1").tensor.assign_(np.zeros((6, 3)))
        np.testing.assert_array_equal(model.origin_mixer(h, 0).data, np.zeros(h.shape))
        model.param("block0.dm.w1").tensor.assign_(np.zeros((6, 3)))
        np.testing.assert_array_equal(model.des_mixer(h, 0).data, np.zeros(h.shape))

    def test_origin_mixer_slice_locality_is_exact(self, rng):
        model = random_model()
        h = feature_cube(rng, TINY, np.float64)
        bumped = h.copy()
        bumped[1] += rng.standard_normal(h.shape[1:])
        base = model.origin_mixer(h, 0).data
        moved = model.origin_mixer(bumped, 0).data
        np.testing.assert_array_equal(base[0], moved[0])
        np.testing.assert_array_equal(base[2], moved[2])
        assert not np.array_equal(base[1], moved[1])

    def test_des_mixer_column_locality_is_exact(self, rng):
        model = random_model()
        h = feature_cube(rng, TINY, np.float64)
        bumped = h.copy()
        bumped[:, 2] += rng.standard_normal((h.shape[0], h.shape[2]))
        base = model.des_mixer(h, 0).data
        moved = model.des_mixer(bumped, 0).data
        np.testing.assert_array_equal(base[:, 0], moved[:, 0])
        np.testing.assert_array_equal(base[:, 1], moved[:, 1])

    def test_des_mixer_is_origin_mixer_on_transpose_with_swapped_weights(self, rng):
        model = random_model()
        h = feature_cube(rng, TINY, np.float64)
        model.param("block0.om.w1").tensor.assign_(model.param("block0.dm.w1").data)
        model.param("block0.om.w2").tensor.assign_(model.param("block0.dm.w2").data)
        des = model.des_mixer(h, 0).data
        via_transpose = np.transpose(
            model.origin_mixer(np.transpose(h, (1, 0, 2)).copy(), 0).data, (1, 0, 2)
        )
        np.testing.assert_allclose(des, via_transpose, atol=1e-12)

    def test_channel_mixer_pair_permutation_equivariance(self, rng):
        cfg = ModelConfig(n=4, horizon=2, channels=5, layers=1)
        model = random_model(cfg, dtype=np.float32)
        h = rng.standard_normal((4, 4, 5)).astype(np.float32)
        perm = rng.permutation(16)
        flat = h.reshape(16, 5)
        out_then_perm = model.channel_mixer(h, 0).data.reshape(16, 5)[perm]
        perm_then_out = model.channel_mixer(flat[perm].reshape(4, 4, 5), 0).data.reshape(16, 5)
        np.testing.assert_allclose(out_then_perm, perm_then_out, atol=1e-6)

    def test_odim_block_without_multiview_is_layer_norm_of_channel_mixer(self, rng):
        cfg = TINY.ablated(use_origin_mixer=False, use_des_mixer=False)
        model = random_model(cfg)
        h = feature_cube(rng, TINY, np.float64)
        out = model.odim_block(h, 0).data
        hc = model.channel_mixer(h, 0)
        expected = ad.layer_norm(
            hc, model.param("block0.fuse.ln.gamma"), model.param("block0.fuse.ln.beta"),
            eps=LAYER_NORM_EPS,
        ).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_multiview_off_equals_both_mixers_off(self, rng):
        h = feature_cube(rng, TINY, np.float64)
        a = random_model(TINY.ablated(use_multiview=False))
        b = random_model(TINY.ablated(use_origin_mixer=False, use_des_mixer=False))
        np.testing.assert_array_equal(a.odim_block(h, 0).data, b.odim_block(h, 0).data)

    def test_zero_mixers_reduce_to_double_layer_norm(self, rng):
        model = random_model()
        for name in ("cm.w1", "om.w1", "dm.w1"):
            p = model.param(f"block0.{name}")
            p.tensor.assign_(np.zeros(p.tensor.shape))
        h = feature_cube(rng, TINY, np.float64)
        out = model.odim_block(h, 0).data
        inner = ad.layer_norm(
            Tensor(h), model.param("block0.cm.ln.gamma"), model.param("block0.cm.ln.beta"),
            eps=LAYER_NORM_EPS,
        )
        expected = ad.layer_norm(
            inner, model.param("block0.fuse.ln.gamma"), model.param("block0.fuse.ln.beta"),
            eps=LAYER_NORM_EPS,
        ).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_stack_depth_one_equals_single_block(self, rng):
        model = random_model()
        h = feature_cube(rng, TINY, np.float64)
        np.testing.assert_array_equal(model.odim_stack(h).data, model.odim_block(h, 0).data)

    def test_stack_shape_invariance(self, rng):
        cfg = ModelConfig(n=4, horizon=3, channels=5, layers=3)
        model = random_model(cfg)
        h = rng.standard_normal((4, 4, 5))
        assert model.odim_stack(h).shape == (4, 4, 5)


class TestBtl:
    def test_zero_projection_passes_input_through(self, rng):
        model = random_model()
        model.param("btl.prev.proj_w").tensor.assign_(np.zeros((3, 3)))
        hp = feature_cube(rng, TINY, np.float64)
        hc = feature_cube(rng, TINY, np.float64)
        out_prev, _ = model.btl(hp, hc)
        np.testing.assert_array_equal(out_prev.data, hp)

    def test_saturated_gate_closes_to_residual(self, rng):
        model = random_model()
        model.param("btl.cur.gate_w").tensor.assign_(np.zeros((3, 3)))
        model.param("btl.cur.mix_w").tensor.assign_(np.zeros((3, 6)))
        # gate = sigmoid(0) = 0.5 everywhere; now push it to 0 via a large
        # negative fused signal instead
        model.param("btl.cur.mix_w").tensor.assign_(np.full((3, 6), 50.0))
        model.param("btl.cur.gate_w").tensor.assign_(np.full((3, 3), -50.0))
        hp = np.abs(feature_cube(rng, TINY, np.float64)) + 0.5
        hc = np.abs(feature_cube(rng, TINY, np.float64)) + 0.5
        _, out_cur = model.btl(hp, hc)
        np.testing.assert_allclose(out_cur.data, hc, atol=1e-9)

    def test_disabled_is_identity(self, rng):
        model = random_model(TINY.ablated(use_btl=False))
        hp = feature_cube(rng, TINY, np.float64)
        hc = feature_cube(rng, TINY, np.float64)
        out_prev, out_cur = model.btl(Tensor(hp), Tensor(hc))
        np.testing.assert_array_equal(out_prev.data, hp)
        np.testing.assert_array_equal(out_cur.data, hc)

    def test_halves_have_independent_parameters(self):
        model = random_model()
        assert not np.array_equal(
            model.param("btl.prev.mix_w").data, model.param("btl.cur.mix_w").data
        )


class TestHead:
    def test_zero_head(self, rng):
        model = random_model()
        model.param("head.w").tensor.assign_(np.zeros((1, 3)))
        model.param("head.b").tensor.assign_(np.zeros(1))
        out = model.output_head(feature_cube(rng, TINY, np.float64))
        np.testing.assert_array_equal(out.data, np.zeros((3, 3)))

    def test_channel_pick(self, rng):
        cfg = ModelConfig(n=3, horizon=2, channels=1, layers=1)
        model = random_model(cfg)
        model.param("head.w").tensor.assign_(np.array([[1.0]]))
        model.param("head.b").tensor.assign_(np.zeros(1))
        h = rng.standard_normal((3, 3, 1))
        np.testing.assert_allclose(model.output_head(h).data, h[:, :, 0])

    def test_per_pair_dot_product(self, rng):
        model = random_model()
        h = feature_cube(rng, TINY, np.float64)
        w = model.param("head.w").data
        b = model.param("head.b").data
        np.testing.assert_allclose(model.output_head(h).data, h @ w[0] + b[0], atol=1e-12)


class TestForward:
    def test_shapes_across_configs(self, rng):
        for cfg in (TINY, ModelConfig(n=6, horizon=5, channels=4, layers=2)):
            model = random_model(cfg)
            prev = rng.standard_normal((cfg.n, cfg.n, cfg.horizon))
            cur = rng.standard_normal((cfg.n, cfg.n, cfg.horizon))
            pp, pc = model.forward(prev, cur)
            assert pp.shape == (cfg.n, cfg.n) and pc.shape == (cfg.n, cfg.n)
            batch = rng.standard_normal((4, cfg.n, cfg.n, cfg.horizon))
            pp, pc = model.forward(batch, batch)
            assert pp.shape == (4, cfg.n, cfg.n) and pc.shape == (4, cfg.n, cfg.n)

    def test_constant_prediction_with_zero_weights(self, rng):
        model = random_model()
        for name, p in model.named_parameters().items():
            p.tensor.assign_(np.zeros(p.tensor.shape))
        model.param("head.b").tensor.assign_(np.array([2.5]))
        pp, pc = model.forward(
            rng.standard_normal((3, 3, 2)), rng.standard_normal((3, 3, 2))
        )
        np.testing.assert_allclose(pp.data, np.full((3, 3), 2.5), atol=1e-12)
        np.testing.assert_allclose(pc.data, np.full((3, 3), 2.5), atol=1e-12)

    def test_branch_isolation_without_trend_unit(self, rng):
        model = random_model(TINY.ablated(use_btl=False))
        prev = rng.standard_normal((3, 3, 2))
        pp1, _ = model.forward(prev, rng.standard_normal((3, 3, 2)))
        pp2, _ = model.forward(prev, rng.standard_normal((3, 3, 2)))
        np.testing.assert_array_equal(pp1.data, pp2.data)

    def test_weight_sharing_swap_symmetry_without_trend_unit(self, rng):
        model = random_model(TINY.ablated(use_btl=False))
        a = rng.standard_normal((3, 3, 2))
        b = rng.standard_normal((3, 3, 2))
        pp_ab, pc_ab = model.forward(a, b)
        pp_ba, pc_ba = model.forward(b, a)
        np.testing.assert_array_equal(pp_ab.data, pc_ba.data)
        np.testing.assert_array_equal(pc_ab.data, pp_ba.data)

    def test_prev_branch_ablation(self, rng):
        model = random_model(TINY.ablated(use_prev_branch=False))
        pp, pc = model.forward(None, rng.standard_normal((3, 3, 2)))
        assert pp is None and pc.shape == (3, 3)


class TestEquationOracles:
    """Vectorized blocks against naive scalar-loop references."""

    CASES = 10  # per dtype and backend; the acceptance suite runs 50

    def _random_case(self, seed, dtype):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(
            n=int(rng.integers(2, 5)),
            horizon=int(rng.integers(1, 4)),
            channels=int(rng.integers(2, 6)),
            layers=int(rng.integers(1, 3)),
        )
        model = ODMixer(cfg, dtype=dtype, seed=seed)
        params = oracles.model_params_as_arrays(model, dtype)
        return rng, cfg, model, params

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_blocks_match_naive_loops(self, dtype, kernel_backend):
        tol = DTYPE_TOL[dtype]
        for seed in range(self.CASES):
            rng, cfg, model, params = self._random_case(seed, dtype)
            h = rng.standard_normal((cfg.n, cfg.n, cfg.channels)).astype(dtype)
            got = model.channel_mixer(h, 0).data
            want = oracles.channel_mixer(
                h, params["block0.cm.w1"], params["block0.cm.w2"],
                params["block0.cm.ln.gamma"], params["block0.cm.ln.beta"],
                LAYER_NORM_EPS, cfg.activation, dtype,
            )
            np.testing.assert_allclose(got, want, rtol=tol, atol=tol)

            got = model.origin_mixer(h, 0).data
            want = oracles.origin_mixer(
                h, params["block0.om.w1"], params["block0.om.w2"], cfg.activation, dtype
            )
            np.testing.assert_allclose(got, want, rtol=tol, atol=tol)

            got = model.des_mixer(h, 0).data
            want = oracles.des_mixer(
                h, params["block0.dm.w1"], params["block0.dm.w2"], cfg.activation, dtype
            )
            np.testing.assert_allclose(got, want, rtol=tol, atol=tol)

            got = model.odim_block(h, 0).data
            want = oracles.odim_block(h, params, 0, cfg.activation, LAYER_NORM_EPS, dtype)
            np.testing.assert_allclose(got, want, rtol=tol, atol=tol)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_trend_unit_matches_naive_loops(self, dtype, kernel_backend):
        tol = DTYPE_TOL[dtype]
        for seed in range(self.CASES):
            rng, cfg, model, params = self._random_case(seed, dtype)
            hp = rng.standard_normal((cfg.n, cfg.n, cfg.channels)).astype(dtype)
            hc = rng.standard_normal((cfg.n, cfg.n, cfg.channels)).astype(dtype)
            got_p, got_c = model.btl(Tensor(hp), Tensor(hc))
            want_p, want_c = oracles.btl(hp, hc, params, dtype)
            np.testing.assert_allclose(got_p.data, want_p, rtol=tol, atol=tol)
            np.testing.assert_allclose(got_c.data, want_c, rtol=tol, atol=tol)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_full_forward_matches_naive_loops(self, dtype, kernel_backend):
        tol = 1e-5 if dtype == np.float32 else DTYPE_TOL[np.float64]
        for seed in range(self.CASES):
            rng, cfg, model, params = self._random_case(seed, dtype)
            prev = rng.standard_normal((cfg.n, cfg.n, cfg.horizon)).astype(dtype)
            cur = rng.standard_normal((cfg.n, cfg.n, cfg.horizon)).astype(dtype)
            got_p, got_c = model.forward(prev, cur)
            want_p, want_c = oracles.forward(
                prev, cur, params, cfg.layers, cfg.activation, LAYER_NORM_EPS, dtype
            )
            np.testing.assert_allclose(got_p.data, want_p, rtol=tol, atol=tol)
            np.testing.assert_allclose(got_c.data, want_c, rtol=tol, atol=tol)


class TestBlockGradients:
    """One-seed spot checks; the acceptance suite sweeps 20 seeds."""

    def setup_method(self):
        cfg = ModelConfig(n=4, horizon=3, channels=4, layers=2)
        self.model = ODMixer(cfg, dtype=np.float64, seed=42)
        self.cfg = cfg
        self.rng = np.random.default_rng(42)

    def _check(self, fn, tensors):
        report = grad_check(fn, tensors, tol=1e-4)
        assert report.passed, report

    def test_embed(self):
        x = Tensor(
            self.rng.standard_normal((4, 4, 3)), requires_grad=True, dtype=np.float64
        )
        self._check(lambda *_: ad.sum_all(ad.gelu(self.model.embed(x))),
                    [x, self.model.param("embed.w").tensor])

    def test_block_components(self):
        h = Tensor(self.rng.standard_normal((4, 4, 4)), requires_grad=True, dtype=np.float64)
        for fn in (
            lambda: self.model.channel_mixer(h, 0),
            lambda: self.model.origin_mixer(h, 0),
            lambda: self.model.des_mixer(h, 0),
            lambda: self.model.odim_block(h, 1),
        ):
            params = [p.tensor for p in self.model.parameters() if p.name.startswith("block")]
            self._check(lambda *_: ad.sum_all(ad.hadamard(fn(), fn())), [h] + params)

    def test_btl_and_head(self):
        hp = Tensor(self.rng.standard_normal((4, 4, 4)), requires_grad=True, dtype=np.float64)
        hc = Tensor(self.rng.standard_normal((4, 4, 4)), requires_grad=True, dtype=np.float64)
        params = [
            p.tensor
            for p in self.model.parameters()
            if p.name.startswith(("btl.", "head."))
        ]

        def fn(*_):
            a, b = self.model.btl(hp, hc)
            return ad.add(
                ad.sum_all(ad.absolute(self.model.output_head(a))),
                ad.sum_all(ad.absolute(self.model.output_head(b))),
            )

        self._check(fn, [hp, hc] + params)


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, tmp_path, rng):
        cfg = ModelConfig(n=4, horizon=3, channels=5, layers=2, use_btl=False)
        model = ODMixer(cfg, dtype=np.float32, seed=3)
        path = tmp_path / "model.odmx"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == cfg
        prev = rng.standard_normal((4, 4, 3)).astype(np.float32)
        cur = rng.standard_normal((4, 4, 3)).astype(np.float32)
        pp1, pc1 = model.forward(prev, cur)
        pp2, pc2 = loaded.forward(prev, cur)
        assert np.array_equal(pp1.data, pp2.data)
        assert np.array_equal(pc1.data, pc2.data)

    def test_save_is_deterministic(self, tmp_path):
        model = ODMixer(TINY, dtype=np.float32, seed=9)
        a, b = tmp_path / "a.odmx", tmp_path / "b.odmx"
        save_checkpoint(model, a)
        save_checkpoint(model, b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.odmx"
        path.write_bytes(b"JUNK!" + b"\x00" * 64)
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        model = ODMixer(TINY, dtype=np.float32, seed=9)
        path = tmp_path / "model.odmx"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DataError):
            load_checkpoint(path)
