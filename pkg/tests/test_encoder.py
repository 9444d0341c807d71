"""Encoder model contracts: TopyNeck pieces, composition, freezing, checkpoints."""

import numpy as np
import pytest

from voxelcast import numcore as nc
from voxelcast.encoder import (
    EncoderConfig,
    EncoderModel,
    forward,
    load_model,
    positional_encode,
    save_model,
    voxel_features,
)


def tiny_config(**kw):
    base = dict(n_layers=2, d_in=4, n_voxels=6, d_model=5, grid=4, pe_freqs=3,
                hidden=8, init_seed=3)
    base.update(kw)
    return EncoderConfig(**base)


def tiny_inputs(cfg, n_images=2, seed=5):
    r = nc.make_rng(seed)
    feats = r.standard_normal((n_images, cfg.n_layers, cfg.d_in, cfg.grid, cfg.grid)).astype(np.float32)
    coords = r.uniform(-0.9, 0.9, (cfg.n_voxels, 3)).astype(np.float32)
    return feats, coords


class TestPositionalEncoding:
    def test_origin(self):
        pe = positional_encode(np.zeros((1, 3), dtype=np.float32), 4)
        sin_part = pe.reshape(3, 4, 2)[..., 0]
        cos_part = pe.reshape(3, 4, 2)[..., 1]
        assert np.allclose(sin_part, 0.0)
        assert np.allclose(cos_part, 1.0)

    def test_output_dimension(self):
        pe = positional_encode(np.zeros((7, 3), dtype=np.float32), 5)
        assert pe.shape == (7, 30)

    def test_injective_on_coarse_grid_interior(self):
        # per-axis check suffices: the encoding concatenates per-axis blocks.
        # The endpoints -1 and +1 alias exactly (all frequencies are integer
        # multiples of pi), so injectivity holds on [-1, 1).
        axis = np.round(np.arange(-1.0, 1.0, 0.01), 10)
        p = np.zeros((axis.size, 3))
        p[:, 0] = axis
        enc = positional_encode(p, 8)
        uniq = np.unique(enc, axis=0)
        assert uniq.shape[0] == axis.size

    def test_endpoint_aliasing_is_exact(self):
        p = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        enc = positional_encode(p, 8)
        assert np.allclose(enc[0], enc[1], atol=1e-12)


class TestRetinaMapper:
    def test_zero_init_maps_to_center(self):
        cfg = tiny_config()
        model = EncoderModel(cfg)
        _, coords = tiny_inputs(cfg)
        u, _ = model.retina_map(coords, training=False)
        assert np.allclose(u, 0.0)

    def test_inference_deterministic(self):
        cfg = tiny_config()
        model = EncoderModel(cfg)
        _, coords = tiny_inputs(cfg)
        u1, _ = model.retina_map(coords, training=False)
        u2, _ = model.retina_map(coords, training=False)
        assert np.array_equal(u1, u2)

    def test_jitter_mean_matches_u(self):
        cfg = tiny_config(jitter_sigma=0.02)
        model = EncoderModel(cfg)
        r = nc.make_rng(0)
        model.params["mapper.mlp.2.W"].value[...] = 0.1 * r.standard_normal((cfg.hidden, 2))
        _, coords = tiny_inputs(cfg)
        u, _ = model.retina_map(coords, training=False)
        draws = np.stack([model.retina_map(coords, training=True, rng=r)[0] for _ in range(10000)])
        tol = 3 * 0.02 / np.sqrt(10000)
        assert np.all(np.abs(draws.mean(axis=0) - u) < tol + 1e-4)

    def test_u_prime_strictly_inside_unit_box(self):
        cfg = tiny_config(jitter_sigma=0.5)
        model = EncoderModel(cfg)
        model.params["mapper.mlp.2.b"].value[...] = 50.0  # saturate tanh
        _, coords = tiny_inputs(cfg)
        r = nc.make_rng(1)
        for _ in range(5):
            u, _ = model.retina_map(coords, training=True, rng=r)
            assert np.all(np.abs(u) < 1.0)


class TestLayerSelector:
    def test_zero_init_uniform(self):
        cfg = tiny_config(n_layers=4)
        model = EncoderModel(cfg)
        _, coords = tiny_inputs(cfg)
        eta, _ = model.layer_select(coords)
        assert np.allclose(eta, 0.25, atol=1e-7)

    def test_single_layer_degenerate(self):
        cfg = tiny_config(n_layers=1)
        model = EncoderModel(cfg)
        _, coords = tiny_inputs(cfg)
        eta, _ = model.layer_select(coords)
        assert np.allclose(eta, 1.0)

    def test_identical_coords_identical_eta(self):
        cfg = tiny_config()
        model = EncoderModel(cfg)
        r = nc.make_rng(2)
        model.params["selector.mlp.2.W"].value[...] = r.standard_normal((cfg.hidden, 2))
        coords = np.tile(np.array([[0.3, -0.2, 0.5]], dtype=np.float32), (4, 1))
        eta, _ = model.layer_select(coords)
        assert np.allclose(eta, eta[0])


class TestAdapter:
    def test_identity_configuration(self):
        cfg = tiny_config(d_model=4)  # same width so the final conv can be identity
        model = EncoderModel(cfg)
        for blk in range(3):
            model.params[f"adapter.block{blk}.conv.K"].value[...] = 0.0
            # layernorm of zeros is zero, so blocks reduce to the skip path
        K = np.zeros((4, 4, 5, 5), dtype=np.float32)
        for c in range(4):
            K[c, c, 2, 2] = 1.0
        model.params["adapter.final.K"].value[...] = K
        model.params["adapter.final.b"].value[...] = 0.0
        feats, _ = tiny_inputs(cfg, n_images=1)
        x_cl = EncoderModel.to_channels_last(feats.reshape(-1, cfg.d_in, cfg.grid, cfg.grid))
        M, _ = model.adapter_forward(x_cl)
        assert np.allclose(M, x_cl, atol=1e-6)

    def test_grid_size_preserved(self):
        for grid in (4, 7):
            cfg = tiny_config(grid=grid)
            model = EncoderModel(cfg)
            feats, _ = tiny_inputs(cfg)
            x_cl = EncoderModel.to_channels_last(feats.reshape(-1, cfg.d_in, grid, grid))
            M, _ = model.adapter_forward(x_cl)
            assert M.shape == (x_cl.shape[0], grid, grid, cfg.d_model)

    def test_gradcheck_through_adapter(self):
        cfg = tiny_config(d_in=6)
        model = EncoderModel(cfg)
        r = nc.make_rng(4)
        x = r.standard_normal((2, cfg.grid, cfg.grid, cfg.d_in))
        R = r.standard_normal((2, cfg.grid, cfg.grid, cfg.d_model))

        def loss():
            M, cache = model.adapter_forward(x)
            model.adapter_backward(R.astype(M.dtype), cache)
            return float((M.astype(np.float64) * R).sum())

        params = [p for n, p in model.params.items() if n.startswith("adapter.")]
        rep = nc.grad_check(loss, params, h=2.5e-4, max_coords=6, rng=nc.make_rng(5))
        assert rep.passed, rep.summary()


class TestComposition:
    def test_one_hot_eta_selects_single_layer(self):
        cfg = tiny_config(n_layers=3, use_global_pool=False)
        model = EncoderModel(cfg)
        r = nc.make_rng(6)
        M = r.standard_normal((3, cfg.d_model, cfg.grid, cfg.grid)).astype(np.float32)
        u = r.uniform(-0.9, 0.9, (4, 2)).astype(np.float32)
        eta = np.zeros((4, 3), dtype=np.float32)
        eta[:, 1] = 1.0
        out = voxel_features(M, u, eta, model)
        expect, _ = nc.bilinear_sample(M[1], u)
        assert np.allclose(out, expect, atol=1e-6)

    def test_uniform_eta_identical_layers(self):
        cfg = tiny_config(n_layers=2, use_global_pool=False)
        model = EncoderModel(cfg)
        r = nc.make_rng(7)
        M0 = r.standard_normal((cfg.d_model, cfg.grid, cfg.grid)).astype(np.float32)
        M = np.stack([M0, M0])
        u = r.uniform(-0.9, 0.9, (5, 2)).astype(np.float32)
        eta = np.full((5, 2), 0.5, dtype=np.float32)
        out = voxel_features(M, u, eta, model)
        expect, _ = nc.bilinear_sample(M0, u)
        assert np.allclose(out, expect, atol=1e-6)

    def test_matches_per_voxel_loop(self):
        cfg = tiny_config(n_layers=3)
        model = EncoderModel(cfg)
        r = nc.make_rng(8)
        M = r.standard_normal((3, cfg.d_model, cfg.grid, cfg.grid)).astype(np.float32)
        u = r.uniform(-0.9, 0.9, (5, 2)).astype(np.float32)
        eta = nc.softmax_rows(r.standard_normal((5, 3)).astype(np.float32))
        out = voxel_features(M, u, eta, model)
        # naive per-voxel loop oracle
        from voxelcast.numcore import affine, bilinear_sample, global_pools, tanh_act

        pooled = np.stack([global_pools(M[layer])[0] for layer in range(3)])
        q = affine(tanh_act(affine(pooled, model.params["pooled.mlp.0.W"], model.params["pooled.mlp.0.b"])),
                   model.params["pooled.mlp.1.W"], model.params["pooled.mlp.1.b"])
        for i in range(5):
            acc = np.zeros(cfg.d_model, dtype=np.float64)
            for layer in range(3):
                samp, _ = bilinear_sample(M[layer], u[i : i + 1])
                acc += float(eta[i, layer]) * (samp[0].astype(np.float64) + q[layer])
            assert np.allclose(out[i], acc, atol=1e-5)


class TestHeads:
    def test_zero_weights_give_bias(self):
        cfg = tiny_config()
        model = EncoderModel(cfg)
        model.params["head.b"].value[...] = np.arange(cfg.n_voxels)
        feats, coords = tiny_inputs(cfg)
        pred = model.predict(feats, coords)
        assert np.allclose(pred, np.tile(np.arange(cfg.n_voxels), (2, 1)), atol=1e-6)

    def test_head_predict_matches_dot_loop(self):
        cfg = tiny_config()
        model = EncoderModel(cfg)
        r = nc.make_rng(9)
        model.params["head.W"].value[...] = r.standard_normal((cfg.n_voxels, cfg.d_model))
        model.params["head.b"].value[...] = r.standard_normal(cfg.n_voxels)
        feats, coords = tiny_inputs(cfg)
        feats_cl = EncoderModel.to_channels_last(feats)
        yhat, trace = model.forward_batch(feats_cl, coords, None, training=False)
        for b in range(2):
            for i in range(cfg.n_voxels):
                expect = float(
                    np.dot(trace["mstar"][b, i], model.params["head.W"].value[i])
                    + model.params["head.b"].value[i]
                )
                assert yhat[b, i] == pytest.approx(expect, abs=1e-5)


class TestForward:
    def randomized_model(self, **kw):
        cfg = tiny_config(**kw)
        model = EncoderModel(cfg)
        r = nc.make_rng(10)
        for name in ("mapper.mlp.2.W", "selector.mlp.2.W", "head.W", "head.b"):
            p = model.params[name]
            p.value[...] = 0.3 * r.standard_normal(p.value.shape)
        return cfg, model

    def test_subset_concatenation(self):
        cfg, model = self.randomized_model()
        feats, coords = tiny_inputs(cfg)
        full = model.predict(feats, coords)
        lo = model.predict(feats, coords, voxel_idx=np.arange(3))
        hi = model.predict(feats, coords, voxel_idx=np.arange(3, 6))
        assert np.array_equal(np.concatenate([lo, hi], axis=1), full)

    def test_frozen_parts_get_no_gradient(self):
        cfg, model = self.randomized_model(freeze_mapper=True, freeze_selector=True)
        feats, coords = tiny_inputs(cfg)
        feats_cl = EncoderModel.to_channels_last(feats)
        yhat, trace = model.forward_batch(feats_cl, coords, None, training=False)
        model.backward(trace, np.ones_like(yhat))
        for name, p in model.params.items():
            if name.startswith(("mapper.", "selector.")):
                assert np.all(p.grad == 0), name
        assert np.any(model.params["head.W"].grad != 0)
        trainable = {p.name for p in model.trainable_params()}
        assert not any(n.startswith(("mapper.", "selector.")) for n in trainable)

    def test_repeat_inference_bit_stable(self):
        cfg, model = self.randomized_model()
        feats, coords = tiny_inputs(cfg)
        a = model.predict(feats, coords)
        b = model.predict(feats, coords)
        assert a.tobytes() == b.tobytes()

    def test_out_of_range_voxel_index(self):
        cfg, model = self.randomized_model()
        feats, coords = tiny_inputs(cfg)
        with pytest.raises(IndexError):
            forward(model, feats[0], coords, voxel_idx=np.array([99]))

    def test_end_to_end_gradcheck(self):
        from voxelcast.gradsuite import check_encoder_active

        rep = check_encoder_active(23)
        assert rep.passed, rep.summary()


class TestCheckpointIO:
    def test_round_trip_preserves_predictions(self, tmp_path):
        cfg = tiny_config()
        model = EncoderModel(cfg)
        r = nc.make_rng(11)
        for p in model.params.values():
            p.value[...] = 0.2 * r.standard_normal(p.value.shape)
        feats, coords = tiny_inputs(cfg, n_images=10)
        before = model.predict(feats, coords)
        save_model(model, tmp_path / "m.vxc1")
        back, meta = load_model(tmp_path / "m.vxc1")
        after = back.predict(feats, coords)
        assert before.tobytes() == after.tobytes()

    def test_checkpoint_array_names(self, tmp_path):
        cfg = tiny_config()
        model = EncoderModel(cfg)
        save_model(model, tmp_path / "m.vxc1", include_optimizer=True)
        from voxelcast.data import load_checkpoint

        arrays, _ = load_checkpoint(tmp_path / "m.vxc1")
        expected = {
            "adapter.block0.conv.K", "adapter.block0.conv.b",
            "adapter.block0.ln.gamma", "adapter.block0.ln.beta",
            "adapter.block1.conv.K", "adapter.block1.conv.b",
            "adapter.block1.ln.gamma", "adapter.block1.ln.beta",
            "adapter.block2.conv.K", "adapter.block2.conv.b",
            "adapter.block2.ln.gamma", "adapter.block2.ln.beta",
            "adapter.final.K", "adapter.final.b",
            "mapper.mlp.0.W", "mapper.mlp.0.b", "mapper.mlp.1.W", "mapper.mlp.1.b",
            "mapper.mlp.2.W", "mapper.mlp.2.b",
            "selector.mlp.0.W", "selector.mlp.0.b", "selector.mlp.1.W", "selector.mlp.1.b",
            "selector.mlp.2.W", "selector.mlp.2.b",
            "pooled.mlp.0.W", "pooled.mlp.0.b", "pooled.mlp.1.W", "pooled.mlp.1.b",
            "head.W", "head.b",
        }
        assert expected.issubset(set(arrays))
        assert "head.W.opt_m" in arrays

    def test_save_load_save_byte_identical(self, tmp_path):
        cfg = tiny_config()
        model = EncoderModel(cfg)
        p1, p2 = tmp_path / "a.vxc1", tmp_path / "b.vxc1"
        save_model(model, p1)
        back, _ = load_model(p1)
        save_model(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_conv_channels_must_match_d_in(self):
        with pytest.raises(nc.ContractViolation):
            tiny_config(conv_channels=8)
