"""Synthetic-brain generator: determinism, statistics, and the noise ceiling."""

import numpy as np
import pytest

from voxelcast import data as dataio
from voxelcast.evalkit import pearson_per_voxel
from voxelcast.numcore import make_rng
from voxelcast.synth import (
    GroundTruth,
    GroupSpec,
    SynthSpec,
    ceiling_per_voxel,
    clean_signal,
    gen_brain,
    gen_feature_grids,
    gen_responses,
    make_bundle,
    oracle_ceiling,
)


def spec_small(**kw):
    base = dict(
        n_images=40, n_layers=3, n_channels=4, grid=8,
        groups=[GroupSpec("hi", 24, 4.0, "one_hot"), GroupSpec("mix", 12, 1.0, "mixture")],
        seed=7,
    )
    base.update(kw)
    return SynthSpec(**base)


class TestFeatureGrids:
    def test_same_seed_bit_identical(self):
        a = gen_feature_grids(spec_small())
        b = gen_feature_grids(spec_small())
        assert a.grids.tobytes() == b.grids.tobytes()

    def test_lag1_autocorrelation_above_half(self):
        store = gen_feature_grids(spec_small(n_images=30))
        g = store.grids.astype(np.float64)
        x = g[..., :-1]
        y = g[..., 1:]
        xm, ym = x - x.mean(), y - y.mean()
        corr = (xm * ym).sum() / np.sqrt((xm * xm).sum() * (ym * ym).sum())
        assert corr > 0.5

    def test_per_channel_mean_near_zero(self):
        # random phases make the field mean zero; allow 3 standard errors
        store = gen_feature_grids(
            spec_small(n_images=150, n_channels=2, n_layers=1,
                       groups=[GroupSpec("g", 8, 2.0, "one_hot")])
        )
        vals = store.grids.astype(np.float64)
        per_channel = vals.mean(axis=(0, 1, 3, 4))
        se = vals.std() / np.sqrt(vals[:, :, 0].size)
        assert np.all(np.abs(per_channel) < 3 * se + 1e-3)


class TestBrain:
    def test_equal_preferences_nearby_coordinates(self):
        table, gt = gen_brain(spec_small(groups=[GroupSpec("g", 40, 4.0, "one_hot")]))
        same = [
            (i, j)
            for i in range(30)
            for j in range(i + 1, 30)
            if np.allclose(gt.u_star[i], gt.u_star[j], atol=0.05)
            and np.array_equal(gt.eta_star[i], gt.eta_star[j])
        ]
        for i, j in same:
            assert np.linalg.norm(table.coords[i] - table.coords[j]) < 0.2

    def test_u_star_covers_domain(self):
        _, gt = gen_brain(spec_small(groups=[GroupSpec("g", 400, 4.0, "one_hot")]))
        assert np.all(np.abs(gt.u_star) <= 0.9 + 1e-6)
        assert gt.u_star.min() < -0.8 and gt.u_star.max() > 0.8

    def test_embedding_injective_for_distinct_positions(self):
        table, gt = gen_brain(spec_small(groups=[GroupSpec("g", 120, 4.0, "one_hot")]))
        n = gt.u_star.shape[0]
        du = np.linalg.norm(gt.u_star[:, None] - gt.u_star[None, :], axis=2)
        dc = np.linalg.norm(table.coords[:, None] - table.coords[None, :], axis=2)
        mask = du > 0.1
        assert np.all(dc[mask] > 0)

    def test_eta_rows_sum_to_one(self):
        _, gt = gen_brain(spec_small())
        assert np.allclose(gt.eta_star.sum(axis=1), 1.0, atol=1e-6)

    def test_center_mode(self):
        _, gt = gen_brain(spec_small(position_mode="center"))
        assert np.allclose(gt.u_star, 0.0)


class TestResponses:
    def test_infinite_snr_matches_analytic_composition(self):
        spec = spec_small(groups=[GroupSpec("g", 10, float("inf"), "one_hot")])
        store = gen_feature_grids(spec)
        _, gt = gen_brain(spec)
        rs = gen_responses(store, gt, spec)
        sig = clean_signal(store, gt)
        mu, sd = sig.mean(axis=0), sig.std(axis=0)
        expect = (sig - mu) / sd
        assert np.allclose(rs.values, expect, atol=1e-5)

    def test_zero_weights_give_unit_noise(self):
        spec = spec_small(groups=[GroupSpec("g", 8, 1.0, "one_hot")], n_images=400)
        store = gen_feature_grids(spec)
        _, gt = gen_brain(spec)
        gt.w_star[...] = 0.0
        rs = gen_responses(store, gt, spec)
        # pure noise with variance 1/snr = 1
        assert rs.values.std(axis=0) == pytest.approx(np.ones(8), abs=0.2)

    def test_empirical_snr_within_ten_percent(self):
        spec = spec_small(n_images=5000, n_channels=3, n_layers=2,
                          groups=[GroupSpec("g", 6, 2.0, "one_hot")])
        store = gen_feature_grids(spec)
        _, gt = gen_brain(spec)
        rs = gen_responses(store, gt, spec)
        sig = clean_signal(store, gt)
        norm = (sig - sig.mean(axis=0)) / sig.std(axis=0)
        noise = rs.values - norm
        emp = norm.var(axis=0) / noise.var(axis=0)
        assert np.all(np.abs(emp - 2.0) < 0.2)

    def test_deterministic_by_seed(self):
        spec = spec_small()
        b1 = make_bundle(spec)
        b2 = make_bundle(spec)
        assert b1.responses.values.tobytes() == b2.responses.values.tobytes()
        assert b1.store.grids.tobytes() == b2.store.grids.tobytes()


class TestCeiling:
    def test_analytic_values(self):
        assert oracle_ceiling(1.0, 1) == pytest.approx(0.7071, abs=1e-4)
        assert oracle_ceiling(float("inf"), 1) == 1.0
        assert oracle_ceiling(1.0, 3) == pytest.approx(np.sqrt(3.0 / 4.0), abs=1e-6)
        assert oracle_ceiling(0.0, 5) == 0.0

    def test_cheating_predictor_hits_ceiling(self):
        # the clean signal is the best possible predictor; its r against the
        # noisy repetition-averaged response should sit at the ceiling
        spec = spec_small(
            n_images=2000, n_channels=3, n_layers=2, n_reps=2,
            groups=[GroupSpec("a", 10, 4.0, "one_hot"), GroupSpec("b", 10, 0.5, "one_hot")],
        )
        store = gen_feature_grids(spec)
        _, gt = gen_brain(spec)
        rs = gen_responses(store, gt, spec)
        sig = clean_signal(store, gt)
        r, _ = pearson_per_voxel(sig, rs.values.astype(np.float64))
        expect = ceiling_per_voxel(gt)
        assert np.all(np.abs(r - expect) < 0.05)


class TestBundleOutput:
    def test_bundle_written_and_reloadable(self, tmp_path):
        spec = spec_small(n_images=20)
        bundle = make_bundle(spec, out_dir=tmp_path)
        back = dataio.load_bundle(tmp_path)
        assert back.store.grids.tobytes() == bundle.store.grids.tobytes()
        assert back.responses.values.tobytes() == bundle.responses.values.tobytes()
        gt = GroundTruth.from_dict(back.ground_truth)
        assert gt.u_star.shape == (36, 2)
        assert back.split.train and back.split.val and back.split.test
