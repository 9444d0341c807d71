"""Scoring and probing: Pearson oracle match, normalization, PCA, reports."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelcast import evalkit
from voxelcast.numcore import make_rng


def textbook_pearson(x, y):
    """Two-pass float64 textbook formula, one column at a time."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my = x.mean(), y.mean()
    num = ((x - mx) * (y - my)).sum()
    den = np.sqrt(((x - mx) ** 2).sum()) * np.sqrt(((y - my) ** 2).sum())
    return num / den


class TestPearson:
    def test_perfect_correlation(self):
        r = make_rng(0)
        y = r.standard_normal((10, 3))
        vals, flags = evalkit.pearson_per_voxel(y, y)
        assert np.allclose(vals, 1.0, atol=1e-12)
        assert not flags.any()

    def test_anti_correlation(self):
        r = make_rng(1)
        y = r.standard_normal((10, 2))
        vals, _ = evalkit.pearson_per_voxel(-y, y)
        assert np.allclose(vals, -1.0, atol=1e-12)

    def test_affine_invariance(self):
        r = make_rng(2)
        y = r.standard_normal((20, 4))
        vals, _ = evalkit.pearson_per_voxel(2.5 * y + 3.0, y)
        assert np.allclose(vals, 1.0, atol=1e-6)

    def test_degenerate_column_flagged_zero(self):
        pred = np.ones((5, 2))
        target = make_rng(3).standard_normal((5, 2))
        vals, flags = evalkit.pearson_per_voxel(pred, target)
        assert np.all(vals == 0.0)
        assert flags.all()

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            evalkit.pearson_per_voxel(np.zeros((1, 2)), np.zeros((1, 2)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_matches_textbook_two_pass(self, seed):
        r = make_rng(seed)
        pred = r.standard_normal((15, 4))
        target = r.standard_normal((15, 4))
        vals, _ = evalkit.pearson_per_voxel(pred, target)
        for j in range(4):
            assert abs(vals[j] - textbook_pearson(pred[:, j], target[:, j])) < 1e-10

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_invariant_to_voxel_permutation(self, seed):
        r = make_rng(seed)
        pred = r.standard_normal((12, 6))
        target = r.standard_normal((12, 6))
        perm = r.permutation(6)
        vals, _ = evalkit.pearson_per_voxel(pred, target)
        pvals, _ = evalkit.pearson_per_voxel(pred[:, perm], target[:, perm])
        assert np.allclose(pvals, vals[perm], atol=1e-12)


class TestNoiseNormalized:
    def test_ratio_one_at_ceiling(self):
        vals, _ = evalkit.noise_normalized(np.array([0.7]), np.array([0.7]))
        assert vals[0] == pytest.approx(1.0)

    def test_zero(self):
        vals, _ = evalkit.noise_normalized(np.array([0.0]), np.array([0.5]))
        assert vals[0] == 0.0

    def test_analytic_half(self):
        from voxelcast.synth import oracle_ceiling

        ceiling = oracle_ceiling(1.0, 1)  # sqrt(1/2)
        vals, _ = evalkit.noise_normalized(np.array([0.3536]), np.array([ceiling]))
        assert vals[0] == pytest.approx(0.50, abs=1e-3)

    def test_low_ceiling_excluded_and_clipped(self):
        vals, excl = evalkit.noise_normalized(
            np.array([0.5, 0.9, -0.9]), np.array([0.01, 0.5, 0.5])
        )
        assert excl[0] and not excl[1]
        assert np.isnan(vals[0])
        assert vals[1] == pytest.approx(1.5)  # clipped
        assert vals[2] == pytest.approx(-1.0)


class TestPCA:
    def test_line_data_one_component(self):
        r = make_rng(4)
        t = r.standard_normal(30)
        X = np.outer(t, np.array([1.0, 2.0])) + np.array([5.0, -1.0])
        basis = evalkit.pca_fit(X, 1)
        Z = evalkit.pca_transform(basis, X)
        recon = Z @ basis.components + basis.mean
        assert np.allclose(recon, X, atol=1e-8)

    def test_mean_row_maps_to_zero(self):
        r = make_rng(5)
        X = r.standard_normal((20, 6))
        basis = evalkit.pca_fit(X, 3)
        z = evalkit.pca_transform(basis, X.mean(axis=0, keepdims=True))
        assert np.allclose(z, 0.0, atol=1e-10)

    def test_full_rank_reconstruction(self):
        r = make_rng(6)
        X = r.standard_normal((12, 5))
        basis = evalkit.pca_fit(X, 5)
        Z = evalkit.pca_transform(basis, X)
        recon = Z @ basis.components + basis.mean
        assert np.allclose(recon, X, atol=1e-4)

    def test_sign_convention(self):
        r = make_rng(7)
        X = r.standard_normal((15, 4))
        basis = evalkit.pca_fit(X, 4)
        for comp in basis.components:
            assert comp[np.argmax(np.abs(comp))] > 0

    def test_component_limit(self):
        with pytest.raises(Exception):
            evalkit.pca_fit(np.zeros((4, 3)), 5)


class TestLinearProbe:
    def test_realizable_target_near_perfect(self):
        r = make_rng(8)
        X = r.standard_normal((200, 10))
        W = r.standard_normal((10, 5))
        Y = X @ W
        train = np.arange(150)
        test = np.arange(150, 200)
        rep = evalkit.linear_probe(X, Y, train, test, n_components=10)
        assert rep.mean_r > 0.99

    def test_permutation_null_near_zero(self):
        # test-set size chosen so the null's sampling noise sits well under
        # the 0.05 bound (std of r ~ 1/sqrt(n_test) per voxel)
        r = make_rng(9)
        X = r.standard_normal((1200, 8))
        Y = X @ r.standard_normal((8, 30))
        perm = r.permutation(1200)
        rep = evalkit.linear_probe(X, Y[perm], np.arange(800), np.arange(800, 1200), n_components=8)
        assert abs(rep.mean_r) < 0.05

    def test_singular_system_warns_and_recovers(self):
        r = make_rng(10)
        base = r.standard_normal((30, 2))
        X = np.concatenate([base, base], axis=1)  # rank-deficient
        Y = r.standard_normal((30, 3))
        with pytest.warns(UserWarning, match="ridge"):
            evalkit.linear_probe(X, Y, np.arange(24), np.arange(24, 30), n_components=4, ridge=0.0)


class TestReports:
    def test_score_report_invariance_to_order(self):
        r = make_rng(11)
        pred = r.standard_normal((20, 5))
        target = r.standard_normal((20, 5))
        vals, _ = evalkit.pearson_per_voxel(pred, target)
        perm = r.permutation(5)
        pvals, _ = evalkit.pearson_per_voxel(pred[:, perm], target[:, perm])
        assert np.allclose(sorted(vals), sorted(pvals), atol=1e-12)

    def test_svg_dot_count_and_frozen_rm_centering(self, tmp_path):
        u = np.zeros((17, 2), dtype=np.float32)  # frozen mapper: all at center
        eta = np.full((17, 3), 1 / 3, dtype=np.float32)
        evalkit.retinamap_svg(u, eta, tmp_path / "map.svg")
        text = (tmp_path / "map.svg").read_text()
        assert text.count("<circle") == 17
        assert text.count('cx="256.0"') == 17

    def test_layerselector_csv_bins(self, tmp_path):
        r = make_rng(12)
        coords = r.uniform(-1, 1, (40, 3)).astype(np.float32)
        eta = np.full((40, 2), 0.5, dtype=np.float32)
        evalkit.layerselector_csv(coords, eta, tmp_path / "ls.csv")
        lines = (tmp_path / "ls.csv").read_text().strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count,eta_0,eta_1"
        assert len(lines) == 11
        counts = sum(int(l.split(",")[2]) for l in lines[1:])
        assert counts == 40
