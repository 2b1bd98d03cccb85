"""Newton trees and the alternating boosted/GP trainer."""

import numpy as np
import pytest

from sirakit import (BoostConfig, FeatureVector, GeoLocation, IsotopeVector,
                     NoiseModel, Sample, fit_gp, fit_tree, gpboost_train,
                     ls_boost_train, predict, predict_gb, spatial_composite,
                     train_gp_regression)
from sirakit.datamodel import feature_matrix, location_matrix
from sirakit.errors import SiraError


class TestFitTree:
    def test_constant_gradient_single_leaf(self):
        X = np.linspace(0, 1, 12)[:, None]
        tree = fit_tree(X, np.full(12, 0.7), np.ones(12), max_depth=3)
        assert tree.n_leaves == 1
        assert np.allclose(tree.predict(X), -0.7)

    def test_step_target_found_by_depth_one(self, rng):
        X = rng.uniform(0, 1, (40, 1))
        g = np.where(X[:, 0] <= 0.5, -1.0, 1.0)   # pull leaves to +-1
        tree = fit_tree(X, g, np.ones(40), max_depth=1, min_leaf=2)
        # exhaustive oracle: the best split must separate the two plateaus
        left = X[:, 0] <= 0.5
        pred = tree.predict(X)
        assert np.allclose(pred[left], 1.0)
        assert np.allclose(pred[~left], -1.0)
        threshold = tree.nodes[0].threshold
        below = X[X[:, 0] <= 0.5, 0].max()
        assert threshold == pytest.approx(below)

    def test_depth_zero_is_global_newton_stump(self, rng):
        X = rng.uniform(0, 1, (15, 2))
        g = rng.normal(0, 1, 15)
        h = rng.uniform(0.5, 2.0, 15)
        tree = fit_tree(X, g, h, max_depth=0)
        assert tree.n_leaves == 1
        assert tree.predict(X)[0] == pytest.approx(-g.sum() / h.sum())

    def test_fewer_samples_than_min_leaf(self):
        X = np.array([[0.0], [1.0], [2.0]])
        tree = fit_tree(X, np.array([1.0, -1.0, 0.5]), np.ones(3),
                        max_depth=3, min_leaf=5)
        assert tree.n_leaves == 1


def _make_samples(rng, n, n_feat=3, link=None, residual=None, noise=0.1,
                  task_value=None):
    """Synthetic samples with controllable feature/spatial decomposition."""
    lats = rng.uniform(35, 55, n)
    lons = rng.uniform(-5, 25, n)
    feat = rng.normal(0, 1, (n, n_feat))
    y = np.zeros(n)
    if link is not None:
        y += link(feat)
    if residual is not None:
        y += residual(lats, lons)
    y += noise * rng.normal(0, 1, n)
    names = tuple(f"f{j}" for j in range(n_feat))
    return [Sample(GeoLocation(lats[i], lons[i]),
                   IsotopeVector(d18O=float(y[i])),
                   FeatureVector(names=names, values=feat[i]))
            for i in range(n)]


def _smooth_residual(rng, scale=1.0, lengthscale=6.0):
    centers = rng.uniform([35, -5], [55, 25], (12, 2))
    weights = rng.normal(0, scale, 12)

    def field(lats, lons):
        out = np.zeros(len(lats))
        for (clat, clon), w in zip(centers, weights):
            out += w * np.exp(-((lats - clat) ** 2 + (lons - clon) ** 2)
                              / (2 * lengthscale ** 2))
        return out
    return field


class TestGpboostTrain:
    def test_requires_enough_samples(self, rng):
        samples = _make_samples(rng, 10)
        with pytest.raises(SiraError):
            gpboost_train(samples, BoostConfig(rounds=1))

    def test_nll_non_increasing(self, rng):
        samples = _make_samples(
            rng, 60, link=lambda F: 2.0 * F[:, 0] - F[:, 1] ** 2,
            residual=_smooth_residual(rng), noise=0.3)
        model = gpboost_train(samples, BoostConfig(rounds=15))
        hist = model.nll_history
        assert all(hist[i + 1] <= hist[i] + 1e-8 for i in range(len(hist) - 1))

    def test_learning_rate_zero_equals_gp_only(self, rng):
        samples = _make_samples(rng, 40, link=lambda F: F[:, 0],
                                residual=_smooth_residual(rng), noise=0.2)
        gb = gpboost_train(samples, BoostConfig(
            learning_rate=0.0, rounds=6, inner_opt_iters=10))
        gp_only = train_gp_regression(samples, "d18O", inputs="location",
                                      opt_rounds=6, inner_opt_iters=10)
        Q_loc = location_matrix(samples)[:10]
        Q_feat = feature_matrix(samples)[:10]
        a = predict_gb(gb, Q_loc, Q_feat)
        b = gp_only.predict(Q_loc, Q_feat)
        assert np.max(np.abs(a.mean - b.mean)) < 1e-6
        assert np.max(np.abs(a.variance - b.variance)) < 1e-6

    def test_huge_noise_equals_plain_boosting(self, rng):
        samples = _make_samples(rng, 50,
                                link=lambda F: 3.0 * F[:, 0] + F[:, 1],
                                noise=0.2)
        spec = spatial_composite(1.0, 8.0)
        gb = gpboost_train(samples, BoostConfig(
            rounds=12, optimize_covariance=False, init_spec=spec,
            init_noise=1e12))
        X = feature_matrix(samples)
        y = np.array([s.isotopes.d18O for s in samples])
        plain = ls_boost_train(X, y, learning_rate=0.03, rounds=12)
        got = gb.ensemble.predict(X)          # tree part only
        want = plain.predict(X)
        assert np.max(np.abs(got - want)) < 1e-6
        # and the GP correction itself vanishes
        full = predict_gb(gb, location_matrix(samples), X)
        assert np.max(np.abs(full.mean - got)) < 1e-6

    def test_zero_rounds_reduces_to_constant_mean_gp(self, rng):
        samples = _make_samples(rng, 30, residual=_smooth_residual(rng),
                                noise=0.2)
        spec = spatial_composite(1.5, 7.0)
        gb = gpboost_train(samples, BoostConfig(
            rounds=0, optimize_covariance=False, init_spec=spec,
            init_noise=0.3))
        y = np.array([s.isotopes.d18O for s in samples])
        f0 = float(np.mean(y))
        post = fit_gp(location_matrix(samples), y, np.full(len(y), f0),
                      spec, NoiseModel(np.array([0.3])))
        Q = location_matrix(samples)[:8]
        a = predict_gb(gb, Q, feature_matrix(samples)[:8])
        b = predict(post, f0, Q)
        assert np.allclose(a.mean, b.mean, atol=1e-12)
        assert np.allclose(a.variance, b.variance, atol=1e-12)

    def test_pure_feature_signal_goes_to_trees(self, rng):
        samples = _make_samples(rng, 80, link=lambda F: 3.0 * F[:, 0],
                                noise=0.05)
        model = gpboost_train(samples, BoostConfig(rounds=150))
        X = feature_matrix(samples)
        y = np.array([s.isotopes.d18O for s in samples])
        ens = model.ensemble.predict(X)
        captured = 1 - np.var(y - ens) / np.var(y)
        assert captured >= 0.95
        # spatial GP variance shrinks well below the target variance
        assert model.spec.sigma2 < 0.1 * np.var(y)

    def test_pure_spatial_signal_keeps_trees_flat(self, rng):
        samples = _make_samples(rng, 60,
                                residual=_smooth_residual(rng, scale=2.0),
                                noise=0.1)
        model = gpboost_train(samples, BoostConfig(rounds=40))
        X = feature_matrix(samples)
        y = np.array([s.isotopes.d18O for s in samples])
        ens = model.ensemble.predict(X)
        assert np.var(ens) < 0.05 * np.var(y)

    def test_sample_order_invariance(self, rng):
        samples = _make_samples(rng, 40, link=lambda F: F[:, 0],
                                residual=_smooth_residual(rng), noise=0.2)
        cfg = BoostConfig(rounds=8)
        model_a = gpboost_train(samples, cfg)
        perm = list(rng.permutation(len(samples)))
        model_b = gpboost_train([samples[i] for i in perm], cfg)
        Q_loc = location_matrix(samples)[:10]
        Q_feat = feature_matrix(samples)[:10]
        a = predict_gb(model_a, Q_loc, Q_feat)
        b = predict_gb(model_b, Q_loc, Q_feat)
        assert np.max(np.abs(a.mean - b.mean)) < 1e-8

    def test_deterministic_predictions(self, gb_small, small_prepared):
        samples, _ = small_prepared
        Q_loc = location_matrix(samples)[:5]
        Q_feat = feature_matrix(samples)[:5]
        a = predict_gb(gb_small, Q_loc, Q_feat)
        b = predict_gb(gb_small, Q_loc, Q_feat)
        assert np.array_equal(a.mean, b.mean)

    def test_predict_matches_gp_given_same_offsets(self, rng):
        samples = _make_samples(rng, 30, link=lambda F: F[:, 0], noise=0.2)
        model = gpboost_train(samples, BoostConfig(rounds=5))
        X_loc = location_matrix(samples)
        X_feat = feature_matrix(samples)
        got = predict_gb(model, X_loc[:6], X_feat[:6])
        offsets = model.ensemble.predict(X_feat[:6])
        want = predict(model.posterior, offsets, X_loc[:6])
        assert np.array_equal(got.mean, want.mean)
        assert np.array_equal(got.variance, want.variance)
