"""Exact single-task GP: fit, predict, likelihood, gradients, optimizer."""

import numpy as np
import pytest
from scipy import stats

from sirakit import (KernelSpec, NoiseModel, feature_mixture, fit_gp, gram,
                     nll, nll_grad, optimize_hyperparameters, predict,
                     spatial_composite)
from sirakit.gp import LOG_2PI, _pack, _unpack
from sirakit.kernels import kernel_diag, kernel_matrix


def _near_identity_spec():
    # distant points + tiny lengthscale make the Gram an identity (plus jitter)
    return KernelSpec(kind="rbf", sigma2=1.0, lengthscales=1e-3)


class TestFitGp:
    def test_identity_solve(self):
        X = np.array([[0.0], [100.0]])
        noise = NoiseModel(np.array([1e-12]))
        post = fit_gp(X, np.array([1.0, -1.0]), np.zeros(2),
                      _near_identity_spec(), noise)
        assert np.allclose(post.w, [1.0, -1.0], atol=1e-6)

    def test_random_system_residual(self, rng):
        X = rng.uniform(-30, 30, (20, 2))
        y = rng.normal(0, 2, 20)
        offsets = rng.normal(0, 1, 20)
        spec = spatial_composite(1.5, 8.0, 1.2, 180.0)
        noise = NoiseModel(np.array([0.3]))
        post = fit_gp(X, y, offsets, spec, noise)
        C = gram(X, spec) + 0.3 * np.eye(20)
        assert np.max(np.abs(C @ post.w - (y - offsets))) < 1e-8

    def test_zero_residuals(self, rng):
        X = rng.uniform(-10, 10, (8, 2))
        offsets = rng.normal(0, 1, 8)
        spec = spatial_composite(1.0, 5.0)
        post = fit_gp(X, offsets.copy(), offsets, spec,
                      NoiseModel(np.array([0.1])))
        assert np.allclose(post.w, 0.0)
        dist = predict(post, offsets[:3], X[:3])
        assert np.allclose(dist.mean, offsets[:3])

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            fit_gp(np.array([[0.0]]), np.array([1.0]), np.array([0.0]),
                   _near_identity_spec(), NoiseModel(np.array([0.1])))


class TestPredict:
    def test_interpolates_at_low_noise(self, rng):
        X = rng.uniform(-20, 20, (15, 2))
        y = rng.normal(0, 1.5, 15)
        spec = spatial_composite(2.0, 10.0)
        post = fit_gp(X, y, np.zeros(15), spec, NoiseModel(np.array([1e-10])))
        dist = predict(post, 0.0, X)
        assert np.max(np.abs(dist.mean - y)) < 1e-6
        assert np.max(dist.variance) < 1e-4

    def test_far_query_reverts_to_prior(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0]])
        spec = KernelSpec(kind="rbf", sigma2=1.7, lengthscales=1.0)
        post = fit_gp(X, np.array([3.0, -2.0]), np.zeros(2), spec,
                      NoiseModel(np.array([0.1])))
        dist = predict(post, 5.0, np.array([[500.0, 500.0]]))
        assert dist.mean[0] == pytest.approx(5.0, abs=1e-10)
        assert dist.variance[0] == pytest.approx(1.7, abs=1e-10)

    def test_matches_dense_closed_form(self, rng):
        X = rng.uniform(-10, 10, (3, 2))
        y = rng.normal(0, 1, 3)
        spec = spatial_composite(1.4, 6.0, 0.9, 90.0)
        noise = NoiseModel(np.array([0.2]))
        post = fit_gp(X, y, np.zeros(3), spec, noise)
        Q = rng.uniform(-10, 10, (5, 2))
        C = gram(X, spec) + 0.2 * np.eye(3)
        kx = kernel_matrix(X, Q, spec)
        mean = kx.T @ np.linalg.solve(C, y)
        var = kernel_diag(Q, spec) - np.einsum(
            "ij,ij->j", kx, np.linalg.solve(C, kx))
        dist = predict(post, 0.0, Q)
        assert np.allclose(dist.mean, mean, atol=1e-10)
        assert np.allclose(dist.variance, var, atol=1e-10)

    def test_variance_never_exceeds_prior(self, rng):
        X = rng.uniform(-20, 20, (25, 2))
        y = rng.normal(0, 1, 25)
        spec = spatial_composite(1.2, 7.0)
        post = fit_gp(X, y, np.zeros(25), spec, NoiseModel(np.array([0.05])))
        Q = rng.uniform(-25, 25, (40, 2))
        dist = predict(post, 0.0, Q)
        assert np.all(dist.variance <= kernel_diag(Q, spec) + 1e-12)

    def test_dimension_mismatch(self, rng):
        X = rng.uniform(-1, 1, (5, 2))
        post = fit_gp(X, np.zeros(5), np.zeros(5), spatial_composite(),
                      NoiseModel(np.array([0.1])))
        with pytest.raises(ValueError):
            predict(post, 0.0, np.array([[0.0, 0.0, 0.0]]))


class TestNll:
    def test_scalar_case(self):
        # single point, unit covariance, zero residual -> 0.5 log(2 pi)
        X = np.array([[0.0]])
        spec = KernelSpec(kind="rbf", sigma2=1.0, lengthscales=1.0)
        value = nll(X, np.array([0.0]), np.array([0.0]), spec,
                    NoiseModel(np.array([1e-12])))
        assert value == pytest.approx(0.5 * LOG_2PI, abs=1e-6)
        assert value == pytest.approx(0.9189, abs=1e-4)

    def test_quadratic_term_scales(self, rng):
        X = rng.uniform(-5, 5, (6, 2))
        r = rng.normal(0, 1, 6)
        spec = spatial_composite(1.1, 4.0)
        noise = NoiseModel(np.array([0.4]))
        C = gram(X, spec) + 0.4 * np.eye(6)
        const = 0.5 * np.linalg.slogdet(C)[1] + 3 * LOG_2PI
        q1 = nll(X, r, np.zeros(6), spec, noise) - const
        q2 = nll(X, 2 * r, np.zeros(6), spec, noise) - const
        assert q2 == pytest.approx(4 * q1, rel=1e-10)

    def test_matches_multivariate_normal(self, rng):
        X = rng.uniform(-8, 8, (5, 2))
        y = rng.normal(0, 1, 5)
        offsets = rng.normal(0, 1, 5)
        spec = spatial_composite(0.9, 5.0, 1.1, 77.0)
        noise = NoiseModel(np.array([0.25]))
        C = gram(X, spec) + 0.25 * np.eye(5)
        want = -stats.multivariate_normal(mean=offsets, cov=C).logpdf(y)
        got = nll(X, y, offsets, spec, noise)
        assert got == pytest.approx(want, abs=1e-10)


class TestNllGrad:
    @pytest.mark.parametrize("make_spec,dim", [
        (lambda: spatial_composite(1.3, 6.0, 1.2, 150.0), 2),
        (lambda: feature_mixture(1.2, np.array([0.8, 1.5, 2.0]), 0.7, 0.4), 3),
    ], ids=["spatial", "mixture"])
    def test_finite_difference_match(self, make_spec, dim, rng):
        X = rng.uniform(-4, 4, (10, dim))
        y = rng.normal(0, 1, 10)
        spec = make_spec()
        noise = NoiseModel(np.array([0.3]))
        theta0, names = _pack(spec, noise, dim)
        _, grad, _ = nll_grad(X, y, np.zeros(10), spec, noise)
        h = 1e-5
        for i in range(len(theta0)):
            tp, tm = theta0.copy(), theta0.copy()
            tp[i] += h
            tm[i] -= h
            sp, npse = _unpack(spec, tp, dim)
            sm, nmse = _unpack(spec, tm, dim)
            fd = (nll(X, y, np.zeros(10), sp, npse)
                  - nll(X, y, np.zeros(10), sm, nmse)) / (2 * h)
            rel = abs(fd - grad[i]) / max(1e-8, abs(fd))
            assert rel < 1e-4, f"{names[i]}: rel={rel:.2e}"

    def test_constant_feature_has_zero_lengthscale_gradient(self, rng):
        X = rng.uniform(-3, 3, (12, 3))
        X[:, 1] = 7.5  # no variation in this dimension
        y = rng.normal(0, 1, 12)
        spec = feature_mixture(1.0, np.ones(3), 0.5, 0.5)
        _, grad, names = nll_grad(X, y, np.zeros(12), spec,
                                  NoiseModel(np.array([0.2])))
        assert abs(grad[names.index("log_ls_1")]) < 1e-12


class TestOptimizer:
    def _data(self, rng, n=30):
        X = rng.uniform(-20, 20, (n, 2))
        spec_true = spatial_composite(2.0, 8.0)
        C = gram(X, spec_true) + 0.2 * np.eye(n)
        y = np.linalg.cholesky(C) @ rng.normal(0, 1, n)
        return X, y

    def test_monotone_and_converged(self, rng):
        X, y = self._data(rng)
        spec = spatial_composite(1.0, 5.0)
        noise = NoiseModel(np.array([0.5]))
        _, _, result = optimize_hyperparameters(
            X, y, np.zeros(len(y)), spec, noise, max_iter=200)
        hist = result.history
        assert all(hist[i + 1] <= hist[i] + 1e-12 for i in range(len(hist) - 1))
        assert hist[-1] < hist[0]

    def test_noise_gradient_small_at_optimum(self, rng):
        X, y = self._data(rng)
        spec = spatial_composite(1.0, 5.0)
        noise = NoiseModel(np.array([0.5]))
        spec2, noise2, result = optimize_hyperparameters(
            X, y, np.zeros(len(y)), spec, noise, max_iter=500, tol=1e-10)
        _, grad, names = nll_grad(X, y, np.zeros(len(y)), spec2, noise2)
        assert abs(grad[names.index("log_noise")]) < 0.05

    def test_fit_predict_deterministic(self, rng):
        X, y = self._data(rng, n=20)
        spec = spatial_composite(1.0, 5.0)
        noise = NoiseModel(np.array([0.3]))
        Q = rng.uniform(-20, 20, (6, 2))

        def run():
            s, nz, _ = optimize_hyperparameters(
                X, y, np.zeros(len(y)), spec, noise, max_iter=40)
            post = fit_gp(X, y, np.zeros(len(y)), s, nz)
            return predict(post, 0.0, Q)

        a, b = run(), run()
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.variance, b.variance)
