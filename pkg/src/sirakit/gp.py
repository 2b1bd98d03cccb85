"""Single-task exact GP regression around a supplied mean function.

The GP is fit to residuals r = y - y' where y' comes from an external mean
provider (a boosted ensemble or a constant). Training solves
(K + Sigma) w = r through a Cholesky factor; prediction adds w^T k(q, X)
back onto the query's mean offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import kernels
from .kernels import KernelSpec, NoiseModel
from .optimize import OptResult, gradient_descent

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PredictiveDistribution:
    """Predictive mean plus per-query variance or a full task covariance."""

    mean: np.ndarray
    variance: np.ndarray | None = None
    covariance: np.ndarray | None = None


@dataclass
class GPPosterior:
    X: np.ndarray
    spec: KernelSpec
    noise: NoiseModel
    chol: np.ndarray            # lower factor of K + Sigma (jittered)
    w: np.ndarray               # (K + Sigma)^{-1} (y - y')
    offsets: np.ndarray
    y: np.ndarray


def _covariance(X, spec, noise) -> np.ndarray:
    C = kernels.gram(X, spec)
    C[np.diag_indices_from(C)] += noise.single()
    return C


def fit_gp(X, y, mean_offsets, spec: KernelSpec, noise: NoiseModel) -> GPPosterior:
    """Fit kernel coefficients against residuals y - mean_offsets."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    offsets = np.asarray(mean_offsets, dtype=float)
    if len(X) < 2:
        raise ValueError(f"need at least 2 training points, got {len(X)}")
    if y.shape != offsets.shape or len(y) != len(X):
        raise ValueError("y, mean_offsets, and X lengths must agree")
    C = _covariance(X, spec, noise)
    L = kernels.chol_with_escalation(C, kernels.jitter_scale(spec))
    r = y - offsets
    w = cho_solve((L, True), r)
    return GPPosterior(X=X, spec=spec, noise=noise, chol=L, w=w,
                       offsets=offsets, y=y)


def predict(post: GPPosterior, mean_offset_at_query, query) -> PredictiveDistribution:
    """Exact conditional mean and (latent) variance at query points."""
    Q = np.atleast_2d(np.asarray(query, dtype=float))
    if Q.shape[1] != post.X.shape[1]:
        raise ValueError(f"query dimension {Q.shape[1]} does not match "
                         f"training dimension {post.X.shape[1]}")
    offsets = np.broadcast_to(np.asarray(mean_offset_at_query, dtype=float),
                              (len(Q),))
    K_cross = kernels.kernel_matrix(post.X, Q, post.spec)
    mean = offsets + K_cross.T @ post.w
    V = solve_triangular(post.chol, K_cross, lower=True)
    var = kernels.kernel_diag(Q, post.spec) - np.sum(V * V, axis=0)
    return PredictiveDistribution(mean=mean, variance=np.maximum(var, 0.0))


def nll(X, y, mean_offsets, spec: KernelSpec, noise: NoiseModel) -> float:
    """Gaussian negative log-likelihood of residuals under K + Sigma."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    r = np.asarray(y, dtype=float) - np.asarray(mean_offsets, dtype=float)
    C = _covariance(X, spec, noise)
    L = kernels.chol_with_escalation(C, kernels.jitter_scale(spec))
    alpha = cho_solve((L, True), r)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(0.5 * r @ alpha + 0.5 * logdet + 0.5 * len(r) * LOG_2PI)


def nll_grad(X, y, mean_offsets, spec: KernelSpec, noise: NoiseModel,
             cache=None):
    """NLL value and gradient over log hyperparameters (kernel + noise).

    Uses the trace identity dNLL/dtheta = 0.5 tr((C^{-1} - a a^T) dC/dtheta)
    with a = C^{-1} r.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    r = np.asarray(y, dtype=float) - np.asarray(mean_offsets, dtype=float)
    gg = kernels.gram_with_grads(X, spec, cache=cache)
    C = gg.K.copy()
    C[np.diag_indices_from(C)] += noise.single()
    L = kernels.chol_with_escalation(C, kernels.jitter_scale(spec))
    alpha = cho_solve((L, True), r)
    Cinv = cho_solve((L, True), np.eye(len(C)))
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    value = float(0.5 * r @ alpha + 0.5 * logdet + 0.5 * len(r) * LOG_2PI)

    inner = Cinv - np.outer(alpha, alpha)
    grad = np.empty(len(gg.names) + 1)
    grad[:-1] = 0.5 * gg.contract(inner)
    # noise enters as sigma_n^2 I; gradient w.r.t. log sigma_n^2
    grad[-1] = 0.5 * noise.single() * float(np.trace(inner))
    return value, grad, gg.names + ["log_noise"]


def _pack(spec, noise, dim):
    theta_k, names = kernels.pack_params(spec, dim)
    theta = np.concatenate([theta_k, [np.log(noise.single())]])
    return theta, names + ["log_noise"]


def _unpack(spec, theta, dim):
    new_spec = kernels.apply_params(spec, theta[:-1], dim)
    new_noise = NoiseModel(np.array([np.exp(theta[-1])]))
    return new_spec, new_noise


def optimize_hyperparameters(X, y, mean_offsets, spec: KernelSpec,
                             noise: NoiseModel, max_iter: int = 500,
                             tol: float = 1e-6,
                             cache=None) -> tuple[KernelSpec, NoiseModel, OptResult]:
    """Minimize the NLL over log hyperparameters by monotone descent."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    dim = X.shape[1]
    theta0, _ = _pack(spec, noise, dim)
    cache = {} if cache is None else cache

    def objective(theta):
        s, nz = _unpack(spec, theta, dim)
        value, grad, _ = nll_grad(X, y, mean_offsets, s, nz, cache=cache)
        return value, grad

    result = gradient_descent(objective, theta0, max_iter=max_iter, tol=tol)
    new_spec, new_noise = _unpack(spec, result.theta, dim)
    return new_spec, new_noise, result
