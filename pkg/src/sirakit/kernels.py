"""Covariance functions, Gram assembly, and multi-task Kronecker structure.

Two compound kernels drive the models:

* ``spatial_composite`` — sum of RBF, rational-quadratic, and periodic terms
  on raw (lat, lon) degrees with one shared variance and lengthscale.
* ``feature_mixture`` — lambda1 * RBF + lambda2 * Matern-3/2 on feature
  vectors, with ARD lengthscales. The Matern term is the per-dimension
  product form, not the isotropic-distance variant.

All positive hyperparameters are optimized in log space; ``pack_params`` /
``apply_params`` define the layout used by the gradient-based optimizers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import FactorizationError

SQRT3 = math.sqrt(3.0)

JITTER_FRACTION = 1e-8
JITTER_CEILING = 1e-4

PRIMITIVE_KINDS = ("rbf", "matern32", "rq", "periodic")
KERNEL_KINDS = PRIMITIVE_KINDS + ("sum", "spatial_composite", "feature_mixture")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters; positive values enforced."""

    kind: str
    sigma2: float = 1.0
    lengthscales: object = 1.0          # scalar or (D,) array for ARD
    alpha: float = 1.0                  # rational-quadratic shape
    period: float = 360.0               # periodic term period (degrees)
    mix_lambda1: float = 0.5
    mix_lambda2: float = 0.5
    children: tuple = ()

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "sum":
            if len(self.children) < 2:
                raise ValueError("sum kernel needs at least 2 children")
            return
        ls = np.asarray(self.lengthscales, dtype=float)
        object.__setattr__(self, "lengthscales",
                           float(ls) if ls.ndim == 0 else ls)
        for name, v in (("sigma2", self.sigma2), ("alpha", self.alpha),
                        ("period", self.period)):
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")
        if self.mix_lambda1 < 0 or self.mix_lambda2 < 0:
            raise ValueError("mixture weights must be nonnegative")

    def lengthscale_array(self, dim: int) -> np.ndarray:
        ls = np.asarray(self.lengthscales, dtype=float)
        if ls.ndim == 0:
            return np.full(dim, float(ls))
        if ls.shape != (dim,):
            raise ValueError(f"lengthscales shape {ls.shape} does not match "
                             f"input dimension {dim}")
        return ls


def spatial_composite(sigma2=1.0, lengthscale=10.0, alpha=1.0, period=360.0):
    """RBF + rational-quadratic + periodic on locations, shared scale."""
    return KernelSpec(kind="spatial_composite", sigma2=sigma2,
                      lengthscales=float(lengthscale), alpha=alpha,
                      period=period)


def feature_mixture(sigma2=1.0, lengthscales=1.0, lambda1=0.5, lambda2=0.5):
    """ARD RBF/Matern-3/2 mixture on feature vectors."""
    return KernelSpec(kind="feature_mixture", sigma2=sigma2,
                      lengthscales=lengthscales, mix_lambda1=lambda1,
                      mix_lambda2=lambda2)


def _as_2d(u) -> np.ndarray:
    arr = np.asarray(u, dtype=float)
    return arr[None, :] if arr.ndim == 1 else arr


def _check_dims(U, V, spec):
    if U.shape[1] != V.shape[1]:
        raise ValueError(f"input dimensions differ: {U.shape[1]} vs {V.shape[1]}")
    spec.lengthscale_array(U.shape[1])


def _scaled_sqdist(U, V, ls) -> np.ndarray:
    diff = U[:, None, :] - V[None, :, :]
    return np.sum((diff / ls) ** 2, axis=-1)


def _euclidean(U, V) -> np.ndarray:
    diff = U[:, None, :] - V[None, :, :]
    return np.sqrt(np.sum(diff ** 2, axis=-1))


def rbf_matrix(U, V, spec) -> np.ndarray:
    U, V = _as_2d(U), _as_2d(V)
    _check_dims(U, V, spec)
    ls = spec.lengthscale_array(U.shape[1])
    return spec.sigma2 * np.exp(-0.5 * _scaled_sqdist(U, V, ls))


def matern32_matrix(U, V, spec) -> np.ndarray:
    """Per-dimension product Matern-3/2: sigma2 * prod_d (1+a_d) exp(-a_d)."""
    U, V = _as_2d(U), _as_2d(V)
    _check_dims(U, V, spec)
    ls = spec.lengthscale_array(U.shape[1])
    a = SQRT3 * np.abs(U[:, None, :] - V[None, :, :]) / ls
    return spec.sigma2 * np.prod((1.0 + a) * np.exp(-a), axis=-1)


def _scalar_lengthscale(spec, dim: int) -> float:
    """RQ and periodic terms use one shared lengthscale on raw distance."""
    ls = spec.lengthscale_array(dim)
    if not np.all(ls == ls[0]):
        raise ValueError(f"{spec.kind}: per-dimension lengthscales are not "
                         "supported; supply a scalar")
    return float(ls[0])


def rq_matrix(U, V, spec) -> np.ndarray:
    U, V = _as_2d(U), _as_2d(V)
    _check_dims(U, V, spec)
    ls = _scalar_lengthscale(spec, U.shape[1])
    r2 = np.sum((U[:, None, :] - V[None, :, :]) ** 2, axis=-1)
    return spec.sigma2 * (1.0 + r2 / (2.0 * spec.alpha * ls ** 2)) ** (-spec.alpha)


def periodic_matrix(U, V, spec) -> np.ndarray:
    U, V = _as_2d(U), _as_2d(V)
    _check_dims(U, V, spec)
    ls = _scalar_lengthscale(spec, U.shape[1])
    r = _euclidean(U, V)
    s = np.sin(np.pi * r / spec.period)
    return spec.sigma2 * np.exp(-2.0 * s ** 2 / ls ** 2)


def kernel_matrix(U, V, spec) -> np.ndarray:
    """Dense cross-covariance between two point sets."""
    if spec.kind == "rbf":
        return rbf_matrix(U, V, spec)
    if spec.kind == "matern32":
        return matern32_matrix(U, V, spec)
    if spec.kind == "rq":
        return rq_matrix(U, V, spec)
    if spec.kind == "periodic":
        return periodic_matrix(U, V, spec)
    if spec.kind == "sum":
        return sum(kernel_matrix(U, V, child) for child in spec.children)
    if spec.kind == "spatial_composite":
        return (rbf_matrix(U, V, spec) + rq_matrix(U, V, spec)
                + periodic_matrix(U, V, spec))
    if spec.kind == "feature_mixture":
        return (spec.mix_lambda1 * rbf_matrix(U, V, spec)
                + spec.mix_lambda2 * matern32_matrix(U, V, spec))
    raise ValueError(f"unknown kernel kind {spec.kind!r}")


def kernel_value(u, v, spec) -> float:
    return float(kernel_matrix(_as_2d(u), _as_2d(v), spec)[0, 0])


# Spec-level pairwise entry points.

def k_rbf(u, v, spec) -> float:
    return float(rbf_matrix(_as_2d(u), _as_2d(v), spec)[0, 0])


def k_matern32(u, v, spec) -> float:
    return float(matern32_matrix(_as_2d(u), _as_2d(v), spec)[0, 0])


def k_rq(u, v, spec) -> float:
    return float(rq_matrix(_as_2d(u), _as_2d(v), spec)[0, 0])


def k_periodic(u, v, spec) -> float:
    return float(periodic_matrix(_as_2d(u), _as_2d(v), spec)[0, 0])


def k_composite_spatial(x, x_other, spec) -> float:
    """Sum of RBF, RQ, and periodic terms on (lat, lon) coordinates."""
    u = np.array([x.lat, x.lon]) if hasattr(x, "lat") else np.asarray(x, dtype=float)
    v = (np.array([x_other.lat, x_other.lon]) if hasattr(x_other, "lat")
         else np.asarray(x_other, dtype=float))
    comp = replace(spec, kind="spatial_composite") \
        if spec.kind != "spatial_composite" else spec
    return kernel_value(u, v, comp)


def k_feature_mixture(u, v, spec) -> float:
    comp = replace(spec, kind="feature_mixture") \
        if spec.kind != "feature_mixture" else spec
    return kernel_value(np.asarray(u, float), np.asarray(v, float), comp)


def kernel_diag(U, spec) -> np.ndarray:
    """k(u, u) for each row of U (no jitter)."""
    U = _as_2d(U)
    if spec.kind == "spatial_composite":
        return np.full(len(U), 3.0 * spec.sigma2)
    if spec.kind == "feature_mixture":
        return np.full(len(U), (spec.mix_lambda1 + spec.mix_lambda2) * spec.sigma2)
    if spec.kind == "sum":
        return sum(kernel_diag(U, child) for child in spec.children)
    return np.full(len(U), spec.sigma2)


def jitter_scale(spec) -> float:
    if spec.kind == "sum":
        return sum(jitter_scale(c) for c in spec.children)
    return spec.sigma2


def gram(points, spec) -> np.ndarray:
    """Symmetric Gram matrix with diagonal jitter JITTER_FRACTION * sigma2."""
    U = _as_2d(points)
    with np.errstate(invalid="ignore"):
        K = kernel_matrix(U, U, spec)
    if not np.all(np.isfinite(K)):
        raise ValueError("non-finite kernel entries in Gram matrix")
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += JITTER_FRACTION * jitter_scale(spec)
    return K


def chol_with_escalation(C, scale) -> np.ndarray:
    """Lower Cholesky factor, doubling jitter from the base level on failure."""
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    jitter = 2.0 * JITTER_FRACTION * scale
    ceiling = JITTER_CEILING * scale
    while jitter <= ceiling:
        try:
            return np.linalg.cholesky(C + jitter * np.eye(len(C)))
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise FactorizationError(
        f"Cholesky failed with jitter escalated to {ceiling:g}")


# -- Gram gradients w.r.t. log hyperparameters -------------------------------

class GramGradients:
    """Gram matrix plus a weight-contraction over parameter gradients.

    `contract(W)` returns sum(W * dK/dlog theta) for every parameter, in
    `names` order, without materializing per-parameter matrices.
    """

    def __init__(self, K, names, contract):
        self.K = K
        self.names = names
        self.contract = contract


def _pairwise_cache(X, cache):
    if cache is not None and "diff" in cache:
        return cache["diff"], cache["absdiff"]
    diff = X[:, None, :] - X[None, :, :]
    absdiff = np.abs(diff)
    if cache is not None:
        cache["diff"] = diff
        cache["absdiff"] = absdiff
    return diff, absdiff


def gram_with_grads(X, spec, cache=None):
    """GramGradients for the two compound model kernels.

    `cache` (a dict) persists input-difference tensors across repeated calls
    with the same X, as in hyperparameter optimization loops.
    """
    X = _as_2d(X)
    n, dim = X.shape
    if spec.kind == "spatial_composite":
        diff, _ = _pairwise_cache(X, cache)
        ls = _scalar_lengthscale(spec, dim)
        r2 = np.sum(diff ** 2, axis=-1)
        r = np.sqrt(r2)
        t_rbf = spec.sigma2 * np.exp(-0.5 * r2 / ls ** 2)
        base = 1.0 + r2 / (2.0 * spec.alpha * ls ** 2)
        t_rq = spec.sigma2 * base ** (-spec.alpha)
        s = np.sin(np.pi * r / spec.period)
        t_per = spec.sigma2 * np.exp(-2.0 * s ** 2 / ls ** 2)

        K = t_rbf + t_rq + t_per
        K[np.diag_indices_from(K)] += JITTER_FRACTION * spec.sigma2

        d_ls = (t_rbf * (r2 / ls ** 2)
                + spec.sigma2 * base ** (-spec.alpha - 1.0) * (r2 / ls ** 2)
                + t_per * (4.0 * s ** 2 / ls ** 2))
        d_alpha = spec.alpha * spec.sigma2 * base ** (-spec.alpha) * (
            -np.log(base) + r2 / (2.0 * spec.alpha * ls ** 2 * base))
        d_period = t_per * (2.0 * np.pi * r
                            * np.sin(2.0 * np.pi * r / spec.period)
                            / (ls ** 2 * spec.period))
        names = ["log_sigma2", "log_lengthscale", "log_alpha", "log_period"]

        def contract(W):
            return np.array([float(np.sum(W * K)),
                             float(np.sum(W * d_ls)),
                             float(np.sum(W * d_alpha)),
                             float(np.sum(W * d_period))])

        return GramGradients(K, names, contract)

    if spec.kind == "feature_mixture":
        diff, absdiff = _pairwise_cache(X, cache)
        ls = spec.lengthscale_array(dim)
        scaled2 = (diff / ls) ** 2
        t_rbf = spec.sigma2 * np.exp(-0.5 * scaled2.sum(axis=-1))
        a = SQRT3 * absdiff / ls
        # prod_d (1 + a_d) exp(-a_d) = exp(-sum a_d) * prod (1 + a_d)
        t_mat = spec.sigma2 * np.exp(-a.sum(axis=-1)) * np.prod(1.0 + a, axis=-1)
        ratio = a ** 2 / (1.0 + a)     # d log factor / d log ls_d

        lam1, lam2 = spec.mix_lambda1, spec.mix_lambda2
        K = lam1 * t_rbf + lam2 * t_mat
        K[np.diag_indices_from(K)] += JITTER_FRACTION * spec.sigma2

        names = (["log_sigma2"] + [f"log_ls_{d}" for d in range(dim)]
                 + ["log_lambda1", "log_lambda2"])

        def contract(W):
            Wr = W * t_rbf
            Wm = W * t_mat
            out = np.empty(len(names))
            out[0] = float(np.sum(W * K))
            out[1:1 + dim] = (lam1 * np.einsum("pq,pqd->d", Wr, scaled2)
                              + lam2 * np.einsum("pq,pqd->d", Wm, ratio))
            out[1 + dim] = lam1 * float(np.sum(Wr))
            out[2 + dim] = lam2 * float(np.sum(Wm))
            return out

        return GramGradients(K, names, contract)

    raise ValueError(f"gradients not implemented for kernel kind {spec.kind!r}")


# -- Hyperparameter packing ---------------------------------------------------

def pack_params(spec, dim: int) -> tuple[np.ndarray, list[str]]:
    """Log-space parameter vector and names for a model kernel."""
    if spec.kind == "spatial_composite":
        ls = _scalar_lengthscale(spec, dim)
        theta = np.log([spec.sigma2, ls, spec.alpha, spec.period])
        return theta, ["log_sigma2", "log_lengthscale", "log_alpha", "log_period"]
    if spec.kind == "feature_mixture":
        ls = spec.lengthscale_array(dim)
        theta = np.concatenate([[math.log(spec.sigma2)], np.log(ls),
                                [math.log(spec.mix_lambda1),
                                 math.log(spec.mix_lambda2)]])
        names = (["log_sigma2"] + [f"log_ls_{d}" for d in range(dim)]
                 + ["log_lambda1", "log_lambda2"])
        return theta, names
    raise ValueError(f"packing not implemented for kernel kind {spec.kind!r}")


def apply_params(spec, theta, dim: int) -> KernelSpec:
    """Rebuild a spec from a packed log-space parameter vector."""
    theta = np.asarray(theta, dtype=float)
    if spec.kind == "spatial_composite":
        s2, ls, alpha, period = np.exp(theta)
        return replace(spec, sigma2=float(s2), lengthscales=float(ls),
                       alpha=float(alpha), period=float(period))
    if spec.kind == "feature_mixture":
        s2 = math.exp(theta[0])
        ls = np.exp(theta[1:1 + dim])
        lam1, lam2 = np.exp(theta[1 + dim:3 + dim])
        return replace(spec, sigma2=s2, lengthscales=ls,
                       mix_lambda1=float(lam1), mix_lambda2=float(lam2))
    raise ValueError(f"packing not implemented for kernel kind {spec.kind!r}")


# -- Multi-task structure ------------------------------------------------------

@dataclass
class TaskCovariance:
    """Task covariance K_T = L L^T from a lower-triangular factor."""

    L: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError("L must be square")
        if not np.allclose(L, np.tril(L)):
            raise ValueError("L must be lower-triangular")
        if np.any(np.diag(L) < 0):
            raise ValueError("diagonal of L must be nonnegative")
        self.L = L

    @property
    def M(self) -> int:
        return self.L.shape[0]

    @property
    def K_T(self) -> np.ndarray:
        return self.L @ self.L.T

    def correlation(self) -> np.ndarray:
        K = self.K_T
        d = np.sqrt(np.clip(np.diag(K), 1e-300, None))
        return K / np.outer(d, d)


@dataclass
class NoiseModel:
    """Strictly positive per-task noise variances (diagonal Sigma)."""

    variances: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ValueError("noise variances must be positive and finite")
        self.variances = v

    @property
    def M(self) -> int:
        return len(self.variances)

    def single(self) -> float:
        if len(self.variances) != 1:
            raise ValueError("expected a single-task noise model")
        return float(self.variances[0])


def kron_multitask(K_A: np.ndarray, task_cov: TaskCovariance,
                   max_dim: int = 4096) -> np.ndarray:
    """K_A (x) K_T with sample-major ordering and task-major inner blocks.

    Entry [(p*M + i), (q*M + j)] equals K_A[p, q] * K_T[i, j]: consecutive
    rows cycle through tasks at one sample location before moving on.
    """
    K_A = np.asarray(K_A, dtype=float)
    n = K_A.shape[0]
    M = task_cov.M
    if n * M > max_dim:
        raise ValueError(f"stacked dimension {n * M} exceeds cap {max_dim}")
    return np.kron(K_A, task_cov.K_T)
