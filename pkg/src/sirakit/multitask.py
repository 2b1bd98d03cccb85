"""Joint GP over multiple isotope tasks with a Kronecker covariance.

The stacked covariance over n locations and M tasks is
``K_A (x) K_T + Sigma`` where K_A is an ARD RBF/Matern mixture on feature
vectors (one shared set of lengthscales; the Kronecker factorization forces
the feature kernel to be common to all tasks), K_T = L L^T is a learned
task covariance, and Sigma holds per-task noise variances. Entries are
ordered sample-major with tasks as the fast inner index, matching
``kernels.kron_multitask``. Missing task observations are handled by row
masking of the stacked system, which keeps inference exact.

Marginal-likelihood training runs monotone gradient ascent over per-task
constant means, log kernel parameters, the L factor (log-diagonal), and
log noise variances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from . import kernels
from .datamodel import ISOTOPE_NAMES, feature_matrix, isotope_matrix
from .errors import SiraError
from .gp import LOG_2PI, PredictiveDistribution
from .kernels import KernelSpec, NoiseModel, TaskCovariance
from .optimize import gradient_descent


@dataclass
class MultitaskConfig:
    learning_rate: float = 0.01
    epochs: int = 500
    tol: float = 1e-8
    seed: int = 0
    init_spec: KernelSpec | None = None


@dataclass
class ImportanceReport:
    """Per-task feature importances: reciprocal ARD lengthscales."""

    tasks: tuple[str, ...]
    per_task: dict            # task -> list of (feature_name, importance) desc
    note: str = ""

    def rows(self):
        for task in self.tasks:
            for rank, (name, imp) in enumerate(self.per_task[task], start=1):
                yield task, rank, name, imp


@dataclass
class TaskDependencyReport:
    tasks: tuple[str, ...]
    correlation: np.ndarray
    L: np.ndarray
    signs: dict               # (task_i, task_j) -> "positive"|"negative"|"none"

    def rows(self):
        for i, ti in enumerate(self.tasks):
            for j, tj in enumerate(self.tasks):
                yield ti, tj, float(self.correlation[i, j])


class MultitaskModel:
    """Fitted multi-task GP with cached factorization of the masked system."""

    def __init__(self, tasks, spec, task_cov, noise, task_means, X, Y,
                 feature_names, aggregation_mode="mean", converged=True,
                 nll_history=None, seed=0):
        self.tasks = tuple(tasks)
        self.spec = spec
        self.task_cov = task_cov
        self.noise = noise
        self.task_means = np.asarray(task_means, dtype=float)
        self.X = np.asarray(X, dtype=float)
        self.Y = np.asarray(Y, dtype=float)          # (n, M), NaN = missing
        self.feature_names = tuple(feature_names)
        self.aggregation_mode = aggregation_mode
        self.converged = converged
        self.nll_history = nll_history or []
        self.seed = seed
        self.mask = ~np.isnan(self.Y).reshape(-1)    # stacked, task-inner
        self._factorize()

    @property
    def M(self) -> int:
        return len(self.tasks)

    def _factorize(self):
        C = stacked_covariance(self.X, self.spec, self.task_cov, self.noise)
        C = C[np.ix_(self.mask, self.mask)]
        self.chol = kernels.chol_with_escalation(
            C, kernels.jitter_scale(self.spec))
        r_full = (self.Y - self.task_means[None, :]).reshape(-1)
        self.residuals = r_full[self.mask]
        self.alpha = cho_solve((self.chol, True), self.residuals)

    def predict(self, features) -> PredictiveDistribution:
        mean, cov = self.predict_batch(np.atleast_2d(np.asarray(features, float)))
        return PredictiveDistribution(mean=mean[0], covariance=cov[0])

    def predict_batch(self, F):
        """Means (B, M) and covariances (B, M, M) for feature rows F."""
        F = np.atleast_2d(np.asarray(F, dtype=float))
        if F.shape[1] != self.X.shape[1]:
            raise ValueError(f"query dimension {F.shape[1]} does not match "
                             f"training dimension {self.X.shape[1]}")
        B = len(F)
        M = self.M
        K_T = self.task_cov.K_T
        kq = kernels.kernel_matrix(self.X, F, self.spec)       # (n, B)
        cross = np.kron(kq, K_T)[self.mask, :]                 # (obs, B*M)
        V = cho_solve((self.chol, True), cross)
        prior = (kernels.kernel_diag(F[:1], self.spec)[0] * K_T
                 + np.diag(self.noise.variances))
        means = np.empty((B, M))
        covs = np.empty((B, M, M))
        for b in range(B):
            block = cross[:, b * M:(b + 1) * M]
            vb = V[:, b * M:(b + 1) * M]
            means[b] = self.task_means + block.T @ self.alpha
            Sb = prior - block.T @ vb
            covs[b] = 0.5 * (Sb + Sb.T)
        return means, covs


def stacked_covariance(X, spec, task_cov: TaskCovariance,
                       noise: NoiseModel) -> np.ndarray:
    """Dense (nM x nM) covariance: gram(X) (x) K_T + I (x) diag(noise)."""
    K_A = kernels.gram(X, spec)
    n = len(K_A)
    C = np.kron(K_A, task_cov.K_T)
    diag = np.tile(noise.variances, n)
    C[np.diag_indices_from(C)] += diag
    return C


def stacked_nll(X, Y, spec, task_cov, noise, task_means) -> float:
    """Negative joint log-likelihood of the masked stacked system."""
    Y = np.asarray(Y, dtype=float)
    mask = ~np.isnan(Y).reshape(-1)
    C = stacked_covariance(X, spec, task_cov, noise)[:, :]
    C = C[np.ix_(mask, mask)]
    r = (Y - np.asarray(task_means)[None, :]).reshape(-1)[mask]
    L = kernels.chol_with_escalation(C, kernels.jitter_scale(spec))
    alpha = cho_solve((L, True), r)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(0.5 * r @ alpha + 0.5 * logdet + 0.5 * mask.sum() * LOG_2PI)


def kronecker_nll(X, Y, spec, task_cov, noise, task_means) -> float:
    """Same likelihood through Kronecker eigen-identities (complete data only).

    With K_A = U_A S_A U_A^T and D^{-1/2} K_T D^{-1/2} = U_T S_T U_T^T the
    stacked covariance factorizes so the solve and log-determinant reduce to
    per-eigenvalue scalars. Used as an independent check of the dense path.
    """
    Y = np.asarray(Y, dtype=float)
    if np.isnan(Y).any():
        raise ValueError("Kronecker evaluation requires complete task data")
    n, M = Y.shape
    K_A = kernels.gram(X, spec)
    d = noise.variances
    Dm12 = 1.0 / np.sqrt(d)
    Kt_tilde = Dm12[:, None] * task_cov.K_T * Dm12[None, :]
    s_a, U_A = np.linalg.eigh(K_A)
    s_t, U_T = np.linalg.eigh(Kt_tilde)
    R = (Y - np.asarray(task_means)[None, :]) * Dm12[None, :]
    # rotate residuals into the joint eigenbasis
    Rt = U_A.T @ R @ U_T
    lam = np.outer(s_a, s_t) + 1.0
    quad = float(np.sum(Rt ** 2 / lam))
    logdet = float(np.sum(np.log(lam))) + n * float(np.sum(np.log(d)))
    return 0.5 * quad + 0.5 * logdet + 0.5 * n * M * LOG_2PI


# -- parameter packing for the optimizer --------------------------------------

def _tril_indices(M):
    return [(i, j) for i in range(M) for j in range(i + 1)]


def _pack(task_means, spec, task_cov, noise, dim):
    theta_k, _ = kernels.pack_params(spec, dim)
    l_params = []
    for i, j in _tril_indices(task_cov.M):
        v = task_cov.L[i, j]
        l_params.append(math.log(max(v, 1e-12)) if i == j else v)
    return np.concatenate([np.asarray(task_means, float), theta_k,
                           l_params, np.log(noise.variances)])


def _unpack(theta, spec, M, dim):
    means = theta[:M]
    nk = 3 + dim  # log_sigma2 + D lengthscales + two lambdas
    theta_k = theta[M:M + nk]
    new_spec = kernels.apply_params(spec, theta_k, dim)
    L = np.zeros((M, M))
    pos = M + nk
    for i, j in _tril_indices(M):
        v = theta[pos]
        L[i, j] = math.exp(v) if i == j else v
        pos += 1
    noise = NoiseModel(np.exp(theta[pos:pos + M]))
    return means, new_spec, TaskCovariance(L), noise


def nll_and_grad(theta, X, Y, spec_template, M, dim, cache=None):
    """Packed NLL and gradient for the masked stacked system.

    Gradients use the trace identity with the Kronecker structure contracted
    directly: for dC = dK_A (x) K_T,
    tr(inner dC) = sum_pq dK_A[p,q] * (sum_ij inner[(p,i),(q,j)] K_T[i,j]),
    so one einsum over the task (or sample) axes serves every parameter in
    the corresponding block.
    """
    means, spec, task_cov, noise = _unpack(theta, spec_template, M, dim)
    Y = np.asarray(Y, dtype=float)
    n = len(Y)
    mask = ~np.isnan(Y).reshape(-1)
    idx = np.where(mask)[0]
    task_of = np.tile(np.arange(M), n)[mask]

    gg = kernels.gram_with_grads(X, spec, cache=cache)
    K_A = gg.K
    K_T = task_cov.K_T
    C = np.kron(K_A, K_T)
    C[np.diag_indices_from(C)] += np.tile(noise.variances, n)
    C = C[np.ix_(idx, idx)]
    r = (Y - means[None, :]).reshape(-1)[mask]

    L = kernels.chol_with_escalation(C, kernels.jitter_scale(spec))
    alpha = cho_solve((L, True), r)
    Cinv = cho_solve((L, True), np.eye(len(C)))
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    value = float(0.5 * r @ alpha + 0.5 * logdet + 0.5 * mask.sum() * LOG_2PI)

    inner = Cinv - np.outer(alpha, alpha)
    # scatter the masked inner matrix back onto the full stacked layout;
    # masked rows/columns contribute zero to every trace term
    inner_full = np.zeros((n * M, n * M))
    inner_full[np.ix_(idx, idx)] = inner
    inner4 = inner_full.reshape(n, M, n, M)
    W_samples = np.einsum("piqj,ij->pq", inner4, K_T)   # weights for dK_A
    W_tasks = np.einsum("piqj,pq->ij", inner4, K_A)     # weights for dK_T

    grad = np.empty_like(theta)
    for m in range(M):
        grad[m] = -float(alpha[task_of == m].sum())
    pos = M
    kblock = gg.contract(W_samples)
    grad[pos:pos + len(kblock)] = 0.5 * kblock
    pos += len(kblock)
    Lfac = task_cov.L
    for i, j in _tril_indices(M):
        E = np.zeros((M, M))
        E[i, j] = 1.0
        dKT = E @ Lfac.T + Lfac @ E.T
        g = 0.5 * float(np.sum(W_tasks * dKT))
        grad[pos] = g * Lfac[i, j] if i == j else g  # chain rule for log diag
        pos += 1
    diag_inner = np.diag(inner)
    for m in range(M):
        grad[pos] = 0.5 * noise.variances[m] * float(
            diag_inner[task_of == m].sum())
        pos += 1
    return value, grad


def fit_multitask(samples, config: MultitaskConfig | None = None,
                  tasks=None) -> MultitaskModel:
    """Maximize the joint marginal likelihood over all hyperparameters."""
    config = config or MultitaskConfig()
    X = feature_matrix(samples)
    all_iso = isotope_matrix(samples)
    if tasks is None:
        observed = [t for i, t in enumerate(ISOTOPE_NAMES)
                    if np.any(~np.isnan(all_iso[:, i]))]
        tasks = tuple(observed)
    else:
        tasks = tuple(tasks)
    if len(tasks) < 2:
        raise SiraError("multitask fitting needs at least 2 observed tasks")
    Y = isotope_matrix(samples, tasks)
    M = len(tasks)
    dim = X.shape[1]

    col_std = np.array([np.nanstd(Y[:, m]) for m in range(M)])
    col_std = np.maximum(col_std, 1e-3)
    col_mean = np.array([np.nanmean(Y[:, m]) for m in range(M)])

    spec = config.init_spec
    if spec is None:
        ls = np.maximum(np.std(X, axis=0), 1e-3)
        spec = kernels.feature_mixture(sigma2=0.5, lengthscales=ls,
                                       lambda1=0.5, lambda2=0.5)
    task_cov = TaskCovariance(np.diag(col_std))
    noise = NoiseModel(np.maximum(0.5 * col_std ** 2, 1e-6))

    theta0 = _pack(col_mean, spec, task_cov, noise, dim)
    cache = {}

    def objective(theta):
        return nll_and_grad(theta, X, Y, spec, M, dim, cache=cache)

    result = gradient_descent(objective, theta0, max_iter=config.epochs,
                              tol=config.tol,
                              init_step=config.learning_rate)
    means, new_spec, new_cov, new_noise = _unpack(result.theta, spec, M, dim)
    return MultitaskModel(tasks=tasks, spec=new_spec, task_cov=new_cov,
                          noise=new_noise, task_means=means, X=X, Y=Y,
                          feature_names=samples[0].features.names,
                          aggregation_mode="mean",
                          converged=result.converged,
                          nll_history=result.history, seed=config.seed)


def predict_multitask(model: MultitaskModel, features) -> PredictiveDistribution:
    return model.predict(features)


def feature_importance(model: MultitaskModel) -> ImportanceReport:
    """Reciprocal ARD lengthscales, per task, descending."""
    ls = model.spec.lengthscale_array(len(model.feature_names))
    importances = 1.0 / ls
    per_task = {}
    for task in model.tasks:
        ranked = sorted(zip(model.feature_names, importances),
                        key=lambda p: (-p[1], p[0]))
        per_task[task] = [(name, float(imp)) for name, imp in ranked]
    note = ("importances are shared across tasks: the Kronecker covariance "
            "uses one feature kernel for all tasks")
    return ImportanceReport(tasks=model.tasks, per_task=per_task, note=note)


def task_dependency(model: MultitaskModel,
                    sign_threshold: float = 0.1) -> TaskDependencyReport:
    corr = model.task_cov.correlation()
    signs = {}
    for i, ti in enumerate(model.tasks):
        for j, tj in enumerate(model.tasks):
            if i >= j:
                continue
            c = corr[i, j]
            signs[(ti, tj)] = ("positive" if c > sign_threshold
                               else "negative" if c < -sign_threshold
                               else "none")
    return TaskDependencyReport(tasks=model.tasks, correlation=corr,
                                L=model.task_cov.L.copy(), signs=signs)
