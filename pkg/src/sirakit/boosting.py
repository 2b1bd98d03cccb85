"""Gradient-boosted regression trees as the GP mean, trained jointly.

Training alternates two steps per round: (a) a few monotone descent
iterations on the GP covariance/noise parameters at the current ensemble
output, and (b) one Newton tree fit to the first/second derivatives of the
GP negative log-likelihood with respect to the per-sample mean values,
applied with a learning rate and a local step-halving guard so the joint
NLL never increases.

Trees split greedily on observed feature values by Newton gain; leaf values
are -sum(g)/sum(h). The stored leaf values absorb any local step halving,
so ensemble prediction is always f0 + learning_rate * sum(tree outputs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from . import gp, kernels
from .datamodel import feature_matrix, isotope_matrix, location_matrix
from .errors import SiraError
from .kernels import KernelSpec, NoiseModel

HESSIAN_FLOOR = 1e-6


@dataclass
class TreeNode:
    """One node in preorder storage; children index into the node list."""

    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class RegressionTree:
    nodes: list[TreeNode]

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(len(X))
        for i, row in enumerate(X):
            node = self.nodes[0]
            while not node.is_leaf:
                node = self.nodes[node.left] if row[node.feature] <= node.threshold \
                    else self.nodes[node.right]
            out[i] = node.value
        return out

    def scale_leaves(self, factor: float) -> None:
        for node in self.nodes:
            if node.is_leaf:
                node.value *= factor

    @property
    def n_leaves(self) -> int:
        return sum(1 for n in self.nodes if n.is_leaf)


def _leaf_value(g_sum: float, h_sum: float) -> float:
    return -g_sum / h_sum


def _best_split(X, g, h, idx, min_leaf):
    """Best (feature, threshold, gain) over observed values; None if no split.

    Samples are ordered by (value, g, h) so the scan and running sums do not
    depend on the original sample order; exact ties in gain break toward the
    smaller (feature, threshold).
    """
    g_tot = g[idx].sum()
    h_tot = h[idx].sum()
    parent_score = g_tot * g_tot / h_tot
    best = None
    for feature in range(X.shape[1]):
        values = X[idx, feature]
        order = np.lexsort((h[idx], g[idx], values))
        sv = values[order]
        cg = np.cumsum(g[idx][order])
        ch = np.cumsum(h[idx][order])
        for p in range(min_leaf - 1, len(sv) - min_leaf):
            if sv[p] == sv[p + 1]:
                continue
            gl, hl = cg[p], ch[p]
            gr, hr = g_tot - gl, h_tot - hl
            gain = 0.5 * (gl * gl / hl + gr * gr / hr - parent_score)
            threshold = float(sv[p])
            if best is None or gain > best[2] or (
                    gain == best[2] and (feature, threshold) < (best[0], best[1])):
                best = (feature, threshold, gain)
    if best is None or best[2] <= 1e-12:
        return None
    return best


def fit_tree(X, gradients, hessians, max_depth: int = 5,
             min_leaf: int = 5) -> RegressionTree:
    """Greedy Newton tree on (gradient, hessian) targets."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    g = np.asarray(gradients, dtype=float)
    h = np.maximum(np.asarray(hessians, dtype=float), HESSIAN_FLOOR)
    nodes: list[TreeNode] = []

    def build(idx, depth) -> int:
        node_id = len(nodes)
        nodes.append(TreeNode())
        split = None
        if depth < max_depth and len(idx) >= 2 * min_leaf:
            split = _best_split(X, g, h, idx, min_leaf)
        if split is None:
            nodes[node_id] = TreeNode(value=_leaf_value(g[idx].sum(), h[idx].sum()))
            return node_id
        feature, threshold, _ = split
        mask = X[idx, feature] <= threshold
        left = build(idx[mask], depth + 1)
        right = build(idx[~mask], depth + 1)
        nodes[node_id] = TreeNode(feature=feature, threshold=threshold,
                                  left=left, right=right)
        return node_id

    build(np.arange(len(g)), 0)
    return RegressionTree(nodes=nodes)


@dataclass
class BoostedEnsemble:
    f0: float
    learning_rate: float
    trees: list[RegressionTree] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(len(X), self.f0)
        if self.trees:
            out += self.learning_rate * sum(t.predict(X) for t in self.trees)
        return out

    @property
    def n_trees(self) -> int:
        return len(self.trees)


@dataclass
class BoostConfig:
    learning_rate: float = 0.03
    max_depth: int = 5
    rounds: int = 100
    min_leaf: int = 5
    inner_opt_iters: int = 10
    optimize_covariance: bool = True
    init_spec: KernelSpec | None = None
    init_noise: float | None = None
    divergence_factor: float = 10.0
    seed: int = 0


@dataclass
class BoostedMixedModel:
    """Trained boosted-tree mean plus exact GP correction on locations."""

    task: str
    ensemble: BoostedEnsemble
    spec: KernelSpec
    noise: NoiseModel
    posterior: gp.GPPosterior
    feature_names: tuple[str, ...]
    aggregation_mode: str = "mean"
    nll_history: list = field(default_factory=list)
    seed: int = 0

    def predict(self, locations, features) -> gp.PredictiveDistribution:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if features.shape[1] != len(self.feature_names):
            raise ValueError(
                f"feature dimension {features.shape[1]} does not match "
                f"model schema {len(self.feature_names)}")
        offsets = self.ensemble.predict(features)
        return gp.predict(self.posterior, offsets,
                          np.atleast_2d(np.asarray(locations, dtype=float)))


def _default_spatial_spec(X_loc, y) -> KernelSpec:
    span = max(np.ptp(X_loc[:, 0]), np.ptp(X_loc[:, 1]), 1.0)
    var = max(float(np.var(y)), 1e-6)
    return kernels.spatial_composite(sigma2=0.5 * var, lengthscale=span / 5.0,
                                     alpha=1.0, period=360.0)


def gpboost_train(samples, config: BoostConfig,
                  task: str = "d18O") -> BoostedMixedModel:
    """Alternating covariance optimization and Newton boosting."""
    usable = [s for s in samples if getattr(s.isotopes, task) is not None]
    if len(usable) < 20:
        raise SiraError(f"need at least 20 samples with {task} present, "
                        f"got {len(usable)}")
    X_feat = feature_matrix(usable)
    X_loc = location_matrix(usable)
    y = isotope_matrix(usable, (task,))[:, 0]
    feature_names = usable[0].features.names

    spec = config.init_spec or _default_spatial_spec(X_loc, y)
    noise_var = config.init_noise if config.init_noise is not None \
        else max(0.1 * float(np.var(y)), 1e-6)
    noise = NoiseModel(np.array([noise_var]))

    f0 = float(np.mean(y))
    F = np.full(len(y), f0)
    ensemble = BoostedEnsemble(f0=f0, learning_rate=config.learning_rate)

    history = []
    initial_nll = None
    cache = {}
    for _ in range(config.rounds):
        if config.optimize_covariance:
            spec, noise, _ = gp.optimize_hyperparameters(
                X_loc, y, F, spec, noise, max_iter=config.inner_opt_iters,
                cache=cache)
        C = kernels.gram(X_loc, spec)
        C[np.diag_indices_from(C)] += noise.single()
        L = kernels.chol_with_escalation(C, kernels.jitter_scale(spec))
        r = y - F
        Cinv = cho_solve((L, True), np.eye(len(C)))
        # Scaling first and second derivatives of the NLL by the noise
        # variance leaves the Newton step and split gains unchanged while
        # keeping the hessians O(1) regardless of the noise level.
        grad = -noise.single() * (Cinv @ r)
        hess = noise.single() * np.diag(Cinv)
        tree = fit_tree(X_feat, grad, hess, max_depth=config.max_depth,
                        min_leaf=config.min_leaf)
        update = tree.predict(X_feat)

        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        const = 0.5 * logdet + 0.5 * len(y) * gp.LOG_2PI

        def nll_of(F_test):
            rr = y - F_test
            return float(0.5 * rr @ cho_solve((L, True), rr) + const)

        current_nll = nll_of(F)
        if initial_nll is None:
            initial_nll = current_nll
        scale = 1.0
        accepted = False
        for _ in range(12):
            candidate = F + config.learning_rate * scale * update
            cand_nll = nll_of(candidate)
            if cand_nll <= current_nll + 1e-8:
                accepted = True
                break
            scale *= 0.5
        if accepted:
            if scale != 1.0:
                tree.scale_leaves(scale)
            ensemble.trees.append(tree)
            F = candidate
            current_nll = cand_nll
        history.append(current_nll)
        if current_nll - initial_nll > config.divergence_factor * max(
                1.0, abs(initial_nll)):
            raise SiraError(
                "boosting diverged: NLL rose from "
                f"{initial_nll:.4g} to {current_nll:.4g}")

    posterior = gp.fit_gp(X_loc, y, F, spec, noise)
    model = BoostedMixedModel(task=task, ensemble=ensemble, spec=spec,
                              noise=noise, posterior=posterior,
                              feature_names=tuple(feature_names),
                              nll_history=history, seed=config.seed)
    return model


def predict_gb(model: BoostedMixedModel, locations, features) -> gp.PredictiveDistribution:
    return model.predict(locations, features)


@dataclass
class GPRegressionModel:
    """Constant-mean GP on either locations or feature vectors."""

    task: str
    inputs: str                 # "location" or "features"
    f0: float
    spec: KernelSpec
    noise: NoiseModel
    posterior: gp.GPPosterior
    feature_names: tuple[str, ...]
    aggregation_mode: str = "mean"

    def predict(self, locations, features) -> gp.PredictiveDistribution:
        Q = locations if self.inputs == "location" else features
        return gp.predict(self.posterior, self.f0,
                          np.atleast_2d(np.asarray(Q, dtype=float)))


def default_feature_spec(X_feat, y) -> KernelSpec:
    """ARD mixture kernel initialized from per-dimension feature spread."""
    ls = np.maximum(np.std(X_feat, axis=0), 1e-3)
    var = max(float(np.var(y)), 1e-6)
    return kernels.feature_mixture(sigma2=var, lengthscales=ls,
                                   lambda1=0.5, lambda2=0.5)


def train_gp_regression(samples, task: str = "d18O", inputs: str = "location",
                        spec: KernelSpec | None = None,
                        noise_var: float | None = None,
                        opt_rounds: int = 10, inner_opt_iters: int = 10,
                        optimize_covariance: bool = True) -> GPRegressionModel:
    """Constant-mean exact GP, optimized in the same chunked schedule the
    boosted trainer uses so the learning-rate-zero ablation matches it."""
    usable = [s for s in samples if getattr(s.isotopes, task) is not None]
    if len(usable) < 2:
        raise SiraError(f"need at least 2 samples with {task} present")
    X_loc = location_matrix(usable)
    X_feat = feature_matrix(usable)
    y = isotope_matrix(usable, (task,))[:, 0]
    X = X_loc if inputs == "location" else X_feat
    if spec is None:
        spec = (_default_spatial_spec(X_loc, y) if inputs == "location"
                else default_feature_spec(X_feat, y))
    nv = noise_var if noise_var is not None \
        else max(0.1 * float(np.var(y)), 1e-6)
    noise = NoiseModel(np.array([nv]))
    f0 = float(np.mean(y))
    offsets = np.full(len(y), f0)
    if optimize_covariance:
        cache = {}
        for _ in range(opt_rounds):
            spec, noise, _ = gp.optimize_hyperparameters(
                X, y, offsets, spec, noise, max_iter=inner_opt_iters,
                cache=cache)
    posterior = gp.fit_gp(X, y, offsets, spec, noise)
    return GPRegressionModel(task=task, inputs=inputs, f0=f0, spec=spec,
                             noise=noise, posterior=posterior,
                             feature_names=tuple(usable[0].features.names))


def ls_boost_train(X, y, learning_rate=0.03, rounds=100, max_depth=5,
                   min_leaf=5) -> BoostedEnsemble:
    """Plain least-squares Newton boosting (no GP term): unit hessians."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    f0 = float(np.mean(y))
    F = np.full(len(y), f0)
    ensemble = BoostedEnsemble(f0=f0, learning_rate=learning_rate)
    ones = np.ones(len(y))
    for _ in range(rounds):
        g = F - y
        tree = fit_tree(X, g, ones, max_depth=max_depth, min_leaf=min_leaf)
        ensemble.trees.append(tree)
        F = F + learning_rate * tree.predict(X)
    return ensemble
