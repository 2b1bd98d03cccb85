"""Synthetic worlds, cross-validation, metrics, and the ablation table.

The synthetic world stands in for confidential field data: smooth analytic
atmospheric fields over a rectangular grid (with seasonal and interannual
structure), plus isotope values generated from linear and mildly nonlinear
mixes of the aggregated features, spatially correlated residual fields with
a chosen inter-task correlation, and per-task observation noise. Everything
is reproducible from one seed, and the generating parameters are returned
for oracle checks.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import boosting, multitask
from .datamodel import (ISOTOPE_NAMES, AtmosphericSeries, GeoLocation,
                        IsotopeVector, Sample, aggregate_features,
                        apply_selection, attach_features,
                        drop_sparse_variables, feature_matrix, isotope_matrix,
                        location_matrix, select_features)
from .errors import SiraError
from .gp import PredictiveDistribution

INFORMATIVE_VARIABLES = ("cloud_water", "precipitation",
                         "shortwave_radiation", "temperature", "water_vapour")

DEFAULT_TASK_CORRELATION = np.array([
    [1.00, 0.20, 0.90, -0.30],     # d18O
    [0.20, 1.00, 0.20, -0.20],     # d13C
    [0.90, 0.20, 1.00, -0.30],     # d2H
    [-0.30, -0.20, -0.30, 1.00],   # d34S
])

# task -> (intercept, {feature: coefficient}, {feature: tanh coefficient})
DEFAULT_LINKS = {
    "d18O": (24.0, {"temperature": 2.2, "water_vapour": 1.2},
             {"precipitation": 0.8}),
    "d13C": (-26.0, {"shortwave_radiation": 0.35, "temperature": -0.25}, {}),
    "d2H": (-45.0, {"temperature": 14.0, "water_vapour": 8.0},
            {"precipitation": 5.0}),
    "d34S": (5.0, {"cloud_water": 1.1, "shortwave_radiation": 0.7,
                   "water_vapour": -0.4}, {}),
}


@dataclass
class SyntheticWorldSpec:
    seed: int = 0
    lat_range: tuple = (35.0, 65.0)
    lon_range: tuple = (-10.0, 40.0)
    grid_cell_deg: float = 2.0
    years: int = 20
    start_year: int = 2000
    n_samples: int = 200
    n_noise_variables: int = 14
    n_sparse_variables: int = 0
    sparse_missing_fraction: float = 0.6
    residual_lengthscale_deg: float = 10.0
    residual_scales: tuple = (1.1, 0.25, 8.0, 1.0)
    noise_levels: tuple = (0.35, 0.8, 2.5, 0.45)
    task_correlation: np.ndarray = field(
        default_factory=lambda: DEFAULT_TASK_CORRELATION.copy())
    interannual_scale: float = 0.15
    seasonal_scale: float = 1.0

    def __post_init__(self):
        if self.lat_range[1] <= self.lat_range[0] or \
                self.lon_range[1] <= self.lon_range[0]:
            raise SiraError(f"degenerate world bounds "
                            f"{self.lat_range} x {self.lon_range}")


def _informative_field(name, lat, lon):
    if name == "temperature":
        return 25.0 - 0.45 * (lat - 35.0) + 3.0 * np.sin(2 * np.pi * lon / 60.0)
    if name == "precipitation":
        return (9.0 * np.exp(-((lat - 48.0) ** 2) / 400.0)
                + 2.5 * np.cos(2 * np.pi * lon / 80.0))
    if name == "water_vapour":
        return 12.0 + 6.0 * np.cos(2 * np.pi * lat / 70.0) \
            * np.sin(2 * np.pi * (lon + 20.0) / 90.0)
    if name == "cloud_water":
        return 0.3 + 0.2 * np.sin(2 * np.pi * (lat + lon) / 100.0) \
            + 0.004 * (lat - 50.0)
    if name == "shortwave_radiation":
        return (180.0 + 60.0 * np.cos(2 * np.pi * lat / 140.0)
                + 20.0 * np.sin(2 * np.pi * lon / 50.0))
    raise KeyError(name)


def _random_field_params(rng, n_terms=6):
    return {
        "amp": rng.uniform(0.4, 1.0, n_terms),
        "freq_lat": rng.uniform(0.1, 0.25, n_terms),
        "freq_lon": rng.uniform(0.1, 0.25, n_terms),
        "phase": rng.uniform(0.0, 2 * np.pi, n_terms),
    }


def _random_field(params, lat, lon):
    total = np.zeros_like(np.asarray(lat, dtype=float))
    for a, fl, fo, ph in zip(params["amp"], params["freq_lat"],
                             params["freq_lon"], params["phase"]):
        total = total + a * np.sin(2 * np.pi * (fl * lat + fo * lon) + ph)
    return total


def _grid_cells(spec):
    lats = np.arange(spec.lat_range[0] + spec.grid_cell_deg / 2,
                     spec.lat_range[1], spec.grid_cell_deg)
    lons = np.arange(spec.lon_range[0] + spec.grid_cell_deg / 2,
                     spec.lon_range[1], spec.grid_cell_deg)
    grid = [(la, lo) for la in lats for lo in lons]
    return np.array(grid)


@dataclass
class SyntheticWorld:
    spec: SyntheticWorldSpec
    samples: list
    series: list
    truth: dict


def generate_world(spec: SyntheticWorldSpec) -> SyntheticWorld:
    """Deterministic synthetic world: samples, atmospheric series, truth."""
    rng = np.random.default_rng(spec.seed)
    cells = _grid_cells(spec)
    if len(cells) < 4:
        raise SiraError("world grid has fewer than 4 cells; widen the bounds")
    years = list(range(spec.start_year, spec.start_year + spec.years))

    variables = {}
    for name in INFORMATIVE_VARIABLES:
        variables[name] = ("informative", None)
    for i in range(spec.n_noise_variables):
        variables[f"noise_{i + 1:02d}"] = ("noise", _random_field_params(rng))
    for i in range(spec.n_sparse_variables):
        variables[f"sparse_{i + 1:02d}"] = ("sparse", _random_field_params(rng))

    series_list = []
    for name in sorted(variables):
        kind, params = variables[name]
        base = (_informative_field(name, cells[:, 0], cells[:, 1])
                if kind == "informative"
                else _random_field(params, cells[:, 0], cells[:, 1]))
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = spec.seasonal_scale * rng.uniform(0.5, 1.5)
        yearly = spec.interannual_scale * rng.standard_normal(len(years))
        months = np.arange(12)
        seasonal = amp * np.sin(2 * np.pi * months / 12.0 + phase)
        values = (base[:, None, None] + seasonal[None, None, :]
                  + yearly[None, :, None])
        if kind == "sparse":
            missing = rng.random(values.shape) < spec.sparse_missing_fraction
            values = np.where(missing, np.nan, values)
        series_list.append(AtmosphericSeries(
            name, cells.copy(), years, values))

    lats = rng.uniform(spec.lat_range[0], spec.lat_range[1], spec.n_samples)
    lons = rng.uniform(spec.lon_range[0], spec.lon_range[1], spec.n_samples)
    locations = [GeoLocation(la, lo) for la, lo in zip(lats, lons)]

    informative_series = [s for s in series_list
                          if s.variable in INFORMATIVE_VARIABLES]
    agg = np.array([
        aggregate_features(informative_series, loc, "mean").values
        for loc in locations
    ])
    feat_names = sorted(INFORMATIVE_VARIABLES)
    feat_mean = agg.mean(axis=0)
    feat_std = np.maximum(agg.std(axis=0), 1e-9)
    zscores = {name: (agg[:, i] - feat_mean[i]) / feat_std[i]
               for i, name in enumerate(feat_names)}

    link_values = np.zeros((spec.n_samples, len(ISOTOPE_NAMES)))
    for t, task in enumerate(ISOTOPE_NAMES):
        intercept, linear, tanh_terms = DEFAULT_LINKS[task]
        link = np.full(spec.n_samples, intercept)
        for fname, coef in linear.items():
            link += coef * zscores[fname]
        for fname, coef in tanh_terms.items():
            link += coef * np.tanh(zscores[fname])
        link_values[:, t] = link

    residuals = sample_correlated_fields(
        rng, np.column_stack([lats, lons]), spec.residual_lengthscale_deg,
        spec.task_correlation, np.asarray(spec.residual_scales))
    noise = rng.standard_normal((spec.n_samples, len(ISOTOPE_NAMES))) \
        * np.asarray(spec.noise_levels)[None, :]

    iso_values = link_values + residuals + noise
    samples = []
    for i, loc in enumerate(locations):
        samples.append(Sample(
            location=loc,
            isotopes=IsotopeVector(**{task: float(iso_values[i, t])
                                      for t, task in enumerate(ISOTOPE_NAMES)})))

    truth = {
        "seed": spec.seed,
        "informative_variables": list(INFORMATIVE_VARIABLES),
        "noise_variables": [n for n, (k, _) in sorted(variables.items())
                            if k == "noise"],
        "sparse_variables": [n for n, (k, _) in sorted(variables.items())
                             if k == "sparse"],
        "links": DEFAULT_LINKS,
        "feature_normalization": dict(zip(feat_names,
                                          zip(feat_mean, feat_std))),
        "task_correlation": np.asarray(spec.task_correlation),
        "residual_scales": np.asarray(spec.residual_scales),
        "noise_levels": np.asarray(spec.noise_levels),
        "link_values": link_values,
        "residuals": residuals,
    }
    return SyntheticWorld(spec=spec, samples=samples, series=series_list,
                          truth=truth)


def prepared_samples(world: SyntheticWorld, mode: str = "mean",
                     drop_threshold: float = 0.5,
                     select_k: int | None = None):
    """World samples run through the standard ingestion pipeline."""
    series = drop_sparse_variables(world.series, world.samples,
                                   drop_threshold)
    samples = attach_features(world.samples, series, mode)
    if select_k is not None:
        indices = select_features(samples, select_k)
        samples = apply_selection(samples, indices)
    return samples, series


def sample_correlated_fields(rng, locations, lengthscale, correlation,
                             scales) -> np.ndarray:
    """Draw M task-correlated smooth Gaussian fields at n locations.

    Each latent field is a unit-variance RBF draw over locations; tasks mix
    them through the Cholesky factor of the correlation matrix, then scale.
    """
    locations = np.asarray(locations, dtype=float)
    n = len(locations)
    correlation = np.asarray(correlation, dtype=float)
    M = len(correlation)
    diff = locations[:, None, :] - locations[None, :, :]
    K = np.exp(-0.5 * np.sum(diff ** 2, axis=-1) / lengthscale ** 2)
    K[np.diag_indices_from(K)] += 1e-8
    Lk = np.linalg.cholesky(K)
    Z = Lk @ rng.standard_normal((n, M))
    Lc = np.linalg.cholesky(correlation + 1e-10 * np.eye(M))
    return (Z @ Lc.T) * np.asarray(scales)[None, :]


# -- metrics and cross-validation ---------------------------------------------

def r2_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -np.inf
    return 1.0 - ss_res / ss_tot


def rmse(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


@dataclass
class MetricReport:
    label: str
    folds: int
    seed: int
    r2: dict                    # task -> mean R2 across folds
    rmse: dict                  # task -> mean RMSE across folds
    fold_hash: str
    split_description: str = "k-fold CV (assumed protocol: 80:20, k=5)"


def kfold_indices(n, k, seed):
    """Deterministic shuffled k-fold split; folds are disjoint and cover 0..n-1."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    if min(len(f) for f in folds) < 2:
        raise SiraError(f"fold smaller than 2 samples with n={n}, k={k}")
    out = []
    for i in range(k):
        test = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, test))
    return out


def fold_digest(folds) -> str:
    h = hashlib.sha256()
    for train, test in folds:
        h.update(np.asarray(test, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


class _PerTaskTrainer:
    """Fits one single-task model per isotope task."""

    def __init__(self, make_model):
        self.make_model = make_model
        self.models = {}

    def fit(self, samples, tasks):
        for task in tasks:
            self.models[task] = self.make_model(samples, task)
        return self

    def predict_task(self, task, locations, features):
        return np.asarray(self.models[task].predict(locations, features).mean)


class _LSBoostModel:
    def __init__(self, ensemble):
        self.ensemble = ensemble

    def predict(self, locations, features):
        return PredictiveDistribution(mean=self.ensemble.predict(features))


class _MultitaskTrainer:
    def __init__(self, config):
        self.config = config

    def fit(self, samples, tasks):
        self.model = multitask.fit_multitask(samples, self.config,
                                             tasks=tasks)
        return self

    def predict_task(self, task, locations, features):
        means, _ = self.model.predict_batch(features)
        return means[:, self.model.tasks.index(task)]


@dataclass
class AblationConfig:
    k: int = 5
    seed: int = 0
    tasks: tuple = ISOTOPE_NAMES
    boost_rounds: int = 100
    boost_learning_rate: float = 0.03
    boost_max_depth: int = 5
    boost_inner_iters: int = 10
    gp_opt_rounds: int = 10
    gp_inner_iters: int = 10
    mtg_epochs: int = 500
    mtg_learning_rate: float = 0.01


ABLATION_LABELS = ("Boosting", "GPR", "Boosting + GPR", "Multivariate GP",
                   "Multivariate and Multitasking GP")


def _make_trainers(config: AblationConfig):
    def ls_boost(samples, task):
        usable = [s for s in samples
                  if getattr(s.isotopes, task) is not None]
        X = feature_matrix(usable)
        y = isotope_matrix(usable, (task,))[:, 0]
        ens = boosting.ls_boost_train(
            X, y, learning_rate=config.boost_learning_rate,
            rounds=config.boost_rounds, max_depth=config.boost_max_depth)
        return _LSBoostModel(ens)

    def gp_location(samples, task):
        return boosting.train_gp_regression(
            samples, task, inputs="location",
            opt_rounds=config.gp_opt_rounds,
            inner_opt_iters=config.gp_inner_iters)

    def gp_features(samples, task):
        return boosting.train_gp_regression(
            samples, task, inputs="features",
            opt_rounds=config.gp_opt_rounds,
            inner_opt_iters=config.gp_inner_iters)

    def gb(samples, task):
        cfg = boosting.BoostConfig(
            learning_rate=config.boost_learning_rate,
            max_depth=config.boost_max_depth, rounds=config.boost_rounds,
            inner_opt_iters=config.boost_inner_iters, seed=config.seed)
        return boosting.gpboost_train(samples, cfg, task=task)

    mtg_config = multitask.MultitaskConfig(
        learning_rate=config.mtg_learning_rate, epochs=config.mtg_epochs,
        seed=config.seed)
    return {
        "Boosting": lambda: _PerTaskTrainer(ls_boost),
        "GPR": lambda: _PerTaskTrainer(gp_location),
        "Boosting + GPR": lambda: _PerTaskTrainer(gb),
        "Multivariate GP": lambda: _PerTaskTrainer(gp_features),
        "Multivariate and Multitasking GP": lambda: _MultitaskTrainer(mtg_config),
    }


def _evaluate_trainer(make_trainer, samples, folds, tasks, seed, label):
    r2_per_task = {t: [] for t in tasks}
    rmse_per_task = {t: [] for t in tasks}
    for train_idx, test_idx in folds:
        train = [samples[i] for i in train_idx]
        test = [samples[i] for i in test_idx]
        trainer = make_trainer().fit(train, tasks)
        loc = location_matrix(test)
        feat = feature_matrix(test)
        iso = isotope_matrix(test, tasks)
        for t, task in enumerate(tasks):
            present = ~np.isnan(iso[:, t])
            if present.sum() < 2:
                continue
            pred = trainer.predict_task(task, loc[present], feat[present])
            r2_per_task[task].append(r2_score(iso[present, t], pred))
            rmse_per_task[task].append(rmse(iso[present, t], pred))
    return MetricReport(
        label=label, folds=len(folds), seed=seed,
        r2={t: float(np.mean(v)) for t, v in r2_per_task.items() if v},
        rmse={t: float(np.mean(v)) for t, v in rmse_per_task.items() if v},
        fold_hash=fold_digest(folds))


def kfold_cv(samples, k, make_trainer, tasks=ISOTOPE_NAMES, seed=0,
             label="model") -> MetricReport:
    """Mean held-out metrics across a deterministic k-fold split."""
    folds = kfold_indices(len(samples), k, seed)
    return _evaluate_trainer(make_trainer, samples, folds, tuple(tasks),
                             seed, label)


def ablation_suite(samples, config: AblationConfig | None = None) -> dict:
    """All five model variants evaluated on identical folds."""
    config = config or AblationConfig()
    folds = kfold_indices(len(samples), config.k, config.seed)
    trainers = _make_trainers(config)
    reports = {}
    for label in ABLATION_LABELS:
        reports[label] = _evaluate_trainer(
            trainers[label], samples, folds, tuple(config.tasks),
            config.seed, label)
    return reports
