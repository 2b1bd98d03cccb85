"""Origin-claim hypothesis testing and the distance-perturbation experiment.

A claim pairs a measured isotope vector with a claimed origin. The fitted
multi-task model supplies a predictive mean and covariance at the claimed
origin; the squared Mahalanobis distance of the measurement is referred to
a chi-squared law with one degree of freedom per present isotope. Claims
with upper-tail probability below the significance level are rejected.

The experiment harness displaces true sample locations by a fixed geodesic
distance along random bearings and reports the fraction of rejected
(therefore correctly caught) claims per distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import GeoLocation, IsotopeVector, features_for_schema
from .errors import CoverageError, FactorizationError
from .gp import LOG_2PI

EARTH_RADIUS_KM = 6371.0088

_GAMMA_EPS = 1e-15
_GAMMA_ITMAX = 500


def haversine_km(a: GeoLocation, b: GeoLocation) -> float:
    """Great-circle distance on the mean-radius sphere."""
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2.0) ** 2 + \
        math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def destination_point(origin: GeoLocation, bearing_rad: float,
                      distance_km: float) -> GeoLocation:
    """Spherical destination along an initial bearing."""
    delta = distance_km / EARTH_RADIUS_KM
    lat1 = math.radians(origin.lat)
    lon1 = math.radians(origin.lon)
    sin_lat2 = (math.sin(lat1) * math.cos(delta)
                + math.cos(lat1) * math.sin(delta) * math.cos(bearing_rad))
    lat2 = math.asin(max(-1.0, min(1.0, sin_lat2)))
    lon2 = lon1 + math.atan2(
        math.sin(bearing_rad) * math.sin(delta) * math.cos(lat1),
        math.cos(delta) - math.sin(lat1) * sin_lat2)
    return GeoLocation(math.degrees(lat2), math.degrees(lon2))


def perturb_location(x: GeoLocation, distance_km: float, rng) -> GeoLocation:
    """Displace x by a geodesic distance along a uniformly random bearing."""
    if distance_km == 0.0:
        return x
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    bearing = rng.uniform(0.0, 2.0 * math.pi)
    return destination_point(x, bearing, distance_km)


def _gamma_q_series(a: float, x: float) -> float:
    """Q(a, x) = 1 - P(a, x) with P from the lower series expansion."""
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_GAMMA_ITMAX):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    p = total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    return max(0.0, min(1.0, 1.0 - p))


def _gamma_q_contfrac(a: float, x: float) -> float:
    """Q(a, x) by modified Lentz continued fraction."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_ITMAX + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    q = math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    return max(0.0, min(1.0, q))


def chi2_sf(x: float, dof: int) -> float:
    """Upper-tail probability of the chi-squared distribution.

    Regularized upper incomplete gamma Q(dof/2, x/2): series expansion for
    x < dof + 1, continued fraction otherwise.
    """
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    if x < 0:
        raise ValueError(f"statistic must be nonnegative, got {x}")
    if x == 0.0:
        return 1.0
    a = dof / 2.0
    if x < dof + 1.0:
        return _gamma_q_series(a, x / 2.0)
    return _gamma_q_contfrac(a, x / 2.0)


@dataclass
class Claim:
    measured: IsotopeVector
    claimed_origin: GeoLocation
    alpha: float = 0.05
    claim_id: str = ""

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass
class VerificationResult:
    claim_id: str
    tasks: tuple[str, ...]
    mu_mod: np.ndarray
    sigma_mod: np.ndarray
    chi2: float
    dof: int
    p_value: float
    decision: str               # "consistent" or "rejected"
    log_likelihood: float


def _restricted_prediction(model, features, tasks):
    mean, cov = model.predict_batch(np.atleast_2d(features))
    sel = [model.tasks.index(t) for t in tasks]
    return mean[0][sel], cov[0][np.ix_(sel, sel)]


def _mahalanobis_and_logdet(residual, sigma):
    """chi2 statistic and log|Sigma|, escalating jitter on singular Sigma."""
    scale = float(np.trace(sigma)) / len(sigma)
    jitter = 0.0
    for _ in range(8):
        try:
            L = np.linalg.cholesky(sigma + jitter * np.eye(len(sigma)))
            z = np.linalg.solve(L, residual)
            chi2 = float(z @ z)
            logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
            return chi2, logdet
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-10 * max(scale, 1e-300))
    raise FactorizationError("predictive covariance is singular")


def verify(model, claim: Claim, series_list) -> VerificationResult:
    """Chi-squared consistency test of a claim against the fitted model."""
    tasks = tuple(t for t in model.tasks
                  if getattr(claim.measured, t) is not None)
    if not tasks:
        raise ValueError("no measured isotope overlaps the model's tasks")
    features = features_for_schema(series_list, claim.claimed_origin,
                                   model.feature_names)
    mu, sigma = _restricted_prediction(model, features, tasks)
    y = np.array([getattr(claim.measured, t) for t in tasks], dtype=float)
    residual = y - mu
    chi2, logdet = _mahalanobis_and_logdet(residual, sigma)
    dof = len(tasks)
    p_value = chi2_sf(chi2, dof)
    log_likelihood = -0.5 * chi2 - 0.5 * logdet - 0.5 * dof * LOG_2PI
    decision = "rejected" if p_value < claim.alpha else "consistent"
    return VerificationResult(claim_id=claim.claim_id, tasks=tasks,
                              mu_mod=mu, sigma_mod=sigma, chi2=chi2, dof=dof,
                              p_value=p_value, decision=decision,
                              log_likelihood=log_likelihood)


@dataclass
class PerturbationConfig:
    distances_km: tuple = tuple(range(500, 5001, 500))
    trials: int = 100
    seed: int = 0
    alpha: float = 0.05
    displacement: str = "fixed"     # or "gaussian": distance ~ |N(0, d^2)|
    max_retries: int = 20

    def __post_init__(self):
        if any(d <= 0 for d in self.distances_km):
            raise ValueError("perturbation distances must be positive")
        if self.trials < 1:
            raise ValueError("need at least one trial per distance")
        if self.displacement not in ("fixed", "gaussian"):
            raise ValueError(f"unknown displacement rule {self.displacement!r}")


@dataclass
class ExperimentRow:
    d_km: float
    trials: int
    rejections: int
    skipped: int = 0

    @property
    def accuracy(self) -> float:
        return self.rejections / self.trials if self.trials else 0.0


@dataclass
class ExperimentCurve:
    rows: list[ExperimentRow] = field(default_factory=list)
    seed: int = 0
    alpha: float = 0.05


def _trial_rng(seed, d_index, trial):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(d_index, trial)))


def run_perturbation_experiment(model, test_samples, series_list,
                                config: PerturbationConfig) -> ExperimentCurve:
    """Rejection rate of origin claims displaced by each distance.

    Each (distance, trial) pair draws from its own RNG stream derived from
    the master seed, so results do not depend on trial execution order.
    Perturbed points that leave atmospheric coverage are re-drawn up to
    `max_retries` times, then skipped and counted.
    """
    if not test_samples:
        raise ValueError("no test samples supplied")
    curve = ExperimentCurve(seed=config.seed, alpha=config.alpha)
    for d_index, d in enumerate(config.distances_km):
        rejections = 0
        completed = 0
        skipped = 0
        for trial in range(config.trials):
            rng = _trial_rng(config.seed, d_index, trial)
            sample = test_samples[trial % len(test_samples)]
            distance = d
            if config.displacement == "gaussian":
                distance = abs(rng.normal(0.0, d))
            result = None
            for _ in range(config.max_retries):
                moved = perturb_location(sample.location, distance, rng)
                claim = Claim(measured=sample.isotopes, claimed_origin=moved,
                              alpha=config.alpha)
                try:
                    result = verify(model, claim, series_list)
                except CoverageError:
                    continue
                break
            if result is None:
                skipped += 1
                continue
            completed += 1
            if result.decision == "rejected":
                rejections += 1
        curve.rows.append(ExperimentRow(d_km=float(d), trials=completed,
                                        rejections=rejections,
                                        skipped=skipped))
    return curve
