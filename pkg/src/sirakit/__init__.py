"""sirakit: isotope-ratio isoscape modeling and origin-claim verification."""

__version__ = "0.1.0"

from .datamodel import (AGGREGATION_MODES, ISOTOPE_NAMES, AtmosphericSeries,
                        FeatureVector, GeoLocation, IsotopeVector, Sample,
                        aggregate_features, apply_selection, attach_features,
                        delta_notation, drop_sparse_variables,
                        features_for_schema, ingest_samples,
                        read_atmospheric_csv, select_features,
                        write_atmospheric_csv, write_samples_csv)
from .errors import (ConfigError, CoverageError, FactorizationError,
                     ParseError, SiraError)
from .kernels import (KernelSpec, NoiseModel, TaskCovariance,
                      feature_mixture, gram, k_composite_spatial,
                      k_feature_mixture, k_matern32, k_periodic, k_rbf, k_rq,
                      kron_multitask, spatial_composite)
from .gp import (GPPosterior, PredictiveDistribution, fit_gp, nll, nll_grad,
                 optimize_hyperparameters, predict)
from .boosting import (BoostConfig, BoostedEnsemble, BoostedMixedModel,
                       GPRegressionModel, RegressionTree, fit_tree,
                       gpboost_train, ls_boost_train, predict_gb,
                       train_gp_regression)
from .multitask import (ImportanceReport, MultitaskConfig, MultitaskModel,
                        TaskDependencyReport, feature_importance,
                        fit_multitask, predict_multitask, task_dependency)
from .verify import (Claim, ExperimentCurve, PerturbationConfig,
                     VerificationResult, chi2_sf, destination_point,
                     haversine_km, perturb_location,
                     run_perturbation_experiment, verify)
from .raster import (RasterGrid, read_ascii_grid, render_isoscape,
                     write_ascii_grid)
from .evalharness import (ABLATION_LABELS, AblationConfig, MetricReport,
                          SyntheticWorldSpec, ablation_suite, generate_world,
                          kfold_cv, kfold_indices, prepared_samples, r2_score,
                          rmse, sample_correlated_fields)
from .serialize import load_model, model_id, save_model
