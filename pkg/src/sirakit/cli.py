"""Command-line pipeline: synth, ingest, train, predict, verify, isoscape,
importance, experiment, eval.

Commands compose through files only. A plain-text key=value config file can
seed any run; --set key=value flags override it. Unknown keys are rejected
and the fully resolved configuration is logged to stderr and echoed next to
outputs. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, boosting, evalharness, multitask, raster, serialize
from .verify import (Claim, PerturbationConfig, run_perturbation_experiment,
                     verify as verify_claim)
from .datamodel import (ISOTOPE_NAMES, GeoLocation, IsotopeVector,
                        apply_selection, attach_features,
                        drop_sparse_variables, feature_matrix, ingest_samples,
                        isotope_matrix, location_matrix, read_atmospheric_csv,
                        select_features, write_atmospheric_csv,
                        write_samples_csv)
from .errors import ConfigError, ParseError, SiraError

DEFAULT_CONFIG = {
    "seed": "0",
    "alpha": "0.05",
    "aggregation": "mean",
    "select_k": "8",
    "drop_threshold": "0.5",
    "threads": "1",
    "gb.learning_rate": "0.03",
    "gb.max_depth": "5",
    "gb.rounds": "100",
    "gb.min_leaf": "5",
    "gb.inner_iters": "10",
    "mtg.learning_rate": "0.01",
    "mtg.epochs": "500",
    "eval.folds": "5",
    "experiment.trials": "100",
    "experiment.distances": "500:5000:500",
    "experiment.displacement": "fixed",
    "synth.n_samples": "200",
    "synth.lat_range": "35,65",
    "synth.lon_range": "-10,40",
    "synth.grid_cell": "2.0",
    "synth.noise_variables": "14",
    "synth.sparse_variables": "6",
}

SELECTION_NOTE = ("feature_selection=spearman_topk_union "
                  "(heuristic stand-in; no canonical method prescribed)")


class RunConfig:
    """Defaults, then config-file values, then --set overrides."""

    def __init__(self, path=None, overrides=()):
        self.values = dict(DEFAULT_CONFIG)
        if path:
            for key, value in self._read_file(path):
                self._assign(key, value, f"config file {path}")
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            self._assign(key.strip(), value.strip(), "--set override")

    @staticmethod
    def _read_file(path):
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ParseError(path, lineno, "expected key=value")
                key, value = line.split("=", 1)
                pairs.append((key.strip(), value.strip()))
        return pairs

    def _assign(self, key, value, source):
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown config key {key!r} ({source})")
        self.values[key] = value

    def get(self, key):
        return self.values[key]

    def get_int(self, key):
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"config {key}={self.values[key]!r} "
                              "is not an integer") from None

    def get_float(self, key):
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"config {key}={self.values[key]!r} "
                              "is not a number") from None

    def get_pair(self, key):
        parts = self.values[key].split(",")
        if len(parts) != 2:
            raise ConfigError(f"config {key}={self.values[key]!r} "
                              "is not 'a,b'")
        return float(parts[0]), float(parts[1])

    def distances(self, key):
        text = self.values[key]
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            out = tuple(np.arange(start, stop + 1e-9, step))
        else:
            out = tuple(float(p) for p in text.split(",") if p)
        if not out:
            raise ConfigError(f"config {key}={text!r} yields no distances")
        return out

    def log(self, command):
        for key in sorted(self.values):
            print(f"config[{command}] {key}={self.values[key]}",
                  file=sys.stderr)

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self.values):
                fh.write(f"{key}={self.values[key]}\n")


def _float_text(v) -> str:
    return str(float(v))


# -- dataset bundle ------------------------------------------------------------

def write_bundle(out_dir, samples, schema, mode, config):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_samples_csv(out / "samples.csv", samples)
    with open(out / "features.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lat", "lon"] + list(schema))
        for s in samples:
            writer.writerow([_float_text(s.location.lat),
                             _float_text(s.location.lon)]
                            + [_float_text(v) for v in s.features.values])
    serialize.write_schema_manifest(out / "schema.txt", schema, mode,
                                    notes=[SELECTION_NOTE])
    config.dump(out / "config.txt")


def read_bundle(bundle_dir):
    bundle = Path(bundle_dir)
    samples = ingest_samples(bundle / "samples.csv")
    schema, mode = serialize.read_schema_manifest(bundle / "schema.txt")
    from .datamodel import FeatureVector, Sample
    with open(bundle / "features.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[2:] != list(schema):
            raise SiraError(f"{bundle}/features.csv columns do not match "
                            "schema.txt")
        rows = [np.array([float(v) for v in row[2:]]) for row in reader]
    if len(rows) != len(samples):
        raise SiraError(f"{bundle}: features.csv row count does not match "
                        "samples.csv")
    out = [Sample(location=s.location, isotopes=s.isotopes,
                  features=FeatureVector(names=tuple(schema), values=row))
           for s, row in zip(samples, rows)]
    return out, schema, mode


# -- claims --------------------------------------------------------------------

CLAIM_HEADER = ["claim_id", "lat", "lon"] + list(ISOTOPE_NAMES)


def read_claims_csv(path, alpha):
    claims = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CLAIM_HEADER:
            raise ParseError(path, 1,
                             f"expected header {','.join(CLAIM_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CLAIM_HEADER):
                raise ParseError(path, lineno,
                                 f"expected {len(CLAIM_HEADER)} fields")
            try:
                origin = GeoLocation(float(row[1]), float(row[2]))
                iso = {name: (float(cell) if cell.strip() else None)
                       for name, cell in zip(ISOTOPE_NAMES, row[3:])}
                measured = IsotopeVector(**iso)
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            claims.append(Claim(measured=measured, claimed_origin=origin,
                                alpha=alpha, claim_id=row[0]))
    return claims


# -- commands ------------------------------------------------------------------

def cmd_synth(args, config):
    spec = evalharness.SyntheticWorldSpec(
        seed=config.get_int("seed"),
        lat_range=config.get_pair("synth.lat_range"),
        lon_range=config.get_pair("synth.lon_range"),
        grid_cell_deg=config.get_float("synth.grid_cell"),
        n_samples=config.get_int("synth.n_samples"),
        n_noise_variables=config.get_int("synth.noise_variables"),
        n_sparse_variables=config.get_int("synth.sparse_variables"))
    world = evalharness.generate_world(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_samples_csv(out / "samples.csv", world.samples)
    write_atmospheric_csv(out / "atmospheric.csv", world.series)
    config.dump(out / "config.txt")
    print(f"synth: wrote {len(world.samples)} samples, "
          f"{len(world.series)} variables to {out}")
    return 0


def cmd_ingest(args, config):
    samples = ingest_samples(args.samples)
    series = read_atmospheric_csv(args.atmospheric)
    kept = drop_sparse_variables(series, samples,
                                 config.get_float("drop_threshold"))
    mode = config.get("aggregation")
    samples = attach_features(samples, kept, mode)
    k = config.get_int("select_k")
    if k > 0:
        indices = select_features(samples, k)
        samples = apply_selection(samples, indices)
    schema = samples[0].features.names
    write_bundle(args.out, samples, schema, mode, config)
    print(f"ingest: {len(samples)} samples, {len(series)} variables read, "
          f"{len(kept)} kept, {len(schema)} features -> {args.out}")
    return 0


def _train_seeded(samples, config, model_kind, task):
    seed = config.get_int("seed")
    if model_kind == "gb":
        cfg = boosting.BoostConfig(
            learning_rate=config.get_float("gb.learning_rate"),
            max_depth=config.get_int("gb.max_depth"),
            rounds=config.get_int("gb.rounds"),
            min_leaf=config.get_int("gb.min_leaf"),
            inner_opt_iters=config.get_int("gb.inner_iters"),
            seed=seed)
        return boosting.gpboost_train(samples, cfg, task=task)
    if model_kind == "mtg":
        cfg = multitask.MultitaskConfig(
            learning_rate=config.get_float("mtg.learning_rate"),
            epochs=config.get_int("mtg.epochs"), seed=seed)
        return multitask.fit_multitask(samples, cfg)
    raise ConfigError(f"unknown model kind {model_kind!r}")


def cmd_train(args, config):
    samples, schema, mode = read_bundle(args.dataset)
    model = _train_seeded(samples, config, args.model, args.task)
    model.aggregation_mode = mode
    serialize.save_model(model, args.out)
    manifest = Path(args.out).with_suffix(".schema.txt")
    serialize.write_schema_manifest(manifest, schema, mode,
                                    notes=[SELECTION_NOTE])
    print(f"train: {args.model} model on {len(samples)} samples -> "
          f"{args.out} (schema: {manifest})")
    return 0


def cmd_predict(args, config):
    model = serialize.load_model(args.model)
    samples, schema, _ = read_bundle(args.dataset)
    if tuple(schema) != tuple(model.feature_names):
        raise SiraError("dataset schema does not match the model schema")
    loc = location_matrix(samples)
    feat = feature_matrix(samples)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if hasattr(model, "tasks"):
            tasks = model.tasks
            writer.writerow(["lat", "lon"]
                            + [f"mean_{t}" for t in tasks]
                            + [f"std_{t}" for t in tasks])
            means, covs = model.predict_batch(feat)
            for i, s in enumerate(samples):
                stds = np.sqrt(np.maximum(np.diag(covs[i]), 0.0))
                writer.writerow(
                    [_float_text(s.location.lat), _float_text(s.location.lon)]
                    + [_float_text(v) for v in means[i]]
                    + [_float_text(v) for v in stds])
        else:
            writer.writerow(["lat", "lon", f"mean_{model.task}",
                             f"std_{model.task}"])
            dist = model.predict(loc, feat)
            for i, s in enumerate(samples):
                writer.writerow(
                    [_float_text(s.location.lat), _float_text(s.location.lon),
                     _float_text(dist.mean[i]),
                     _float_text(float(np.sqrt(dist.variance[i])))])
    print(f"predict: wrote {len(samples)} rows to {args.out}")
    return 0


def cmd_verify(args, config):
    model = serialize.load_model(args.model)
    if not hasattr(model, "tasks"):
        raise SiraError("verification requires a multi-task (mtg) model")
    series = read_atmospheric_csv(args.atmospheric)
    alpha = config.get_float("alpha")
    claims = read_claims_csv(args.claims, alpha)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["claim_id", "chi2", "dof", "p_value", "decision"]
                        + [f"mu_{t}" for t in model.tasks]
                        + [f"var_{t}" for t in model.tasks])
        for claim in claims:
            result = verify_claim(model, claim, series)
            mu = {t: "" for t in model.tasks}
            var = {t: "" for t in model.tasks}
            for i, t in enumerate(result.tasks):
                mu[t] = _float_text(result.mu_mod[i])
                var[t] = _float_text(result.sigma_mod[i, i])
            writer.writerow([claim.claim_id, _float_text(result.chi2),
                             result.dof, _float_text(result.p_value),
                             result.decision]
                            + [mu[t] for t in model.tasks]
                            + [var[t] for t in model.tasks])
            print(f"claim {claim.claim_id}: chi2={result.chi2:.4f} "
                  f"dof={result.dof} p={result.p_value:.4g} "
                  f"-> {result.decision}")
    print(f"verify: wrote {len(claims)} rows to {args.out}")
    return 0


def cmd_isoscape(args, config):
    model = serialize.load_model(args.model)
    series = read_atmospheric_csv(args.atmospheric)
    bounds = tuple(float(v) for v in args.bounds.split(","))
    if len(bounds) != 4:
        raise ConfigError("--bounds expects lat_min,lat_max,lon_min,lon_max")
    task = args.task or (model.tasks[0] if hasattr(model, "tasks")
                         else model.task)
    mean_grid, std_grid = raster.render_isoscape(
        model, series, bounds, args.cell_size, task,
        threads=config.get_int("threads"))
    prefix = Path(args.out)
    mean_path = prefix.with_suffix(".mean.asc")
    std_path = prefix.with_suffix(".std.asc")
    raster.write_ascii_grid(mean_grid, mean_path)
    raster.write_ascii_grid(std_grid, std_path)
    meta_path = prefix.with_suffix(".meta")
    with open(meta_path, "w", encoding="utf-8") as fh:
        fh.write(f"model_id={serialize.model_id(args.model)}\n")
        fh.write(f"task={task}\n")
        fh.write(f"timestamp={time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}\n")
    print(f"isoscape: wrote {mean_path}, {std_path}, {meta_path}")
    return 0


def cmd_importance(args, config):
    model = serialize.load_model(args.model)
    if not hasattr(model, "tasks"):
        raise SiraError("importance reports require a multi-task (mtg) model")
    report = multitask.feature_importance(model)
    dep = multitask.task_dependency(model)
    prefix = Path(args.out)
    imp_path = prefix.with_suffix(".importance.csv")
    with open(imp_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "rank", "feature", "importance"])
        for task, rank, name, imp in report.rows():
            writer.writerow([task, rank, name, _float_text(imp)])
    dep_path = prefix.with_suffix(".task_dependency.csv")
    with open(dep_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_i", "task_j", "correlation"])
        for ti, tj, c in dep.rows():
            writer.writerow([ti, tj, _float_text(c)])
    print(f"importance: wrote {imp_path} and {dep_path}")
    print(f"note: {report.note}")
    return 0


def cmd_experiment(args, config):
    model = serialize.load_model(args.model)
    if not hasattr(model, "tasks"):
        raise SiraError("the perturbation experiment requires an mtg model")
    series = read_atmospheric_csv(args.atmospheric)
    test_samples = ingest_samples(args.samples)
    cfg = PerturbationConfig(
        distances_km=config.distances("experiment.distances"),
        trials=config.get_int("experiment.trials"),
        seed=config.get_int("seed"),
        alpha=config.get_float("alpha"),
        displacement=config.get("experiment.displacement"))
    curve = run_perturbation_experiment(model, test_samples, series, cfg)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["d_km", "trials", "rejections", "accuracy"])
        for row in curve.rows:
            writer.writerow([_float_text(row.d_km), row.trials,
                             row.rejections, _float_text(row.accuracy)])
    for row in curve.rows:
        print(f"d={row.d_km:.0f} km: {row.rejections}/{row.trials} rejected "
              f"({100 * row.accuracy:.1f}%)"
              + (f", {row.skipped} skipped" if row.skipped else ""))
    print(f"experiment: wrote {args.out}")
    return 0


def cmd_eval(args, config):
    samples, _, _ = read_bundle(args.dataset)
    cfg = evalharness.AblationConfig(
        k=config.get_int("eval.folds"), seed=config.get_int("seed"),
        boost_rounds=config.get_int("gb.rounds"),
        boost_learning_rate=config.get_float("gb.learning_rate"),
        boost_max_depth=config.get_int("gb.max_depth"),
        boost_inner_iters=config.get_int("gb.inner_iters"),
        mtg_epochs=config.get_int("mtg.epochs"),
        mtg_learning_rate=config.get_float("mtg.learning_rate"))
    reports = evalharness.ablation_suite(samples, cfg)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={cfg.seed} folds={cfg.k} "
                 "protocol=k-fold-cv (assumed defaults: 80:20, k=5)\n")
        fh.write(f"# {SELECTION_NOTE}\n")
        writer = csv.writer(fh)
        writer.writerow(["model", "metric"] + list(ISOTOPE_NAMES)
                        + ["fold_hash"])
        for label, report in reports.items():
            writer.writerow([label, "r2"]
                            + [_float_text(report.r2.get(t, float("nan")))
                               for t in ISOTOPE_NAMES] + [report.fold_hash])
            writer.writerow([label, "rmse"]
                            + [_float_text(report.rmse.get(t, float("nan")))
                               for t in ISOTOPE_NAMES] + [report.fold_hash])
    header = f"{'model':36s} " + " ".join(f"{t:>8s}" for t in ISOTOPE_NAMES)
    print(header)
    for label, report in reports.items():
        print(f"{label:36s} " + " ".join(
            f"{report.r2.get(t, float('nan')):8.3f}" for t in ISOTOPE_NAMES))
    print(f"eval: wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sirakit",
        description="Isotope-ratio isoscape modeling and origin verification")
    parser.add_argument("--version", action="version",
                        version=f"sirakit {__version__} "
                        f"(model format v{serialize.MODEL_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build a dataset bundle")
    p.add_argument("--samples", required=True)
    p.add_argument("--atmospheric", required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", choices=("gb", "mtg"), required=True)
    p.add_argument("--task", default="d18O",
                   help="isotope task for gb models")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict at dataset locations")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify", help="test origin claims")
    p.add_argument("--model", required=True)
    p.add_argument("--claims", required=True)
    p.add_argument("--atmospheric", required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("isoscape", help="render mean/std rasters")
    p.add_argument("--model", required=True)
    p.add_argument("--atmospheric", required=True)
    p.add_argument("--bounds", required=True,
                   metavar="LAT_MIN,LAT_MAX,LON_MIN,LON_MAX")
    p.add_argument("--cell-size", type=float, default=0.5)
    p.add_argument("--task", default=None)
    p.add_argument("--out", required=True, help="output path prefix")
    add_common(p)
    p.set_defaults(func=cmd_isoscape)

    p = sub.add_parser("importance", help="feature importance + task reports")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    add_common(p)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("experiment", help="perturbation experiment curve")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", required=True, help="held-out sample CSV")
    p.add_argument("--atmospheric", required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("eval", help="metric and ablation reports")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = RunConfig(args.config, args.set)
        config.log(args.command)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (SiraError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
