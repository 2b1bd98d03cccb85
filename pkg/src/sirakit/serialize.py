"""Versioned JSON model container shared by both model variants.

The container stores everything needed to predict at new locations: the
kernel specification, noise, the tree ensemble (preorder node lists) or
task covariance factor, training inputs, the Cholesky factor, and the
feature schema manifest. Floats serialize through their shortest exact
repr, so load -> save round-trips are byte-identical.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from . import gp
from .boosting import BoostedEnsemble, BoostedMixedModel, RegressionTree, TreeNode
from .errors import SiraError
from .kernels import KernelSpec, NoiseModel, TaskCovariance
from .multitask import MultitaskModel

MODEL_FORMAT = "sirakit-model"
MODEL_VERSION = 1


def _kernel_to_dict(spec: KernelSpec) -> dict:
    d = {"kind": spec.kind, "sigma2": spec.sigma2}
    ls = np.asarray(spec.lengthscales)
    d["lengthscales"] = ls.tolist() if ls.ndim else float(ls)
    if spec.kind in ("rq", "periodic", "spatial_composite", "sum"):
        d["alpha"] = spec.alpha
        d["period"] = spec.period
    if spec.kind in ("feature_mixture", "sum"):
        d["mix_lambda1"] = spec.mix_lambda1
        d["mix_lambda2"] = spec.mix_lambda2
    if spec.kind == "sum":
        d["children"] = [_kernel_to_dict(c) for c in spec.children]
    return d


def _kernel_from_dict(d: dict) -> KernelSpec:
    kwargs = dict(d)
    if "children" in kwargs:
        kwargs["children"] = tuple(_kernel_from_dict(c)
                                   for c in kwargs["children"])
    if isinstance(kwargs.get("lengthscales"), list):
        kwargs["lengthscales"] = np.array(kwargs["lengthscales"])
    return KernelSpec(**kwargs)


def _tree_to_list(tree: RegressionTree) -> list:
    return [[n.feature, n.threshold, n.left, n.right, n.value]
            for n in tree.nodes]


def _tree_from_list(rows) -> RegressionTree:
    return RegressionTree(nodes=[
        TreeNode(feature=int(f), threshold=float(t), left=int(l),
                 right=int(r), value=float(v))
        for f, t, l, r, v in rows])


def model_payload(model) -> dict:
    if isinstance(model, BoostedMixedModel):
        post = model.posterior
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "variant": "GB",
            "schema": {"features": list(model.feature_names),
                       "aggregation_mode": model.aggregation_mode},
            "task": model.task,
            "kernel": _kernel_to_dict(model.spec),
            "noise": model.noise.variances.tolist(),
            "seed": model.seed,
            "ensemble": {
                "f0": model.ensemble.f0,
                "learning_rate": model.ensemble.learning_rate,
                "trees": [_tree_to_list(t) for t in model.ensemble.trees],
            },
            "gp": {
                "X": post.X.tolist(),
                "y": post.y.tolist(),
                "offsets": post.offsets.tolist(),
                "w": post.w.tolist(),
                "chol": post.chol.tolist(),
            },
        }
    if isinstance(model, MultitaskModel):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "variant": "MTG",
            "schema": {"features": list(model.feature_names),
                       "aggregation_mode": model.aggregation_mode},
            "tasks": list(model.tasks),
            "kernel": _kernel_to_dict(model.spec),
            "task_cov_L": model.task_cov.L.tolist(),
            "noise": model.noise.variances.tolist(),
            "task_means": model.task_means.tolist(),
            "seed": model.seed,
            "converged": model.converged,
            "data": {"X": model.X.tolist(), "Y": model.Y.tolist()},
            "chol": model.chol.tolist(),
        }
    raise SiraError(f"cannot serialize model of type {type(model).__name__}")


def save_model(model, path) -> None:
    payload = model_payload(model)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != MODEL_FORMAT:
        raise SiraError(f"{path}: not a {MODEL_FORMAT} file")
    if payload.get("version") != MODEL_VERSION:
        raise SiraError(f"{path}: unsupported model version "
                        f"{payload.get('version')}")
    variant = payload.get("variant")
    schema = payload["schema"]
    if variant == "GB":
        spec = _kernel_from_dict(payload["kernel"])
        noise = NoiseModel(np.array(payload["noise"]))
        gpd = payload["gp"]
        posterior = gp.GPPosterior(
            X=np.array(gpd["X"]), spec=spec, noise=noise,
            chol=np.array(gpd["chol"]), w=np.array(gpd["w"]),
            offsets=np.array(gpd["offsets"]), y=np.array(gpd["y"]))
        ens = payload["ensemble"]
        ensemble = BoostedEnsemble(
            f0=float(ens["f0"]), learning_rate=float(ens["learning_rate"]),
            trees=[_tree_from_list(t) for t in ens["trees"]])
        return BoostedMixedModel(
            task=payload["task"], ensemble=ensemble, spec=spec, noise=noise,
            posterior=posterior,
            feature_names=tuple(schema["features"]),
            aggregation_mode=schema["aggregation_mode"],
            seed=payload.get("seed", 0))
    if variant == "MTG":
        spec = _kernel_from_dict(payload["kernel"])
        return MultitaskModel(
            tasks=tuple(payload["tasks"]), spec=spec,
            task_cov=TaskCovariance(np.array(payload["task_cov_L"])),
            noise=NoiseModel(np.array(payload["noise"])),
            task_means=np.array(payload["task_means"]),
            X=np.array(payload["data"]["X"]),
            Y=np.array(payload["data"]["Y"]),
            feature_names=tuple(schema["features"]),
            aggregation_mode=schema["aggregation_mode"],
            converged=payload.get("converged", True),
            seed=payload.get("seed", 0))
    raise SiraError(f"{path}: unknown model variant {variant!r}")


def model_id(path) -> str:
    """Stable short identifier: prefix of the file's content digest."""
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:12]


def write_schema_manifest(path, feature_names, aggregation_mode,
                          notes=()) -> None:
    """Text manifest listing the final feature order, one name per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# aggregation_mode={aggregation_mode}\n")
        for note in notes:
            fh.write(f"# {note}\n")
        for name in feature_names:
            fh.write(name + "\n")


def read_schema_manifest(path):
    names = []
    aggregation_mode = "mean"
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("aggregation_mode="):
                    aggregation_mode = body.split("=", 1)[1]
                continue
            names.append(line)
    return tuple(names), aggregation_mode
