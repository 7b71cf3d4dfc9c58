"""JSON configuration: schemas, validation with JSON-pointer errors, and conversion to domain objects."""

from __future__ import annotations

import json
import os
from importlib import resources
from pathlib import Path

import jsonschema

from .bounds import TrainingRecipe
from .certify import PipelineConfig, PosteriorBudget, PriorRecipe
from .dpsgd import RULES, UpdateRule
from .models import ARCHITECTURES, BoundedLoss, DatasetHandle, ModelSpec, load_csv, synth_dataset
from .oracle import MECHANISMS, STATISTICS, TinyInstance
from .pac_bayes import ConfidenceSplit

CONFIG_VERSION = 1

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_unit = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}


def _obj(properties: dict, required=()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required),
            "additionalProperties": False}


UPDATE_SCHEMA = _obj({
    "kind": {"enum": list(RULES)},
    "learning_rates": {"oneOf": [_pos_num, {"type": "array", "items": _pos_num, "minItems": 1}]},
    "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "weight_decay": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "second_moment": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "eps": _pos_num,
})

RECIPE_SCHEMA = _obj({
    "epochs": _pos_int, "steps_per_epoch": _pos_int, "batch_size": _pos_int,
    "clip": {"type": "number", "minimum": 0}, "noise": _pos_num,
    "update": UPDATE_SCHEMA,
}, required=("epochs", "steps_per_epoch", "batch_size", "clip", "noise"))

DATASET_SCHEMA = {"oneOf": [
    _obj({"kind": {"enum": ["two_gaussians", "xor"]}, "n": {"type": "integer", "minimum": 2},
          "p": _pos_int, "separation": _pos_num, "seed": {"type": "integer", "minimum": 0}},
         required=("kind", "n", "p")),
    _obj({"csv": {"type": "string", "minLength": 1}}, required=("csv",)),
]}

CERTIFY_SCHEMA = _obj({
    "version": {"const": CONFIG_VERSION},
    "seed": {"type": "integer", "minimum": 0},
    "dataset": DATASET_SCHEMA,
    "model": _obj({"architecture": {"enum": list(ARCHITECTURES)},
                   "hidden": {"type": "array", "items": _pos_int}},
                  required=("architecture",)),
    "loss": _obj({"c_max": _pos_num}),
    "recipes": {"type": "array", "items": RECIPE_SCHEMA, "minItems": 1},
    "prior_variances": {"type": "array", "items": _pos_num, "minItems": 1},
    "split": _obj({"delta": _unit, "delta_prime": _unit, "beta": _unit},
                  required=("delta", "delta_prime", "beta")),
    "posterior": _obj({"steps": {"type": "integer", "minimum": 0}, "learning_rate": _pos_num,
                       "draws": _pos_int, "eval_draws": _pos_int,
                       "max_halvings": {"type": "integer", "minimum": 0}}),
    "mc_draws": _pos_int,
    "baseline": {"type": "boolean"},
    "init_scale": {"oneOf": [_pos_num, {"type": "null"}]},
}, required=("version", "dataset", "model", "recipes", "prior_variances", "split"))

INSTANCE_SCHEMA = _obj({
    "domain": {"type": "array", "minItems": 1,
               "items": {"oneOf": [{"type": "number"},
                                   {"type": "array", "items": {"type": "number"}, "minItems": 1}]}},
    "probabilities": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
    "n": _pos_int,
    "noise": _pos_num,
    "mechanism": {"enum": list(MECHANISMS)},
    "statistic": {"enum": list(STATISTICS)},
    "clip": _pos_num,
    "steps": _pos_int,
    "batch_size": _pos_int,
    "epochs": _pos_int,
    "learning_rate": _pos_num,
    "theta0": {"type": "array", "items": {"type": "number"}},
}, required=("domain", "probabilities", "n", "noise"))

ORACLE_SCHEMA = _obj({
    "version": {"const": CONFIG_VERSION},
    "seed": {"type": "integer", "minimum": 0},
    "suite": {"type": "array", "minItems": 1, "items": _obj({
        "name": {"type": "string"},
        "instance": INSTANCE_SCHEMA,
        "method": {"enum": ["gaussian", "optimized", "explicit"]},
        "beta": _unit,
        "trials": _pos_int,
        "repetitions": _pos_int,
        "threshold_scale": _pos_num,
    }, required=("name", "instance", "method", "beta", "trials"))},
}, required=("version", "suite"))


class ConfigError(ValueError):
    """A configuration problem located by a JSON pointer."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
        self.message = message


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate(document: dict, schema: dict) -> None:
    """Raise :class:`ConfigError` for the first (deepest, then lexically first) schema violation."""
    errors = list(jsonschema.Draft202012Validator(schema).iter_errors(document))
    if not errors:
        return
    err = jsonschema.exceptions.best_match(errors)
    raise ConfigError(_pointer(err.absolute_path), err.message)


def read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None


def bundled(name: str) -> dict:
    """One of the JSON files shipped in ``dpcert/data``."""
    return json.loads(resources.files("dpcert").joinpath("data", name).read_text(encoding="utf-8"))


def _rule(doc: dict | None) -> UpdateRule:
    return UpdateRule(**(doc or {}))


def load_dataset(doc: dict, base: Path | None = None) -> DatasetHandle:
    if "csv" in doc:
        path = Path(doc["csv"])
        if base is not None and not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError("/dataset/csv", f"dataset file not found: {path}")
        try:
            return load_csv(path)
        except ValueError as exc:
            raise ConfigError("/dataset/csv", str(exc)) from None
    return synth_dataset(doc["kind"], doc["n"], doc["p"], doc.get("seed", 0), doc.get("separation", 3.0))


def pipeline_config(doc: dict, dataset: DatasetHandle, seed: int | None = None,
                    workers: int = 1) -> PipelineConfig:
    """Validate a certify document and build a :class:`PipelineConfig` for ``dataset``."""
    validate(doc, CERTIFY_SCHEMA)
    model = doc["model"]
    spec = ModelSpec(model["architecture"], dataset.p, dataset.num_classes,
                     tuple(model.get("hidden", (32, 32))))
    recipes = []
    for i, r in enumerate(doc["recipes"]):
        try:
            recipe = TrainingRecipe(r["epochs"], r["steps_per_epoch"], r["batch_size"], r["clip"],
                                    r["noise"], len(dataset))
            recipes.append(PriorRecipe(recipe, _rule(r.get("update"))))
        except ValueError as exc:
            raise ConfigError(f"/recipes/{i}", str(exc)) from None
    split = ConfidenceSplit(**doc["split"])
    try:
        split.validate()
    except ValueError as exc:
        raise ConfigError("/split", str(exc)) from None
    return PipelineConfig(
        model=spec,
        recipes=recipes,
        prior_variances=list(doc["prior_variances"]),
        split=split,
        posterior=PosteriorBudget(**doc.get("posterior", {})),
        mc_draws=doc.get("mc_draws", 10_000),
        seed=doc.get("seed", 0) if seed is None else seed,
        train_loss=BoundedLoss(c_max=doc.get("loss", {}).get("c_max", 4.0)),
        baseline=doc.get("baseline", True),
        init_scale=doc.get("init_scale"),
        workers=workers,
    )


def oracle_cases(doc: dict) -> list[dict]:
    """Validate an oracle document; returns cases with a built :class:`TinyInstance` under ``"instance"``."""
    validate(doc, ORACLE_SCHEMA)
    cases = []
    for i, case in enumerate(doc["suite"]):
        try:
            instance = TinyInstance(name=case["name"], **case["instance"])
        except ValueError as exc:
            raise ConfigError(f"/suite/{i}/instance", str(exc)) from None
        cases.append({"repetitions": 1, "threshold_scale": 1.0, **case, "instance": instance})
    return cases


def worker_count() -> int:
    """Worker cap from ``DPCERT_THREADS`` (default 1)."""
    raw = os.environ.get("DPCERT_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError("", f"DPCERT_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("", f"DPCERT_THREADS must be a positive integer, got {raw!r}")
    return value
