"""Run configuration: strict schema, defaults, and object construction.

A run is a single JSON document. The schema rejects unknown keys everywhere
so a typo cannot silently change an experiment, and carries an explicit
version field. One top-level seed drives every random stage through named
sub-streams (split, init, shuffle, negatives), so changing, say, the number
of epochs never perturbs the split.
"""

from __future__ import annotations

import copy
import json

import jsonschema

from .model import ModelConfig
from .numerics import ACTIVATION_KINDS
from .training import TrainPlan

CONFIG_VERSION = 1

DATASET_FORMATS = ("movielens-tab", "movielens-double-colon", "csv")
SPLIT_PROTOCOLS = ("random", "leave-one-out")
SCHEDULES = ("joint", "alternating", "joint_then_post_input")
METRIC_NAMES = ("rmse", "precision", "hr", "ndcg")

_LAYERS = {"type": "array", "items": {"type": "integer", "minimum": 1},
           "minItems": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "inputcf run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "seed", "dataset", "model"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["path", "format"],
            "properties": {
                "path": {"type": "string"},
                "format": {"enum": list(DATASET_FORMATS)},
                "value_max": {"type": "number", "exclusiveMinimum": 0},
                "binarize": {"type": "boolean"},
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "protocol": {"enum": list(SPLIT_PROTOCOLS)},
                "ratios": {"type": "array", "minItems": 3, "maxItems": 3,
                           "items": {"type": "number", "minimum": 0}},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["variant"],
            "properties": {
                "variant": {"enum": ["ncf", "inp-ncf", "ncf-id", "mf",
                                     "cfnet", "inp-cfnet"]},
                "user_layers": _LAYERS,
                "item_layers": _LAYERS,
                "fusion_layers": _LAYERS,
                "activation": {"enum": list(ACTIVATION_KINDS)},
                "output_activation": {"enum": ["identity", "sigmoid"]},
                "input_init": {"enum": ["ratings", "implicit"]},
                "first_layer_activation": {"enum": ["same", "identity"]},
                "use_biases": {"type": "boolean"},
                "embed_dim": {"type": "integer", "minimum": 1},
                "cfnet_embed_dim": {"type": "integer", "minimum": 1},
                "cfnet_h_layers": _LAYERS,
                "precision": {"enum": ["f32", "f64"]},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "schedule": {"enum": list(SCHEDULES)},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "optimizer": {"enum": ["sgd", "adam", "rmsprop"]},
                "lr": {"type": "number", "minimum": 0},
                "l2": {"type": "number", "minimum": 0},
                "loss": {"enum": ["mse", "bce"]},
                "patience": {"type": "integer"},
                "restore_best": {"type": "boolean"},
                "train_inputs": {"type": ["boolean", "null"]},
                "shuffle": {"type": "boolean"},
                "negatives_per_positive": {"type": "integer", "minimum": 0},
                "input_optimizer": {"enum": ["sgd", "adam", "rmsprop", None]},
                "input_lr": {"type": ["number", "null"], "minimum": 0},
                "rounds": {"type": "integer", "minimum": 1},
                "guard": {"type": "boolean"},
                "post_input_epochs": {"type": "integer", "minimum": 0},
                "post_input_lr": {"type": "number", "minimum": 0},
                "checkpoint_every": {"type": "integer", "minimum": 0},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "metrics": {"type": "array",
                            "items": {"enum": list(METRIC_NAMES)}},
                "p_pct": {"type": "number", "exclusiveMinimum": 0,
                          "maximum": 100},
                "k": {"type": "integer", "minimum": 1},
                "num_negatives": {"type": "integer", "minimum": 1},
            },
        },
    },
}

DEFAULT_CONFIG = {
    "output_dir": "runs",
    "dataset": {"value_max": 5.0, "binarize": False},
    "split": {"protocol": "random", "ratios": [0.8, 0.1, 0.1]},
    "model": {
        "user_layers": [100],
        "item_layers": [100],
        "fusion_layers": [100, 1],
        "activation": "selu",
        "output_activation": "identity",
        "input_init": "ratings",
        "first_layer_activation": "same",
        "use_biases": True,
        "embed_dim": 32,
        "cfnet_embed_dim": 64,
        "cfnet_h_layers": [64],
        "precision": "f32",
    },
    "training": {
        "schedule": "joint",
        "epochs": 30,
        "batch_size": 256,
        "optimizer": "rmsprop",
        "lr": 0.001,
        "l2": 0.0,
        "loss": "mse",
        "patience": 5,
        "restore_best": True,
        "train_inputs": None,
        "shuffle": True,
        "negatives_per_positive": 0,
        "input_optimizer": None,
        "input_lr": None,
        "rounds": 3,
        "guard": True,
        "post_input_epochs": 7,
        "post_input_lr": 0.1,
        "checkpoint_every": 0,
    },
    "eval": {"metrics": ["rmse", "precision"], "p_pct": 25.0, "k": 10,
             "num_negatives": 99},
}


class ConfigError(ValueError):
    """Configuration rejected: schema violation or inconsistent settings."""


def validate_config(doc: dict) -> None:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "(top level)"
        raise ConfigError(f"config invalid at {path}: {exc.message}") from exc


def _merge(defaults, overrides):
    if isinstance(defaults, dict) and isinstance(overrides, dict):
        out = dict(defaults)
        for key, value in overrides.items():
            out[key] = _merge(defaults.get(key), value) if key in defaults else value
        return out
    return copy.deepcopy(overrides)


def resolve_config(doc: dict) -> dict:
    """Validate, then fill every omitted key with its documented default."""
    validate_config(doc)
    resolved = _merge(DEFAULT_CONFIG, doc)
    validate_config(resolved)
    _check_consistency(resolved)
    return resolved


def _check_consistency(cfg: dict) -> None:
    """Cross-field rules the declarative schema cannot express."""
    model = cfg["model"]
    training = cfg["training"]
    if model["fusion_layers"][-1] != 1:
        raise ConfigError("model.fusion_layers must end with 1")
    if model["variant"] in ("cfnet", "inp-cfnet") \
            and model["user_layers"][-1] != model["item_layers"][-1]:
        raise ConfigError("cfnet variants need matching branch output widths")
    if training["loss"] == "bce" and model["output_activation"] != "sigmoid":
        raise ConfigError("bce needs model.output_activation = sigmoid")
    if training["negatives_per_positive"] > 0 and training["loss"] != "bce":
        raise ConfigError("negative sampling is only meaningful with bce")
    if training["schedule"] == "alternating" \
            and not model["variant"].startswith("inp-"):
        raise ConfigError("alternating schedule needs an inp-* variant")
    if sum(cfg["split"]["ratios"]) <= 0:
        raise ConfigError("split.ratios must sum to a positive value")


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return resolve_config(doc)


def model_config_from(cfg: dict) -> ModelConfig:
    model = cfg["model"]
    return ModelConfig(
        variant=model["variant"],
        user_layers=tuple(model["user_layers"]),
        item_layers=tuple(model["item_layers"]),
        fusion_layers=tuple(model["fusion_layers"]),
        activation=model["activation"],
        output_activation=model["output_activation"],
        input_init=model["input_init"],
        value_max=cfg["dataset"]["value_max"],
        first_layer_activation=model["first_layer_activation"],
        use_biases=model["use_biases"],
        embed_dim=model["embed_dim"],
        cfnet_embed_dim=model["cfnet_embed_dim"],
        cfnet_h_layers=tuple(model["cfnet_h_layers"]),
        precision=model["precision"],
    )


def train_plan_from(cfg: dict) -> TrainPlan:
    t = cfg["training"]
    return TrainPlan(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        optimizer=t["optimizer"],
        lr=t["lr"],
        l2=t["l2"],
        loss=t["loss"],
        seed=cfg["seed"],
        patience=t["patience"],
        restore_best=t["restore_best"],
        train_inputs=t["train_inputs"],
        shuffle=t["shuffle"],
        negatives_per_positive=t["negatives_per_positive"],
        input_optimizer=t["input_optimizer"],
        input_lr=t["input_lr"],
        rounds=t["rounds"],
        guard=t["guard"],
    )


def post_input_plan_from(cfg: dict) -> TrainPlan:
    t = cfg["training"]
    return TrainPlan(
        epochs=t["post_input_epochs"],
        batch_size=t["batch_size"],
        optimizer="sgd",
        lr=t["post_input_lr"],
        loss="mse",
        seed=cfg["seed"],
        shuffle=t["shuffle"],
    )
