"""Run configuration file: one JSON document with five optional sections."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .protoloss import COMPONENTS, LossConfig
from .train import BASELINES, TrainConfig

_num = {"type": "number"}
_int = {"type": "integer"}
_prob = {"type": "number", "minimum": 0, "maximum": 1}


def _section(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _section({
    "dataset": _section({
        "num_classes": {"type": "integer", "minimum": 2},
        "n_max": {"type": "integer", "minimum": 1},
        "imbalance_ratio": {"type": "number", "exclusiveMinimum": 1},
        "profile": {"enum": ["exponential", "step"]},
        "seed": {"type": "integer", "minimum": 0},
        "image_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "noise": {"type": "number", "minimum": 0},
        "jitter": {"type": "number", "minimum": 0},
        "n_val": {"type": "integer", "minimum": 1},
        "n_test": {"type": "integer", "minimum": 1},
    }),
    "provider": _section({
        "d_sam": {"type": "integer", "minimum": 1},
        "signal_strength": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "latent_noise": {"type": "number", "minimum": 0},
        "spatial_noise": {"type": "number", "minimum": 0},
    }),
    "fusion": _section({
        "map_fusion": {"type": "boolean"},
        "map_fusion_stage": {"type": ["integer", "null"], "minimum": 0},
        "latent_fusion": {"type": "boolean"},
        "alpha": _prob,
        "stage_channels": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "d_tok": {"type": "integer", "minimum": 1},
        "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    }),
    "loss": _section({
        "tau_head": _prob, "tau_tail_std": _prob, "tau_tail_dist": _prob,
        "beta": {"type": "number", "minimum": 0},
        "M": {"type": "integer", "minimum": 1},
        "d_eps": {"type": "number", "exclusiveMinimum": 0},
        "min_bank": {"type": "integer", "minimum": 1},
        "components": {"type": "array", "items": {"enum": list(COMPONENTS)}, "uniqueItems": True},
        "per_dim_sign": {"type": "boolean"},
    }),
    "train": _section({
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "schedule": {"enum": ["constant", "cosine"]},
        "baseline": {"enum": list(BASELINES)},
        "logit_adjust_tau": _num,
        "use_proto": {"type": "boolean"},
    }),
    "ablation": _section({
        "rows": {"type": "array", "items": _section({
            "name": {"type": "string"},
            "delta": {"type": "object"},
        }, required=("name", "delta"))},
    }),
    "gradcheck": _section({
        "selector": {"type": "array", "items": {"enum": ["fusion-net", "proto-loss", "network"]}},
        "n_seeds": {"type": "integer", "minimum": 1},
    }),
})

DATASET_DEFAULTS = dict(num_classes=10, n_max=500, imbalance_ratio=100.0, profile="exponential", seed=0,
                        image_shape=[16, 16, 1], noise=1.0, jitter=3.0, n_val=20, n_test=50)
PROVIDER_DEFAULTS = dict(d_sam=16, signal_strength=0.5, seed=0, grid=[8, 8], latent_noise=1.0,
                         spatial_noise=0.5)


@dataclass
class RunConfig:
    dataset: dict = field(default_factory=lambda: dict(DATASET_DEFAULTS))
    provider: dict = field(default_factory=lambda: dict(PROVIDER_DEFAULTS))
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: list | None = None
    gradcheck: dict = field(default_factory=dict)

    def with_seed(self, seed):
        """Override every seed in the run with ``seed``."""
        if seed is None:
            return self
        return RunConfig(dataset={**self.dataset, "seed": seed}, provider={**self.provider, "seed": seed},
                         train=self.train.with_delta({"seed": seed}), ablation=self.ablation,
                         gradcheck=self.gradcheck)


def _path(err):
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def parse_config(doc):
    """Validate a config document and build a :class:`RunConfig`.

    Raises :class:`ConfigError` whose ``path`` names the offending field.
    """
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = _path(err)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            if extra:
                path = ".".join(p for p in [path if path != "<root>" else "", extra[0]] if p)
        raise ConfigError(err.message, path)
    train_kw = dict(doc.get("train", {}))
    train_kw.update(doc.get("fusion", {}))
    try:
        train_kw["loss"] = LossConfig.from_dict(doc.get("loss", {}))
        train = TrainConfig.from_dict(train_kw)
    except TypeError as exc:
        raise ConfigError(str(exc), "train") from exc
    rows = None
    if "ablation" in doc and "rows" in doc["ablation"]:
        rows = [(r["name"], r["delta"]) for r in doc["ablation"]["rows"]]
        for name, delta in rows:
            train.with_delta(delta)
    return RunConfig(dataset={**DATASET_DEFAULTS, **doc.get("dataset", {})},
                     provider={**PROVIDER_DEFAULTS, **doc.get("provider", {})},
                     train=train, ablation=rows, gradcheck=dict(doc.get("gradcheck", {})))


def load_config(path):
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found", "config")
    try:
        doc = json.loads(path.read_text())
    except ValueError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "config") from exc
    return parse_config(doc)
