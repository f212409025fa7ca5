"""Single JSON run configuration: schema validation, defaults, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError
from .labeler import FeatureConfig
from .mixsim import SCENARIO_KINDS, SimConfig
from .model import ModelConfig
from .trainer import OBJECTIVES, TrainConfig


def _prob_tree():
    return {k: ("number", 0.25, lambda v: 0.0 <= v <= 1.0) for k in SCENARIO_KINDS}


# Leaf entries are (type, default, validator-or-None). type names:
# number, int, bool, string, pair (2-element number list), intlist.
SCHEMA = {
    "simulation": {
        "manifest": ("string", "", None),
        "scenario_probs": _prob_tree(),
        "overlap_range": ("pair", [0.0, 1.0], None),
        "sir_range": ("pair", [-5.0, 5.0], None),
        "snr_range": ("pair", [-5.0, 20.0], None),
    },
    "labeler": {
        "k": ("int", 32, lambda v: v >= 1),
        "seed": ("int", 0, None),
        "window": ("int", 400, lambda v: v > 0),
        "hop": ("int", 320, lambda v: v > 0),
    },
    "model": {
        "dim": ("int", 64, lambda v: v >= 1),
        "embed_dim": ("int", 32, lambda v: v >= 1),
        "layer_count": ("int", 4, lambda v: v >= 1),
        "satl_layer_index": ("int", 1, lambda v: v >= 1),
        "attention_heads": ("int", 4, lambda v: v >= 1),
        "ffn_dim": ("int", 256, lambda v: v >= 1),
        "mask_start_prob": ("number", 0.065, lambda v: 0.0 <= v <= 1.0),
        "mask_span": ("int", 10, lambda v: v >= 1),
        "conv_kernels": ("intlist", [10, 8, 4, 4], None),
        "conv_strides": ("intlist", [8, 5, 4, 2], None),
    },
    "trainer": {
        "steps": ("int", 1000, lambda v: v >= 0),
        "learning_rate": ("number", 1e-3, lambda v: v >= 0),
        "warmup_steps": ("int", 500, lambda v: v >= 0),
        "batch_size": ("int", 8, lambda v: v >= 1),
        "seed": ("int", 0, None),
        "alpha": ("number", 0.5, lambda v: 0.0 <= v <= 1.0),
        "objective": ("string", "sa_wavlm", lambda v: v in OBJECTIVES),
        "crop_seconds": ("number", 3.0, lambda v: v > 0),
        "checkpoint_every": ("int", 500, lambda v: v >= 0),
        "shuffle": ("bool", True, None),
    },
    "eval": {
        "items": ("int", 32, lambda v: v >= 1),
        "seed": ("int", 0, None),
        "crop_seconds": ("number", 1.0, lambda v: v > 0),
    },
}

_TYPE_CHECKS = {
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "bool": lambda v: isinstance(v, bool),
    "string": lambda v: isinstance(v, str),
    "pair": lambda v: (
        isinstance(v, list)
        and len(v) == 2
        and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
    ),
    "intlist": lambda v: isinstance(v, list)
    and all(isinstance(x, int) and not isinstance(x, bool) for x in v),
}


def _validate_level(doc: dict, schema: dict, path: str, out: dict):
    for key in doc:
        if key not in schema:
            raise ConfigError(f"unknown key {path + key!r}")
    for key, spec in schema.items():
        here = path + key
        if isinstance(spec, dict):
            sub = doc.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{here}: expected an object")
            out[key] = {}
            _validate_level(sub, spec, here + ".", out[key])
            continue
        typ, default, check = spec
        value = doc.get(key, copy.deepcopy(default))
        if not _TYPE_CHECKS[typ](value):
            raise ConfigError(f"{here}: expected {typ}, got {value!r}")
        if check is not None and not check(value):
            raise ConfigError(f"validation error at path {here!r}: value {value!r}")
        out[key] = value


@dataclass
class RunConfig:
    doc: dict
    config_hash: str

    def sim_config(self) -> SimConfig:
        s = self.doc["simulation"]
        return SimConfig(
            scenario_probs=dict(s["scenario_probs"]),
            overlap_range=tuple(s["overlap_range"]),
            sir_range=tuple(s["sir_range"]),
            snr_range=tuple(s["snr_range"]),
        )

    def feature_config(self) -> FeatureConfig:
        lab = self.doc["labeler"]
        return FeatureConfig(window=lab["window"], hop=lab["hop"])

    def model_config(self) -> ModelConfig:
        m = self.doc["model"]
        return ModelConfig(
            dim=m["dim"],
            embed_dim=m["embed_dim"],
            layer_count=m["layer_count"],
            satl_layer_index=m["satl_layer_index"],
            attention_heads=m["attention_heads"],
            ffn_dim=m["ffn_dim"],
            k=self.doc["labeler"]["k"],
            mask_start_prob=m["mask_start_prob"],
            mask_span=m["mask_span"],
            conv_kernels=tuple(m["conv_kernels"]),
            conv_strides=tuple(m["conv_strides"]),
        )

    def train_config(self) -> TrainConfig:
        t = self.doc["trainer"]
        return TrainConfig(
            steps=t["steps"],
            learning_rate=t["learning_rate"],
            warmup_steps=min(t["warmup_steps"], t["steps"]) if t["steps"] else 0,
            batch_size=t["batch_size"],
            seed=t["seed"],
            alpha=t["alpha"],
            objective=t["objective"],
            crop_seconds=t["crop_seconds"],
            checkpoint_every=t["checkpoint_every"],
            shuffle=t["shuffle"],
        )


def validate_config(document: dict) -> RunConfig:
    """Schema-validate, fill defaults, and enforce cross-section consistency."""
    if not isinstance(document, dict):
        raise ConfigError("config root must be a JSON object")
    filled: dict = {}
    _validate_level(document, SCHEMA, "", filled)

    probs = filled["simulation"]["scenario_probs"]
    if abs(sum(probs.values()) - 1.0) > 1e-9:
        raise ConfigError(
            "simulation.scenario_probs: probabilities must sum to 1"
        )
    import numpy as np

    stride_product = int(np.prod(filled["model"]["conv_strides"]))
    if stride_product != filled["labeler"]["hop"]:
        raise ConfigError(
            f"labeler frame rate (hop {filled['labeler']['hop']}) does not match "
            f"model frame rate (conv stride product {stride_product})"
        )
    canonical = json.dumps(filled, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    cfg = RunConfig(filled, digest)
    # instantiating the section configs enforces their own invariants
    cfg.sim_config()
    cfg.model_config()
    cfg.train_config()
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return validate_config(document)


def apply_overrides(document: dict, overrides: list) -> dict:
    """Apply --set key.path=value pairs; values parse as JSON, else strings."""
    doc = copy.deepcopy(document)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object")
        node[parts[-1]] = value
    return doc
