"""Experiment configuration: one JSON file, schema-checked before any compute.

Precedence is flag > file > default. Flags arrive as dotted ``key=value``
overrides (``trainer.lr=0.1``); values are parsed as JSON when possible.
Relative output directories resolve against ``$DISTSEG_OUTPUT_ROOT`` when set.
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import jsonschema

OUTPUT_ROOT_ENV = "DISTSEG_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_num = {"type": "number"}
_int = {"type": "integer"}
_frac = {"type": "number", "minimum": 0, "maximum": 1}
_chan = {"type": "integer", "minimum": 0}

_CONSTRAINT = {
    "oneOf": [
        _obj({"type": {"const": "cardinality"}, "channel": _chan,
              "max_count": {"type": "integer", "minimum": 0}, "max_fraction": _frac}, ["type", "channel"]),
        _obj({"type": {"const": "l1"}, "channel": _chan, "radius": {"type": "number", "minimum": 0}},
             ["type", "channel", "radius"]),
        _obj({"type": {"const": "rank"}, "channel": _chan, "k": {"type": "integer", "minimum": 1}},
             ["type", "channel", "k"]),
        _obj({"type": {"const": "intersection"}, "members": {"type": "array", "minItems": 1,
              "items": {"$ref": "#/$defs/constraint"}},
              "max_sweeps": {"type": "integer", "minimum": 1}, "tol": {"type": "number", "exclusiveMinimum": 0}},
             ["type", "members"]),
    ]
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$defs": {"constraint": _CONSTRAINT},
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "network": _obj({
            "arch": {"enum": ["resnet", "hyperbolic"]},
            "layers": {"type": "integer", "minimum": 0},
            "width": {"type": "integer", "minimum": 2},
            "kernel_size": {"type": "integer", "minimum": 1},
            "h": {"type": "number", "exclusiveMinimum": 0},
            "activation": {"enum": ["tanh", "relu-smooth"]},
            "block_channels": {"type": ["integer", "null"], "minimum": 1},
            "seed": {"type": ["integer", "null"]},
        }),
        "constraints": {"type": "array", "items": {"$ref": "#/$defs/constraint"}},
        "area_bounds": _obj({"a1": _frac, "a2": _frac}, ["a1", "a2"]),
        "penalty": _obj({
            "kind": {"enum": ["distance", "size-sum"]},
            "mode": {"enum": ["sum", "intersection"]},
            "weights": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
            "lam": {"type": "number", "exclusiveMinimum": 0},
        }),
        "supervision": {
            "oneOf": [
                _obj({"kind": {"const": "none"}}, ["kind"]),
                _obj({"kind": {"const": "mask"}, "path": {"type": "string"}}, ["kind", "path"]),
                _obj({
                    "kind": {"const": "bbox"},
                    "box": {"oneOf": [{"const": "truth"},
                                      {"type": "array", "items": _int, "minItems": 4, "maxItems": 4}]},
                    "margin": {"type": "integer", "minimum": 0},
                    "rho_min": _frac,
                    "channel": {"enum": [0, 1]},
                }, ["kind"]),
                _obj({"kind": {"const": "points"}, "count": {"type": "integer", "minimum": 1},
                      "classes": {"type": "array", "items": _chan, "minItems": 1},
                      "seed": _int}, ["kind", "count"]),
            ]
        },
        "trainer": _obj({
            "mode": {"enum": ["feasibility", "labels+constraints", "labels", "hard-feasibility"]},
            "alpha0": {"type": "number", "minimum": 0},
            "eta": {"type": "number", "exclusiveMinimum": 1},
            "m": {"type": "integer", "minimum": 1},
            "eps": {"type": ["number", "null"], "exclusiveMinimum": 0},
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "iters": {"type": "integer", "minimum": 1},
            "seed": _int,
            "augment": {"type": "boolean"},
            "subsample": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "background_class": _chan,
            "validation_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "plateau_growth": {"type": "boolean"},
            "dtype": {"enum": ["float64", "float32"]},
        }),
        "data": {
            "oneOf": [
                _obj({
                    "generator": {"const": "disc"},
                    "H": {"type": "integer", "minimum": 1},
                    "W": {"type": "integer", "minimum": 1},
                    "area_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "sigma": {"type": "number", "minimum": 0},
                    "n_chan": {"type": "integer", "minimum": 1},
                    "seed": _int,
                    "contrast": _num,
                    "center": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                    "missing_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                }, ["generator"]),
                _obj({"tensor": {"type": "string"}, "truth": {"type": "string"}}, ["tensor"]),
            ]
        },
        "output": _obj({"dir": {"type": "string"}}),
    },
}

DEFAULTS = {
    "network": {"arch": "hyperbolic", "layers": 4, "width": 16, "kernel_size": 3, "h": 0.2,
                "activation": "tanh", "block_channels": None, "seed": None},
    "constraints": [],
    "penalty": {"kind": "distance", "mode": "sum", "weights": [], "lam": 1.0},
    "supervision": {"kind": "none"},
    "trainer": {"mode": "feasibility", "alpha0": 1.0, "eta": 2.0, "m": 5, "eps": None, "lr": 1e-3,
                "iters": 2000, "seed": 0, "augment": True, "subsample": 0.1, "background_class": 1,
                "validation_fraction": 0.2, "plateau_growth": False, "dtype": "float64"},
    "data": {"generator": "disc", "H": 64, "W": 64, "area_fraction": 0.3, "sigma": 0.2, "n_chan": 3,
             "seed": 0, "contrast": 1.0},
    "output": {"dir": "runs/default"},
}

_SUPERVISION_DEFAULTS = {
    "bbox": {"box": "truth", "margin": 0, "rho_min": 0.43, "channel": 0},
    "points": {"classes": [0], "seed": 0},
}

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings in order (later wins)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(value)
    return cfg


def validate(cfg: dict) -> None:
    errors = sorted(_VALIDATOR.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = ".".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    b = cfg.get("area_bounds")
    if b is not None and b["a1"] > b["a2"]:
        raise ConfigError(f"area_bounds: a1={b['a1']} exceeds a2={b['a2']}")


def resolve(raw: dict, overrides=()) -> dict:
    """Validated config with defaults filled in and overrides applied."""
    cfg = apply_overrides(raw, overrides)
    validate(cfg)  # reject unknown keys and bad values before filling defaults
    out = copy.deepcopy(DEFAULTS)
    for section, value in cfg.items():
        if isinstance(value, dict) and isinstance(out.get(section), dict) and section not in ("data", "supervision"):
            out[section].update(value)
        else:
            out[section] = copy.deepcopy(value)
    if "data" in cfg and "generator" in cfg["data"]:
        out["data"] = {**DEFAULTS["data"], **cfg["data"]}
    sup = out["supervision"]
    out["supervision"] = {**_SUPERVISION_DEFAULTS.get(sup["kind"], {}), **sup}
    validate(out)
    return out


def load(path, overrides=()) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = resolve(raw, overrides)
    cfg["_base_dir"] = str(path.resolve().parent)
    return cfg


def output_dir(cfg: dict) -> Path:
    out = Path(cfg["output"]["dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def input_path(cfg: dict, name: str) -> Path:
    """Input file paths are relative to the config file's directory."""
    p = Path(name)
    return p if p.is_absolute() else Path(cfg.get("_base_dir", ".")) / p


def public(cfg: dict) -> dict:
    """The config without private bookkeeping keys (for manifests)."""
    return {k: v for k, v in cfg.items() if not k.startswith("_")}
