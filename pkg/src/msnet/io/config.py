"""JSON configuration files: schema, validation and model construction.

Example::

    {"variant": "xs", "protocol": [3, 5, 7, 9], "parts": "full",
     "seed": 0, "precision": "float32"}

``variant`` may also be an object overriding fields of a named base
variant, e.g. ``{"base": "xs", "widen": 1.2}``.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Any, Dict

import jsonschema
import numpy as np

from ..architecture import PARTS, VARIANTS, KernelProtocol, ModelGraph, ModelVariant, build_model

_odd_kernel = {"type": "integer", "minimum": 3, "not": {"multipleOf": 2}}
_int_list = lambda n: {"type": "array", "items": {"type": "integer", "minimum": 1},  # noqa: E731
                       "minItems": n, "maxItems": n}

VARIANT_OBJECT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "base": {"enum": sorted(VARIANTS)},
        "name": {"type": "string"},
        "widen": {"type": "number", "exclusiveMinimum": 0},
        "module_types": {"type": "array", "items": {"enum": ["ibm", "sibm"]},
                         "minItems": 2, "maxItems": 2},
        "blocks_per_stage": _int_list(4),
        "expansion": {"type": "integer", "minimum": 1},
        "base_channels": _int_list(5),
        "n_branches": {"type": "integer", "minimum": 2},
        "gql_stages": {"type": "array", "items": {"enum": [1, 2, 3, 4]}, "uniqueItems": True},
        "query_dim": {"type": "integer", "minimum": 1},
        "num_classes": {"type": "integer", "minimum": 1},
        "branch_ratio": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                         "minItems": 4, "maxItems": 4},
        "head_units": {"type": "integer", "minimum": 1},
        "head_towers": {"enum": [1, 2]},
        "stem_convs": {"enum": [1, 3]},
        "downsample_stage1": {"type": "boolean"},
        "min_branch_width": {"type": "integer", "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "model configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["variant"],
    "properties": {
        "variant": {"oneOf": [{"enum": sorted(VARIANTS)}, VARIANT_OBJECT_SCHEMA]},
        "protocol": {"type": "array", "items": _odd_kernel, "minItems": 4, "maxItems": 4},
        "protocol_neck": {"type": "boolean"},
        "protocol_head": {"type": "boolean"},
        "parts": {"enum": list(PARTS)},
        "seed": {"type": "integer", "minimum": 0},
        "precision": {"enum": ["float32", "float64"]},
    },
}

DEFAULTS = {"protocol": [3, 5, 7, 9], "protocol_neck": True, "protocol_head": True,
            "parts": "full", "seed": 0, "precision": "float32"}


class ConfigError(ValueError):
    pass


def validate_config(doc: Any) -> Dict[str, Any]:
    """Validate against the schema and fill defaults; raises ConfigError."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    return {**DEFAULTS, **doc}


def load_config(path) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    return validate_config(doc)


def resolve_variant(spec) -> ModelVariant:
    if isinstance(spec, str):
        return VARIANTS[spec]
    fields = dict(spec)
    base = VARIANTS[fields.pop("base", "xs")]
    fields.setdefault("name", "custom")
    for key, value in list(fields.items()):
        if isinstance(value, list):
            fields[key] = tuple(value)
    try:
        return dataclasses.replace(base, **fields)
    except ValueError as exc:
        raise ConfigError(f"invalid variant: {exc}") from None


def resolve_protocol(cfg: Dict[str, Any]) -> KernelProtocol:
    return KernelProtocol(tuple(cfg["protocol"]), neck=cfg["protocol_neck"], head=cfg["protocol_head"])


def model_from_config(cfg: Dict[str, Any]) -> ModelGraph:
    cfg = validate_config(cfg)
    model = build_model(resolve_variant(cfg["variant"]), resolve_protocol(cfg), cfg["parts"], cfg["seed"])
    return model.astype(np.dtype(cfg["precision"]))
