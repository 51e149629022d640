"""JSON schema loading and validation for the on-disk formats."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema
from referencing import Registry, Resource

from .errors import ConfigError

SCHEMAS = ("bias_spec", "fire_params", "model_config", "checkpoint", "run_config")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("firelab.schemas").joinpath(f"{name}.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=None)
def _registry():
    return Registry().with_resources(
        (f"{name}.json", Resource.from_contents(load_schema(name))) for name in SCHEMAS
    )


def validate(doc, name: str):
    """Validate ``doc`` against a bundled schema; raise ConfigError on the first problem."""
    schema = load_schema(name)
    validator = jsonschema.Draft202012Validator(schema, registry=_registry())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{name}: {where}: {e.message}")
    return doc
