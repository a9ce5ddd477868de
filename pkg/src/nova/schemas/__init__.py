"""Loading and applying the shipped JSON schemas.

Two schema families live under ``nova/schemas``: domain/artifact schemas at
the top level and LLM-output schemas under ``outputs/``. Validation returns
violation strings (json-pointer path plus message) rather than raising, so
callers can treat bad data as data.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

from .. import domain

_PACKAGE = "nova.schemas"


@lru_cache(maxsize=None)
def schema_names() -> tuple[str, ...]:
    names = []
    for entry in resources.files(_PACKAGE).iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[: -len(".json")])
    return tuple(sorted(names))


@lru_cache(maxsize=None)
def output_schema_names() -> tuple[str, ...]:
    names = []
    for entry in (resources.files(_PACKAGE) / "outputs").iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[: -len(".json")])
    return tuple(sorted(names))


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    path = resources.files(_PACKAGE) / f"{name}.json"
    if not path.is_file():
        raise KeyError(f"unknown schema {name!r}")
    return json.loads(path.read_text(encoding="utf-8"))


@lru_cache(maxsize=None)
def load_output_schema(name: str) -> dict:
    path = resources.files(_PACKAGE) / "outputs" / f"{name}.json"
    if not path.is_file():
        raise KeyError(f"unknown output schema {name!r}")
    return json.loads(path.read_text(encoding="utf-8"))


@lru_cache(maxsize=None)
def _validator(family: str, name: str) -> jsonschema.Validator:
    schema = load_schema(name) if family == "domain" else load_output_schema(name)
    return jsonschema.Draft202012Validator(schema)


def _errors(validator: jsonschema.Validator, data) -> list[str]:
    out = []
    for err in sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "$"
        out.append(f"{where}: {err.message}")
    return out


def schema_validate(kind: str, data) -> list[str]:
    """Structural violations of `data` against the shipped schema for `kind`."""
    return _errors(_validator("domain", kind), data)


def output_schema_validate(name: str, data) -> list[str]:
    return _errors(_validator("output", name), data)


# Artifact kinds whose payload embeds other typed values; each entry maps the
# container field to the element schema used for per-item validation.
_COMPOSITE_ITEMS = {
    "idea_pool": ("ideas", "idea"),
    "iteration_records": ("records", "iteration_record"),
}


def validate_artifact(kind: str, data) -> list[str]:
    """Full validation of one artifact payload: schema plus domain invariants."""
    violations = schema_validate(kind, data)
    if violations:
        return violations
    if kind in _COMPOSITE_ITEMS:
        field, item_kind = _COMPOSITE_ITEMS[kind]
        for n, item in enumerate(data[field]):
            for v in validate_artifact(item_kind, item):
                violations.append(f"{field}[{n}].{v}")
        return violations
    if kind in domain.DOMAIN_TYPES:
        try:
            value = domain.parse(kind, data)
        except domain.DomainParseError as exc:
            return [str(exc)]
        violations.extend(domain.validate(value))
    return violations
