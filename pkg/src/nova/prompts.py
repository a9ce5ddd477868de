"""Versioned catalog of prompt templates and the discovery-theory catalog.

Templates ship as plain-text files plus a JSON manifest (name, placeholders,
expected output schema). Placeholder syntax is ``{name}`` with no nesting;
literal braces are escaped by doubling. A user template directory can overlay
any shipped file by name.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

_PACKAGE = "nova.templates"

REGISTRY_NAMES = (
    "initial_seed",
    "trend_report",
    "trend_ideas",
    "theory_ideas",
    "expand_ideas",
    "initial_proposal",
    "method_decompose",
    "final_proposal",
    "search_plan",
    "pairwise_rank",
    "novelty_judge",
    "self_reflect_cut",
)

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class PromptError(Exception):
    pass


class UnknownTemplateError(PromptError):
    pass


class MissingPlaceholderError(PromptError):
    def __init__(self, template: str, missing: list[str]):
        super().__init__(f"template {template!r} missing bindings for: {', '.join(missing)}")
        self.missing = missing


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required_placeholders: frozenset[str]
    schema_name: str | None


@dataclass(frozen=True)
class DiscoveryTheory:
    index: int
    name: str
    theoretical_basis: str
    method: str


def _scan(body: str, bindings: dict[str, str], template: str) -> str:
    """One-pass template scan: substitute placeholders, honor doubled braces.

    Binding values are inserted verbatim and never re-scanned, so braces in
    values cannot collide with placeholders.
    """
    out: list[str] = []
    i = 0
    n = len(body)
    while i < n:
        ch = body[i]
        if ch == "{":
            if i + 1 < n and body[i + 1] == "{":
                out.append("{")
                i += 2
                continue
            m = _NAME_RE.match(body, i + 1)
            if m is None or m.end() >= n or body[m.end()] != "}":
                raise PromptError(
                    f"template {template!r}: malformed placeholder at offset {i}"
                )
            name = m.group(0)
            if name not in bindings:
                raise MissingPlaceholderError(template, [name])
            out.append(str(bindings[name]))
            i = m.end() + 1
            continue
        if ch == "}":
            if i + 1 < n and body[i + 1] == "}":
                out.append("}")
                i += 2
                continue
            raise PromptError(f"template {template!r}: unescaped '}}' at offset {i}")
        out.append(ch)
        i += 1
    return "".join(out)


def placeholders_in(body: str, template: str = "<inline>") -> set[str]:
    """Placeholder names occurring in a template body."""
    names: set[str] = set()
    stripped = body
    i = 0
    n = len(stripped)
    while i < n:
        ch = stripped[i]
        if ch == "{" and i + 1 < n and stripped[i + 1] == "{":
            i += 2
            continue
        if ch == "}" and i + 1 < n and stripped[i + 1] == "}":
            i += 2
            continue
        if ch == "{":
            m = _NAME_RE.match(stripped, i + 1)
            if m is None or m.end() >= n or stripped[m.end()] != "}":
                raise PromptError(f"template {template!r}: malformed placeholder at offset {i}")
            names.add(m.group(0))
            i = m.end() + 1
            continue
        if ch == "}":
            raise PromptError(f"template {template!r}: unescaped '}}' at offset {i}")
        i += 1
    return names


class PromptLibrary:
    """Immutable after load; safe to share across tasks."""

    def __init__(self, template_dir: str | Path | None = None):
        self._user_dir = Path(template_dir) if template_dir is not None else None
        self._templates = self._load_registry()
        self._theories = self._load_theories()
        self._defaults = json.loads(self._read("default_bindings.json"))

    def _read(self, filename: str) -> str:
        if self._user_dir is not None:
            candidate = self._user_dir / filename
            if candidate.is_file():
                return candidate.read_text(encoding="utf-8")
        return (resources.files(_PACKAGE) / filename).read_text(encoding="utf-8")

    def _load_registry(self) -> dict[str, PromptTemplate]:
        manifest = json.loads(self._read("manifest.json"))
        templates: dict[str, PromptTemplate] = {}
        for entry in manifest["templates"]:
            name = entry["name"]
            body = self._read(entry["file"])
            declared = set(entry["placeholders"])
            found = placeholders_in(body, name)
            if found != declared:
                raise PromptError(
                    f"template {name!r}: manifest placeholders {sorted(declared)} "
                    f"do not match body placeholders {sorted(found)}"
                )
            templates[name] = PromptTemplate(
                name=name,
                body=body,
                required_placeholders=frozenset(declared),
                schema_name=entry["schema_name"],
            )
        if set(templates) != set(REGISTRY_NAMES):
            raise PromptError(
                f"manifest names {sorted(templates)} do not match the fixed registry"
            )
        return templates

    def _load_theories(self) -> tuple[DiscoveryTheory, ...]:
        data = json.loads(self._read("discovery_theories.json"))
        theories = tuple(
            DiscoveryTheory(
                index=t["index"],
                name=t["name"],
                theoretical_basis=t["theoretical_basis"],
                method=t["method"],
            )
            for t in data["theories"]
        )
        if [t.index for t in theories] != list(range(1, 11)):
            raise PromptError("discovery-theory catalog must hold entries 1..10 in order")
        return theories

    def names(self) -> tuple[str, ...]:
        return REGISTRY_NAMES

    def get(self, name: str) -> PromptTemplate:
        try:
            return self._templates[name]
        except KeyError:
            raise UnknownTemplateError(f"unknown template {name!r}") from None

    def render(self, name: str, bindings: dict[str, str]) -> str:
        """Substitute every placeholder; raises if any required binding is absent."""
        template = self.get(name)
        missing = sorted(template.required_placeholders - set(bindings))
        if missing:
            raise MissingPlaceholderError(name, missing)
        return _scan(template.body, bindings, name)

    def theories(self) -> list[DiscoveryTheory]:
        """The 10 catalog entries in index order."""
        return list(self._theories)

    def default_bindings(self) -> dict[str, str]:
        """Shipped defaults for format/example placeholders (user-overridable)."""
        return dict(self._defaults)

    def theory_catalog_text(self) -> str:
        """The full catalog rendered for embedding into prompts."""
        blocks = []
        for t in self._theories:
            blocks.append(
                f"{t.index}. {t.name}\n"
                f"Theoretical Basis: {t.theoretical_basis}\n"
                f"Method: {t.method}"
            )
        return "\n\n".join(blocks)
