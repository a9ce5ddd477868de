"""Shared domain types, their JSON (de)serialization, and invariant checks.

Every pipeline artifact is one of these value types. Serialization is plain
UTF-8 JSON with keys emitted in field-declaration order; optional fields that
are unset are omitted. `from_dict` rejects unknown and missing fields so that
artifacts written by other tools fail loudly instead of silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

IDEA_SOURCES = ("internal_knowledge", "trend", "discovery_theory", "iteration")

PROPOSAL_STAGES = ("initial", "final")

# Section registries for the two proposal templates, in emission order.
INITIAL_SECTIONS = (
    "Problem",
    "Existing Methods",
    "Motivation",
    "Proposed Method",
    "Experiment Plan",
)
FINAL_SECTIONS = (
    "Title",
    "Problem Statement",
    "Motivation",
    "Proposed Method",
    "Step-by-Step Experiment Plan",
)

EMBEDDING_NORM_TOL = 1e-6


class DomainParseError(ValueError):
    """Raised when a dict cannot be parsed into a domain value at all."""


def _check_keys(kind: str, data: dict, required: tuple, optional: tuple = ()) -> None:
    if not isinstance(data, dict):
        raise DomainParseError(f"{kind}: expected object, got {type(data).__name__}")
    allowed = set(required) | set(optional)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise DomainParseError(f"{kind}: unknown fields {unknown}")
    missing = sorted(set(required) - set(data))
    if missing:
        raise DomainParseError(f"{kind}: missing fields {missing}")


def _str_list(kind: str, name: str, value) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise DomainParseError(f"{kind}: {name} must be a list of strings")
    return tuple(value)


def _float_list(kind: str, name: str, value) -> tuple[float, ...]:
    if not isinstance(value, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise DomainParseError(f"{kind}: {name} must be a list of numbers")
    return tuple(float(v) for v in value)


def embedding_norm(values) -> float:
    return math.sqrt(math.fsum(float(v) * float(v) for v in values))


def _check_embedding(kind: str, values, out: list[str]) -> None:
    if any(not math.isfinite(v) for v in values):
        out.append(f"{kind}.embedding: entries must be finite")
        return
    norm = embedding_norm(values)
    if abs(norm - 1.0) > EMBEDDING_NORM_TOL:
        out.append(f"{kind}.embedding: norm {norm:.6g} is not 1 within {EMBEDDING_NORM_TOL}")


# ---------------------------------------------------------------------------
# SeedPaper
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Reference:
    title: str
    abstract: str = ""

    def to_dict(self) -> dict:
        return {"title": self.title, "abstract": self.abstract}

    @classmethod
    def from_dict(cls, data: dict) -> "Reference":
        _check_keys("Reference", data, ("title",), ("abstract",))
        return cls(title=str(data["title"]), abstract=str(data.get("abstract", "")))


@dataclass(frozen=True)
class SeedPaper:
    """The input paper a run enhances; root of all generated ideas."""

    id: str
    title: str
    abstract: str
    references: tuple[Reference, ...] = ()
    source_meta: dict[str, int] | None = None

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "title": self.title,
            "abstract": self.abstract,
            "references": [r.to_dict() for r in self.references],
        }
        if self.source_meta is not None:
            out["source_meta"] = dict(self.source_meta)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SeedPaper":
        _check_keys(
            "SeedPaper",
            data,
            ("id", "title", "abstract", "references"),
            ("source_meta",),
        )
        refs = data["references"]
        if not isinstance(refs, list):
            raise DomainParseError("SeedPaper: references must be a list")
        meta = data.get("source_meta")
        if meta is not None:
            if not isinstance(meta, dict) or not all(
                isinstance(k, str) and isinstance(v, int) and not isinstance(v, bool)
                for k, v in meta.items()
            ):
                raise DomainParseError("SeedPaper: source_meta must map strings to integers")
            meta = dict(meta)
        return cls(
            id=str(data["id"]),
            title=str(data["title"]),
            abstract=str(data["abstract"]),
            references=tuple(Reference.from_dict(r) for r in refs),
            source_meta=meta,
        )

    def validate(self) -> list[str]:
        out: list[str] = []
        if not self.title:
            out.append("SeedPaper.title: must be nonempty")
        if not self.abstract:
            out.append("SeedPaper.abstract: must be nonempty")
        titles = [r.title for r in self.references]
        if len(titles) != len(set(titles)):
            out.append("SeedPaper.references: titles must be unique")
        for r in self.references:
            if not r.title:
                out.append("SeedPaper.references: reference title must be nonempty")
        if self.source_meta is not None:
            for k, v in self.source_meta.items():
                if v < 0:
                    out.append(f"SeedPaper.source_meta[{k}]: must be nonnegative")
        return out


# ---------------------------------------------------------------------------
# Idea
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Idea:
    """One seed idea in the evolving pool."""

    id: str
    thinking: str
    idea: str
    keywords: tuple[str, ...]
    source: str
    generation: int = 0
    parent_id: str | None = None
    embedding: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "thinking": self.thinking,
            "idea": self.idea,
            "keywords": list(self.keywords),
            "source": self.source,
            "generation": self.generation,
        }
        if self.parent_id is not None:
            out["parent_id"] = self.parent_id
        if self.embedding is not None:
            out["embedding"] = list(self.embedding)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Idea":
        _check_keys(
            "Idea",
            data,
            ("id", "thinking", "idea", "keywords", "source", "generation"),
            ("parent_id", "embedding"),
        )
        generation = data["generation"]
        if not isinstance(generation, int) or isinstance(generation, bool):
            raise DomainParseError("Idea: generation must be an integer")
        embedding = data.get("embedding")
        return cls(
            id=str(data["id"]),
            thinking=str(data["thinking"]),
            idea=str(data["idea"]),
            keywords=_str_list("Idea", "keywords", data["keywords"]),
            source=str(data["source"]),
            generation=generation,
            parent_id=None if data.get("parent_id") is None else str(data["parent_id"]),
            embedding=None if embedding is None else _float_list("Idea", "embedding", embedding),
        )

    def validate(self) -> list[str]:
        out: list[str] = []
        if not self.idea:
            out.append("Idea.idea: must be nonempty")
        if not 1 <= len(self.keywords) <= 10:
            out.append(f"Idea.keywords: expected 1-10 entries, got {len(self.keywords)}")
        if self.source not in IDEA_SOURCES:
            out.append(f"Idea.source: {self.source!r} not in {IDEA_SOURCES}")
        if self.generation < 0:
            out.append("Idea.generation: must be nonnegative")
        if self.embedding is not None:
            _check_embedding("Idea", self.embedding, out)
        return out


def validate_lineage(pool: list[Idea]) -> list[str]:
    """Cross-object check: a child's generation is its parent's plus one."""
    by_id = {i.id: i for i in pool}
    out: list[str] = []
    for idea in pool:
        if idea.parent_id is None:
            continue
        parent = by_id.get(idea.parent_id)
        if parent is None:
            continue  # parent may live in an earlier generation snapshot
        if idea.generation != parent.generation + 1:
            out.append(
                f"Idea {idea.id}: generation {idea.generation} != parent generation "
                f"{parent.generation} + 1"
            )
    return out


# ---------------------------------------------------------------------------
# SearchPlan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Direction:
    thinking: str
    keywords: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"thinking": self.thinking, "keywords": list(self.keywords)}

    @classmethod
    def from_dict(cls, data: dict) -> "Direction":
        _check_keys("Direction", data, ("thinking", "keywords"))
        return cls(
            thinking=str(data["thinking"]),
            keywords=_str_list("Direction", "keywords", data["keywords"]),
        )


@dataclass(frozen=True)
class SearchPlan:
    """Idea-specific list of query directions guiding literature retrieval."""

    idea_id: str
    directions: tuple[Direction, ...]
    created_at_generation: int = 0

    def to_dict(self) -> dict:
        return {
            "idea_id": self.idea_id,
            "directions": [d.to_dict() for d in self.directions],
            "created_at_generation": self.created_at_generation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SearchPlan":
        _check_keys("SearchPlan", data, ("idea_id", "directions", "created_at_generation"))
        directions = data["directions"]
        if not isinstance(directions, list):
            raise DomainParseError("SearchPlan: directions must be a list")
        gen = data["created_at_generation"]
        if not isinstance(gen, int) or isinstance(gen, bool):
            raise DomainParseError("SearchPlan: created_at_generation must be an integer")
        return cls(
            idea_id=str(data["idea_id"]),
            directions=tuple(Direction.from_dict(d) for d in directions),
            created_at_generation=gen,
        )

    def validate(self) -> list[str]:
        out: list[str] = []
        if not self.directions:
            out.append("SearchPlan.directions: at least one direction required")
        for n, d in enumerate(self.directions):
            if not d.keywords:
                out.append(f"SearchPlan.directions[{n}]: direction needs >=1 keyword")
        if self.created_at_generation < 0:
            out.append("SearchPlan.created_at_generation: must be nonnegative")
        return out


# ---------------------------------------------------------------------------
# RetrievedDoc
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievedDoc:
    title: str
    abstract: str = ""
    source_query: str = ""
    score: float = 0.0
    embedding: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        out = {
            "title": self.title,
            "abstract": self.abstract,
            "source_query": self.source_query,
            "score": self.score,
        }
        if self.embedding is not None:
            out["embedding"] = list(self.embedding)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RetrievedDoc":
        _check_keys(
            "RetrievedDoc", data, ("title", "abstract", "source_query", "score"), ("embedding",)
        )
        score = data["score"]
        if not isinstance(score, (int, float)) or isinstance(score, bool):
            raise DomainParseError("RetrievedDoc: score must be a number")
        embedding = data.get("embedding")
        return cls(
            title=str(data["title"]),
            abstract=str(data["abstract"]),
            source_query=str(data["source_query"]),
            score=float(score),
            embedding=None
            if embedding is None
            else _float_list("RetrievedDoc", "embedding", embedding),
        )

    def validate(self) -> list[str]:
        out: list[str] = []
        if not self.title:
            out.append("RetrievedDoc.title: must be nonempty")
        if self.embedding is not None:
            _check_embedding("RetrievedDoc", self.embedding, out)
        return out


# ---------------------------------------------------------------------------
# Proposal
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubModule:
    """One method submodule of a decomposed proposal."""

    name: str
    purpose: str
    implementation: str
    keywords: tuple[str, ...]


def _submodule_to_dict(m: SubModule, name_key: str, keywords_key: str) -> dict:
    return {
        name_key: m.name,
        "purpose": m.purpose,
        "implementation": m.implementation,
        keywords_key: list(m.keywords),
    }


def _submodule_from_dict(kind: str, data: dict, name_key: str, keywords_key: str) -> SubModule:
    _check_keys(kind, data, (name_key, "purpose", "implementation", keywords_key))
    return SubModule(
        name=str(data[name_key]),
        purpose=str(data["purpose"]),
        implementation=str(data["implementation"]),
        keywords=_str_list(kind, keywords_key, data[keywords_key]),
    )


@dataclass(frozen=True)
class Proposal:
    """Structured expansion of an idea; section set depends on the stage."""

    idea_id: str
    stage: str
    sections: dict[str, str]
    decomposition: tuple[SubModule, ...] | None = None

    def to_dict(self) -> dict:
        out = {
            "idea_id": self.idea_id,
            "stage": self.stage,
            "sections": dict(self.sections),
        }
        if self.decomposition is not None:
            out["decomposition"] = [
                _submodule_to_dict(m, "module_name", "keywords") for m in self.decomposition
            ]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Proposal":
        _check_keys("Proposal", data, ("idea_id", "stage", "sections"), ("decomposition",))
        sections = data["sections"]
        if not isinstance(sections, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in sections.items()
        ):
            raise DomainParseError("Proposal: sections must map strings to strings")
        decomposition = data.get("decomposition")
        if decomposition is not None:
            if not isinstance(decomposition, list):
                raise DomainParseError("Proposal: decomposition must be a list")
            decomposition = tuple(
                _submodule_from_dict("Proposal.decomposition", m, "module_name", "keywords")
                for m in decomposition
            )
        return cls(
            idea_id=str(data["idea_id"]),
            stage=str(data["stage"]),
            sections=dict(sections),
            decomposition=decomposition,
        )

    def validate(self) -> list[str]:
        out: list[str] = []
        if self.stage not in PROPOSAL_STAGES:
            out.append(f"Proposal.stage: {self.stage!r} not in {PROPOSAL_STAGES}")
            return out
        expected = INITIAL_SECTIONS if self.stage == "initial" else FINAL_SECTIONS
        if tuple(self.sections.keys()) != expected:
            out.append(
                f"Proposal.sections: {self.stage} stage requires exactly {list(expected)}, "
                f"got {list(self.sections.keys())}"
            )
        for name, body in self.sections.items():
            if not body:
                out.append(f"Proposal.sections[{name}]: must be nonempty")
        if self.decomposition is not None:
            if not self.decomposition:
                out.append("Proposal.decomposition: must have >=1 module when present")
            for n, m in enumerate(self.decomposition):
                if not m.keywords:
                    out.append(f"Proposal.decomposition[{n}]: module needs >=1 keyword")
        return out


# ---------------------------------------------------------------------------
# PipelineConfig
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Run-level knobs; defaults mirror the reference experiment setup."""

    iterations_T: int = 3
    initial_seed_count: int = 15
    expand_count: int = 10
    keep_count: int = 3
    retrieve_K: int = 5
    cluster_count: int = 100
    tournament_rounds: int = 5
    novelty_topk: int = 10
    novelty_sim_threshold: float = 0.3
    dup_sim_threshold: float = 0.8
    rng_seed: int = 0

    _INT_FIELDS = (
        "iterations_T",
        "initial_seed_count",
        "expand_count",
        "keep_count",
        "retrieve_K",
        "cluster_count",
        "tournament_rounds",
        "novelty_topk",
        "rng_seed",
    )
    _FLOAT_FIELDS = ("novelty_sim_threshold", "dup_sim_threshold")

    def to_dict(self) -> dict:
        return {
            "iterations_T": self.iterations_T,
            "initial_seed_count": self.initial_seed_count,
            "expand_count": self.expand_count,
            "keep_count": self.keep_count,
            "retrieve_K": self.retrieve_K,
            "cluster_count": self.cluster_count,
            "tournament_rounds": self.tournament_rounds,
            "novelty_topk": self.novelty_topk,
            "novelty_sim_threshold": self.novelty_sim_threshold,
            "dup_sim_threshold": self.dup_sim_threshold,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        _check_keys(
            "PipelineConfig",
            data,
            (),
            cls._INT_FIELDS + cls._FLOAT_FIELDS,
        )
        kwargs = {}
        for name in cls._INT_FIELDS:
            if name in data:
                v = data[name]
                if not isinstance(v, int) or isinstance(v, bool):
                    raise DomainParseError(f"PipelineConfig: {name} must be an integer")
                kwargs[name] = v
        for name in cls._FLOAT_FIELDS:
            if name in data:
                v = data[name]
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    raise DomainParseError(f"PipelineConfig: {name} must be a number")
                kwargs[name] = float(v)
        return cls(**kwargs)

    def validate(self) -> list[str]:
        out: list[str] = []
        positives = (
            "initial_seed_count",
            "expand_count",
            "keep_count",
            "retrieve_K",
            "cluster_count",
            "tournament_rounds",
            "novelty_topk",
        )
        for name in positives:
            if getattr(self, name) < 1:
                out.append(f"PipelineConfig.{name}: must be a positive integer")
        # iterations_T = 0 is a legal identity iteration (clamped small runs).
        if self.iterations_T < 0:
            out.append("PipelineConfig.iterations_T: must be nonnegative")
        if self.keep_count > self.expand_count:
            out.append("PipelineConfig.keep_count: must be <= expand_count")
        for name in self._FLOAT_FIELDS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                out.append(f"PipelineConfig.{name}: must be in [0, 1]")
        return out


# ---------------------------------------------------------------------------
# TournamentResult
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Match:
    round: int
    a: str
    b: str
    winner: str

    def to_dict(self) -> dict:
        return {"round": self.round, "a": self.a, "b": self.b, "winner": self.winner}

    @classmethod
    def from_dict(cls, data: dict) -> "Match":
        _check_keys("Match", data, ("round", "a", "b", "winner"))
        rnd = data["round"]
        if not isinstance(rnd, int) or isinstance(rnd, bool):
            raise DomainParseError("Match: round must be an integer")
        return cls(round=rnd, a=str(data["a"]), b=str(data["b"]), winner=str(data["winner"]))


@dataclass(frozen=True)
class Bye:
    round: int
    idea_id: str

    def to_dict(self) -> dict:
        return {"round": self.round, "idea_id": self.idea_id}

    @classmethod
    def from_dict(cls, data: dict) -> "Bye":
        _check_keys("Bye", data, ("round", "idea_id"))
        rnd = data["round"]
        if not isinstance(rnd, int) or isinstance(rnd, bool):
            raise DomainParseError("Bye: round must be an integer")
        return cls(round=rnd, idea_id=str(data["idea_id"]))


@dataclass(frozen=True)
class TournamentResult:
    scores: dict[str, int] = field(default_factory=dict)
    matches: tuple[Match, ...] = ()
    byes: tuple[Bye, ...] = ()

    def to_dict(self) -> dict:
        return {
            "scores": dict(self.scores),
            "matches": [m.to_dict() for m in self.matches],
            "byes": [b.to_dict() for b in self.byes],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TournamentResult":
        _check_keys("TournamentResult", data, ("scores", "matches", "byes"))
        scores = data["scores"]
        if not isinstance(scores, dict) or not all(
            isinstance(k, str) and isinstance(v, int) and not isinstance(v, bool)
            for k, v in scores.items()
        ):
            raise DomainParseError("TournamentResult: scores must map strings to integers")
        return cls(
            scores=dict(scores),
            matches=tuple(Match.from_dict(m) for m in data["matches"]),
            byes=tuple(Bye.from_dict(b) for b in data["byes"]),
        )

    def rounds_played(self) -> int:
        rounds = {m.round for m in self.matches} | {b.round for b in self.byes}
        return len(rounds)

    def validate(self) -> list[str]:
        out: list[str] = []
        for idea_id, score in self.scores.items():
            if score < 0:
                out.append(f"TournamentResult.scores[{idea_id}]: must be nonnegative")
        rounds = self.rounds_played()
        if rounds:
            for idea_id, score in self.scores.items():
                if score > rounds:
                    out.append(
                        f"TournamentResult.scores[{idea_id}]: {score} exceeds "
                        f"{rounds} rounds played"
                    )
        total = sum(self.scores.values())
        if total != len(self.matches) + len(self.byes):
            out.append(
                f"TournamentResult: score sum {total} != matches {len(self.matches)} "
                f"+ byes {len(self.byes)}"
            )
        for m in self.matches:
            if m.winner not in (m.a, m.b):
                out.append(f"TournamentResult: winner {m.winner} not in match ({m.a}, {m.b})")
        return out


# ---------------------------------------------------------------------------
# Generic dispatch
# ---------------------------------------------------------------------------

DOMAIN_TYPES = {
    "seed_paper": SeedPaper,
    "idea": Idea,
    "search_plan": SearchPlan,
    "retrieved_doc": RetrievedDoc,
    "proposal": Proposal,
    "pipeline_config": PipelineConfig,
    "tournament_result": TournamentResult,
}


def validate(artifact) -> list[str]:
    """Invariant report for any domain value; empty means all invariants hold."""
    checker = getattr(artifact, "validate", None)
    if checker is None:
        raise TypeError(f"not a domain value: {type(artifact).__name__}")
    return checker()


def parse(kind: str, data: dict):
    """Parse a dict into the named domain type; raises DomainParseError."""
    try:
        cls = DOMAIN_TYPES[kind]
    except KeyError:
        raise DomainParseError(f"unknown domain type {kind!r}") from None
    return cls.from_dict(data)
