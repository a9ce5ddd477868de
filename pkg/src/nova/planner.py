"""The core iteration: plan a search per idea, retrieve, expand, cut, replace.

Each generation maps every pool idea through make_plan -> execute_plan ->
expand_idea and replaces the pool with the union of the outputs. Expansion
failures let the old idea survive the generation unchanged, keeping the
pool-growth law near-exact and runs resumable. Idea-level work fans out on a
thread pool bounded by the gateway's parallelism; IDs are assigned at the
ordered join, so results are reproducible regardless of scheduling.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .domain import Direction, Idea, PipelineConfig, RetrievedDoc, SearchPlan, SeedPaper
from .gateway import ChatRequest, ExtractionFailedError, Gateway
from .ids import IdFactory
from .literature import Embedder, SearchQuery, cosine
from .prompts import PromptLibrary
from .seeding import format_idea

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IterationRecord:
    generation: int
    input_pool_size: int
    output_pool_size: int
    plans: tuple[SearchPlan, ...]
    retrieved_counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "generation": self.generation,
            "input_pool_size": self.input_pool_size,
            "output_pool_size": self.output_pool_size,
            "plans": [p.to_dict() for p in self.plans],
            "retrieved_counts": dict(self.retrieved_counts),
        }


@dataclass(frozen=True)
class _ExpandOutcome:
    """Per-idea result of one generation's worker, before materialization."""

    plan: SearchPlan
    retrieved: int
    candidates: tuple[dict, ...] | None  # None = expansion failed, idea survives


def format_docs(docs: list[RetrievedDoc]) -> str:
    if not docs:
        return "(no new knowledge retrieved)"
    lines = []
    for d in docs:
        lines.append(f"Title: {d.title}\nAbstract: {d.abstract}")
    return "\n\n".join(lines)


class PlannerLoop:
    def __init__(
        self,
        gateway: Gateway,
        library: PromptLibrary,
        search_backend,
        embedder: Embedder,
        id_factory: IdFactory,
        config: PipelineConfig,
        model_id: str,
    ):
        self._gateway = gateway
        self._library = library
        self._search = search_backend
        self._embedder = embedder
        self._ids = id_factory
        self._config = config
        self._model_id = model_id

    # -- planning ------------------------------------------------------------

    def make_plan(self, idea: Idea) -> SearchPlan:
        """Search plan for one idea; falls back to its own keywords on failure."""
        defaults = self._library.default_bindings()
        prompt = self._library.render(
            "search_plan",
            {
                "few_shot_example": defaults["few_shot_example"],
                "plan_json_format": defaults["plan_json_format"],
                "idea_info": format_idea(idea),
            },
        )
        directions: list[Direction] = []
        try:
            parsed, _ = self._gateway.complete_json(
                ChatRequest(model_id=self._model_id, prompt=prompt), "search_plan"
            )
            for raw in parsed["directions"]:
                keywords = tuple(k for k in raw["keywords"] if k.strip())
                if not keywords:
                    logger.info("dropping keywordless direction for idea %s", idea.id)
                    continue
                directions.append(Direction(thinking=raw["thinking"], keywords=keywords))
        except ExtractionFailedError as exc:
            logger.warning("search plan failed for idea %s, using fallback: %s", idea.id, exc)
        if not directions:
            directions = [Direction(thinking="fallback: idea keywords", keywords=idea.keywords)]
        return SearchPlan(
            idea_id=idea.id,
            directions=tuple(directions),
            created_at_generation=idea.generation,
        )

    def execute_plan(self, plan: SearchPlan, K: int, idea_embedding) -> list[RetrievedDoc]:
        """One search per direction, merged by title, ranked by cosine, top K."""
        if self._search is None:
            return []
        merged: dict[str, RetrievedDoc] = {}
        for direction in plan.directions:
            query = SearchQuery(text=" ".join(direction.keywords), limit=K)
            try:
                results = self._search.search(query)
            except Exception as exc:
                logger.warning("search failed for %r: %s", query.text, exc)
                continue
            for doc in results:
                merged.setdefault(doc.title, doc)
        if not merged:
            logger.info("plan for idea %s retrieved nothing", plan.idea_id)
            return []
        docs = list(merged.values())
        sims = {}
        for doc in docs:
            embedding = doc.embedding
            if embedding is None:
                embedding = tuple(
                    float(v) for v in self._embedder.embed([f"{doc.title}\n{doc.abstract}"])[0]
                )
                doc = RetrievedDoc(
                    title=doc.title,
                    abstract=doc.abstract,
                    source_query=doc.source_query,
                    score=doc.score,
                    embedding=embedding,
                )
            sims[doc.title] = (cosine(idea_embedding, doc.embedding), doc)
        ranked = sorted(sims.values(), key=lambda pair: (-pair[0], pair[1].title))
        return [doc for _, doc in ranked[:K]]

    # -- expansion -------------------------------------------------------------

    def _expand_candidates(
        self, paper: SeedPaper, old: Idea, docs: list[RetrievedDoc]
    ) -> tuple[dict, ...] | None:
        """LLM half of expand_idea: candidate dicts cut to keep_count, or None."""
        prompt = self._library.render(
            "expand_ideas",
            {
                "expand_count": str(self._config.expand_count),
                "paper_title": paper.title,
                "paper_abstract": paper.abstract,
                "old_idea": format_idea(old),
                "new_knowledge": format_docs(docs),
            },
        )
        try:
            raw, _ = self._gateway.complete_json(
                ChatRequest(model_id=self._model_id, prompt=prompt), "idea_list"
            )
        except ExtractionFailedError as exc:
            logger.warning("expansion failed for idea %s: %s", old.id, exc)
            return None
        return tuple(self._reflect_cut(raw, self._config.keep_count))

    def _reflect_cut(self, candidates: list[dict], keep: int) -> list[dict]:
        """Self-reflection cut: drop unsound candidates, keep the top-scored."""
        if len(candidates) <= keep:
            return list(candidates)
        listing = "\n".join(f"{n}. {c['idea']}" for n, c in enumerate(candidates, 1))
        prompt = self._library.render("self_reflect_cut", {"candidate_list": listing})
        try:
            parsed, _ = self._gateway.complete_json(
                ChatRequest(model_id=self._model_id, prompt=prompt), "reflect_evaluations"
            )
        except ExtractionFailedError as exc:
            logger.warning("reflection cut failed, keeping first %d: %s", keep, exc)
            return list(candidates[:keep])
        by_index = {e["index"]: e for e in parsed["evaluations"]}
        sound = [
            n for n in range(len(candidates))
            if by_index.get(n + 1, {"sound": True}).get("sound", True)
        ]
        if not sound:
            sound = list(range(len(candidates)))
        ranked = sorted(
            sound, key=lambda n: (-by_index.get(n + 1, {}).get("score", 1), n)
        )
        return [candidates[n] for n in ranked[:keep]]

    def _materialize(self, old: Idea, candidates: tuple[dict, ...]) -> list[Idea]:
        return [
            Idea(
                id=self._ids.new_id(),
                thinking=entry["thinking"],
                idea=entry["idea"],
                keywords=tuple(entry["keywords"]),
                source="iteration",
                generation=old.generation + 1,
                parent_id=old.id,
            )
            for entry in candidates
        ]

    def expand_idea(
        self, paper: SeedPaper, old: Idea, docs: list[RetrievedDoc]
    ) -> list[Idea]:
        """Expand one idea into keep_count children; [old] on failure."""
        candidates = self._expand_candidates(paper, old, docs)
        if candidates is None:
            return [old]
        return self._materialize(old, candidates)

    # -- the loop ---------------------------------------------------------------

    def _process_idea(self, paper: SeedPaper, idea: Idea) -> _ExpandOutcome:
        plan = self.make_plan(idea)
        docs = self.execute_plan(plan, self._config.retrieve_K, idea.embedding)
        candidates = self._expand_candidates(paper, idea, docs)
        return _ExpandOutcome(plan=plan, retrieved=len(docs), candidates=candidates)

    def _embed_new(self, ideas: list[Idea]) -> list[Idea]:
        missing = [i for i in ideas if i.embedding is None]
        if not missing:
            return ideas
        vectors = self._embedder.embed([i.idea for i in missing])
        replacements = {
            i.id: tuple(float(v) for v in vec) for i, vec in zip(missing, vectors)
        }
        return [
            i if i.embedding is not None else Idea(
                id=i.id, thinking=i.thinking, idea=i.idea, keywords=i.keywords,
                source=i.source, generation=i.generation, parent_id=i.parent_id,
                embedding=replacements[i.id],
            )
            for i in ideas
        ]

    def run_generation(
        self, paper: SeedPaper, pool: list[Idea], step: int
    ) -> tuple[list[Idea], IterationRecord]:
        """One plan/search/expand/replace pass over the whole pool."""
        if not pool:
            raise ValueError("run_generation requires a nonempty pool")
        workers = max(1, self._gateway.options.parallelism)
        if workers > 1 and len(pool) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool_exec:
                outcomes = list(
                    pool_exec.map(lambda idea: self._process_idea(paper, idea), pool)
                )
        else:
            outcomes = [self._process_idea(paper, idea) for idea in pool]

        next_pool: list[Idea] = []
        plans: list[SearchPlan] = []
        retrieved_counts: dict[str, int] = {}
        for idea, outcome in zip(pool, outcomes):
            plans.append(outcome.plan)
            retrieved_counts[idea.id] = outcome.retrieved
            if outcome.candidates is None:
                next_pool.append(idea)  # failure survival, generation unchanged
            else:
                next_pool.extend(self._materialize(idea, outcome.candidates))
        next_pool = self._embed_new(next_pool)
        assert len(next_pool) <= len(pool) * max(self._config.keep_count, 1)
        record = IterationRecord(
            generation=step,
            input_pool_size=len(pool),
            output_pool_size=len(next_pool),
            plans=tuple(plans),
            retrieved_counts=retrieved_counts,
        )
        logger.info("generation %d: %d -> %d ideas", step, len(pool), len(next_pool))
        return next_pool, record

    def iterate(
        self, paper: SeedPaper, pool: list[Idea]
    ) -> tuple[list[Idea], list[IterationRecord]]:
        """Run iterations_T generations of plan/search/expand/replace."""
        if not pool:
            raise ValueError("iterate requires a nonempty pool")
        pool = self._embed_new(list(pool))
        records: list[IterationRecord] = []
        for step in range(1, self._config.iterations_T + 1):
            pool, record = self.run_generation(paper, pool, step)
            records.append(record)
        return pool, records


def record_from_dict(data: dict) -> IterationRecord:
    return IterationRecord(
        generation=data["generation"],
        input_pool_size=data["input_pool_size"],
        output_pool_size=data["output_pool_size"],
        plans=tuple(SearchPlan.from_dict(p) for p in data["plans"]),
        retrieved_counts=dict(data["retrieved_counts"]),
    )
