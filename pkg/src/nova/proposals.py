"""Proposal building: initial proposal, method decomposition, final proposal.

The three stages for one idea run sequentially; the decomposition's per-module
search keywords feed retrieved knowledge into the final stage. Conditional
prompt content (relevant papers, feedback, examples) is composed here as
pre-rendered blocks so empty inputs simply vanish from the prompt.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

from .domain import (
    Direction,
    Idea,
    PipelineConfig,
    Proposal,
    RetrievedDoc,
    SearchPlan,
    SeedPaper,
    SubModule,
)
from .gateway import ChatRequest, ExtractionFailedError, Gateway
from .planner import PlannerLoop, format_docs
from .prompts import PromptLibrary
from .seeding import format_idea

logger = logging.getLogger(__name__)


class ProposalFailure(Exception):
    """A proposal stage could not produce schema-valid output after budget."""


@dataclass(frozen=True)
class DecompositionPlan:
    thinking: str
    modules: tuple[SubModule, ...]

    def to_dict(self) -> dict:
        return {
            "thinking": self.thinking,
            "modules": [
                {
                    "name": m.name,
                    "purpose": m.purpose,
                    "implementation": m.implementation,
                    "search_keywords": list(m.keywords),
                }
                for m in self.modules
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DecompositionPlan":
        return cls(
            thinking=data["thinking"],
            modules=tuple(
                SubModule(
                    name=m["name"],
                    purpose=m["purpose"],
                    implementation=m["implementation"],
                    keywords=tuple(m["search_keywords"]),
                )
                for m in data["modules"]
            ),
        )


class ProposalBuilder:
    def __init__(
        self,
        gateway: Gateway,
        library: PromptLibrary,
        planner: PlannerLoop,
        config: PipelineConfig,
        model_id: str,
        use_self_reflection: bool = False,
        proposal_examples: str | None = None,
    ):
        self._gateway = gateway
        self._library = library
        self._planner = planner
        self._config = config
        self._model_id = model_id
        self._use_self_reflection = use_self_reflection
        self._proposal_examples = proposal_examples

    # -- stage 1: initial proposal -------------------------------------------

    def retrieve_context(self, idea: Idea) -> list[RetrievedDoc]:
        """Background docs for the initial proposal, from the idea's keywords."""
        plan = SearchPlan(
            idea_id=idea.id,
            directions=(Direction(thinking="proposal context", keywords=idea.keywords),),
            created_at_generation=idea.generation,
        )
        return self._planner.execute_plan(plan, self._config.retrieve_K, idea.embedding)

    def build_initial(
        self, paper: SeedPaper, idea: Idea, context_docs: list[RetrievedDoc]
    ) -> Proposal:
        relevant_block = ""
        if context_docs:
            relevant_block = (
                "Here are some relevant papers on this idea just for your background "
                "knowledge:\n" + format_docs(context_docs)
            )
        few_shot_block = ""
        if self._proposal_examples:
            few_shot_block = (
                "You can follow these examples to get a sense of how the proposal "
                "should be formatted (but don't borrow the proposals themselves):\n"
                + self._proposal_examples
            )
        reflection_block = ""
        if self._use_self_reflection:
            reflection_block = (
                "In the thinking step, you can first think of about 5 proposals and "
                "analyze the advantages and disadvantages of each of them. Your final "
                "proposal can absorb their advantages and discard their disadvantages."
            )
        prompt = self._library.render(
            "initial_proposal",
            {
                "idea": format_idea(idea),
                "paper_title": paper.title,
                "paper_abstract": paper.abstract,
                "relevant_papers_block": relevant_block,
                "few_shot_block": few_shot_block,
                "self_reflection_block": reflection_block,
            },
        )
        try:
            parsed, _ = self._gateway.complete_json(
                ChatRequest(model_id=self._model_id, prompt=prompt), "initial_proposal"
            )
        except ExtractionFailedError as exc:
            raise ProposalFailure(f"initial proposal failed for idea {idea.id}: {exc}") from exc
        name, sections = next(iter(parsed.items()))
        logger.debug("initial proposal %r for idea %s", name, idea.id)
        return Proposal(idea_id=idea.id, stage="initial", sections=dict(sections))

    # -- stage 2: method decomposition -----------------------------------------

    def decompose(self, proposal: Proposal) -> DecompositionPlan:
        """Break the initial proposal's method into keyword-carrying submodules."""
        if proposal.stage != "initial":
            raise ValueError("decompose expects an initial-stage proposal")
        prompt = self._library.render(
            "method_decompose",
            {
                "initial_idea_json": json.dumps(
                    proposal.sections, ensure_ascii=False, indent=2
                ),
                "example_block": "",
            },
        )
        try:
            parsed, _ = self._gateway.complete_json(
                ChatRequest(model_id=self._model_id, prompt=prompt), "decomposition"
            )
        except ExtractionFailedError as exc:
            raise ProposalFailure(
                f"decomposition failed for idea {proposal.idea_id}: {exc}"
            ) from exc
        modules = []
        for raw in parsed["modules"]:
            keywords = tuple(k for k in raw["search_keywords"] if k.strip())
            if not keywords:
                logger.info("dropping keywordless module %r", raw["name"])
                continue
            modules.append(
                SubModule(
                    name=raw["name"],
                    purpose=raw["purpose"],
                    implementation=raw["implementation"],
                    keywords=keywords,
                )
            )
        if not modules:
            raise ProposalFailure(
                f"decomposition for idea {proposal.idea_id} had no usable modules"
            )
        return DecompositionPlan(thinking=parsed.get("thinking", ""), modules=tuple(modules))

    def module_knowledge(self, idea: Idea, decomposition: DecompositionPlan) -> str | None:
        """Merged retrieval over the decomposition's per-module keywords."""
        plan = SearchPlan(
            idea_id=idea.id,
            directions=tuple(
                Direction(thinking=f"module: {m.name}", keywords=m.keywords)
                for m in decomposition.modules
            ),
            created_at_generation=idea.generation,
        )
        docs = self._planner.execute_plan(plan, self._config.retrieve_K, idea.embedding)
        if not docs:
            return None
        return format_docs(docs)

    # -- stage 3: final proposal -------------------------------------------------

    def build_final(
        self,
        paper: SeedPaper,
        idea: Idea,
        initial: Proposal,
        decomposition: DecompositionPlan,
        feedback: str | None = None,
        new_knowledge: str | None = None,
    ) -> Proposal:
        problems = initial.validate()
        if problems:
            raise ValueError(f"invalid initial proposal: {problems}")
        decomposition_block = (
            "You will be given a method decomposition info (possible method module "
            "design). You need to analyze whether the design of these modules is "
            "reasonable. Please learn from the good places to complete the detailed "
            "design of the final method.\nMethod decomposition info:\n"
            + json.dumps(decomposition.to_dict(), ensure_ascii=False, indent=2)
        )
        feedback_block = f"The feedback is: {feedback}" if feedback else ""
        knowledge_block = f"The new knowledge is:\n{new_knowledge}" if new_knowledge else ""
        prompt = self._library.render(
            "final_proposal",
            {
                "idea_json": json.dumps(initial.sections, ensure_ascii=False, indent=2),
                "paper_title": paper.title,
                "paper_abstract": paper.abstract,
                "method_decomposition_block": decomposition_block,
                "feedback_block": feedback_block,
                "new_knowledge_block": knowledge_block,
                "demo_examples_block": "",
            },
        )
        try:
            parsed, _ = self._gateway.complete_json(
                ChatRequest(model_id=self._model_id, prompt=prompt), "final_proposal"
            )
        except ExtractionFailedError as exc:
            raise ProposalFailure(f"final proposal failed for idea {idea.id}: {exc}") from exc
        return Proposal(
            idea_id=idea.id,
            stage="final",
            sections=dict(parsed),
            decomposition=decomposition.modules,
        )

    # -- whole pipeline for one idea ----------------------------------------------

    def build_all(
        self, paper: SeedPaper, idea: Idea
    ) -> tuple[Proposal, DecompositionPlan, Proposal]:
        context = self.retrieve_context(idea)
        initial = self.build_initial(paper, idea, context)
        decomposition = self.decompose(initial)
        knowledge = self.module_knowledge(idea, decomposition)
        final = self.build_final(paper, idea, initial, decomposition, new_knowledge=knowledge)
        return initial, decomposition, final


def render_markdown(
    idea: Idea, initial: Proposal, final: Proposal | None
) -> str:
    """Human-readable rendering of one idea's proposals."""
    lines = [f"# Proposal for idea {idea.id}", "", f"**Idea:** {idea.idea}", ""]
    if idea.keywords:
        lines.append(f"**Keywords:** {', '.join(idea.keywords)}")
        lines.append("")
    lines.append("## Initial proposal")
    lines.append("")
    for name, body in initial.sections.items():
        lines.append(f"### {name}")
        lines.append("")
        lines.append(body)
        lines.append("")
    if final is not None:
        lines.append("## Final proposal")
        lines.append("")
        for name, body in final.sections.items():
            lines.append(f"### {name}")
            lines.append("")
            lines.append(body)
            lines.append("")
    return "\n".join(lines).rstrip() + "\n"
