"""Swiss-system pairwise quality ranking and the LLM-judged novelty metric.

Pairing policy: round 1 is uniform-random under the seed; later rounds sort
by (score desc, id asc) and pair adjacent entries with a greedy scan-forward
rematch avoidance, falling back to a rematch when forced. With an odd field,
the lowest-sorted idea without a prior bye sits out for 1 point. Each match
presents the pair to the judge in seed-randomized order.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Callable

from .domain import Bye, Idea, Match, PipelineConfig, Proposal, RetrievedDoc, TournamentResult
from .gateway import ChatRequest, Gateway, GatewayError
from .literature import cosine
from .prompts import PromptLibrary
from .selector import non_duplicate_fraction

logger = logging.getLogger(__name__)


class RankerError(Exception):
    """A pairwise judge failed for one match after its own retries."""


# A ranker judges the pair as presented and returns "A" or "B".
RankerFn = Callable[[Proposal, Proposal], str]


@dataclass(frozen=True)
class PairVerdict:
    a: str
    b: str
    winner: str
    judge_raw: str
    presentation_swapped: bool


@dataclass(frozen=True)
class NoveltyEvidence:
    doc: RetrievedDoc
    similarity: float
    verdict: str  # "similar" | "different" | "not_candidate"


@dataclass(frozen=True)
class NoveltyResult:
    novel: bool
    evidence: tuple[NoveltyEvidence, ...]
    judge_calls: int


def proposal_text(proposal: Proposal) -> str:
    return "\n".join(f"{name}: {body}" for name, body in proposal.sections.items())


def make_llm_ranker(gateway: Gateway, library: PromptLibrary, model_id: str) -> RankerFn:
    """Zero-shot pairwise judge over the gateway; raises RankerError on failure."""

    def ranker(a: Proposal, b: Proposal) -> str:
        prompt = library.render(
            "pairwise_rank",
            {"proposal_a": proposal_text(a), "proposal_b": proposal_text(b)},
        )
        try:
            verdict, _ = gateway.complete_json(
                ChatRequest(model_id=model_id, prompt=prompt), "pair_verdict"
            )
        except GatewayError as exc:
            raise RankerError(str(exc)) from exc
        return verdict["winner"]

    return ranker


def swiss_tournament(
    proposals: list[Proposal],
    rounds: int,
    ranker: RankerFn,
    seed: int,
) -> TournamentResult:
    """Run a Swiss tournament; 1 point per win, 1 point per bye.

    Args:
        proposals: at least two proposals, identified by idea_id.
        rounds: number of rounds; every idea plays (or sits out) each round.
        ranker: pairwise judge for the presented order.
        seed: drives round-1 pairing, presentation order, and failure coin-flips.

    Returns:
        TournamentResult with scores for every participant, the match list,
        and the bye list.
    """
    if len(proposals) < 2:
        raise ValueError("swiss_tournament requires at least 2 proposals")
    by_id = {p.idea_id: p for p in proposals}
    if len(by_id) != len(proposals):
        raise ValueError("proposal idea_ids must be unique")
    ids = sorted(by_id)
    rng = random.Random(seed)

    scores = {idea_id: 0 for idea_id in ids}
    opponents: dict[str, set[str]] = {idea_id: set() for idea_id in ids}
    had_bye: set[str] = set()
    matches: list[Match] = []
    byes: list[Bye] = []

    for rnd in range(1, rounds + 1):
        if rnd == 1:
            order = list(ids)
            rng.shuffle(order)
        else:
            order = sorted(ids, key=lambda i: (-scores[i], i))

        if len(order) % 2 == 1:
            bye_id = next(
                (cand for cand in reversed(order) if cand not in had_bye), order[-1]
            )
            if bye_id in had_bye:
                logger.warning("round %d: every idea already had a bye; repeating", rnd)
            had_bye.add(bye_id)
            order.remove(bye_id)
            scores[bye_id] += 1
            byes.append(Bye(round=rnd, idea_id=bye_id))

        used: set[str] = set()
        for pos, a in enumerate(order):
            if a in used:
                continue
            opp = next(
                (b for b in order[pos + 1 :] if b not in used and b not in opponents[a]),
                None,
            )
            if opp is None:  # forced rematch: nearest unpaired neighbor
                opp = next((b for b in order[pos + 1 :] if b not in used), None)
            if opp is None:
                break
            used.add(a)
            used.add(opp)
            swapped = rng.random() < 0.5
            first, second = (opp, a) if swapped else (a, opp)
            try:
                verdict = ranker(by_id[first], by_id[second])
                if verdict not in ("A", "B"):
                    raise RankerError(f"judge returned {verdict!r}")
            except RankerError as exc:
                logger.warning(
                    "round %d: ranker failed for (%s, %s), coin-flipping: %s",
                    rnd, a, opp, exc,
                )
                verdict = rng.choice(["A", "B"])
            winner = first if verdict == "A" else second
            scores[winner] += 1
            opponents[a].add(opp)
            opponents[opp].add(a)
            matches.append(Match(round=rnd, a=a, b=opp, winner=winner))

    return TournamentResult(scores=scores, matches=tuple(matches), byes=tuple(byes))


def score_histogram(result: TournamentResult, rounds: int) -> dict[int, int]:
    """Count of ideas at each score from 0 to `rounds`."""
    hist = {s: 0 for s in range(rounds + 1)}
    for score in result.scores.values():
        hist[score] = hist.get(score, 0) + 1
    return hist


# ---------------------------------------------------------------------------
# Novelty
# ---------------------------------------------------------------------------


def _top_docs(idea: Idea, corpus, k: int) -> list[RetrievedDoc]:
    if hasattr(corpus, "nearest"):
        return corpus.nearest(idea.embedding, k)
    from .literature import SearchQuery

    return corpus.search(SearchQuery(text=idea.idea, limit=k))


def novelty_judge(
    idea: Idea,
    corpus,
    config: PipelineConfig,
    gateway: Gateway | None = None,
    library: PromptLibrary | None = None,
    model_id: str = "",
    threshold_only: bool = False,
) -> NoveltyResult:
    """Two-stage novelty check: similarity prefilter, then per-candidate judge.

    Retrieves the novelty_topk most similar docs; docs with cosine strictly
    above novelty_sim_threshold become candidates. In threshold-only mode any
    candidate makes the idea non-novel with zero judge calls; otherwise each
    candidate is judged individually and the idea is novel iff none is judged
    similar. A failed judge call counts the candidate as similar.
    """
    if idea.embedding is None:
        raise ValueError(f"idea {idea.id} has no embedding")
    docs = _top_docs(idea, corpus, config.novelty_topk)
    evidence: list[NoveltyEvidence] = []
    judge_calls = 0
    for doc in docs:
        if doc.embedding is None:
            raise ValueError(f"retrieved doc {doc.title!r} has no embedding")
        sim = cosine(idea.embedding, doc.embedding)
        if sim <= config.novelty_sim_threshold:
            evidence.append(NoveltyEvidence(doc=doc, similarity=sim, verdict="not_candidate"))
            continue
        if threshold_only:
            evidence.append(NoveltyEvidence(doc=doc, similarity=sim, verdict="similar"))
            continue
        if gateway is None or library is None:
            raise ValueError("judge mode requires a gateway and prompt library")
        prompt = library.render(
            "novelty_judge",
            {"idea_text": idea.idea, "paper_title": doc.title, "paper_abstract": doc.abstract},
        )
        judge_calls += 1
        try:
            parsed, _ = gateway.complete_json(
                ChatRequest(model_id=model_id, prompt=prompt), "novelty_verdict"
            )
            verdict = parsed["verdict"]
        except GatewayError as exc:
            logger.warning("novelty judge failed for %s, treating as similar: %s", idea.id, exc)
            verdict = "similar"
        evidence.append(NoveltyEvidence(doc=doc, similarity=sim, verdict=verdict))
    novel = not any(e.verdict == "similar" for e in evidence)
    return NoveltyResult(novel=novel, evidence=tuple(evidence), judge_calls=judge_calls)


def unique_novel_count(
    pool: list[Idea],
    corpus,
    config: PipelineConfig,
    gateway: Gateway | None = None,
    library: PromptLibrary | None = None,
    model_id: str = "",
    threshold_only: bool = False,
) -> int:
    """Deduplicate the pool, then count retained ideas judged novel."""
    if not pool:
        return 0
    _, retained_ids = non_duplicate_fraction(pool, config.dup_sim_threshold)
    retained = {i.id: i for i in pool}
    count = 0
    for idea_id in retained_ids:
        result = novelty_judge(
            retained[idea_id], corpus, config,
            gateway=gateway, library=library, model_id=model_id,
            threshold_only=threshold_only,
        )
        if result.novel:
            count += 1
    return count
