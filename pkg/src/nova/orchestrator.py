"""End-to-end run coordination: stage sequencing, durable state, and resume.

One directory per run:

    state.json      atomic snapshot of RunState (write-temp-then-rename)
    events.jsonl    append-only log; replaying it reconstructs RunState
    artifacts/      content-addressed JSON envelopes {"kind", "data"}
    proposals/      rendered Markdown, one file per surviving idea
    report/         metric CSVs and the JSON summary
    cache/          gateway response cache (unless redirected)

Stages commit atomically in order seeded -> iterated -> selected -> proposed
-> evaluated -> done; a crash between stages leaves a resumable checkpoint.
Nothing written under the run directory carries wall-clock time, so a resumed
run reproduces the artifact tree of an uninterrupted one byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import planner as planner_mod
from . import proposals as proposals_mod
from . import selector, tournament
from .domain import Idea, PipelineConfig, Proposal, SeedPaper, TournamentResult
from .gateway import Gateway, GatewayError, GatewayOptions, HttpChatBackend
from .ids import IdFactory
from .literature import (
    HashEmbedder,
    HttpEmbedder,
    HttpSearchClient,
    OfflineCorpus,
    build_trend_report,
)
from .mockllm import MockBackend
from .prompts import PromptLibrary
from .seeding import SeedGenerator

logger = logging.getLogger(__name__)

STAGES = ("seeded", "iterated", "selected", "proposed", "evaluated", "done")


class OrchestratorError(Exception):
    pass


class PipelineAborted(OrchestratorError):
    """A stage aborted; the run directory holds a resumable checkpoint."""

    def __init__(self, stage: str, reason: str):
        super().__init__(f"aborted after stage {stage!r}: {reason}")
        self.stage = stage


@dataclass
class RunnerOptions:
    backend: str = "mock"  # "mock" | "live"
    mock_script: str | Path | None = None
    corpus_dir: str | Path | None = None
    cache_dir: str | Path | None = None  # default: <out>/cache
    template_dir: str | Path | None = None
    model_id: str = "gpt-4o"
    ranker_model_id: str = "claude-3.5-sonnet"
    llm_endpoint: str = "https://api.openai.com/v1/chat/completions"
    search_endpoint: str = ""
    embed_endpoint: str = ""
    embed_dim: int = 32
    gateway: GatewayOptions = field(default_factory=GatewayOptions)
    threshold_only_novelty: bool = False
    use_self_reflection: bool = False
    abort_after: str | None = None  # stage name; kill-injection for testing


@dataclass
class RunState:
    run_id: str
    config: PipelineConfig
    stage_cursor: str
    backend: str
    seed_paper_ref: str
    trend_report_ref: str | None = None
    pools: dict[str, str] = field(default_factory=dict)
    iteration_records_ref: str | None = None
    representatives_ref: str | None = None
    proposals: dict[str, dict[str, str]] = field(default_factory=dict)
    failed_proposals: list[str] = field(default_factory=list)
    tournament_ref: str | None = None
    metrics_ref: str | None = None
    id_counter: int = 0
    event_seq: int = 0

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config.to_dict(),
            "stage_cursor": self.stage_cursor,
            "backend": self.backend,
            "seed_paper_ref": self.seed_paper_ref,
            "trend_report_ref": self.trend_report_ref,
            "pools": dict(self.pools),
            "iteration_records_ref": self.iteration_records_ref,
            "representatives_ref": self.representatives_ref,
            "proposals": {k: dict(v) for k, v in self.proposals.items()},
            "failed_proposals": list(self.failed_proposals),
            "tournament_ref": self.tournament_ref,
            "metrics_ref": self.metrics_ref,
            "id_counter": self.id_counter,
            "event_seq": self.event_seq,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunState":
        return cls(
            run_id=data["run_id"],
            config=PipelineConfig.from_dict(data["config"]),
            stage_cursor=data["stage_cursor"],
            backend=data["backend"],
            seed_paper_ref=data["seed_paper_ref"],
            trend_report_ref=data["trend_report_ref"],
            pools=dict(data["pools"]),
            iteration_records_ref=data["iteration_records_ref"],
            representatives_ref=data["representatives_ref"],
            proposals={k: dict(v) for k, v in data["proposals"].items()},
            failed_proposals=list(data["failed_proposals"]),
            tournament_ref=data["tournament_ref"],
            metrics_ref=data["metrics_ref"],
            id_counter=data["id_counter"],
            event_seq=data["event_seq"],
        )


def _dump_bytes(payload: dict) -> bytes:
    return (json.dumps(payload, ensure_ascii=False, indent=2) + "\n").encode("utf-8")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class ArtifactStore:
    """Content-addressed JSON artifacts under <run>/artifacts."""

    def __init__(self, run_dir: Path):
        self._dir = run_dir / "artifacts"
        self._dir.mkdir(parents=True, exist_ok=True)

    def put(self, kind: str, data) -> str:
        payload = _dump_bytes({"kind": kind, "data": data})
        digest = hashlib.sha256(payload).hexdigest()
        path = self._dir / f"{digest}.json"
        if not path.exists():
            _atomic_write(path, payload)
        return digest

    def get(self, digest: str) -> dict:
        path = self._dir / f"{digest}.json"
        if not path.is_file():
            raise OrchestratorError(f"missing artifact {digest}")
        return json.loads(path.read_text(encoding="utf-8"))

    def get_data(self, digest: str, expected_kind: str):
        envelope = self.get(digest)
        if envelope["kind"] != expected_kind:
            raise OrchestratorError(
                f"artifact {digest} has kind {envelope['kind']!r}, expected {expected_kind!r}"
            )
        return envelope["data"]


class EventLog:
    """Append-only JSONL event log with a logical sequence counter."""

    def __init__(self, run_dir: Path):
        self._path = run_dir / "events.jsonl"

    def append(self, event: dict) -> None:
        line = json.dumps(event, ensure_ascii=False) + "\n"
        with open(self._path, "a", encoding="utf-8") as fh:
            fh.write(line)

    def read_all(self) -> list[dict]:
        if not self._path.is_file():
            return []
        events = []
        with open(self._path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    events.append(json.loads(line))
        return events


def load_paper_input(source: dict | str | Path, id_factory: IdFactory) -> tuple[SeedPaper, list[SeedPaper]]:
    """Parse the run input: a bare paper object or {"paper", "trend_papers"}.

    Papers without an "id" get one from the factory, so the counter must be
    fresh when a new run starts.
    """
    if not isinstance(source, dict):
        source = json.loads(Path(source).read_text(encoding="utf-8"))
    if "paper" in source:
        paper_raw = dict(source["paper"])
        trend_raw = source.get("trend_papers", [])
    else:
        paper_raw = dict(source)
        trend_raw = []
    paper_raw.setdefault("id", id_factory.new_id())
    paper_raw.setdefault("references", [])
    paper = SeedPaper.from_dict(paper_raw)
    problems = paper.validate()
    if problems:
        raise OrchestratorError(f"invalid input paper: {problems}")
    trend_papers = []
    for raw in trend_raw:
        raw = dict(raw)
        raw.setdefault("id", id_factory.new_id())
        raw.setdefault("references", [])
        trend_papers.append(SeedPaper.from_dict(raw))
    return paper, trend_papers


class Runner:
    """Single writer of RunState; builds and wires all pipeline components."""

    def __init__(self, out_dir: str | Path, config: PipelineConfig, options: RunnerOptions):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.options = options
        self.store = ArtifactStore(self.out_dir)
        self.events = EventLog(self.out_dir)
        self.state: RunState | None = self._load_state()
        if self.state is not None:
            self.config = self.state.config

        self.ids = IdFactory(
            seed=self.config.rng_seed,
            counter=self.state.id_counter if self.state else 0,
        )
        self.library = PromptLibrary(template_dir=options.template_dir)
        cache_dir = Path(options.cache_dir) if options.cache_dir else self.out_dir / "cache"
        self.gateway = Gateway(self._make_backend(), cache_dir, options.gateway)
        self.embedder = self._make_embedder()
        self.corpus = self._make_corpus()
        self.seeder = SeedGenerator(
            self.gateway, self.library, self.ids, self.config, options.model_id
        )
        self.planner = planner_mod.PlannerLoop(
            self.gateway, self.library, self.corpus, self.embedder, self.ids,
            self.config, options.model_id,
        )
        self.builder = proposals_mod.ProposalBuilder(
            self.gateway, self.library, self.planner, self.config, options.model_id,
            use_self_reflection=options.use_self_reflection,
        )

    # -- component wiring ----------------------------------------------------

    def _make_backend(self):
        if self.options.backend == "mock":
            if self.options.mock_script is not None:
                return MockBackend.from_file(self.options.mock_script, seed=self.config.rng_seed)
            return MockBackend(seed=self.config.rng_seed)
        return HttpChatBackend(self.options.llm_endpoint)

    def _make_embedder(self):
        if self.options.backend == "mock" or not self.options.embed_endpoint:
            return HashEmbedder(dim=self.options.embed_dim, seed=self.config.rng_seed)
        return HttpEmbedder(self.options.embed_endpoint)

    def _make_corpus(self):
        if self.options.corpus_dir is not None:
            return OfflineCorpus(self.options.corpus_dir, self.embedder)
        if self.options.backend == "live" and self.options.search_endpoint:
            return HttpSearchClient(self.options.search_endpoint, self.embedder)
        return None

    # -- state plumbing --------------------------------------------------------

    def _load_state(self) -> RunState | None:
        path = self.out_dir / "state.json"
        if not path.is_file():
            return None
        return RunState.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def _write_state(self) -> None:
        _atomic_write(self.out_dir / "state.json", _dump_bytes(self.state.to_dict()))

    def _commit(self, stage: str, delta: dict) -> None:
        for key, value in delta.items():
            setattr(self.state, key, value)
        self.state.stage_cursor = stage
        self.state.id_counter = self.ids.counter
        self.state.event_seq += 1
        self.events.append(
            {
                "seq": self.state.event_seq,
                "type": "stage_completed",
                "stage": stage,
                "delta": delta,
                "id_counter": self.state.id_counter,
            }
        )
        self._write_state()
        logger.info("stage %s committed", stage)

    # -- artifact helpers --------------------------------------------------------

    def _load_paper(self) -> SeedPaper:
        return SeedPaper.from_dict(self.store.get_data(self.state.seed_paper_ref, "seed_paper"))

    def _load_pool(self, generation: int) -> list[Idea]:
        digest = self.state.pools[str(generation)]
        data = self.store.get_data(digest, "idea_pool")
        return [Idea.from_dict(d) for d in data["ideas"]]

    def _store_pool(self, generation: int, pool: list[Idea]) -> str:
        return self.store.put(
            "idea_pool",
            {"generation": generation, "ideas": [i.to_dict() for i in pool]},
        )

    def _load_proposal(self, idea_id: str, stage: str) -> Proposal:
        digest = self.state.proposals[idea_id][stage]
        return Proposal.from_dict(self.store.get_data(digest, "proposal"))

    # -- stages ---------------------------------------------------------------

    def _stage_seed(self, paper_input) -> None:
        if paper_input is None:
            raise OrchestratorError("a paper input is required to start a run")
        paper, trend_papers = load_paper_input(paper_input, self.ids)
        run_id = "run-" + hashlib.sha256(
            json.dumps(
                {"paper": paper.id, "config": self.config.to_dict()}, sort_keys=True
            ).encode("utf-8")
        ).hexdigest()[:12]
        self.state = RunState(
            run_id=run_id,
            config=self.config,
            stage_cursor="seeded",
            backend=self.options.backend,
            seed_paper_ref="0" * 64,
        )
        self.events.append(
            {
                "seq": 0,
                "type": "run_started",
                "run_id": run_id,
                "backend": self.options.backend,
                "config": self.config.to_dict(),
            }
        )

        trend_report = None
        if trend_papers:
            trend_report = build_trend_report(
                trend_papers, self.gateway, self.library, self.options.model_id
            )
        pool = self.seeder.generate_pool(paper, trend_report, trend_papers)
        pool = self.planner._embed_new(pool)

        delta = {
            "seed_paper_ref": self.store.put("seed_paper", paper.to_dict()),
            "trend_report_ref": (
                self.store.put("trend_report", {"text": trend_report})
                if trend_report
                else None
            ),
            "pools": {"0": self._store_pool(0, pool)},
        }
        self._commit("seeded", delta)

    def _stage_iterate(self) -> None:
        paper = self._load_paper()
        pool = self._load_pool(0)
        pools = dict(self.state.pools)
        records = []
        # Per-generation snapshots are retained (not just the final pool) so
        # the per-step unique-novel curve can be computed later.
        for step in range(1, self.config.iterations_T + 1):
            pool, record = self.planner.run_generation(paper, pool, step)
            records.append(record)
            pools[str(step)] = self._store_pool(step, pool)
        records_ref = self.store.put(
            "iteration_records", {"records": [r.to_dict() for r in records]}
        )
        self._commit("iterated", {"pools": pools, "iteration_records_ref": records_ref})

    def _stage_select(self) -> None:
        pool = self._load_pool(self.config.iterations_T)
        k = min(self.config.cluster_count, len(pool))
        assignment = selector.cluster_pool(pool, k, self.config.rng_seed)
        self._commit(
            "selected",
            {
                "representatives_ref": self.store.put(
                    "representatives",
                    {
                        "idea_ids": list(assignment.representative_ids),
                        "assignments": dict(assignment.assignments),
                        "centroids": [list(c) for c in assignment.centroids],
                    },
                )
            },
        )

    def _load_representatives(self) -> list[Idea]:
        data = self.store.get_data(self.state.representatives_ref, "representatives")
        pool = {i.id: i for i in self._load_pool(self.config.iterations_T)}
        return [pool[idea_id] for idea_id in data["idea_ids"]]

    def _stage_propose(self) -> None:
        paper = self._load_paper()
        representatives = self._load_representatives()
        proposal_refs: dict[str, dict[str, str]] = {}
        failed: list[str] = []
        proposals_dir = self.out_dir / "proposals"
        proposals_dir.mkdir(exist_ok=True)
        for idea in representatives:
            try:
                initial, decomposition, final = self.builder.build_all(paper, idea)
            except proposals_mod.ProposalFailure as exc:
                logger.warning("proposal failed, skipping idea downstream: %s", exc)
                failed.append(idea.id)
                continue
            proposal_refs[idea.id] = {
                "initial": self.store.put("proposal", initial.to_dict()),
                "decomposition": self.store.put("decomposition_plan", decomposition.to_dict()),
                "final": self.store.put("proposal", final.to_dict()),
            }
            (proposals_dir / f"{idea.id}.md").write_text(
                proposals_mod.render_markdown(idea, initial, final), encoding="utf-8"
            )
        self._commit("proposed", {"proposals": proposal_refs, "failed_proposals": failed})

    def _stage_evaluate(self) -> None:
        finals = [
            self._load_proposal(idea_id, "final") for idea_id in sorted(self.state.proposals)
        ]
        tournament_ref = None
        histogram: dict[str, int] = {}
        if len(finals) >= 2:
            ranker = tournament.make_llm_ranker(
                self.gateway, self.library, self.options.ranker_model_id
            )
            result = tournament.swiss_tournament(
                finals, self.config.tournament_rounds, ranker, self.config.rng_seed
            )
            tournament_ref = self.store.put("tournament_result", result.to_dict())
            histogram = {
                str(score): count
                for score, count in tournament.score_histogram(
                    result, self.config.tournament_rounds
                ).items()
            }
        else:
            logger.warning("fewer than 2 final proposals; skipping tournament")

        unique_novel: dict[str, int] = {}
        for generation in sorted(self.state.pools, key=int):
            pool = self._load_pool(int(generation))
            if self.corpus is None:
                _, retained = selector.non_duplicate_fraction(
                    pool, self.config.dup_sim_threshold
                )
                unique_novel[generation] = len(retained)
            else:
                unique_novel[generation] = tournament.unique_novel_count(
                    pool, self.corpus, self.config,
                    gateway=self.gateway, library=self.library,
                    model_id=self.options.ranker_model_id,
                    threshold_only=self.options.threshold_only_novelty,
                )
        final_pool = self._load_pool(self.config.iterations_T)
        fraction, retained_ids = selector.non_duplicate_fraction(
            final_pool, self.config.dup_sim_threshold
        )
        metrics = {
            "unique_novel_per_generation": unique_novel,
            "non_duplicate_fraction": fraction,
            "retained_count": len(retained_ids),
            "score_histogram": histogram,
        }
        self._commit(
            "evaluated",
            {"tournament_ref": tournament_ref, "metrics_ref": self.store.put("run_metrics", metrics)},
        )

    def _stage_done(self) -> None:
        write_report(self.out_dir, self.state, self.store)
        self._commit("done", {})

    # -- driving -----------------------------------------------------------------

    def advance_to(self, target: str, paper_input=None) -> RunState:
        """Run stages in order until the cursor reaches `target`."""
        if target not in STAGES:
            raise OrchestratorError(f"unknown stage {target!r}")
        runners = {
            "seeded": lambda: self._stage_seed(paper_input),
            "iterated": self._stage_iterate,
            "selected": self._stage_select,
            "proposed": self._stage_propose,
            "evaluated": self._stage_evaluate,
            "done": self._stage_done,
        }
        while True:
            cursor = self.state.stage_cursor if self.state else None
            if cursor == target:
                break
            done_index = STAGES.index(cursor) if cursor else -1
            if done_index >= STAGES.index(target):
                break
            next_stage = STAGES[done_index + 1]
            try:
                runners[next_stage]()
            except GatewayError as exc:
                raise PipelineAborted(cursor or "(fresh)", str(exc)) from exc
            if self.options.abort_after == next_stage and next_stage != target:
                raise PipelineAborted(next_stage, "abort injected for testing")
        return self.state

    def run(self, paper_input=None) -> RunState:
        """Execute (or resume) the full pipeline to the terminal state."""
        return self.advance_to("done", paper_input=paper_input)


def write_report(out_dir: Path, state: RunState, store: ArtifactStore) -> dict:
    """Emit metric CSVs and the JSON summary; flags gaps for missing stages."""
    report_dir = out_dir / "report"
    report_dir.mkdir(exist_ok=True)
    gaps: list[str] = []
    summary: dict = {
        "run_id": state.run_id,
        "stage_cursor": state.stage_cursor,
        "pool_sizes": {},
        "gaps": gaps,
    }
    for generation in sorted(state.pools, key=int):
        data = store.get_data(state.pools[generation], "idea_pool")
        summary["pool_sizes"][generation] = len(data["ideas"])
    if state.representatives_ref:
        data = store.get_data(state.representatives_ref, "representatives")
        summary["representative_count"] = len(data["idea_ids"])
    else:
        gaps.append("representatives: run not selected yet")
    if state.proposals:
        summary["proposal_count"] = len(state.proposals)
        summary["failed_proposal_count"] = len(state.failed_proposals)
    elif STAGES.index(state.stage_cursor) < STAGES.index("proposed"):
        gaps.append("proposals: run not proposed yet")
    if state.metrics_ref:
        metrics = store.get_data(state.metrics_ref, "run_metrics")
        summary["metrics"] = metrics
        _write_csv(
            report_dir / "unique_novel.csv",
            ["generation", "unique_novel"],
            sorted(
                ((int(g), n) for g, n in metrics["unique_novel_per_generation"].items())
            ),
        )
        if metrics["score_histogram"]:
            _write_csv(
                report_dir / "score_histogram.csv",
                ["score", "count"],
                sorted(((int(s), c) for s, c in metrics["score_histogram"].items())),
            )
        else:
            gaps.append("score_histogram: tournament was skipped")
    else:
        gaps.append("metrics: run not evaluated yet")
    _atomic_write(report_dir / "summary.json", _dump_bytes(summary))
    return summary


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def metrics_report(out_dir: str | Path, config: PipelineConfig | None = None) -> dict:
    """Regenerate the report for an existing run directory."""
    out_dir = Path(out_dir)
    path = out_dir / "state.json"
    if not path.is_file():
        raise OrchestratorError(f"no run state at {path}")
    state = RunState.from_dict(json.loads(path.read_text(encoding="utf-8")))
    return write_report(out_dir, state, ArtifactStore(out_dir))


def replay_events(out_dir: str | Path) -> dict | None:
    """Fold the event log into the state dict it implies (None if no events)."""
    out_dir = Path(out_dir)
    events = EventLog(out_dir).read_all()
    state: dict | None = None
    for event in events:
        if event["type"] == "run_started":
            state = RunState(
                run_id=event["run_id"],
                config=PipelineConfig.from_dict(event["config"]),
                stage_cursor="seeded",
                backend=event["backend"],
                seed_paper_ref="0" * 64,
            ).to_dict()
            state["stage_cursor"] = None
        elif event["type"] == "stage_completed":
            assert state is not None, "stage_completed before run_started"
            for key, value in event["delta"].items():
                state[key] = value
            state["stage_cursor"] = event["stage"]
            state["id_counter"] = event["id_counter"]
            state["event_seq"] = event["seq"]
    return state
