"""Command-line surface over the orchestrator.

Subcommands map 1:1 to pipeline stages so partial pipelines are scriptable:

    nova run      --paper p.json --out d/ --backend mock --mock-script s.json
    nova seed     --paper p.json --out d/ ...      (first stage only)
    nova iterate  --out d/                         (next stage, and so on)
    nova report   --out d/                         (metrics for whatever exists)
    nova validate --paper p.json                   (schema + invariant check)

Exit codes: 0 success, 1 usage error, 2 pipeline abort or failed validation.
Errors go to stderr with the machine-parsable prefix "nova-error:".
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .domain import DomainParseError, PipelineConfig, SeedPaper
from .gateway import GatewayError
from .orchestrator import (
    OrchestratorError,
    PipelineAborted,
    Runner,
    RunnerOptions,
    metrics_report,
)

ERROR_PREFIX = "nova-error:"

_STAGE_COMMANDS = {
    "seed": "seeded",
    "iterate": "iterated",
    "select": "selected",
    "propose": "proposed",
    "evaluate": "evaluated",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; the contract is 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="nova", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nova {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p, needs_paper: bool):
        if needs_paper:
            p.add_argument("--paper", required=True, help="input paper JSON file")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config", help="config JSON file mirroring the pipeline config")
        p.add_argument("--backend", choices=["live", "mock"], default="mock")
        p.add_argument("--mock-script", help="mock backend script (required with --backend mock)")
        p.add_argument("--seed", type=int, help="override rng_seed")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="config override, repeatable (e.g. --set iterations_T=2)",
        )
        p.add_argument("--corpus", help="offline retrieval corpus directory")

    for command in ("run", "seed"):
        add_run_flags(sub.add_parser(command), needs_paper=True)
    for command in ("iterate", "select", "propose", "evaluate", "report"):
        add_run_flags(sub.add_parser(command), needs_paper=False)

    validate = sub.add_parser("validate")
    validate.add_argument("--paper", required=True, help="paper JSON file to validate")
    return parser


def _parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
    key, raw = item.split("=", 1)
    types = {f.name: f.type for f in fields(PipelineConfig)}
    if key not in types:
        raise UsageError(f"unknown config key {key!r}")
    caster = float if key in PipelineConfig._FLOAT_FIELDS else int
    try:
        return key, caster(raw)
    except ValueError:
        raise UsageError(f"--set {key}: cannot parse {raw!r} as {caster.__name__}") from None


def load_config(args) -> PipelineConfig:
    data: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        data.update(json.loads(path.read_text(encoding="utf-8")))
    for item in getattr(args, "set", []):
        key, value = _parse_override(item)
        data[key] = value
    if getattr(args, "seed", None) is not None:
        data["rng_seed"] = args.seed
    try:
        config = PipelineConfig.from_dict(data)
    except DomainParseError as exc:
        raise UsageError(str(exc)) from exc
    problems = config.validate()
    if problems:
        raise UsageError("invalid config: " + "; ".join(problems))
    return config


def build_options(args) -> RunnerOptions:
    if args.backend == "mock" and not args.mock_script:
        raise UsageError("--backend mock requires --mock-script")
    if args.mock_script and not Path(args.mock_script).is_file():
        raise UsageError(f"mock script {args.mock_script} does not exist")
    if args.corpus and not Path(args.corpus).is_dir():
        raise UsageError(f"corpus directory {args.corpus} does not exist")
    return RunnerOptions(
        backend=args.backend,
        mock_script=args.mock_script,
        corpus_dir=args.corpus,
    )


def _run_command(args, target_stage: str) -> int:
    config = load_config(args)
    options = build_options(args)
    runner = Runner(args.out, config, options)
    paper_input = getattr(args, "paper", None)
    if paper_input is not None and not Path(paper_input).is_file():
        raise UsageError(f"paper file {paper_input} does not exist")
    try:
        state = runner.advance_to(target_stage, paper_input=paper_input)
    except (PipelineAborted, GatewayError) as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        cursor = runner.state.stage_cursor if runner.state else "(none)"
        print(f"run directory: {args.out}\nstage reached: {cursor}")
        return 2
    print(f"run directory: {args.out}\nstage reached: {state.stage_cursor}")
    return 0


def _report_command(args) -> int:
    # Reports never advance the pipeline; they summarize whatever exists.
    summary = metrics_report(args.out)
    print(json.dumps(summary, ensure_ascii=False, indent=2))
    return 0


def _validate_command(args) -> int:
    path = Path(args.paper)
    if not path.is_file():
        raise UsageError(f"paper file {path} does not exist")
    raw = json.loads(path.read_text(encoding="utf-8"))
    paper_raw = dict(raw.get("paper", raw))
    paper_raw.setdefault("id", "paper-under-validation")
    paper_raw.setdefault("references", [])
    try:
        paper = SeedPaper.from_dict(paper_raw)
        violations = paper.validate()
    except DomainParseError as exc:
        violations = [str(exc)]
    print(json.dumps({"violations": violations}, ensure_ascii=False, indent=2))
    return 0 if not violations else 2


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "validate":
            return _validate_command(args)
        if args.command == "report":
            return _report_command(args)
        if args.command == "run":
            return _run_command(args, "done")
        return _run_command(args, _STAGE_COMMANDS[args.command])
    except UsageError as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    except (OrchestratorError, OSError, json.JSONDecodeError) as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
