"""Operator command surface over the engine.

Every subcommand is a thin adapter over library calls; exit codes are
stable: 0 success (a paused run reported by `status` is success), 2
usage error, 3 validation failure, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import yaml

from . import dag, meta
from .errors import (
    ForeignFactorError,
    ParseError,
    PrimeflowError,
    ValidationError,
)
from .events import Session, load_events, replay_signature
from .identity import factorize_token, generate_pool
from .orchestrator import Orchestrator, OrchestratorConfig
from .program import parse_program
from .providers import ProviderConfig, discover_providers
from .resilience import query_status, resume_run

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith((".yaml", ".yml")):
        return yaml.safe_load(text) or {}
    return json.loads(text)


def _provider_config(args, file_config: dict) -> ProviderConfig:
    cfg = file_config.get("providers", {})
    return ProviderConfig(
        pin=getattr(args, "provider", None) or cfg.get("pin"),
        model=getattr(args, "model", None) or cfg.get("model") or "default",
        cli_command=tuple(cfg.get("cli_command") or ()),
        http_base_url=cfg.get("http_base_url", ""),
        http_api_key=cfg.get("http_api_key", ""),
        local_base_url=cfg.get("local_base_url", ""),
        script=getattr(args, "script", None) or cfg.get("script"),
        price_table=cfg.get("price_table") or {},
        tool_mapping=cfg.get("tool_mapping") or {},
    )


def _emit(args, human: str, payload: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, default=str))
    else:
        print(human)


def _read_program(path: str):
    with open(path, encoding="utf-8") as fh:
        return parse_program(fh.read())


def cmd_validate(args) -> int:
    try:
        program = _read_program(args.program)
    except (ParseError, ValidationError) as exc:
        lines = getattr(exc, "violations", [str(exc)])
        _emit(args, "validation failed:\n  " + "\n  ".join(lines), {"valid": False, "errors": lines})
        return EXIT_VALIDATION
    report = dag.validate_dag(program.dependencies)
    phases = dag.compute_phases(program.dependencies)
    _emit(
        args,
        f"ok: {len(program.steps)} steps, {len(phases)} phases, acyclic={report.acyclic}",
        {
            "valid": True,
            "steps": list(program.step_ids()),
            "phases": [sorted(p) for p in phases],
            "warnings": list(program.warnings),
        },
    )
    return EXIT_OK


def cmd_run(args) -> int:
    file_config = _load_config_file(args.config)
    program = _read_program(args.program)
    providers = discover_providers(_provider_config(args, file_config))
    model = args.model or file_config.get("model") or "default"
    orch = Orchestrator(
        program, providers, args.out, model, config=OrchestratorConfig()
    )
    state = orch.run()
    payload = {
        "run_id": state.run_id,
        "status": state.status,
        "steps": {sid: rec.state for sid, rec in state.steps.items()},
    }
    if state.consensus is not None:
        payload["consensus_token"] = state.consensus.to_json()
    _emit(args, f"run {state.run_id}: {state.status}", payload)
    return EXIT_OK if state.status in ("completed", "paused") else EXIT_RUNTIME


def cmd_status(args) -> int:
    report = query_status(args.out)
    payload = {"status": report.status}
    if report.pause is not None:
        payload["pause"] = report.pause.to_json()
    human = f"status: {report.status}"
    if report.pause is not None:
        human += (
            f" (step {report.pause.step_id}, iteration {report.pause.iteration},"
            f" provider {report.pause.provider})"
        )
    _emit(args, human, payload)
    return EXIT_OK


def cmd_resume(args) -> int:
    file_config = _load_config_file(args.config)
    providers = discover_providers(_provider_config(args, file_config))
    state = resume_run(args.out, providers, model_override=args.model)
    _emit(
        args,
        f"run {state.run_id}: {state.status}",
        {"run_id": state.run_id, "status": state.status},
    )
    return EXIT_OK if state.status in ("completed", "paused") else EXIT_RUNTIME


def cmd_fork(args) -> int:
    parent = Session(os.path.join(args.out, "events.jsonl"))
    os.makedirs(args.to, exist_ok=True)
    child = parent.fork(args.at, os.path.join(args.to, "events.jsonl"))
    _emit(
        args,
        f"forked session {child.session_id} at event {args.at}",
        {"session_id": child.session_id, "at": args.at, "to": args.to},
    )
    return EXIT_OK


def cmd_replay_check(args) -> int:
    events_a, _ = load_events(os.path.join(args.a, "events.jsonl"))
    events_b, _ = load_events(os.path.join(args.b, "events.jsonl"))
    sig_a = replay_signature(events_a)
    sig_b = replay_signature(events_b)
    equal = sig_a == sig_b
    _emit(
        args,
        "replay-equivalent" if equal else "replay signatures differ",
        {"equal": equal, "events_a": len(sig_a), "events_b": len(sig_b)},
    )
    return EXIT_OK if equal else EXIT_RUNTIME


def cmd_verify_token(args) -> int:
    pool = generate_pool(args.pool)
    try:
        factors = factorize_token(int(args.token), pool)
    except ForeignFactorError as exc:
        _emit(args, f"foreign factor: residue {exc.residue}", {"error": str(exc)})
        return EXIT_VALIDATION
    _emit(
        args,
        "contributors: " + ", ".join(f"{p}^{k}" for p, k in sorted(factors.items())),
        {"factorization": {str(p): k for p, k in sorted(factors.items())}},
    )
    return EXIT_OK


def cmd_meta(args) -> int:
    file_config = _load_config_file(args.config)
    seed = _read_program(args.program)
    providers = discover_providers(_provider_config(args, file_config))
    model = args.model or file_config.get("model") or "default"

    def runner(program, generation):
        gen_dir = os.path.join(args.out, f"gen{generation}")
        orch = Orchestrator(
            program, providers, gen_dir, model, config=OrchestratorConfig()
        )
        return meta.report_from_run(orch.run())

    lineage = meta.run_generations(seed, args.generations, runner, args.out)
    _emit(
        args,
        "\n".join(
            f"generation v{g.version}: overall {g.score:.4f}" for g in lineage
        ),
        {
            "generations": [
                {"version": g.version, "overall_score": g.score} for g in lineage
            ]
        },
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="primeflow")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse a program and report the DAG")
    p.add_argument("program")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute a program")
    p.add_argument("program")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--provider", default=None, help="pin a single provider")
    p.add_argument("--script", default=None, help="scripted-provider JSON file")
    p.add_argument("--config", default=None, help="JSON/YAML run configuration")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("status", help="query run status (works without a live process)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("resume", help="resume a paused run")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None, help="optional model override")
    p.add_argument("--provider", default=None)
    p.add_argument("--script", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("fork", help="fork an event stream at an event id")
    p.add_argument("--out", required=True)
    p.add_argument("--at", required=True, help="event id")
    p.add_argument("--to", required=True, help="destination directory")
    p.set_defaults(func=cmd_fork)

    p = sub.add_parser("replay-check", help="compare two runs' replay signatures")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_replay_check)

    p = sub.add_parser("verify-token", help="factorize a consensus token")
    p.add_argument("token")
    p.add_argument("--pool", type=int, default=1000, help="prime sieve limit")
    p.set_defaults(func=cmd_verify_token)

    p = sub.add_parser("meta", help="run meta-optimization generations")
    p.add_argument("program")
    p.add_argument("--generations", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--provider", default=None)
    p.add_argument("--script", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_meta)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ParseError, ValidationError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PrimeflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
