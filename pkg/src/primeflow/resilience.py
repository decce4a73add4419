"""Pause/resume protocol: durable pause records, restart-safe status
queries, and a completed-step loader that rejects poisoned outputs.

A rate-limit signal unwinds the orchestrator into a `paused` run status
backed by pause.json in the output directory, so the state survives
process restarts. Resume reconstructs the program from the on-disk copy,
admits only substantive non-error step files, and re-executes the paused
step from its paused iteration using the recorded model unless an
explicit override is given.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .errors import PrimeflowError, UnresumableError

DEFAULT_MIN_SUBSTANCE = 200

# Error-shape patterns for the completed-step loader: rate-limit markers,
# max-turn exhaustion, and CLI error wrappers. Deployments extend these
# alongside the provider signal patterns.
DEFAULT_ERROR_PATTERNS = (
    r"rate.?limit(?:ed|\s+(?:reached|exceeded))",
    r"quota\s+exceeded",
    r"usage\s+limit\s+reached",
    r"max(?:imum)?\s+turns?\s+(?:reached|exceeded)",
    r"^\s*(?:error|api error|fatal)\s*[:\-]",
    r"too\s+many\s+requests",
)

PAUSE_FILE = "pause.json"
META_FILE = "run_meta.json"
REPORT_FILE = "report.json"


def now_rfc3339() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class PauseRecord:
    step_id: str
    iteration: int
    provider: str
    reset_at: str | None
    paused_at: str
    snippet: str

    def to_json(self) -> dict:
        return {
            "step_id": self.step_id,
            "iteration": self.iteration,
            "provider": self.provider,
            "reset_at": self.reset_at,
            "paused_at": self.paused_at,
            "snippet": self.snippet,
        }

    @classmethod
    def from_json(cls, data: dict) -> "PauseRecord":
        return cls(
            step_id=data["step_id"],
            iteration=int(data["iteration"]),
            provider=data.get("provider", ""),
            reset_at=data.get("reset_at"),
            paused_at=data.get("paused_at", ""),
            snippet=data.get("snippet", ""),
        )


@dataclass
class ResumeInfo:
    """Everything an orchestrator needs to continue a prior run."""

    completed: dict[str, str] = field(default_factory=dict)  # step id -> output
    depths: dict[str, int] = field(default_factory=dict)  # step id -> converged depth
    scores: dict[str, float] = field(default_factory=dict)
    pause: PauseRecord | None = None
    run_id: str | None = None
    rejected: list[tuple[str, str, str]] = field(default_factory=list)


@dataclass(frozen=True)
class StatusReport:
    status: str  # running | paused | completed | error | unknown
    pause: PauseRecord | None = None
    detail: dict = field(default_factory=dict)


def write_json(path: str, data: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def write_pause_record(output_dir: str, record: PauseRecord) -> None:
    # The pause must be durable or the run is not safely paused; any
    # failure here propagates and fails the run.
    write_json(os.path.join(output_dir, PAUSE_FILE), record.to_json())


def read_pause_record(output_dir: str) -> PauseRecord | None:
    path = os.path.join(output_dir, PAUSE_FILE)
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return PauseRecord.from_json(json.load(fh))


def clear_pause_record(output_dir: str) -> None:
    path = os.path.join(output_dir, PAUSE_FILE)
    if os.path.exists(path):
        os.remove(path)


def write_run_meta(output_dir: str, run_id: str, model: str, program_version: int) -> None:
    write_json(
        os.path.join(output_dir, META_FILE),
        {
            "run_id": run_id,
            "model": model,
            "program_version": program_version,
            "launched_at": now_rfc3339(),
        },
    )


def read_run_meta(output_dir: str) -> dict | None:
    path = os.path.join(output_dir, META_FILE)
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def query_status(output_dir: str, live_runs: dict | None = None) -> StatusReport:
    """Report a run's status, preferring live in-memory state but falling
    back to on-disk records so queries survive process restarts."""
    if live_runs:
        state = live_runs.get(output_dir)
        if state is not None:
            return StatusReport(
                status=state.status, pause=getattr(state, "pause", None)
            )
    pause = read_pause_record(output_dir)
    if pause is not None:
        return StatusReport(status="paused", pause=pause, detail=pause.to_json())
    report_path = os.path.join(output_dir, REPORT_FILE)
    if os.path.exists(report_path):
        with open(report_path, encoding="utf-8") as fh:
            report = json.load(fh)
        return StatusReport(status=report.get("status", "unknown"), detail=report)
    return StatusReport(status="unknown")


def is_poisoned(content: str, patterns=DEFAULT_ERROR_PATTERNS) -> str | None:
    """Name of the matching error-shape pattern, or None if clean."""
    for pattern in patterns:
        if re.search(pattern, content, re.IGNORECASE | re.MULTILINE):
            return pattern
    return None


def load_completed_steps(
    output_dir: str,
    program,
    min_substance: int = DEFAULT_MIN_SUBSTANCE,
    patterns=DEFAULT_ERROR_PATTERNS,
) -> tuple[dict[str, str], list[tuple[str, str, str]]]:
    """Scan the output directory for prior step outputs.

    A file is admitted only if it meets the minimum-substance length and
    matches no error-shape pattern; rejection schedules the step for
    re-execution. Both the sanitized and the legacy filename forms are
    accepted.
    """
    from .orchestrator import legacy_step_filename, step_filename

    accepted: dict[str, str] = {}
    rejected: list[tuple[str, str, str]] = []
    for step in program.steps:
        candidates = [
            step_filename(step.id, step.name),
            legacy_step_filename(step.id, step.name),
        ]
        for filename in candidates:
            path = os.path.join(output_dir, filename)
            if os.sep in filename or not os.path.isfile(path):
                continue
            with open(path, encoding="utf-8") as fh:
                content = fh.read()
            if len(content) < min_substance:
                rejected.append(
                    (step.id, filename, f"below minimum substance ({len(content)} chars)")
                )
            elif (pattern := is_poisoned(content, patterns)) is not None:
                rejected.append((step.id, filename, f"matches error pattern {pattern!r}"))
            else:
                accepted[step.id] = content
            break
    return accepted, rejected


def recover_convergence(output_dir: str) -> tuple[dict[str, int], dict[str, float]]:
    """Converged depths and scores per step, recovered from the event log."""
    from .events import load_events

    path = os.path.join(output_dir, "events.jsonl")
    depths: dict[str, int] = {}
    scores: dict[str, float] = {}
    if not os.path.exists(path):
        return depths, scores
    evts, _ = load_events(path)
    for e in evts:
        if e.type == "agent_converged":
            sid = e.data.get("step_id")
            if sid:
                depths[sid] = int(e.data.get("iteration", 1))
                scores[sid] = float(e.data.get("score", 0.0))
    return depths, scores


def resume_run(
    output_dir: str,
    providers,
    model_override: str | None = None,
    config=None,
    hooks=None,
):
    """Resume a paused run against its original output directory.

    The model is the explicit override when given, else the model
    recorded at launch; resuming never falls back to an engine default.
    """
    from .orchestrator import Orchestrator
    from .program import parse_program

    program_path = os.path.join(output_dir, "program.md")
    if not os.path.isfile(program_path):
        raise UnresumableError(f"no program copy in {output_dir}")
    with open(program_path, encoding="utf-8") as fh:
        program = parse_program(fh.read())
    meta = read_run_meta(output_dir)
    if model_override is not None:
        model = model_override
    elif meta and meta.get("model"):
        model = meta["model"]
    else:
        raise UnresumableError(
            f"{output_dir} has no recorded model; pass an explicit model override"
        )
    pause = read_pause_record(output_dir)
    completed, rejected = load_completed_steps(
        output_dir,
        program,
        min_substance=getattr(config, "min_substance", DEFAULT_MIN_SUBSTANCE),
        patterns=getattr(config, "error_patterns", DEFAULT_ERROR_PATTERNS),
    )
    depths, scores = recover_convergence(output_dir)
    info = ResumeInfo(
        completed=completed,
        depths=depths,
        scores=scores,
        pause=pause,
        run_id=(meta or {}).get("run_id"),
        rejected=rejected,
    )
    orch = Orchestrator(
        program,
        providers,
        output_dir,
        model,
        config=config,
        hooks=hooks,
        resume=info,
    )
    return orch.run()
