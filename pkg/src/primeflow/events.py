"""Append-only typed event store with causal links, forking, and replay.

Events are one JSON object per line (UTF-8 JSONL). Appends funnel
through a single serialized writer per session and flush before
returning, so total order within a session equals file line order.
Forking copies the parent's physical byte prefix up to the fork point,
then appends a session_fork marker; the child never shares storage with
the parent.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .errors import IntegrityError, NotFoundError, StoreError

# Table of the 24 named event types, grouped by category, plus an open
# "x_" extension namespace; unknown types read from disk are preserved
# verbatim for forward compatibility.
EVENT_TYPES = frozenset(
    {
        "session_start", "session_end", "session_fork",
        "agent_spawn", "agent_score", "agent_converged",
        "agent_force_accepted", "agent_error",
        "program_loaded", "cluster_initialized", "phase_start", "phase_end",
        "step_start", "step_end",
        "llm_request", "llm_response", "llm_error",
        "rubric_score", "metric_score", "hybrid_score", "feedback_generated",
        "meta_generation_start", "meta_generation_end", "program_mutated",
    }
)

EXTENSION_PREFIX = "x_"

AUDIT_EVENT_TYPES = frozenset(
    {"rubric_score", "metric_score", "hybrid_score", "agent_converged", "agent_force_accepted"}
)

# Keys stripped (recursively) from event data before computing replay
# signatures; these vary run-to-run without affecting semantics.
VOLATILE_KEYS = frozenset(
    {
        "timestamp", "paused_at", "launched_at", "wall_time", "elapsed",
        "run_id", "session_id", "output_dir", "path",
    }
)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class Event:
    id: str
    parent_id: str | None
    type: str
    timestamp: str
    data: dict = field(default_factory=dict)
    meta: dict | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "parent_id": self.parent_id,
            "type": self.type,
            "timestamp": self.timestamp,
            "data": self.data,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Event":
        return cls(
            id=data["id"],
            parent_id=data.get("parent_id"),
            type=data["type"],
            timestamp=data.get("timestamp", ""),
            data=data.get("data") or {},
            meta=data.get("meta"),
        )


def load_events(path: str) -> tuple[list[Event], list[str]]:
    """Read a JSONL event log.

    A corrupt trailing partial line (crash artifact) is skipped and
    reported as a warning; corruption anywhere else is an integrity
    error.
    """
    events: list[Event] = []
    warnings: list[str] = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for i, line in enumerate(lines):
        try:
            events.append(Event.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError) as exc:
            if i == len(lines) - 1:
                warnings.append(f"skipped torn trailing line {i + 1}: {exc}")
            else:
                raise IntegrityError(f"corrupt event record: {exc}", line=i + 1) from exc
    return events, warnings


class Session:
    """One append-only event stream backed by a JSONL file."""

    def __init__(
        self,
        path: str,
        session_id: str | None = None,
        fork_parent: tuple[str, str] | None = None,
    ):
        self.path = path
        self.session_id = session_id or uuid.uuid4().hex
        self.fork_parent = fork_parent
        self._lock = threading.Lock()
        self._last_id: str | None = None
        if os.path.exists(path):
            existing, _ = load_events(path)
            if existing:
                self._last_id = existing[-1].id

    def append(
        self,
        type: str,
        data: dict | None = None,
        meta: dict | None = None,
        parent_id: str | None = None,
    ) -> Event:
        if type not in EVENT_TYPES and not type.startswith(EXTENSION_PREFIX):
            raise ValueError(f"unknown event type {type!r}")
        with self._lock:
            event = Event(
                id=uuid.uuid4().hex,
                parent_id=parent_id if parent_id is not None else self._last_id,
                type=type,
                timestamp=_now(),
                data=data or {},
                meta=meta,
            )
            try:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event.to_json(), ensure_ascii=False))
                    fh.write("\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise StoreError(f"event append failed: {exc}") from exc
            self._last_id = event.id
        return event

    def read_all(self) -> list[Event]:
        if not os.path.exists(self.path):
            return []
        events, _ = load_events(self.path)
        return events

    def fork(self, at_event_id: str, to_path: str) -> "Session":
        """New session whose log is the byte-preserved prefix of this one
        up to and including the fork event, plus a session_fork marker.
        """
        with open(self.path, "rb") as fh:
            raw = fh.read()
        offset = None
        pos = 0
        for line in raw.split(b"\n"):
            if not line:
                pos += 1
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                break
            pos += len(line) + 1
            if record.get("id") == at_event_id:
                offset = pos
                break
        if offset is None:
            raise NotFoundError(f"event {at_event_id} not in session {self.session_id}")
        os.makedirs(os.path.dirname(to_path) or ".", exist_ok=True)
        with open(to_path, "wb") as fh:
            fh.write(raw[:offset])
        child = Session(
            to_path, fork_parent=(self.session_id, at_event_id)
        )
        child._last_id = at_event_id
        child.append(
            "session_fork",
            data={
                "fork_parent_session": self.session_id,
                "fork_parent_event": at_event_id,
                "child_session": child.session_id,
            },
        )
        return child


def to_audit_trail(events: list[Event]) -> list[dict]:
    """Project score and convergence events into the legacy audit format."""
    trail = []
    for e in events:
        if e.type not in AUDIT_EVENT_TYPES:
            continue
        data = e.data
        if e.type in ("agent_converged", "agent_force_accepted"):
            status = "converged" if e.type == "agent_converged" else "force_accepted"
        else:
            status = "scored"
        trail.append(
            {
                "step": data.get("step_id", (e.meta or {}).get("step_id")),
                "iteration": data.get("iteration"),
                "score": data.get("score"),
                "status": status,
            }
        )
    return trail


def _strip_volatile(value):
    if isinstance(value, dict):
        return {
            k: _strip_volatile(v) for k, v in sorted(value.items())
            if k not in VOLATILE_KEYS
        }
    if isinstance(value, list):
        return [_strip_volatile(v) for v in value]
    return value


def replay_signature(events: list[Event]) -> list[tuple[str, str, str]]:
    """Project each event to its determinism-relevant triple.

    Two runs are replay-equivalent iff their signatures are equal; ids
    and timestamps are excluded by construction.
    """
    signature = []
    for e in events:
        step_id = e.data.get("step_id") or (e.meta or {}).get("step_id") or ""
        canonical = json.dumps(_strip_volatile(e.data), sort_keys=True)
        digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
        signature.append((e.type, step_id, digest))
    return signature
