"""Append-only event log: ordering, corruption handling, forking, replay."""

import json

import pytest

from primeflow.errors import IntegrityError, NotFoundError
from primeflow.events import (
    EVENT_TYPES,
    Session,
    load_events,
    replay_signature,
    to_audit_trail,
)


@pytest.fixture
def session(tmp_path):
    return Session(str(tmp_path / "events.jsonl"))


class TestAppend:
    def test_line_order_equals_append_order(self, session):
        for i in range(5):
            session.append("step_start", data={"step_id": f"s{i}"})
        events = session.read_all()
        assert [e.data["step_id"] for e in events] == [f"s{i}" for i in range(5)]

    def test_causal_chain_defaults_to_previous(self, session):
        a = session.append("session_start")
        b = session.append("step_start")
        c = session.append("step_end")
        assert b.parent_id == a.id
        assert c.parent_id == b.id
        assert a.parent_id is None

    def test_explicit_parent(self, session):
        a = session.append("session_start")
        session.append("step_start")
        c = session.append("agent_error", parent_id=a.id)
        assert c.parent_id == a.id

    def test_unknown_type_rejected(self, session):
        with pytest.raises(ValueError, match="unknown event type"):
            session.append("made_up_event")

    def test_extension_namespace_allowed(self, session):
        event = session.append("x_custom_marker", data={"k": 1})
        assert event.type == "x_custom_marker"

    def test_named_type_table_size(self):
        assert len(EVENT_TYPES) == 24

    def test_reopened_session_continues_chain(self, tmp_path):
        path = str(tmp_path / "log.jsonl")
        first = Session(path)
        last = first.append("session_start")
        second = Session(path)
        appended = second.append("session_end")
        assert appended.parent_id == last.id


class TestCorruption:
    def test_torn_trailing_line_skipped_with_warning(self, session):
        session.append("session_start")
        session.append("step_start")
        with open(session.path, "a") as fh:
            fh.write('{"id": "torn", "ty')
        events, warnings = load_events(session.path)
        assert len(events) == 2
        assert len(warnings) == 1
        assert "torn" in warnings[0] or "skipped" in warnings[0]

    def test_mid_file_corruption_is_integrity_error(self, session):
        session.append("session_start")
        session.append("step_start")
        lines = open(session.path).read().splitlines()
        lines[0] = '{"broken":'
        with open(session.path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        with pytest.raises(IntegrityError) as exc:
            load_events(session.path)
        assert exc.value.line == 1

    def test_unknown_types_on_disk_preserved(self, session):
        session.append("session_start")
        record = {
            "id": "future",
            "parent_id": None,
            "type": "hologram_sync",
            "timestamp": "",
            "data": {},
            "meta": None,
        }
        with open(session.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        events, warnings = load_events(session.path)
        assert warnings == []
        assert events[-1].type == "hologram_sync"


class TestFork:
    def test_fork_shares_exact_byte_prefix(self, session, tmp_path):
        ids = [session.append("step_start", data={"n": i}).id for i in range(6)]
        child_path = str(tmp_path / "fork" / "events.jsonl")
        session.fork(ids[2], child_path)
        parent_raw = open(session.path, "rb").read()
        child_raw = open(child_path, "rb").read()
        # Child = parent prefix through event 3, then its own fork marker.
        prefix_len = len(b"".join(parent_raw.split(b"\n")[:3])) + 3
        assert child_raw[:prefix_len] == parent_raw[:prefix_len]
        child_events, _ = load_events(child_path)
        assert [e.id for e in child_events[:3]] == ids[:3]

    def test_fork_appends_marker(self, session, tmp_path):
        a = session.append("session_start")
        child = session.fork(a.id, str(tmp_path / "child.jsonl"))
        events = child.read_all()
        assert events[-1].type == "session_fork"
        assert events[-1].data["fork_parent_event"] == a.id
        assert events[-1].data["fork_parent_session"] == session.session_id
        assert events[-1].parent_id == a.id

    def test_fork_never_mutates_parent(self, session, tmp_path):
        a = session.append("session_start")
        before = open(session.path, "rb").read()
        session.fork(a.id, str(tmp_path / "child.jsonl"))
        assert open(session.path, "rb").read() == before

    def test_divergence_after_fork(self, session, tmp_path):
        a = session.append("session_start")
        child = session.fork(a.id, str(tmp_path / "child.jsonl"))
        session.append("step_start", data={"branch": "parent"})
        child.append("step_start", data={"branch": "child"})
        parent_events = session.read_all()
        child_events = child.read_all()
        assert parent_events[-1].data == {"branch": "parent"}
        assert child_events[-1].data == {"branch": "child"}

    def test_fork_unknown_event(self, session, tmp_path):
        session.append("session_start")
        with pytest.raises(NotFoundError):
            session.fork("nope", str(tmp_path / "child.jsonl"))


class TestAuditTrail:
    def test_filters_to_score_and_convergence_events(self, session):
        session.append("session_start")
        session.append("rubric_score", data={"step_id": "s1", "iteration": 1, "score": 0.6})
        session.append("llm_request", data={"step_id": "s1"})
        session.append("agent_converged", data={"step_id": "s1", "iteration": 2, "score": 0.9})
        session.append("agent_force_accepted", data={"step_id": "s2", "score": 0.5})
        trail = to_audit_trail(session.read_all())
        assert [t["status"] for t in trail] == ["scored", "converged", "force_accepted"]
        assert trail[0] == {"step": "s1", "iteration": 1, "score": 0.6, "status": "scored"}


class TestReplaySignature:
    def test_identical_streams_match(self, tmp_path):
        def build(path):
            s = Session(str(path))
            s.append("session_start", data={"model": "m"})
            s.append("step_start", data={"step_id": "s1"})
            s.append("agent_converged", data={"step_id": "s1", "score": 0.9})
            return s.read_all()

        sig_a = replay_signature(build(tmp_path / "a.jsonl"))
        sig_b = replay_signature(build(tmp_path / "b.jsonl"))
        assert sig_a == sig_b

    def test_volatile_keys_ignored(self, tmp_path):
        def build(path, run_id):
            s = Session(str(path))
            s.append(
                "session_start",
                data={"model": "m", "run_id": run_id, "nested": {"paused_at": run_id}},
            )
            return s.read_all()

        sig_a = replay_signature(build(tmp_path / "a.jsonl", "run-1"))
        sig_b = replay_signature(build(tmp_path / "b.jsonl", "run-2"))
        assert sig_a == sig_b

    def test_semantic_change_detected(self, tmp_path):
        def build(path, score):
            s = Session(str(path))
            s.append("agent_converged", data={"step_id": "s1", "score": score})
            return s.read_all()

        sig_a = replay_signature(build(tmp_path / "a.jsonl", 0.9))
        sig_b = replay_signature(build(tmp_path / "b.jsonl", 0.8))
        assert sig_a != sig_b
