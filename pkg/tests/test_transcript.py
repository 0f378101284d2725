"""Event log behavior, transcript round trips, and the uncovered-flow audit."""

from __future__ import annotations

import threading
import time

import pytest

from pfi.transcript import (
    CountingClock,
    EventLog,
    Transcript,
    TranscriptError,
    find_uncovered_flows,
    sink_label,
    validate_event_stream,
)


class TestEventLog:
    def test_seq_gap_free(self):
        log = EventLog("s1")
        for i in range(5):
            event = log.emit("step", {"n": i})
            assert event.seq == i
        validate_event_stream(e.to_dict() for e in log.snapshot())

    def test_unknown_kind_rejected(self):
        with pytest.raises(TranscriptError, match="kind"):
            EventLog("s1").emit("surprise", {})

    def test_payload_must_be_jsonable(self):
        with pytest.raises(TypeError):
            EventLog("s1").emit("step", {"x": object()})

    def test_terminal_event_closes_log(self):
        log = EventLog("s1")
        log.emit("final_answer", {"text": "done"})
        assert log.finished
        with pytest.raises(TranscriptError, match="closed"):
            log.emit("step", {})

    def test_events_after(self):
        log = EventLog("s1")
        log.emit("step", {})
        log.emit("plugin_call", {})
        assert [e.seq for e in log.events_after(-1)] == [0, 1]
        assert [e.seq for e in log.events_after(0)] == [1]
        assert log.events_after(1) == []

    def test_long_poll_wakes_on_emit(self):
        log = EventLog("s1")

        def emit_soon():
            time.sleep(0.05)
            log.emit("step", {"n": 1})

        thread = threading.Thread(target=emit_soon)
        thread.start()
        events = log.events_after(-1, wait=2.0)
        thread.join()
        assert len(events) == 1

    def test_long_poll_times_out_empty(self):
        log = EventLog("s1")
        start = time.monotonic()
        assert log.events_after(-1, wait=0.05) == []
        assert time.monotonic() - start >= 0.04

    def test_poll_after_finish_returns_immediately(self):
        log = EventLog("s1")
        log.emit("error", {"message": "x"})
        start = time.monotonic()
        assert log.events_after(0, wait=5.0) == []
        assert time.monotonic() - start < 1.0


class TestValidateStream:
    def test_gap_detected(self):
        events = [
            {"seq": 0, "kind": "step", "payload": {}},
            {"seq": 2, "kind": "step", "payload": {}},
        ]
        with pytest.raises(TranscriptError, match="gap"):
            validate_event_stream(events)

    def test_events_after_terminal_detected(self):
        events = [
            {"seq": 0, "kind": "final_answer", "payload": {}},
            {"seq": 1, "kind": "step", "payload": {}},
        ]
        with pytest.raises(TranscriptError, match="terminal"):
            validate_event_stream(events)


def test_counting_clock_is_deterministic():
    a, b = CountingClock(), CountingClock()
    assert [a.now() for _ in range(3)] == [b.now() for _ in range(3)]


def test_transcript_round_trip_and_accessors():
    transcript = Transcript(
        session_id="s1",
        events=[
            {"seq": 0, "kind": "alert", "payload": {"id": "alert-0"}, "session_id": "s1"},
            {
                "seq": 1,
                "kind": "decision",
                "payload": {"alert_id": "alert-0", "decision": "approved"},
                "session_id": "s1",
            },
            {"seq": 2, "kind": "final_answer", "payload": {"text": "ok"}, "session_id": "s1"},
        ],
    )
    again = Transcript.from_dict(transcript.to_dict())
    assert again.to_dict() == transcript.to_dict()
    assert again.final_answer() == "ok"
    assert again.decisions() == {"alert-0": "approved"}
    assert again.alerts() == [{"id": "alert-0"}]


def test_sink_label():
    assert sink_label({"kind": "plugin", "plugin": "send_email", "paths": ["Body"]}) == (
        "send_email.Body"
    )
    assert sink_label({"kind": "final_answer"}) == "final_answer"
    assert sink_label({"kind": "cond_prompt"}) == "cond_prompt"
    assert sink_label({"kind": "context", "path": "instruction"}) == (
        "trusted_context.instruction"
    )


# --- uncovered-flow audit ------------------------------------------------------


def _alert_event(seq, alert_id, sink, raws, session="s1"):
    return {
        "seq": seq,
        "kind": "alert",
        "session_id": session,
        "payload": {
            "id": alert_id,
            "flow_type": "explicit_data",
            "sink": sink,
            "sources": [{"raw": raw, "atoms": ["web:https://evil.example"]} for raw in raws],
            "advisory": None,
            "status": "pending",
        },
    }


def _decision_event(seq, alert_id, decision, session="s1"):
    return {
        "seq": seq,
        "kind": "decision",
        "session_id": session,
        "payload": {"alert_id": alert_id, "decision": decision},
    }


def _exec_event(seq, name, executed_args, privileged=True, session="s1"):
    return {
        "seq": seq,
        "kind": "plugin_result",
        "session_id": session,
        "payload": {
            "name": name,
            "privileged": privileged,
            "executed_args": executed_args,
            "records": [],
        },
    }


PROXIES = [{"id": "#DATA0", "raw": "attacker payload", "atoms": ["web:https://evil.example"]}]


class TestFindUncoveredFlows:
    def test_uncovered_privileged_arg_flagged(self):
        transcript = Transcript(
            "s1",
            events=[_exec_event(0, "send_email", {"Body": "see attacker payload here"})],
            proxy_table=PROXIES,
        )
        violations = find_uncovered_flows(transcript)
        assert len(violations) == 1
        assert violations[0].sink.startswith("send_email")

    def test_approved_alert_covers(self):
        sink = {"kind": "plugin", "plugin": "send_email", "paths": ["Body"]}
        transcript = Transcript(
            "s1",
            events=[
                _alert_event(0, "alert-0", sink, ["attacker payload"]),
                _decision_event(1, "alert-0", "approved"),
                _exec_event(2, "send_email", {"Body": "see attacker payload here"}),
            ],
            proxy_table=PROXIES,
        )
        assert find_uncovered_flows(transcript) == []

    def test_denied_alert_does_not_cover(self):
        sink = {"kind": "plugin", "plugin": "send_email", "paths": ["Body"]}
        transcript = Transcript(
            "s1",
            events=[
                _alert_event(0, "alert-0", sink, ["attacker payload"]),
                _decision_event(1, "alert-0", "denied"),
                _exec_event(2, "send_email", {"Body": "attacker payload"}),
            ],
            proxy_table=PROXIES,
        )
        assert len(find_uncovered_flows(transcript)) == 1

    def test_alert_for_other_plugin_does_not_cover(self):
        sink = {"kind": "plugin", "plugin": "file_read", "paths": ["name"]}
        transcript = Transcript(
            "s1",
            events=[
                _alert_event(0, "alert-0", sink, ["attacker payload"]),
                _decision_event(1, "alert-0", "approved"),
                _exec_event(2, "send_email", {"Body": "attacker payload"}),
            ],
            proxy_table=PROXIES,
        )
        assert len(find_uncovered_flows(transcript)) == 1

    def test_alert_after_execution_does_not_cover(self):
        sink = {"kind": "plugin", "plugin": "send_email", "paths": ["Body"]}
        transcript = Transcript(
            "s1",
            events=[
                _exec_event(0, "send_email", {"Body": "attacker payload"}),
                _alert_event(1, "alert-0", sink, ["attacker payload"]),
                _decision_event(2, "alert-0", "approved"),
            ],
            proxy_table=PROXIES,
        )
        assert len(find_uncovered_flows(transcript)) == 1

    def test_unprivileged_sink_not_audited(self):
        transcript = Transcript(
            "s1",
            events=[_exec_event(0, "web_search", {"query": "attacker payload"}, privileged=False)],
            proxy_table=PROXIES,
        )
        assert find_uncovered_flows(transcript) == []

    def test_final_answer_flagged_and_covered(self):
        uncovered = Transcript(
            "s1",
            events=[
                {
                    "seq": 0,
                    "kind": "final_answer",
                    "session_id": "s1",
                    "payload": {"text": "result: attacker payload"},
                }
            ],
            proxy_table=PROXIES,
        )
        assert len(find_uncovered_flows(uncovered)) == 1
        covered = Transcript(
            "s1",
            events=[
                _alert_event(0, "alert-0", {"kind": "final_answer"}, ["attacker payload"]),
                _decision_event(1, "alert-0", "approved"),
                {
                    "seq": 2,
                    "kind": "final_answer",
                    "session_id": "s1",
                    "payload": {"text": "result: attacker payload"},
                },
            ],
            proxy_table=PROXIES,
        )
        assert find_uncovered_flows(covered) == []

    def test_empty_proxy_table_is_clean(self):
        transcript = Transcript(
            "s1", events=[_exec_event(0, "send_email", {"Body": "whatever"})]
        )
        assert find_uncovered_flows(transcript) == []
