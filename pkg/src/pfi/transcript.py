"""Session event stream, transcript serialization, and the flow audit scan.

One session produces one gap-free event stream. The same stream backs three
consumers: the benchmark harness (scoring), the gateway (live long-polling),
and the post-hoc audit that proves no registered untrusted raw value reached
a privileged sink without an approved alert covering it.

Sanitization contract for event payloads: registered untrusted raw values
may appear only (a) inside ``alert`` payloads — the approver must see them —
and (b) in ``executed_args`` / delivered ``final_answer`` text after an
approval, which is exactly what :func:`find_uncovered_flows` audits.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable

EVENT_KINDS = (
    "step",
    "plugin_call",
    "plugin_result",
    "trust_decision",
    "spawn_untrusted",
    "untrusted_result",
    "alert",
    "decision",
    "final_answer",
    "error",
)

TERMINAL_KINDS = ("final_answer", "error")


class TranscriptError(ValueError):
    pass


@dataclass(frozen=True)
class SessionEvent:
    seq: int
    kind: str
    payload: dict
    session_id: str

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "payload": self.payload,
            "session_id": self.session_id,
        }


class EventLog:
    """Append-only, thread-safe event sequence with long-poll reads."""

    def __init__(self, session_id: str):
        self.session_id = session_id
        self._events: list[SessionEvent] = []
        self._cond = threading.Condition()
        self._finished = False

    def emit(self, kind: str, payload: dict) -> SessionEvent:
        if kind not in EVENT_KINDS:
            raise TranscriptError(f"unknown event kind {kind!r}")
        json.dumps(payload)  # payloads must be JSON-serializable now, not at read time
        with self._cond:
            if self._finished:
                raise TranscriptError("event log is closed")
            event = SessionEvent(len(self._events), kind, payload, self.session_id)
            self._events.append(event)
            if kind in TERMINAL_KINDS:
                self._finished = True
            self._cond.notify_all()
            return event

    @property
    def finished(self) -> bool:
        with self._cond:
            return self._finished

    def events_after(self, after_seq: int, wait: float = 0.0) -> list[SessionEvent]:
        """Events with seq > after_seq; blocks up to ``wait`` seconds if empty."""
        deadline = time.monotonic() + wait
        with self._cond:
            while True:
                newer = self._events[after_seq + 1 :]
                if newer or self._finished:
                    return list(newer)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._cond.wait(remaining)

    def snapshot(self) -> list[SessionEvent]:
        with self._cond:
            return list(self._events)


class CountingClock:
    """Deterministic timestamps for reproducible transcripts."""

    def __init__(self, start: int = 0):
        self._tick = start

    def now(self) -> str:
        self._tick += 1
        return f"1970-01-01T00:00:00.{self._tick:06d}Z"


class SystemClock:
    def now(self) -> str:
        import datetime

        return datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class Transcript:
    """Everything the harness needs to score and audit one finished session."""

    session_id: str
    events: list[dict] = field(default_factory=list)
    journal: list[dict] = field(default_factory=list)
    proxy_table: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "events": self.events,
            "journal": self.journal,
            "proxy_table": self.proxy_table,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "Transcript":
        return cls(
            session_id=doc["session_id"],
            events=list(doc.get("events", [])),
            journal=list(doc.get("journal", [])),
            proxy_table=list(doc.get("proxy_table", [])),
        )

    def events_of_kind(self, *kinds: str) -> list[dict]:
        return [e for e in self.events if e["kind"] in kinds]

    def final_answer(self) -> str | None:
        for event in self.events:
            if event["kind"] == "final_answer":
                return event["payload"].get("text")
        return None

    def alerts(self) -> list[dict]:
        return [e["payload"] for e in self.events_of_kind("alert")]

    def decisions(self) -> dict[str, str]:
        out = {}
        for event in self.events_of_kind("decision"):
            out[event["payload"]["alert_id"]] = event["payload"]["decision"]
        return out


def sink_label(sink: dict) -> str:
    """Human-readable sink descriptor, shared by CLI and alert payloads."""
    kind = sink.get("kind")
    if kind == "plugin":
        paths = ",".join(sink.get("paths", []))
        return f"{sink['plugin']}.{paths}" if paths else sink["plugin"]
    if kind == "final_answer":
        return "final_answer"
    if kind == "cond_prompt":
        return "cond_prompt"
    if kind == "context":
        return f"trusted_context.{sink.get('path', '')}"
    return str(kind)


@dataclass(frozen=True)
class FlowViolation:
    seq: int
    sink: str
    raw: str

    def describe(self) -> str:
        return f"event {self.seq}: raw untrusted value {self.raw!r} reached {self.sink}"


def find_uncovered_flows(transcript: Transcript) -> list[FlowViolation]:
    """Audit: every registered untrusted raw at a privileged sink must be
    preceded by an approved alert covering that raw at that sink.

    Returns violations (empty list = the no-false-negative property holds).
    """
    raws = [r["raw"] for r in transcript.proxy_table if r["raw"]]
    if not raws:
        return []

    decisions = transcript.decisions()

    def approved_alert_covers(seq: int, sink_kind: str, plugin: str | None, raw: str) -> bool:
        for event in transcript.events:
            if event["seq"] >= seq or event["kind"] != "alert":
                continue
            alert = event["payload"]
            if decisions.get(alert["id"]) != "approved":
                continue
            sink = alert["sink"]
            if sink.get("kind") != sink_kind:
                continue
            if sink_kind == "plugin" and sink.get("plugin") != plugin:
                continue
            if any(source["raw"] == raw for source in alert["sources"]):
                return True
        return False

    violations: list[FlowViolation] = []
    for event in transcript.events:
        if event["kind"] == "plugin_result":
            payload = event["payload"]
            if not payload.get("privileged"):
                continue
            executed = payload.get("executed_args") or {}
            haystacks = [v for v in executed.values() if isinstance(v, str)]
            for raw in raws:
                if any(raw in h for h in haystacks):
                    if not approved_alert_covers(event["seq"], "plugin", payload["name"], raw):
                        violations.append(
                            FlowViolation(event["seq"], sink_label(
                                {"kind": "plugin", "plugin": payload["name"], "paths": []}
                            ), raw)
                        )
        elif event["kind"] == "final_answer":
            text = event["payload"].get("text", "")
            for raw in raws:
                if raw in text and not approved_alert_covers(
                    event["seq"], "final_answer", None, raw
                ):
                    violations.append(FlowViolation(event["seq"], "final_answer", raw))
    return violations


def validate_event_stream(events: Iterable[dict]) -> None:
    """Schema check shared by harness and gateway tests."""
    expected = 0
    finished = False
    for event in events:
        if event["kind"] not in EVENT_KINDS:
            raise TranscriptError(f"unknown event kind {event['kind']!r}")
        if event["seq"] != expected:
            raise TranscriptError(f"sequence gap: expected {expected}, got {event['seq']}")
        if finished:
            raise TranscriptError("events after terminal event")
        if event["kind"] in TERMINAL_KINDS:
            finished = True
        expected += 1
