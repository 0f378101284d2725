"""Unsafe-flow detection and human-approval mediation.

Three flow classes are guarded:

* explicit data — a proxy token reaching a privileged sink (privileged
  plugin argument or the final answer);
* explicit control — a prompt-typed value produced by the untrusted agent,
  withheld from the trusted context until approved;
* implicit — control flow conditioned on untrusted values, expressed only
  through the ``cond_prompt`` built-in and its sandboxed expression.

Denials and evaluation errors are fail-closed: the sink never executes and
the caller gets exactly one permission-error message to append.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .condlang import (
    CondError,
    analyze_condition_use,
    clamp_index,
    eval_cond_code,
    parse_condition_value,
)
from .dataplane import ProxyTable, scan_proxies
from .llm import ToolCall

FLOW_TYPES = ("explicit_data", "explicit_control", "implicit")

APPROVED = "approved"
DENIED = "denied"
PENDING = "pending"


class FlowGuardError(Exception):
    """Corrupted state (e.g. unresolvable proxy at a sink)."""


@dataclass(frozen=True)
class AlertSource:
    raw: str
    atoms: frozenset[str]

    def to_dict(self) -> dict:
        return {"raw": self.raw, "atoms": sorted(self.atoms)}


@dataclass
class FlowAlert:
    id: str
    flow_type: str
    sink: dict
    sources: list[AlertSource]
    created_at: str
    advisory: str | None = None
    status: str = PENDING

    def __post_init__(self):
        if self.flow_type not in FLOW_TYPES:
            raise ValueError(f"unknown flow type {self.flow_type!r}")
        if not self.sources:
            raise ValueError("alert must carry at least one source")

    def resolve(self, decision: str) -> None:
        if decision not in (APPROVED, DENIED):
            raise ValueError(f"invalid decision {decision!r}")
        if self.status != PENDING:
            raise FlowGuardError(f"alert {self.id} already {self.status}")
        self.status = decision

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "flow_type": self.flow_type,
            "sink": self.sink,
            "sources": [s.to_dict() for s in self.sources],
            "advisory": self.advisory,
            "status": self.status,
            "created_at": self.created_at,
        }


# --- approval brokers ---------------------------------------------------------


class StaticBroker:
    """auto_approve / auto_deny."""

    def __init__(self, decision: str):
        if decision not in (APPROVED, DENIED):
            raise ValueError(decision)
        self.decision = decision

    def decide(self, alert: FlowAlert) -> str:
        return self.decision


class ScriptedBroker:
    """Per-flow-type decisions, fail-closed default."""

    def __init__(self, by_flow_type: dict[str, str], default: str = DENIED):
        for value in list(by_flow_type.values()) + [default]:
            if value not in (APPROVED, DENIED):
                raise ValueError(value)
        self.by_flow_type = dict(by_flow_type)
        self.default = default

    def decide(self, alert: FlowAlert) -> str:
        return self.by_flow_type.get(alert.flow_type, self.default)


class InteractiveBroker:
    """Blocks the session thread until a decision arrives from another
    thread (gateway or CLI), or the timeout elapses — then denies."""

    def __init__(self, timeout: float = 120.0):
        self.timeout = timeout
        self._cond = threading.Condition()
        self._pending: dict[str, Optional[str]] = {}

    def decide(self, alert: FlowAlert) -> str:
        with self._cond:
            self._pending[alert.id] = None
            deadline = time.monotonic() + self.timeout
            while self._pending[alert.id] is None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    del self._pending[alert.id]
                    return DENIED  # fail closed on timeout
                self._cond.wait(remaining)
            return self._pending.pop(alert.id)

    def deliver(self, alert_id: str, decision: str) -> bool:
        """Hand a decision to the blocked session. False if nothing waits."""
        if decision not in (APPROVED, DENIED):
            raise ValueError(decision)
        with self._cond:
            if self._pending.get(alert_id, "absent") is not None:
                return False
            self._pending[alert_id] = decision
            self._cond.notify_all()
            return True

    def waiting_ids(self) -> list[str]:
        with self._cond:
            return [k for k, v in self._pending.items() if v is None]


def request_approval(broker, alert: FlowAlert) -> str:
    """Resolve a pending alert through the broker, exactly once."""
    if alert.status != PENDING:
        raise FlowGuardError(f"alert {alert.id} is not pending")
    decision = broker.decide(alert)
    alert.resolve(decision)
    return decision


# --- the guard ----------------------------------------------------------------


@dataclass(frozen=True)
class CondPromptCall:
    condition: list[str]
    prompt: list[str]
    code: str


def parse_cond_prompt_call(args: dict, table: ProxyTable) -> CondPromptCall:
    condition = _parse_list(args.get("condition", "[]"))
    prompts = _parse_list(args.get("prompt", "[]"))
    code = args.get("code", "")
    if not prompts:
        raise ValueError("cond_prompt needs a non-empty prompt list")
    if not condition:
        raise ValueError("cond_prompt needs at least one condition proxy")
    for token in condition:
        table.resolve(token)  # unresolvable id = corrupted state, raised here
    return CondPromptCall(condition, prompts, code)


def _parse_list(value) -> list[str]:
    if isinstance(value, list):
        items = value
    else:
        text = str(value).strip()
        if text.startswith("["):
            try:
                items = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ValueError(f"bad list: {exc}") from None
        else:
            items = [part for part in text.replace(",", " ").split() if part]
    if not all(isinstance(item, str) for item in items):
        raise ValueError("list items must be strings")
    return list(items)


PERMISSION_ERROR = "permission error: the requested data flow was denied"


class FlowGuard:
    """Per-session alert factory wired to a broker and an event sink."""

    def __init__(
        self,
        table: ProxyTable,
        registry,
        broker,
        emit: Callable[[str, dict], object],
        clock,
    ):
        self.table = table
        self.registry = registry
        self.broker = broker
        self.emit = emit
        self.clock = clock
        self.alerts: list[FlowAlert] = []
        self._next_id = 0

    def _new_alert(
        self, flow_type: str, sink: dict, sources: list[AlertSource], advisory=None
    ) -> FlowAlert:
        alert = FlowAlert(
            id=f"alert-{self._next_id}",
            flow_type=flow_type,
            sink=sink,
            sources=sources,
            created_at=self.clock.now(),
            advisory=advisory,
        )
        self._next_id += 1
        self.alerts.append(alert)
        return alert

    def _sources_for_tokens(self, tokens: Sequence[str]) -> list[AlertSource]:
        sources = []
        seen: set[str] = set()
        for token in tokens:
            record = self.table.resolve(token)
            if record.id in seen:
                continue
            seen.add(record.id)
            sources.append(AlertSource(record.raw, record.source))
        return sources

    def check_explicit_data_call(self, call: ToolCall) -> FlowAlert | None:
        """One alert per privileged call that uses any proxy in its args."""
        descriptor = self.registry.get(call.name)
        if not descriptor.privileged:
            return None  # unprivileged sink: silent substitution
        paths, tokens = [], []
        for key in sorted(call.args):
            value = call.args[key]
            if not isinstance(value, str):
                continue
            found = scan_proxies(value)
            if found:
                paths.append(key)
                tokens.extend(found)
        if not tokens:
            return None
        sink = {"kind": "plugin", "plugin": call.name, "paths": paths}
        return self._new_alert("explicit_data", sink, self._sources_for_tokens(tokens))

    def check_explicit_data_answer(self, text: str) -> FlowAlert | None:
        tokens = scan_proxies(text)
        if not tokens:
            return None
        sink = {"kind": "final_answer"}
        return self._new_alert("explicit_data", sink, self._sources_for_tokens(tokens))

    def explicit_control_alert(
        self, key_path: str, raw: str, propagated: frozenset[str]
    ) -> FlowAlert:
        """Prompt-typed leaf: raw instruction withheld until approved."""
        sink = {"kind": "context", "path": key_path}
        return self._new_alert(
            "explicit_control", sink, [AlertSource(raw, propagated)]
        )

    def raise_and_decide(self, alert: FlowAlert) -> str:
        """Emit the alert, block for the decision, emit the decision."""
        self.emit("alert", alert.to_dict())
        decision = request_approval(self.broker, alert)
        self.emit("decision", {"alert_id": alert.id, "decision": decision})
        return decision

    def run_cond_prompt(self, args: dict) -> tuple[str | None, str | None]:
        """Execute the cond_prompt built-in. Returns (prompt, error): exactly
        one is set. Denial and evaluation failure both land on the error side
        — a broken conditional never silently picks a default branch."""
        try:
            call = parse_cond_prompt_call(args, self.table)
        except ValueError as exc:
            return None, f"cond_prompt error: {exc}"
        try:
            advisory = analyze_condition_use(call.code, call.condition, call.prompt).value
        except CondError:
            advisory = None  # unparseable code: evaluation below will fail too
        alert = self._new_alert(
            "implicit",
            {"kind": "cond_prompt"},
            self._sources_for_tokens(call.condition),
            advisory=advisory,
        )
        decision = self.raise_and_decide(alert)
        if decision != APPROVED:
            return None, PERMISSION_ERROR
        bindings = {
            f"c{i}": parse_condition_value(self.table.resolve(token).raw)
            for i, token in enumerate(call.condition)
        }
        try:
            index = eval_cond_code(call.code, bindings)
        except CondError as exc:
            return None, f"cond_prompt evaluation failed: {exc}"
        return call.prompt[clamp_index(index, len(call.prompt))], None
